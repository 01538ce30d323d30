//! Append-only log of label decisions (`decisions.jsonl`, one JSON record per line).

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{ExampleId, Label};
use crate::surfacing::{PlanDecision, Provenance, RemediationMode, RemediationPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRecord {
    pub run_id: String,
    pub trn_id: ExampleId,
    pub prior_label: Label,
    pub new_label: Label,
    pub decided_by: Provenance,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

pub fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Reads the whole log; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<DecisionRecord>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(vec![]),
        Err(e) => return Err(Error::io(path, e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse("decision log", i + 1, e.to_string())))
        .collect()
}

/// Appends `records` and syncs the file before returning.
pub fn append_log(path: &Path, records: &[DecisionRecord]) -> Result<()> {
    if records.is_empty() {
        return Ok(());
    }
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

/// Latest decision per example; later records win.
pub fn replay(records: &[DecisionRecord]) -> BTreeMap<ExampleId, (Label, Provenance)> {
    records.iter().map(|r| (r.trn_id, (r.new_label, r.decided_by))).collect()
}

/// The plan a replayed log stands for.
pub fn replay_plan(records: &[DecisionRecord]) -> RemediationPlan {
    let latest = replay(records);
    let human: BTreeMap<ExampleId, Label> = latest.iter().map(|(&id, &(label, _))| (id, label)).collect();
    let mut plan = RemediationPlan::from_human_decisions(&human);
    plan.mode = RemediationMode::Fix;
    for (id, (label, provenance)) in latest {
        plan.decisions.insert(id, PlanDecision { label, provenance });
    }
    plan
}
