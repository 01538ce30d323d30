//! From influence scores to relabeled training sets: rank aggregation,
//! veiled-offense accounting, fix/flip remediation plans, retraining and
//! per-cohort recall.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{Cohort, Example, ExampleId, Label};
use crate::influence::{InfluenceScore, Method};
use crate::model::{train, LabelSource, StudentModel, TrainConfig};

/// How per-probe ranks are combined into one ordering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub method: Method,
    /// Probe id (`None` for training loss) → candidates, most influential first.
    pub per_probe_ranks: BTreeMap<Option<ExampleId>, Vec<ExampleId>>,
    /// Aggregated rank (1-based); the arithmetic mean unless built with [`Aggregation::Min`].
    pub average_rank: BTreeMap<ExampleId, f64>,
    pub sorted_by_average: Vec<ExampleId>,
}

impl RankTable {
    pub fn candidate_count(&self) -> usize {
        self.sorted_by_average.len()
    }

    pub fn probe_count(&self) -> usize {
        self.per_probe_ranks.len()
    }

    /// 1-based rank of every candidate under one probe.
    pub fn ranks_for_probe(&self, probe: Option<ExampleId>) -> Option<HashMap<ExampleId, usize>> {
        self.per_probe_ranks
            .get(&probe)
            .map(|order| order.iter().enumerate().map(|(i, &id)| (id, i + 1)).collect())
    }

    pub fn top_k(&self, k: usize) -> Result<&[ExampleId]> {
        if k > self.sorted_by_average.len() {
            return Err(Error::KOutOfRange { k, candidates: self.sorted_by_average.len() });
        }
        Ok(&self.sorted_by_average[..k])
    }
}

pub fn rank_by_influence(scores: &[InfluenceScore], candidates: &[ExampleId], probes: &[ExampleId]) -> Result<RankTable> {
    rank_by_influence_with(scores, candidates, probes, Aggregation::Mean)
}

/// Ranks candidates per probe by descending score (ties by ascending id) and
/// aggregates. Training-loss scores are ranked under one pseudo-probe.
/// Scores for ids outside `candidates` or `probes` are ignored.
pub fn rank_by_influence_with(
    scores: &[InfluenceScore],
    candidates: &[ExampleId],
    probes: &[ExampleId],
    aggregation: Aggregation,
) -> Result<RankTable> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidates to rank".into()));
    }
    let method = scores.first().map(|s| s.method).unwrap_or(Method::TrackIn);
    if let Some(s) = scores.iter().find(|s| s.method != method) {
        return Err(Error::InvalidInput(format!("mixed methods in one ranking: {} and {}", method, s.method)));
    }
    let probe_keys: Vec<Option<ExampleId>> = if method.uses_probes() {
        if probes.is_empty() {
            return Err(Error::InvalidInput("no probes to rank against".into()));
        }
        let mut p: Vec<_> = probes.iter().copied().map(Some).collect();
        p.sort_unstable();
        p.dedup();
        p
    } else {
        vec![None]
    };
    let mut cands = candidates.to_vec();
    cands.sort_unstable();
    cands.dedup();

    let wanted_probe: HashSet<Option<ExampleId>> = probe_keys.iter().copied().collect();
    let wanted_cand: HashSet<ExampleId> = cands.iter().copied().collect();
    let mut lookup: HashMap<(Option<ExampleId>, ExampleId), f64> = HashMap::with_capacity(cands.len() * probe_keys.len());
    for s in scores {
        if wanted_probe.contains(&s.prb_id) && wanted_cand.contains(&s.trn_id) {
            if lookup.insert((s.prb_id, s.trn_id), s.score).is_some() {
                return Err(Error::InvalidInput(format!("duplicate score for ({}, {:?})", s.trn_id, s.prb_id)));
            }
        }
    }
    let mut missing = Vec::new();
    for &p in &probe_keys {
        for &c in &cands {
            if !lookup.contains_key(&(p, c)) {
                missing.push((c, p));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteScores(missing));
    }

    let mut per_probe_ranks = BTreeMap::new();
    let mut rank_sum: HashMap<ExampleId, f64> = HashMap::with_capacity(cands.len());
    let mut rank_min: HashMap<ExampleId, usize> = HashMap::with_capacity(cands.len());
    for &p in &probe_keys {
        let mut order = cands.clone();
        // ids ascending already, so a stable sort keeps the id tie-break
        order.sort_by(|a, b| lookup[&(p, *b)].total_cmp(&lookup[&(p, *a)]));
        for (i, &id) in order.iter().enumerate() {
            *rank_sum.entry(id).or_default() += (i + 1) as f64;
            let m = rank_min.entry(id).or_insert(usize::MAX);
            *m = (*m).min(i + 1);
        }
        per_probe_ranks.insert(p, order);
    }
    let n_probes = probe_keys.len() as f64;
    let average_rank: BTreeMap<ExampleId, f64> = cands
        .iter()
        .map(|&id| {
            let v = match aggregation {
                Aggregation::Mean => rank_sum[&id] / n_probes,
                Aggregation::Min => rank_min[&id] as f64,
            };
            (id, v)
        })
        .collect();
    let mut sorted_by_average = cands;
    sorted_by_average.sort_by(|a, b| average_rank[a].total_cmp(&average_rank[b]));
    Ok(RankTable { method, per_probe_ranks, average_rank, sorted_by_average })
}

fn cohort_lookup(corpus: &[Example]) -> HashMap<ExampleId, Cohort> {
    corpus.iter().map(|e| (e.id, e.cohort)).collect()
}

/// Number of veiled examples among the top `k` of the aggregated ranking, per k.
pub fn precision_at_k(table: &RankTable, corpus: &[Example], ks: &[usize]) -> Result<Vec<(usize, usize)>> {
    let cohorts = cohort_lookup(corpus);
    ks.iter()
        .map(|&k| {
            let top = table.top_k(k)?;
            let n = top.iter().filter(|id| cohorts.get(id) == Some(&Cohort::Veiled)).count();
            Ok((k, n))
        })
        .collect()
}

/// Expected veiled count in a uniformly random draw of `k` candidates.
pub fn random_baseline(k: usize, veiled_count: usize, candidate_count: usize) -> f64 {
    k as f64 * veiled_count as f64 / candidate_count as f64
}

/// `k` as the given fraction of the candidate pool, rounded to nearest.
pub fn k_for_fraction(fraction: f64, candidate_count: usize) -> usize {
    ((fraction * candidate_count as f64).round() as usize).min(candidate_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RemediationMode {
    /// Correct only genuinely mislabeled examples in the top k.
    Fix,
    /// Invert the label of every example in the top k.
    Flip,
}

impl RemediationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RemediationMode::Fix => "fix",
            RemediationMode::Flip => "flip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    /// Decided by the pipeline: gold lookup for fix, inversion for flip.
    Simulated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDecision {
    pub label: Label,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemediationPlan {
    pub mode: RemediationMode,
    pub k: usize,
    pub method: Option<Method>,
    /// The top-k ids the plan was built over.
    pub selected: Vec<ExampleId>,
    /// id → new observed label.
    pub decisions: BTreeMap<ExampleId, PlanDecision>,
}

impl RemediationPlan {
    pub fn empty() -> Self {
        Self { mode: RemediationMode::Fix, k: 0, method: None, selected: vec![], decisions: BTreeMap::new() }
    }

    /// A plan made only of human decisions, e.g. replayed from a decision log.
    pub fn from_human_decisions(decisions: &BTreeMap<ExampleId, Label>) -> Self {
        Self {
            mode: RemediationMode::Fix,
            k: decisions.len(),
            method: None,
            selected: decisions.keys().copied().collect(),
            decisions: decisions
                .iter()
                .map(|(&id, &label)| (id, PlanDecision { label, provenance: Provenance::Human }))
                .collect(),
        }
    }

    pub fn describe(&self) -> String {
        if self.decisions.is_empty() && self.k == 0 {
            return "none".to_string();
        }
        match self.method {
            Some(m) => format!("{} {} top {}", m, self.mode.as_str(), self.k),
            None => format!("human decisions ({})", self.decisions.len()),
        }
    }
}

/// Builds a fix or flip plan over the top `k` of `table`. Simulated fix
/// decisions come from gold labels; `human` decisions override them and must
/// name ids inside the top k.
pub fn build_plan(
    table: &RankTable,
    k: usize,
    mode: RemediationMode,
    train_set: &[Example],
    human: Option<&BTreeMap<ExampleId, Label>>,
) -> Result<RemediationPlan> {
    let top = table.top_k(k)?;
    let selected: HashSet<ExampleId> = top.iter().copied().collect();
    if let Some(h) = human {
        if let Some(&id) = h.keys().find(|id| !selected.contains(id)) {
            return Err(Error::DecisionOutsideTopK(id));
        }
    }
    let by_id: HashMap<ExampleId, &Example> = train_set.iter().map(|e| (e.id, e)).collect();
    let mut decisions = BTreeMap::new();
    for &id in top {
        let ex = by_id
            .get(&id)
            .ok_or_else(|| Error::InvalidInput(format!("ranked id {id} is not in the training set")))?;
        if let Some(&label) = human.and_then(|h| h.get(&id)) {
            decisions.insert(id, PlanDecision { label, provenance: Provenance::Human });
            continue;
        }
        let label = match mode {
            RemediationMode::Fix if ex.gold_label != ex.observed_label => ex.gold_label,
            RemediationMode::Fix => continue,
            RemediationMode::Flip => ex.observed_label.flipped(),
        };
        decisions.insert(id, PlanDecision { label, provenance: Provenance::Simulated });
    }
    Ok(RemediationPlan { mode, k, method: Some(table.method), selected: top.to_vec(), decisions })
}

/// Copy of `train_set` with observed labels overwritten by the plan.
pub fn apply_plan(train_set: &[Example], plan: &RemediationPlan) -> Result<Vec<Example>> {
    let ids: HashSet<ExampleId> = train_set.iter().map(|e| e.id).collect();
    if let Some(id) = plan.decisions.keys().find(|id| !ids.contains(id)) {
        return Err(Error::InvalidInput(format!("plan references example {id} outside the training split")));
    }
    Ok(train_set
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if let Some(d) = plan.decisions.get(&e.id) {
                e.observed_label = d.label;
            }
            e
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CohortRecall {
    pub correct: usize,
    pub total: usize,
    /// Percentage in [0, 100].
    pub recall: f64,
}

impl CohortRecall {
    fn new(correct: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidInput("empty test cohort".into()));
        }
        Ok(Self { correct, total, recall: 100.0 * correct as f64 / total as f64 })
    }
}

/// Class recall on the veiled-offensive (VO), non-offensive (NO) and
/// overtly-offensive (OO) test cohorts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub plan: String,
    pub veiled_offensive: CohortRecall,
    pub non_offensive: CohortRecall,
    pub overtly_offensive: CohortRecall,
}

impl EvalReport {
    pub fn recalls(&self) -> [f64; 3] {
        [self.veiled_offensive.recall, self.non_offensive.recall, self.overtly_offensive.recall]
    }
}

pub fn evaluate(model: &StudentModel, test: &[Example], name: &str, plan: &str) -> Result<EvalReport> {
    let mut tally: HashMap<Cohort, (usize, usize)> = HashMap::new();
    for e in test {
        let hit = model.predict(&e.features)? == e.gold_label;
        let t = tally.entry(e.cohort).or_default();
        t.0 += hit as usize;
        t.1 += 1;
    }
    let get = |c: Cohort| {
        let (hit, n) = tally.get(&c).copied().unwrap_or_default();
        CohortRecall::new(hit, n)
    };
    Ok(EvalReport {
        model: name.to_string(),
        plan: plan.to_string(),
        veiled_offensive: get(Cohort::Veiled)?,
        non_offensive: get(Cohort::Clean)?,
        overtly_offensive: get(Cohort::Overt)?,
    })
}

/// Applies the plan and retrains from scratch with `cfg`, then evaluates on `test`.
pub fn apply_and_retrain(
    train_set: &[Example],
    test: &[Example],
    plan: &RemediationPlan,
    cfg: &TrainConfig,
) -> Result<(StudentModel, EvalReport)> {
    let relabeled = apply_plan(train_set, plan)?;
    let (model, _) = train(&relabeled, cfg, &LabelSource::Observed)?;
    let report = evaluate(&model, test, &plan.describe(), &plan.describe())?;
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankHistogram {
    pub bins: usize,
    /// cohort → count per bin; bin `b` covers rank percentiles `[b/bins, (b+1)/bins)`.
    pub counts: BTreeMap<Cohort, Vec<usize>>,
    /// cohort → median rank percentile in [0, 100).
    pub median_percentile: BTreeMap<Cohort, f64>,
}

/// Pools every (candidate, probe) rank, converts it to the percentile
/// `100 (rank - 1) / N` and histograms it per cohort.
pub fn rank_distribution(table: &RankTable, corpus: &[Example], bins: usize) -> Result<RankHistogram> {
    if bins < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 bins, got {bins}")));
    }
    let cohorts = cohort_lookup(corpus);
    let n = table.candidate_count();
    let mut counts: BTreeMap<Cohort, Vec<usize>> = BTreeMap::new();
    let mut pcts: BTreeMap<Cohort, Vec<f64>> = BTreeMap::new();
    for order in table.per_probe_ranks.values() {
        for (pos, id) in order.iter().enumerate() {
            let cohort = *cohorts
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("ranked id {id} missing from corpus")))?;
            counts.entry(cohort).or_insert_with(|| vec![0; bins])[pos * bins / n] += 1;
            pcts.entry(cohort).or_default().push(100.0 * pos as f64 / n as f64);
        }
    }
    let median_percentile = pcts.into_iter().map(|(c, v)| (c, median(v))).collect();
    Ok(RankHistogram { bins, counts, median_percentile })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
