//! Pipeline configuration: one TOML/JSON document covering every stage, with
//! `VEILSCAN_`-prefixed environment overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::distill::CorpusSpec;
use crate::error::{Error, Result};
use crate::influence::{LissaConfig, Method};
use crate::model::TrainConfig;

pub const ENV_PREFIX: &str = "VEILSCAN_";
/// Separates nested field names in override variables, e.g. `VEILSCAN_TRAIN__EPOCHS`.
pub const ENV_SEPARATOR: &str = "__";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    /// Probes per random subset.
    pub probe_subset: usize,
    pub repeats: usize,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self { probe_subset: 20, repeats: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Overrides the corpus, teacher, training and LiSSA seeds.
    pub seed: u64,
    pub out_dir: PathBuf,
    /// How many of the generated probes to score with (the first `probe_count` by id).
    pub probe_count: usize,
    pub methods: Vec<String>,
    /// Precision@k cut-offs as fractions of the candidate pool.
    pub k_fractions: Vec<f64>,
    /// Extra absolute cut-offs.
    pub ks: Vec<usize>,
    /// Top-k fractions to fix and flip.
    pub remediation_fractions: Vec<f64>,
    pub histogram_bins: usize,
    pub robustness: RobustnessConfig,
    pub corpus: CorpusSpec,
    pub train: TrainConfig,
    pub lissa: LissaConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 77,
            out_dir: PathBuf::from("veilscan-out"),
            probe_count: 100,
            methods: ["trainloss", "embedding", "if_lissa", "trackin"].map(String::from).to_vec(),
            k_fractions: vec![0.05, 0.10, 0.15, 0.20],
            ks: vec![],
            remediation_fractions: vec![0.05, 0.20],
            histogram_bins: 10,
            robustness: RobustnessConfig::default(),
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            lissa: LissaConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Reads a `.toml` or `.json` file; other extensions are tried as TOML.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let parsed = if is_json {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        parsed.map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))
    }

    /// Applies every `VEILSCAN_*` variable from `vars`. Values are parsed as
    /// JSON when possible (numbers, booleans, arrays) and taken as strings otherwise.
    pub fn apply_env<I>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut doc = serde_json::to_value(self)?;
        let mut errs = Vec::new();
        let mut overrides: Vec<(String, String)> =
            vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> =
                key[ENV_PREFIX.len()..].split(ENV_SEPARATOR).map(|p| p.to_ascii_lowercase()).collect();
            match slot(&mut doc, &path) {
                Some(target) => *target = serde_json::from_str(&raw).unwrap_or(Value::String(raw)),
                None => errs.push(format!("{key}: no such configuration field")),
            }
        }
        if !errs.is_empty() {
            return Err(Error::InvalidConfig(errs));
        }
        serde_json::from_value(doc).map_err(|e| Error::InvalidConfig(vec![format!("environment override: {e}")]))
    }

    pub fn apply_process_env(&self) -> Result<Self> {
        self.apply_env(std::env::vars())
    }

    /// Copy with the top-level seed pushed into every component.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.corpus.seed = c.seed;
        c.corpus.teacher.seed = c.seed;
        c.train.seed = c.seed;
        c.lissa.seed = c.seed;
        c
    }

    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.out_dir.as_os_str().is_empty() {
            errs.push("out_dir: must not be empty".to_string());
        }
        if self.probe_count == 0 {
            errs.push("probe_count: must be >= 1".into());
        } else if self.probe_count > self.corpus.probe_count {
            errs.push(format!(
                "probe_count: {} exceeds corpus.probe_count ({})",
                self.probe_count, self.corpus.probe_count
            ));
        }
        if self.methods.is_empty() {
            errs.push("methods: must name at least one method".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            if let Err(e) = m.parse::<Method>() {
                errs.push(format!("methods[{i}]: {e}"));
            }
            if self.methods[..i].contains(m) {
                errs.push(format!("methods[{i}]: duplicate {m:?}"));
            }
        }
        if self.k_fractions.is_empty() && self.ks.is_empty() {
            errs.push("k_fractions: at least one cut-off is required (or set ks)".into());
        }
        for (name, list) in [("k_fractions", &self.k_fractions), ("remediation_fractions", &self.remediation_fractions)] {
            for (i, f) in list.iter().enumerate() {
                if !(*f > 0.0 && *f <= 1.0) {
                    errs.push(format!("{name}[{i}]: {f} must lie in (0, 1]"));
                }
            }
        }
        for (i, k) in self.ks.iter().enumerate() {
            if *k == 0 {
                errs.push(format!("ks[{i}]: must be >= 1"));
            }
        }
        if self.histogram_bins < 2 {
            errs.push("histogram_bins: must be >= 2".into());
        }
        if self.robustness.repeats > 0 {
            if self.robustness.probe_subset == 0 {
                errs.push("robustness.probe_subset: must be >= 1".into());
            } else if self.robustness.probe_subset > self.probe_count {
                errs.push(format!(
                    "robustness.probe_subset: {} exceeds probe_count ({})",
                    self.robustness.probe_subset, self.probe_count
                ));
            }
        }
        errs.extend(self.corpus.validation_errors("corpus."));
        errs.extend(self.train.validation_errors("train."));
        errs.extend(self.lissa.validation_errors("lissa."));
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }

    pub fn parsed_methods(&self) -> Result<Vec<Method>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

fn slot<'a>(doc: &'a mut Value, path: &[String]) -> Option<&'a mut Value> {
    let mut cur = doc;
    for part in path {
        cur = cur.as_object_mut()?.get_mut(part)?;
    }
    Some(cur)
}
