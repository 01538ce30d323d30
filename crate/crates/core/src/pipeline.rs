//! Stage orchestration over an output directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run.json                      resolved configuration
//! corpus/{train,test,probe,general}.tsv, corpus/manifest.json
//! model/student.txt, model/checkpoint-<epoch>.txt, model/distill.json
//! influence/<method>.tsv
//! ranks/<method>.json
//! reports/veiled_found.tsv, reports/rank_histogram_<method>.tsv, reports/robustness.tsv, reports/surfacing.json
//! plans/<method>-<fix|flip>-<k>.json, plans/human.json
//! retrain/gold.txt, retrain/<plan>.txt
//! reports/class_recall.tsv, reports/eval.json
//! decisions.jsonl               append-only human decision log
//! manifests/<stage>.json        config hash, seed, timing and artifacts per stage
//! ```
//!
//! Every stage reads only earlier stages' files, so deleting derived
//! artifacts and re-running reproduces them bit for bit.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::decisions::{self, DecisionRecord};
use crate::distill::{distill_student, generate_corpus, Corpus, CorpusSpec};
use crate::error::{Error, Result};
use crate::example::{Cohort, Example, ExampleId, Label};
use crate::formats::{self, PrecisionRow};
use crate::influence::{InfluenceEngine, InfluenceScore, Method};
use crate::model::{train, Checkpoint, LabelSource, StudentModel};
use crate::surfacing::{
    apply_and_retrain, build_plan, evaluate, k_for_fraction, precision_at_k, random_baseline, rank_by_influence,
    rank_distribution, EvalReport, RankTable, RemediationMode, RemediationPlan,
};

pub const RUN_FILE: &str = "run.json";
pub const DECISION_LOG: &str = "decisions.jsonl";
pub const HUMAN_PLAN: &str = "human";
pub const GOLD_MODEL: &str = "gold";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Distill,
    Score,
    Rank,
    Report,
    Remediate,
    Retrain,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Distill,
        Stage::Score,
        Stage::Rank,
        Stage::Report,
        Stage::Remediate,
        Stage::Retrain,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Distill => "distill",
            Stage::Score => "score",
            Stage::Rank => "rank",
            Stage::Report => "report",
            Stage::Remediate => "remediate",
            Stage::Retrain => "retrain",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub elapsed_ms: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub spec: CorpusSpec,
    pub target_general_mean: f64,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub teacher_agreement: f64,
    pub epochs: usize,
    pub original: EvalReport,
}

/// On-disk form of a [`RankTable`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankFile {
    pub method: Method,
    pub ranking: Vec<RankedCandidate>,
    pub per_probe: Vec<ProbeOrder>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub trn_id: ExampleId,
    pub average_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOrder {
    pub prb_id: Option<ExampleId>,
    /// Candidates, most influential first.
    pub order: Vec<ExampleId>,
}

impl From<&RankTable> for RankFile {
    fn from(t: &RankTable) -> Self {
        RankFile {
            method: t.method,
            ranking: t
                .sorted_by_average
                .iter()
                .map(|&id| RankedCandidate { trn_id: id, average_rank: t.average_rank[&id] })
                .collect(),
            per_probe: t
                .per_probe_ranks
                .iter()
                .map(|(&prb_id, order)| ProbeOrder { prb_id, order: order.clone() })
                .collect(),
        }
    }
}

impl From<RankFile> for RankTable {
    fn from(f: RankFile) -> Self {
        RankTable {
            method: f.method,
            average_rank: f.ranking.iter().map(|r| (r.trn_id, r.average_rank)).collect(),
            sorted_by_average: f.ranking.iter().map(|r| r.trn_id).collect(),
            per_probe_ranks: f.per_probe.into_iter().map(|p| (p.prb_id, p.order)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSurfacing {
    pub method: Method,
    /// Veiled offenses in the top k, one per entry of [`SurfacingSummary::ks`].
    pub counts: Vec<usize>,
    pub median_percentile: BTreeMap<Cohort, f64>,
    /// One row of counts per random probe subset; empty for probe-free methods.
    pub robustness: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfacingSummary {
    pub candidate_count: usize,
    pub veiled_candidates: usize,
    pub probe_count: usize,
    pub ks: Vec<usize>,
    pub random: Vec<f64>,
    pub methods: Vec<MethodSurfacing>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub operation: String,
    /// Plan file stem, if the model was retrained from a plan.
    pub plan: Option<String>,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
struct PlanSpec {
    name: String,
    method: Method,
    mode: RemediationMode,
    k: usize,
}

/// A configured run bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    config: PipelineConfig,
    dir: PathBuf,
    hash: String,
}

impl Run {
    /// Resolves and validates `config`, then records it as the run's configuration.
    pub fn create(config: &PipelineConfig) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let dir = config.out_dir.clone();
        let run = Run { hash: config.hash(), config, dir };
        formats::write_text(&run.path(RUN_FILE), &(serde_json::to_string_pretty(&run.config)? + "\n"))?;
        Ok(run)
    }

    /// Opens an existing run directory, trusting its recorded configuration.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, stage: "generate" });
        }
        let mut config: PipelineConfig = serde_json::from_str(&formats::read_text(&path)?)?;
        config.out_dir = dir.to_path_buf();
        config.validate()?;
        Ok(Run { hash: config.hash(), config, dir: dir.to_path_buf() })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    /// The directory's final component.
    pub fn run_id(&self) -> String {
        self.dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.dir.display().to_string())
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.dir.join(rel)
    }

    fn require(&self, rel: impl AsRef<Path>, producer: Stage) -> Result<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact { path, stage: producer.name() })
        }
    }

    pub fn run_all(&self) -> Result<Vec<StageManifest>> {
        Stage::ALL.into_iter().map(|s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageManifest> {
        let started_unix_ms = decisions::now_millis();
        let t0 = Instant::now();
        log::info!("stage {stage}: start ({})", self.dir.display());
        let artifacts = match stage {
            Stage::Generate => self.generate(),
            Stage::Distill => self.distill(),
            Stage::Score => self.score(),
            Stage::Rank => self.rank(),
            Stage::Report => self.report(),
            Stage::Remediate => self.remediate(),
            Stage::Retrain => self.retrain(),
            Stage::Evaluate => self.evaluate(),
        }
        .map_err(|e| e.in_stage(stage.name()))?;
        let manifest = StageManifest {
            stage,
            run_id: self.run_id(),
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            started_unix_ms,
            elapsed_ms: t0.elapsed().as_millis() as u64,
            artifacts,
        };
        let path = self.path(format!("manifests/{stage}.json"));
        formats::write_text(&path, &(serde_json::to_string_pretty(&manifest)? + "\n")).map_err(|e| e.in_stage(stage.name()))?;
        log::info!("stage {stage}: done in {} ms", manifest.elapsed_ms);
        Ok(manifest)
    }

    fn write(&self, rel: &str, contents: &str, artifacts: &mut Vec<String>) -> Result<()> {
        formats::write_text(&self.path(rel), contents)?;
        artifacts.push(rel.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T, artifacts: &mut Vec<String>) -> Result<()> {
        self.write(rel, &(serde_json::to_string_pretty(value)? + "\n"), artifacts)
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str, producer: Stage) -> Result<T> {
        let path = self.require(rel, producer)?;
        serde_json::from_str(&formats::read_text(&path)?).map_err(Error::from)
    }

    // ---- generate ----

    fn generate(&self) -> Result<Vec<String>> {
        let corpus = generate_corpus(&self.config.corpus)?;
        let mut out = vec![];
        for (name, part) in [("train", &corpus.train), ("test", &corpus.test), ("probe", &corpus.probe), ("general", &corpus.general)] {
            self.write(&format!("corpus/{name}.tsv"), &formats::corpus_to_string(part), &mut out)?;
        }
        let manifest = CorpusManifest {
            seed: self.config.corpus.seed,
            spec: self.config.corpus.clone(),
            target_general_mean: corpus.target_general_mean,
            counts: [
                ("train", corpus.train.len()),
                ("test", corpus.test.len()),
                ("probe", corpus.probe.len()),
                ("general", corpus.general.len()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect(),
        };
        self.write_json("corpus/manifest.json", &manifest, &mut out)?;
        Ok(out)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        let manifest: CorpusManifest = self.read_json("corpus/manifest.json", Stage::Generate)?;
        let part = |name: &str| formats::read_corpus(&self.require(format!("corpus/{name}.tsv"), Stage::Generate)?);
        Ok(Corpus {
            train: part("train")?,
            test: part("test")?,
            probe: part("probe")?,
            general: part("general")?,
            target_general_mean: manifest.target_general_mean,
        })
    }

    /// The probes the run scores with: the first `probe_count` by id.
    pub fn probes<'c>(&self, corpus: &'c Corpus) -> Result<&'c [Example]> {
        corpus.probe.get(..self.config.probe_count).ok_or_else(|| {
            Error::InvalidInput(format!(
                "run wants {} probes but the corpus has {}",
                self.config.probe_count,
                corpus.probe.len()
            ))
        })
    }

    // ---- distill ----

    fn distill(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let outcome = distill_student(&self.config.corpus.teacher, &corpus.train, &corpus.test, &self.config.train)?;
        let mut out = vec![];
        let epochs = outcome.checkpoints.len();
        self.write("model/student.txt", &formats::params_to_string(&outcome.model, epochs), &mut out)?;
        for ck in &outcome.checkpoints {
            self.write(&format!("model/checkpoint-{}.txt", ck.epoch), &formats::params_to_string(&ck.model, ck.epoch), &mut out)?;
        }
        let original = evaluate(&outcome.model, &corpus.test, "Original", "")?;
        log::info!("student agrees with the teacher on {:.1}% of test items", 100.0 * outcome.teacher_agreement);
        self.write_json(
            "model/distill.json",
            &DistillSummary { teacher_agreement: outcome.teacher_agreement, epochs, original },
            &mut out,
        )?;
        Ok(out)
    }

    pub fn load_model(&self) -> Result<(StudentModel, Vec<Checkpoint>)> {
        let (model, epochs) = formats::read_model(&self.require("model/student.txt", Stage::Distill)?)?;
        let checkpoints = (1..=epochs)
            .map(|e| formats::read_checkpoint(&self.require(format!("model/checkpoint-{e}.txt"), Stage::Distill)?))
            .collect::<Result<Vec<_>>>()?;
        Ok((model, checkpoints))
    }

    pub fn distill_summary(&self) -> Result<DistillSummary> {
        self.read_json("model/distill.json", Stage::Distill)
    }

    // ---- score ----

    fn score(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let (model, checkpoints) = self.load_model()?;
        let probes = self.probes(&corpus)?;
        let candidates = corpus.candidates();
        let engine = InfluenceEngine::new(&model, &checkpoints, &corpus.train, self.config.lissa.clone());
        let mut out = vec![];
        for method in self.config.parsed_methods()? {
            let scores = engine.score(method, &candidates, probes)?;
            self.write(&format!("influence/{method}.tsv"), &formats::influence_to_string(&scores), &mut out)?;
        }
        log::info!("{} inverse-HVP solves", engine.solve_count());
        Ok(out)
    }

    pub fn load_scores(&self, method: Method) -> Result<Vec<InfluenceScore>> {
        let path = self.require(format!("influence/{method}.tsv"), Stage::Score)?;
        formats::influence_from_str(&formats::read_text(&path)?)
    }

    // ---- rank ----

    fn rank(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let cand_ids: Vec<ExampleId> = corpus.candidates().iter().map(|e| e.id).collect();
        let probe_ids: Vec<ExampleId> = self.probes(&corpus)?.iter().map(|e| e.id).collect();
        let mut out = vec![];
        for method in self.config.parsed_methods()? {
            let table = rank_by_influence(&self.load_scores(method)?, &cand_ids, &probe_ids)?;
            self.write_json(&format!("ranks/{method}.json"), &RankFile::from(&table), &mut out)?;
        }
        Ok(out)
    }

    pub fn load_ranks(&self, method: Method) -> Result<RankTable> {
        let file: RankFile = self.read_json(&format!("ranks/{method}.json"), Stage::Rank)?;
        Ok(file.into())
    }

    // ---- report ----

    /// Precision cut-offs for a pool of `candidate_count`, ascending and deduplicated.
    pub fn cutoffs(&self, candidate_count: usize) -> Result<Vec<usize>> {
        let mut ks: Vec<usize> = self
            .config
            .k_fractions
            .iter()
            .map(|&f| k_for_fraction(f, candidate_count))
            .chain(self.config.ks.iter().copied())
            .collect();
        ks.sort_unstable();
        ks.dedup();
        if let Some(&k) = ks.last().filter(|&&k| k > candidate_count) {
            return Err(Error::KOutOfRange { k, candidates: candidate_count });
        }
        Ok(ks)
    }

    /// Random probe subsets for the robustness table, each sorted by id.
    pub fn probe_subsets(&self, probe_ids: &[ExampleId]) -> Vec<Vec<ExampleId>> {
        let r = &self.config.robustness;
        (0..r.repeats)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                rng.set_stream(i as u64 + 1);
                let mut ids = probe_ids.to_vec();
                ids.shuffle(&mut rng);
                ids.truncate(r.probe_subset);
                ids.sort_unstable();
                ids
            })
            .collect()
    }

    fn report(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let cand_ids: Vec<ExampleId> = corpus.candidates().iter().map(|e| e.id).collect();
        let probe_ids: Vec<ExampleId> = self.probes(&corpus)?.iter().map(|e| e.id).collect();
        let veiled = corpus.candidates().iter().filter(|e| e.cohort == Cohort::Veiled).count();
        let ks = self.cutoffs(cand_ids.len())?;
        let random: Vec<f64> = ks.iter().map(|&k| random_baseline(k, veiled, cand_ids.len())).collect();
        let subsets = self.probe_subsets(&probe_ids);
        let mut out = vec![];
        let mut rows = vec![PrecisionRow { label: "Random".into(), counts: random.clone() }];
        let mut methods = vec![];
        let mut robust_tsv = String::from("method\tsubset\tprobes");
        for k in &ks {
            robust_tsv.push_str(&format!("\t@{k}"));
        }
        robust_tsv.push('\n');
        for method in self.config.parsed_methods()? {
            let table = self.load_ranks(method)?;
            let counts: Vec<usize> = precision_at_k(&table, &corpus.train, &ks)?.into_iter().map(|(_, c)| c).collect();
            rows.push(PrecisionRow { label: method.display_name().into(), counts: counts.iter().map(|&c| c as f64).collect() });
            let hist = rank_distribution(&table, &corpus.train, self.config.histogram_bins)?;
            self.write(&format!("reports/rank_histogram_{method}.tsv"), &formats::histogram_to_string(&hist), &mut out)?;
            let mut robustness = vec![];
            if method.uses_probes() && !subsets.is_empty() {
                let scores = self.load_scores(method)?;
                for (i, subset) in subsets.iter().enumerate() {
                    let keep: HashSet<ExampleId> = subset.iter().copied().collect();
                    let picked: Vec<InfluenceScore> =
                        scores.iter().filter(|s| s.prb_id.is_some_and(|p| keep.contains(&p))).cloned().collect();
                    let t = rank_by_influence(&picked, &cand_ids, subset)?;
                    let c: Vec<usize> = precision_at_k(&t, &corpus.train, &ks)?.into_iter().map(|(_, c)| c).collect();
                    robust_tsv.push_str(&format!("{method}\t{i}\t{}", subset.len()));
                    for v in &c {
                        robust_tsv.push_str(&format!("\t{v}"));
                    }
                    robust_tsv.push('\n');
                    robustness.push(c);
                }
            }
            methods.push(MethodSurfacing { method, counts, median_percentile: hist.median_percentile, robustness });
        }
        self.write("reports/veiled_found.tsv", &formats::precision_table_to_string(&ks, &rows), &mut out)?;
        self.write("reports/robustness.tsv", &robust_tsv, &mut out)?;
        let summary = SurfacingSummary {
            candidate_count: cand_ids.len(),
            veiled_candidates: veiled,
            probe_count: probe_ids.len(),
            ks,
            random,
            methods,
        };
        self.write_json("reports/surfacing.json", &summary, &mut out)?;
        Ok(out)
    }

    pub fn surfacing_summary(&self) -> Result<SurfacingSummary> {
        self.read_json("reports/surfacing.json", Stage::Report)
    }

    // ---- remediate ----

    fn plan_specs(&self, candidate_count: usize) -> Result<Vec<PlanSpec>> {
        let mut specs = vec![];
        for method in self.config.parsed_methods()? {
            for mode in [RemediationMode::Fix, RemediationMode::Flip] {
                let mut ks: Vec<usize> =
                    self.config.remediation_fractions.iter().map(|&f| k_for_fraction(f, candidate_count)).collect();
                ks.dedup();
                for k in ks {
                    specs.push(PlanSpec { name: format!("{method}-{}-{k}", mode.as_str()), method, mode, k });
                }
            }
        }
        Ok(specs)
    }

    fn remediate(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let mut out = vec![];
        for spec in self.plan_specs(corpus.candidates().len())? {
            let table = self.load_ranks(spec.method)?;
            let plan = build_plan(&table, spec.k, spec.mode, &corpus.train, None)?;
            self.write_json(&format!("plans/{}.json", spec.name), &plan, &mut out)?;
        }
        let log = self.read_decisions()?;
        if !log.is_empty() {
            self.write_json(&format!("plans/{HUMAN_PLAN}.json"), &decisions::replay_plan(&log), &mut out)?;
        }
        Ok(out)
    }

    pub fn load_plan(&self, name: &str) -> Result<RemediationPlan> {
        self.read_json(&format!("plans/{name}.json"), Stage::Remediate)
    }

    // ---- retrain ----

    fn retrain(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let mut out = vec![];
        let (gold, _) = train(&corpus.train, &self.config.train, &LabelSource::Gold)?;
        self.write(&format!("retrain/{GOLD_MODEL}.txt"), &formats::params_to_string(&gold, self.config.train.epochs), &mut out)?;
        let mut names: Vec<String> = self.plan_specs(corpus.candidates().len())?.into_iter().map(|s| s.name).collect();
        if self.path(format!("plans/{HUMAN_PLAN}.json")).exists() {
            names.push(HUMAN_PLAN.to_string());
        }
        for name in names {
            let plan = self.load_plan(&name)?;
            let (model, _) = apply_and_retrain(&corpus.train, &corpus.test, &plan, &self.config.train)?;
            self.write(&format!("retrain/{name}.txt"), &formats::params_to_string(&model, self.config.train.epochs), &mut out)?;
        }
        Ok(out)
    }

    // ---- evaluate ----

    fn evaluate(&self) -> Result<Vec<String>> {
        let corpus = self.load_corpus()?;
        let model_at = |rel: &str, producer: Stage| -> Result<StudentModel> {
            Ok(formats::read_model(&self.require(rel, producer)?)?.0)
        };
        let mut rows = vec![];
        let (student, _) = self.load_model()?;
        rows.push(EvalRow {
            model: "Original".into(),
            operation: String::new(),
            plan: None,
            report: evaluate(&student, &corpus.test, "Original", "")?,
        });
        let specs = self.plan_specs(corpus.candidates().len())?;
        let mut order: Vec<&PlanSpec> = specs.iter().collect();
        // Per method: fixes before flips, smaller k first.
        order.sort_by_key(|s| (self.method_position(s.method), s.mode == RemediationMode::Flip, s.k));
        for spec in order {
            let model = model_at(&format!("retrain/{}.txt", spec.name), Stage::Retrain)?;
            let op = format!("{} top {}", spec.mode.as_str(), spec.k);
            let report = evaluate(&model, &corpus.test, spec.method.display_name(), &op)?;
            rows.push(EvalRow { model: spec.method.display_name().into(), operation: op, plan: Some(spec.name.clone()), report });
        }
        if self.path(format!("plans/{HUMAN_PLAN}.json")).exists() {
            let plan = self.load_plan(HUMAN_PLAN)?;
            let model = model_at(&format!("retrain/{HUMAN_PLAN}.txt"), Stage::Retrain)?;
            let op = format!("{} decisions", plan.decisions.len());
            let report = evaluate(&model, &corpus.test, "Human decisions", &op)?;
            rows.push(EvalRow { model: "Human decisions".into(), operation: op, plan: Some(HUMAN_PLAN.into()), report });
        }
        let gold = model_at(&format!("retrain/{GOLD_MODEL}.txt"), Stage::Retrain)?;
        rows.push(EvalRow {
            model: "Gold".into(),
            operation: String::new(),
            plan: None,
            report: evaluate(&gold, &corpus.test, "Gold", "")?,
        });
        let table: Vec<(String, String, EvalReport)> =
            rows.iter().map(|r| (r.model.clone(), r.operation.clone(), r.report.clone())).collect();
        let mut out = vec![];
        self.write("reports/class_recall.tsv", &formats::recall_table_to_string(&table), &mut out)?;
        self.write_json("reports/eval.json", &rows, &mut out)?;
        Ok(out)
    }

    fn method_position(&self, m: Method) -> usize {
        self.config.methods.iter().position(|s| s.parse::<Method>().ok() == Some(m)).unwrap_or(usize::MAX)
    }

    pub fn eval_rows(&self) -> Result<Vec<EvalRow>> {
        self.read_json("reports/eval.json", Stage::Evaluate)
    }

    // ---- decisions ----

    pub fn decision_log_path(&self) -> PathBuf {
        self.path(DECISION_LOG)
    }

    pub fn read_decisions(&self) -> Result<Vec<DecisionRecord>> {
        decisions::read_log(&self.decision_log_path())
    }

    /// Current observed label of every training example after replaying the log.
    pub fn current_labels(&self, corpus: &Corpus) -> Result<BTreeMap<ExampleId, Label>> {
        let mut labels: BTreeMap<ExampleId, Label> = corpus.train.iter().map(|e| (e.id, e.observed_label)).collect();
        for (id, (label, _)) in decisions::replay(&self.read_decisions()?) {
            labels.insert(id, label);
        }
        Ok(labels)
    }

    /// Retrains on the replayed decision log, writing `plans/human.json`,
    /// `retrain/human.txt` and `reports/human.json`.
    pub fn retrain_from_decisions(&self) -> Result<EvalReport> {
        let corpus = self.load_corpus().map_err(|e| e.in_stage("retrain"))?;
        let plan = decisions::replay_plan(&self.read_decisions()?);
        let mut out = vec![];
        self.write_json(&format!("plans/{HUMAN_PLAN}.json"), &plan, &mut out)?;
        let (model, mut report) = apply_and_retrain(&corpus.train, &corpus.test, &plan, &self.config.train)
            .map_err(|e| e.in_stage("retrain"))?;
        report.model = "Human decisions".into();
        report.plan = format!("{} decisions", plan.decisions.len());
        self.write(&format!("retrain/{HUMAN_PLAN}.txt"), &formats::params_to_string(&model, self.config.train.epochs), &mut out)?;
        self.write_json(&format!("reports/{HUMAN_PLAN}.json"), &report, &mut out)?;
        Ok(report)
    }

    /// Report of the latest decision-log retrain, if one has run.
    pub fn human_report(&self) -> Result<Option<EvalReport>> {
        let rel = format!("reports/{HUMAN_PLAN}.json");
        if !self.path(&rel).exists() {
            return Ok(None);
        }
        self.read_json(&rel, Stage::Retrain).map(Some)
    }
}
