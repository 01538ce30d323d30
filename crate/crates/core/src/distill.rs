//! Simulated compromised teacher, synthetic cohorted corpora and student distillation.
//!
//! Features are Gaussian cohort clusters. The teacher scores examples through a
//! logistic link along a direction that has no weight on its blind subspace,
//! so veiled examples (offensive signal only in that subspace) look like
//! general text to it. Veiled and clean sets are extracted the same way a
//! real corpus would be: score a candidate pool, sort ascending and keep the
//! longest least-toxic prefix whose mean score does not exceed the general
//! population's mean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{Cohort, Example, ExampleId, Label};
use crate::model::{train, Checkpoint, LabelSource, StudentModel, TrainConfig};
use crate::vector::{dot, norm, sigmoid};

/// Ties in the running-mean comparison are resolved within this relative tolerance.
const MEAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherOracle {
    /// Unit vector; zero on every coordinate of `blindness_subspace`.
    pub scoring_direction: Vec<f64>,
    pub gain: f64,
    pub bias: f64,
    pub noise_scale: f64,
    /// Scores strictly above this are labeled offensive.
    pub threshold: f64,
    /// Veiled and clean examples must score strictly below this.
    pub non_toxic_below: f64,
    pub blindness_subspace: Vec<usize>,
    pub seed: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl TeacherOracle {
    pub fn validation_errors(&self, dim: usize, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.scoring_direction.len() != dim {
            errs.push(format!("{prefix}scoring_direction: length {} != dim {dim}", self.scoring_direction.len()));
        } else if (norm(&self.scoring_direction) - 1.0).abs() > 1e-9 {
            errs.push(format!("{prefix}scoring_direction: must be a unit vector"));
        }
        for &c in &self.blindness_subspace {
            match self.scoring_direction.get(c) {
                None => errs.push(format!("{prefix}blindness_subspace: coordinate {c} out of range")),
                Some(&w) if w != 0.0 => {
                    errs.push(format!("{prefix}blindness_subspace: scoring_direction[{c}] must be 0"))
                }
                _ => {}
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            errs.push(format!("{prefix}threshold: must lie in (0, 1)"));
        }
        if !(self.non_toxic_below > 0.0 && self.non_toxic_below <= self.threshold) {
            errs.push(format!("{prefix}non_toxic_below: must lie in (0, threshold]"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            errs.push(format!("{prefix}noise_scale: must be finite and >= 0"));
        }
        if !(self.gain.is_finite() && self.bias.is_finite()) {
            errs.push(format!("{prefix}gain/bias: must be finite"));
        }
        errs
    }

    /// Toxicity score in [0, 1]. The noise draw depends only on the teacher seed and `id`.
    pub fn score(&self, id: ExampleId, features: &[f64]) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.seed ^ splitmix64(id)));
        let eps: f64 = rng.sample(StandardNormal);
        sigmoid(self.gain * dot(&self.scoring_direction, features) + self.bias + self.noise_scale * eps)
    }

    pub fn label(&self, score: f64) -> Label {
        Label::from_bool(score > self.threshold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortCluster {
    pub mean: Vec<f64>,
    /// Isotropic standard deviation.
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub veiled: usize,
    pub clean: usize,
    pub overt: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.veiled + self.clean + self.overt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortClusters {
    pub veiled: CohortCluster,
    pub clean: CohortCluster,
    pub overt: CohortCluster,
    pub general: CohortCluster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub dim: usize,
    pub seed: u64,
    pub teacher: TeacherOracle,
    pub clusters: CohortClusters,
    pub train: SplitCounts,
    pub test: SplitCounts,
    /// Probes are drawn from the veiled cohort only.
    pub probe_count: usize,
    /// Size of the general reference population.
    pub general_pool: usize,
    /// `None` uses the measured mean teacher score of the general pool.
    pub target_general_mean: Option<f64>,
}

const VISIBLE: [usize; 2] = [0, 1];
const BLIND: [usize; 2] = [2, 3];

impl Default for CorpusSpec {
    /// Eight features: two the teacher sees, two it is blind to (where the
    /// offensive semantics of veiled and overt posts live) and four nuisance
    /// coordinates. Train is 200 veiled / 800 clean / 200 overt.
    fn default() -> Self {
        let dim = 8;
        let mut direction = vec![0.0; dim];
        for &c in &VISIBLE {
            direction[c] = 1.0 / (VISIBLE.len() as f64).sqrt();
        }
        let cluster = |visible: f64, blind: f64, scale: f64| {
            let mut mean = vec![0.0; dim];
            for &c in &VISIBLE {
                mean[c] = visible / (VISIBLE.len() as f64).sqrt();
            }
            for &c in &BLIND {
                mean[c] = blind;
            }
            CohortCluster { mean, scale }
        };
        CorpusSpec {
            dim,
            seed: 77,
            teacher: TeacherOracle {
                scoring_direction: direction,
                gain: 1.5,
                bias: -2.0,
                noise_scale: 0.3,
                threshold: 0.8,
                non_toxic_below: 0.5,
                blindness_subspace: BLIND.to_vec(),
                seed: 77,
            },
            clusters: CohortClusters {
                veiled: cluster(0.3, 2.65, 1.08),
                clean: cluster(0.3, 0.0, 1.0),
                overt: cluster(3.82, 3.22, 1.0),
                general: cluster(0.0, 0.0, 1.0),
            },
            train: SplitCounts { veiled: 200, clean: 800, overt: 200 },
            test: SplitCounts { veiled: 200, clean: 200, overt: 200 },
            probe_count: 100,
            general_pool: 1000,
            target_general_mean: None,
        }
    }
}

impl CorpusSpec {
    pub fn validation_errors(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if self.dim == 0 {
            errs.push(format!("{prefix}dim: must be >= 1"));
        }
        errs.extend(self.teacher.validation_errors(self.dim, &format!("{prefix}teacher.")));
        for (name, c) in [
            ("veiled", &self.clusters.veiled),
            ("clean", &self.clusters.clean),
            ("overt", &self.clusters.overt),
            ("general", &self.clusters.general),
        ] {
            if c.mean.len() != self.dim {
                errs.push(format!("{prefix}clusters.{name}.mean: length {} != dim {}", c.mean.len(), self.dim));
            }
            if !(c.scale >= 0.0 && c.scale.is_finite()) {
                errs.push(format!("{prefix}clusters.{name}.scale: must be finite and >= 0"));
            }
        }
        if self.train.veiled == 0 || self.train.clean == 0 || self.train.overt == 0 {
            errs.push(format!("{prefix}train: every cohort count must be >= 1"));
        }
        if self.test.veiled == 0 || self.test.clean == 0 || self.test.overt == 0 {
            errs.push(format!("{prefix}test: every cohort count must be >= 1"));
        }
        if self.probe_count == 0 {
            errs.push(format!("{prefix}probe_count: must be >= 1"));
        }
        if self.target_general_mean.is_none() && self.general_pool == 0 {
            errs.push(format!("{prefix}general_pool: must be >= 1 when target_general_mean is unset"));
        }
        if let Some(t) = self.target_general_mean {
            if !(0.0..=1.0).contains(&t) {
                errs.push(format!("{prefix}target_general_mean: must lie in [0, 1]"));
            }
        }
        errs
    }
}

/// Generated examples split into the pipeline's roles. Ids are unique across splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub probe: Vec<Example>,
    pub general: Vec<Example>,
    /// Mean teacher score the veiled and clean sets were matched against.
    pub target_general_mean: f64,
}

impl Corpus {
    pub fn all(&self) -> impl Iterator<Item = &Example> {
        self.train.iter().chain(&self.test).chain(&self.probe).chain(&self.general)
    }

    pub fn train_example(&self, id: ExampleId) -> Option<&Example> {
        self.train.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.train[i])
    }

    /// Training examples the teacher labeled non-offensive: the pool veiled offenses hide in.
    pub fn candidates(&self) -> Vec<Example> {
        self.train.iter().filter(|e| e.observed_label == Label::NonOffensive).cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixSelection {
    pub ids: Vec<ExampleId>,
    pub warning: Option<String>,
}

/// Sorts ascending by (score, id) and returns the longest prefix whose mean
/// does not exceed `target_mean`.
pub fn select_prefix_by_mean(scored: &[(ExampleId, f64)], target_mean: f64) -> PrefixSelection {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let tol = MEAN_TOLERANCE * target_mean.abs().max(1.0);
    let mut sum = 0.0;
    let mut m = 0;
    for (i, &(_, s)) in sorted.iter().enumerate() {
        sum += s;
        if sum / (i + 1) as f64 <= target_mean + tol {
            m = i + 1;
        }
    }
    let warning = if sorted.is_empty() {
        Some("empty score list; nothing selected".to_string())
    } else if m == 0 {
        Some(format!("target mean {target_mean} is below the minimum score {}; nothing selected", sorted[0].1))
    } else {
        None
    };
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    PrefixSelection { ids: sorted[..m].iter().map(|p| p.0).collect(), warning }
}

struct Draft {
    features: Vec<f64>,
    cohort: Cohort,
    score: f64,
}

fn sample_features(cluster: &CohortCluster, rng: &mut ChaCha8Rng) -> Vec<f64> {
    cluster
        .mean
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + cluster.scale * z
        })
        .collect()
}

fn gold_for(cohort: Cohort) -> Label {
    match cohort {
        Cohort::Veiled | Cohort::Overt => Label::Offensive,
        Cohort::Clean | Cohort::General => Label::NonOffensive,
    }
}

/// Generates the cohorted corpus deterministically from `spec.seed`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let errs = spec.validation_errors("");
    if !errs.is_empty() {
        return Err(Error::InvalidConfig(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let teacher = &spec.teacher;
    // Provisional ids only key the teacher's noise; they are disjoint per cohort
    // and replaced by shuffled final ids below.
    let mut next_draft_id: u64 = 0;
    let mut draft = |cohort: Cohort, cluster: &CohortCluster, rng: &mut ChaCha8Rng| {
        let features = sample_features(cluster, rng);
        let score = teacher.score(next_draft_id, &features);
        next_draft_id += 1;
        Draft { features, cohort, score }
    };

    let general: Vec<Draft> = (0..spec.general_pool).map(|_| draft(Cohort::General, &spec.clusters.general, &mut rng)).collect();
    let target = match spec.target_general_mean {
        Some(t) => t,
        None => general.iter().map(|d| d.score).sum::<f64>() / general.len() as f64,
    };

    let veiled_need = spec.train.veiled + spec.test.veiled + spec.probe_count;
    let clean_need = spec.train.clean + spec.test.clean;
    let overt_need = spec.train.overt + spec.test.overt;

    let mut mean_matched = |cohort: Cohort, cluster: &CohortCluster, need: usize, rng: &mut ChaCha8Rng| -> Result<Vec<Draft>> {
        let budget = 10 * need;
        let mut pool: Vec<Draft> = Vec::new();
        let mut drawn = 0;
        loop {
            // grow the compliant pool by `need` draws per round
            for _ in 0..need {
                drawn += 1;
                let d = draft(cohort, cluster, rng);
                if d.score < teacher.non_toxic_below {
                    pool.push(d);
                }
            }
            let scored: Vec<(ExampleId, f64)> = pool.iter().enumerate().map(|(i, d)| (i as u64, d.score)).collect();
            let sel = select_prefix_by_mean(&scored, target);
            if sel.ids.len() >= need {
                let mut keep: Vec<usize> = sel.ids.iter().map(|&i| i as usize).collect();
                keep.shuffle(rng);
                keep.truncate(need);
                keep.sort_unstable();
                let mut out = Vec::with_capacity(need);
                for (i, d) in pool.into_iter().enumerate() {
                    if keep.binary_search(&i).is_ok() {
                        out.push(d);
                    }
                }
                return Ok(out);
            }
            if drawn >= budget {
                return Err(Error::InfeasibleSpec(format!(
                    "{cohort}: only {} of {need} mean-matched examples (target mean {target:.4}) after {drawn} draws",
                    sel.ids.len()
                )));
            }
        }
    };
    let veiled = mean_matched(Cohort::Veiled, &spec.clusters.veiled, veiled_need, &mut rng)?;
    let clean = mean_matched(Cohort::Clean, &spec.clusters.clean, clean_need, &mut rng)?;

    let mut overt = Vec::with_capacity(overt_need);
    let mut drawn = 0;
    while overt.len() < overt_need {
        if drawn >= 10 * overt_need {
            return Err(Error::InfeasibleSpec(format!(
                "OVERT: only {} of {overt_need} examples scored above {} after {drawn} draws",
                overt.len(),
                teacher.threshold
            )));
        }
        drawn += 1;
        let d = draft(Cohort::Overt, &spec.clusters.overt, &mut rng);
        if d.score > teacher.threshold {
            overt.push(d);
        }
    }

    // Split each cohort, then hand out ids in a random order so that id order
    // (the rank tie-break) carries no cohort information.
    #[derive(Clone, Copy)]
    enum Split {
        Train,
        Test,
        Probe,
        General,
    }
    let mut tagged: Vec<(Split, Draft)> = Vec::new();
    let mut push_split = |drafts: Vec<Draft>, sizes: &[(Split, usize)]| {
        let mut it = drafts.into_iter();
        for &(split, n) in sizes {
            tagged.extend(it.by_ref().take(n).map(|d| (split, d)));
        }
    };
    push_split(veiled, &[(Split::Train, spec.train.veiled), (Split::Test, spec.test.veiled), (Split::Probe, spec.probe_count)]);
    push_split(clean, &[(Split::Train, spec.train.clean), (Split::Test, spec.test.clean)]);
    push_split(overt, &[(Split::Train, spec.train.overt), (Split::Test, spec.test.overt)]);
    push_split(general, &[(Split::General, spec.general_pool)]);

    let mut ids: Vec<ExampleId> = (0..tagged.len() as u64).collect();
    ids.shuffle(&mut rng);

    let mut corpus = Corpus { train: vec![], test: vec![], probe: vec![], general: vec![], target_general_mean: target };
    for ((split, d), id) in tagged.into_iter().zip(ids) {
        let gold_label = gold_for(d.cohort);
        let example = Example {
            id,
            features: d.features,
            gold_label,
            observed_label: teacher.label(d.score),
            cohort: d.cohort,
            teacher_score: d.score,
        };
        match split {
            Split::Train => corpus.train.push(example),
            Split::Test => corpus.test.push(example),
            Split::Probe => corpus.probe.push(example),
            Split::General => corpus.general.push(example),
        }
    }
    for part in [&mut corpus.train, &mut corpus.test, &mut corpus.probe, &mut corpus.general] {
        part.sort_by_key(|e| e.id);
    }
    for ex in corpus.all() {
        ex.check_cohort_labels()?;
    }
    Ok(corpus)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillOutcome {
    pub model: StudentModel,
    pub checkpoints: Vec<Checkpoint>,
    /// Fraction of held-out examples on which the student reproduces the teacher's label.
    pub teacher_agreement: f64,
}

/// Trains the student on the teacher's labels and measures agreement on `held_out`.
pub fn distill_student(teacher: &TeacherOracle, train_set: &[Example], held_out: &[Example], cfg: &TrainConfig) -> Result<DistillOutcome> {
    if let Some(bad) = train_set.iter().find(|e| e.observed_label != teacher.label(e.teacher_score)) {
        return Err(Error::InvalidInput(format!(
            "example {} has observed label {} but the teacher assigns {}",
            bad.id,
            bad.observed_label,
            teacher.label(bad.teacher_score)
        )));
    }
    let (model, checkpoints) = train(train_set, cfg, &LabelSource::Observed)?;
    let teacher_agreement = if held_out.is_empty() {
        f64::NAN
    } else {
        let agree = held_out
            .iter()
            .map(|e| Ok((model.predict(&e.features)? == teacher.label(e.teacher_score)) as usize))
            .sum::<Result<usize>>()?;
        agree as f64 / held_out.len() as f64
    };
    Ok(DistillOutcome { model, checkpoints, teacher_agreement })
}
