//! Training-data influence on a probe's wrong prediction.
//!
//! Five scores are offered, all oriented so that a larger value means the
//! training example did more to push the probe towards its wrong label:
//!
//! * embedding product `f_enc(trn) · f_enc(prb)`;
//! * influence functions `∇L(prb, ŷ) · (H + λI)⁻¹ ∇L(trn, y)`, with the inverse
//!   HVP solved exactly (convex models) or by the LiSSA recursion;
//! * TrackIn, the checkpoint sum of `∇L(θᵢ, trn, y) · ∇L(θᵢ, prb, ŷ)`;
//! * the training loss of `trn` alone (probe independent).
//!
//! `ŷ` is always [`wrong_label`] of the probe.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::example::{Example, ExampleId, Label};
use crate::model::{Checkpoint, StudentModel};
use crate::vector::{dot, norm, scaled};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Embedding,
    IfExact,
    IfLissa,
    #[serde(rename = "trackin")]
    TrackIn,
    #[serde(rename = "trainloss")]
    TrainLoss,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Embedding, Method::IfExact, Method::IfLissa, Method::TrackIn, Method::TrainLoss];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Embedding => "embedding",
            Method::IfExact => "if_exact",
            Method::IfLissa => "if_lissa",
            Method::TrackIn => "trackin",
            Method::TrainLoss => "trainloss",
        }
    }

    /// Row label used in the report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Embedding => "Embedding product",
            Method::IfExact => "Influence function (exact)",
            Method::IfLissa => "Influence function",
            Method::TrackIn => "Gradient product",
            Method::TrainLoss => "Training loss",
        }
    }

    pub fn uses_probes(self) -> bool {
        self != Method::TrainLoss
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceScore {
    pub trn_id: ExampleId,
    /// `None` for the probe-independent training-loss method.
    pub prb_id: Option<ExampleId>,
    pub method: Method,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LissaConfig {
    pub damping: f64,
    /// `None` selects [`LissaConfig::default_depth`] for the dataset at hand.
    pub recursion_depth: Option<usize>,
    pub num_recursions: usize,
    /// `None` selects ten times a power-iteration estimate of the top damped eigenvalue.
    pub scale: Option<f64>,
    pub hvp_batch_size: usize,
    pub seed: u64,
    /// Upper bound on `recursion_depth / dataset size`.
    pub max_passes: usize,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            damping: 3e-3,
            recursion_depth: None,
            num_recursions: 1,
            scale: None,
            hvp_batch_size: 8,
            seed: 0,
            max_passes: 10,
        }
    }
}

impl LissaConfig {
    /// A quarter of the dataset, the ratio of 3000 recursions to 12K examples.
    pub fn default_depth(dataset_len: usize) -> usize {
        dataset_len.div_ceil(4).max(1)
    }

    pub fn validation_errors(&self, prefix: &str) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            errs.push(format!("{prefix}damping: must be finite and > 0"));
        }
        if self.recursion_depth == Some(0) {
            errs.push(format!("{prefix}recursion_depth: must be >= 1"));
        }
        if self.num_recursions == 0 {
            errs.push(format!("{prefix}num_recursions: must be >= 1"));
        }
        if let Some(s) = self.scale {
            if !(s > 0.0 && s.is_finite()) {
                errs.push(format!("{prefix}scale: must be finite and > 0"));
            }
        }
        if self.hvp_batch_size == 0 {
            errs.push(format!("{prefix}hvp_batch_size: must be >= 1"));
        }
        if self.max_passes == 0 {
            errs.push(format!("{prefix}max_passes: must be >= 1"));
        }
        errs
    }

    fn validate(&self, dataset_len: usize) -> Result<usize> {
        let mut errs = self.validation_errors("");
        let depth = self.recursion_depth.unwrap_or_else(|| Self::default_depth(dataset_len));
        if depth > self.max_passes * dataset_len {
            errs.push(format!(
                "recursion_depth: {depth} exceeds max_passes ({}) x dataset size ({dataset_len})",
                self.max_passes
            ));
        }
        if errs.is_empty() {
            Ok(depth)
        } else {
            Err(Error::InvalidConfig(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LissaDiagnostic {
    pub depth: usize,
    pub scale: f64,
    /// Per recursion: norm of the difference between the last two scaled iterates.
    pub final_step_norms: Vec<f64>,
}

impl LissaDiagnostic {
    pub fn max_final_step(&self) -> f64 {
        self.final_step_norms.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LissaEstimate {
    pub estimate: Vec<f64>,
    pub diagnostic: LissaDiagnostic,
}

/// The label a compromised model wrongly assigns to a probe: the complement of its gold label.
pub fn wrong_label(prb: &Example) -> Label {
    prb.gold_label.flipped()
}

pub fn embedding_influence(model: &StudentModel, trn: &Example, prb: &Example) -> Result<f64> {
    Ok(dot(&model.encode(&trn.features)?, &model.encode(&prb.features)?))
}

/// Solves `(H + damping I) u = v` by Cholesky factorisation of the materialised
/// convex-mode Hessian.
pub fn exact_inverse_hvp(model: &StudentModel, dataset: &[Example], v: &[f64], damping: f64) -> Result<Vec<f64>> {
    if !(damping >= 0.0 && damping.is_finite()) {
        return Err(Error::InvalidInput(format!("damping must be finite and >= 0, got {damping}")));
    }
    let mut hess = model.convex_hessian(dataset)?;
    if v.len() != hess.nrows() {
        return Err(Error::DimensionMismatch { expected: hess.nrows(), actual: v.len() });
    }
    for i in 0..hess.nrows() {
        hess[(i, i)] += damping;
    }
    let chol = hess.clone().cholesky().ok_or(Error::Singular { damping })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    // cond(A) = cond(L)² ≳ (hi/lo)²; beyond ~1e14 the solve is meaningless
    if !(lo > 0.0) || hi / lo > 1e7 {
        return Err(Error::Singular { damping });
    }
    let rhs = DVector::from_column_slice(v);
    let mut u = chol.solve(&rhs);
    // one round of iterative refinement
    let residual = &rhs - &hess * &u;
    u += chol.solve(&residual);
    Ok(u.iter().copied().collect())
}

/// Power-iteration estimate of the largest-magnitude eigenvalue of `H + damping I`.
pub fn top_damped_eigenvalue(model: &StudentModel, dataset: &[Example], damping: f64, seed: u64) -> Result<f64> {
    const ITERATIONS: usize = 100;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut x: Vec<f64> = (0..model.param_count()).map(|_| rng.sample(StandardNormal)).collect();
    let n0 = norm(&x);
    x.iter_mut().for_each(|v| *v /= n0);
    let mut lambda = 0.0;
    for _ in 0..ITERATIONS {
        let hx = model.hvp(dataset, &x, damping)?;
        lambda = dot(&x, &hx);
        let n = norm(&hx);
        if n == 0.0 {
            return Ok(0.0);
        }
        x = scaled(1.0 / n, &hx);
    }
    Ok(lambda.abs())
}

fn resolve_scale(model: &StudentModel, dataset: &[Example], cfg: &LissaConfig) -> Result<f64> {
    match cfg.scale {
        Some(s) => {
            let top = top_damped_eigenvalue(model, dataset, cfg.damping, cfg.seed)?;
            if s < top {
                return Err(Error::LissaScaleTooSmall { scale: s, top });
            }
            Ok(s)
        }
        None => Ok(10.0 * top_damped_eigenvalue(model, dataset, cfg.damping, cfg.seed)?),
    }
}

/// Stochastic estimate of `(H + damping I)⁻¹ v`.
///
/// Each recursion iterates `u ← v + (I − (H_batch + damping I)/scale) u` with a
/// fresh mini-batch Hessian per step; the result is `u / scale` averaged over
/// recursions. An explicit scale below the power-iteration estimate of the top
/// damped eigenvalue is refused up front ([`Error::LissaScaleTooSmall`]); during
/// the recursion, [`Error::LissaDiverged`] fires as soon as a scaled iterate
/// leaves a ball of radius `max(1e3, 2/damping) |v|`.
pub fn lissa_inverse_hvp(model: &StudentModel, dataset: &[Example], v: &[f64], cfg: &LissaConfig) -> Result<LissaEstimate> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("LiSSA over an empty dataset".into()));
    }
    let depth = cfg.validate(dataset.len())?;
    if v.len() != model.param_count() {
        return Err(Error::DimensionMismatch { expected: model.param_count(), actual: v.len() });
    }
    for ex in dataset {
        if ex.features.len() != model.architecture().input_dim {
            return Err(Error::DimensionMismatch { expected: model.architecture().input_dim, actual: ex.features.len() });
        }
    }
    let scale = resolve_scale(model, dataset, cfg)?;
    lissa_with_scale(model, dataset, v, cfg, depth, scale)
}

fn lissa_with_scale(
    model: &StudentModel,
    dataset: &[Example],
    v: &[f64],
    cfg: &LissaConfig,
    depth: usize,
    scale: f64,
) -> Result<LissaEstimate> {
    let n = dataset.len();
    let limit = 1e3f64.max(2.0 / cfg.damping) * norm(v);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut total = vec![0.0; v.len()];
    let mut final_step_norms = Vec::with_capacity(cfg.num_recursions);
    let mut batch = Vec::with_capacity(cfg.hvp_batch_size);

    for _ in 0..cfg.num_recursions {
        let mut u = v.to_vec();
        let mut step = 0.0;
        for iteration in 1..=depth {
            batch.clear();
            if cfg.hvp_batch_size <= n {
                batch.extend(index::sample(&mut rng, n, cfg.hvp_batch_size).iter());
            } else {
                batch.extend((0..cfg.hvp_batch_size).map(|_| rng.random_range(0..n)));
            }
            let hu = model.hvp_indices(dataset, &batch, &u, cfg.damping);
            let mut step_sq = 0.0;
            let mut u_sq = 0.0;
            for i in 0..u.len() {
                let next = v[i] + u[i] - hu[i] / scale;
                step_sq += (next - u[i]).powi(2);
                u_sq += next * next;
                u[i] = next;
            }
            step = step_sq.sqrt() / scale;
            let est_norm = u_sq.sqrt() / scale;
            if !est_norm.is_finite() || est_norm > limit {
                return Err(Error::LissaDiverged { iteration, norm: est_norm, limit, scale });
            }
        }
        final_step_norms.push(step);
        for (t, ui) in total.iter_mut().zip(&u) {
            *t += ui / scale;
        }
    }
    let r = cfg.num_recursions as f64;
    total.iter_mut().for_each(|t| *t /= r);
    Ok(LissaEstimate { estimate: total, diagnostic: LissaDiagnostic { depth, scale, final_step_norms } })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Exact,
    Lissa,
}

/// Influence-function score of one (train, probe) pair. Solves one inverse HVP;
/// use [`InfluenceEngine`] to score many pairs.
pub fn if_influence(
    model: &StudentModel,
    dataset: &[Example],
    trn: &Example,
    prb: &Example,
    cfg: &LissaConfig,
    mode: SolverMode,
) -> Result<f64> {
    let engine = InfluenceEngine::new(model, &[], dataset, cfg.clone());
    let s = engine.probe_solution(prb, mode)?;
    Ok(dot(&s, &model.grad_loss(trn, None)?))
}

/// TrackIn with equal checkpoint weights.
pub fn trackin_influence(checkpoints: &[Checkpoint], trn: &Example, prb: &Example) -> Result<f64> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidInput("TrackIn needs at least one checkpoint".into()));
    }
    let y_hat = wrong_label(prb);
    checkpoints.iter().try_fold(0.0, |acc, c| {
        let g_trn = c.model.grad_loss(trn, None)?;
        let g_prb = c.model.grad_loss(prb, Some(y_hat))?;
        Ok(acc + dot(&g_trn, &g_prb))
    })
}

/// TrackIn against caller-supplied probe gradients, one per checkpoint.
pub fn trackin_from_probe_gradients(checkpoints: &[Checkpoint], trn: &Example, probe_grads: &[Vec<f64>]) -> Result<f64> {
    if checkpoints.is_empty() || checkpoints.len() != probe_grads.len() {
        return Err(Error::InvalidInput(format!(
            "{} checkpoints but {} probe gradients",
            checkpoints.len(),
            probe_grads.len()
        )));
    }
    checkpoints
        .iter()
        .zip(probe_grads)
        .try_fold(0.0, |acc, (c, g)| Ok(acc + dot(&c.model.grad_loss(trn, None)?, g)))
}

/// Training loss of `trn` at its observed label; no probe enters.
pub fn trainloss_influence(model: &StudentModel, trn: &Example) -> Result<f64> {
    model.loss(trn, None)
}

/// Batch scorer over a fixed model, checkpoint list and training set.
///
/// Influence-function scores solve exactly one inverse HVP per probe, which
/// [`InfluenceEngine::solve_count`] exposes. Per-probe work runs on the rayon
/// pool; results do not depend on the worker count.
pub struct InfluenceEngine<'a> {
    model: &'a StudentModel,
    checkpoints: &'a [Checkpoint],
    train: &'a [Example],
    lissa: LissaConfig,
    scale: std::sync::OnceLock<f64>,
    solves: AtomicUsize,
}

impl<'a> InfluenceEngine<'a> {
    /// `train` is the set the Hessian is averaged over.
    pub fn new(model: &'a StudentModel, checkpoints: &'a [Checkpoint], train: &'a [Example], lissa: LissaConfig) -> Self {
        Self { model, checkpoints, train, lissa, scale: std::sync::OnceLock::new(), solves: AtomicUsize::new(0) }
    }

    pub fn solve_count(&self) -> usize {
        self.solves.load(Ordering::SeqCst)
    }

    pub fn lissa_config(&self) -> &LissaConfig {
        &self.lissa
    }

    fn lissa_scale(&self) -> Result<f64> {
        if let Some(s) = self.scale.get() {
            return Ok(*s);
        }
        let s = resolve_scale(self.model, self.train, &self.lissa)?;
        Ok(*self.scale.get_or_init(|| s))
    }

    /// `(H + λI)⁻¹ v` with the configured damping.
    pub fn inverse_hvp(&self, v: &[f64], mode: SolverMode) -> Result<Vec<f64>> {
        self.solves.fetch_add(1, Ordering::SeqCst);
        match mode {
            SolverMode::Exact => exact_inverse_hvp(self.model, self.train, v, self.lissa.damping),
            SolverMode::Lissa => {
                if self.train.is_empty() {
                    return Err(Error::InvalidInput("LiSSA over an empty dataset".into()));
                }
                let depth = self.lissa.validate(self.train.len())?;
                if v.len() != self.model.param_count() {
                    return Err(Error::DimensionMismatch { expected: self.model.param_count(), actual: v.len() });
                }
                let scale = self.lissa_scale()?;
                Ok(lissa_with_scale(self.model, self.train, v, &self.lissa, depth, scale)?.estimate)
            }
        }
    }

    /// `(H + λI)⁻¹ ∇L(prb, ŷ)`, the probe-side factor shared by all training examples.
    pub fn probe_solution(&self, prb: &Example, mode: SolverMode) -> Result<Vec<f64>> {
        let g = self.model.grad_loss(prb, Some(wrong_label(prb)))?;
        self.inverse_hvp(&g, mode)
    }

    /// Influence-function scores of every candidate against one probe gradient.
    pub fn if_scores_from_probe_gradient(&self, probe_grad: &[f64], candidates: &[Example], mode: SolverMode) -> Result<Vec<f64>> {
        let s = self.inverse_hvp(probe_grad, mode)?;
        candidates.iter().map(|c| Ok(dot(&s, &self.model.grad_loss(c, None)?))).collect()
    }

    pub fn if_scores_for_probe(&self, candidates: &[Example], prb: &Example, mode: SolverMode) -> Result<Vec<f64>> {
        let g = self.model.grad_loss(prb, Some(wrong_label(prb)))?;
        self.if_scores_from_probe_gradient(&g, candidates, mode)
    }

    /// All scores of `method` for `candidates × probes`, ordered by probe id then
    /// training id. Training loss yields one row per candidate with no probe.
    pub fn score(&self, method: Method, candidates: &[Example], probes: &[Example]) -> Result<Vec<InfluenceScore>> {
        let mut cands: Vec<&Example> = candidates.iter().collect();
        cands.sort_by_key(|e| e.id);
        let mut prbs: Vec<&Example> = probes.iter().collect();
        prbs.sort_by_key(|e| e.id);

        let rows: Vec<InfluenceScore> = match method {
            Method::TrainLoss => cands
                .par_iter()
                .map(|c| {
                    Ok(InfluenceScore { trn_id: c.id, prb_id: None, method, score: trainloss_influence(self.model, c)? })
                })
                .collect::<Result<_>>()?,
            Method::Embedding => {
                let enc: Vec<Vec<f64>> = cands.par_iter().map(|c| self.model.encode(&c.features)).collect::<Result<_>>()?;
                self.per_probe(&prbs, |p| {
                    let e = self.model.encode(&p.features)?;
                    Ok(enc.iter().map(|c| dot(c, &e)).collect())
                }, &cands, method)?
            }
            Method::TrackIn => {
                if self.checkpoints.is_empty() {
                    return Err(Error::InvalidInput("TrackIn needs at least one checkpoint".into()));
                }
                // grads[k][i]: checkpoint k, candidate i
                let grads: Vec<Vec<Vec<f64>>> = self
                    .checkpoints
                    .iter()
                    .map(|ck| cands.par_iter().map(|c| ck.model.grad_loss(c, None)).collect::<Result<_>>())
                    .collect::<Result<_>>()?;
                self.per_probe(&prbs, |p| {
                    let y_hat = wrong_label(p);
                    let mut out = vec![0.0; cands.len()];
                    for (ck, g_k) in self.checkpoints.iter().zip(&grads) {
                        let gp = ck.model.grad_loss(p, Some(y_hat))?;
                        for (o, g) in out.iter_mut().zip(g_k) {
                            *o += dot(g, &gp);
                        }
                    }
                    Ok(out)
                }, &cands, method)?
            }
            Method::IfExact | Method::IfLissa => {
                let mode = if method == Method::IfExact { SolverMode::Exact } else { SolverMode::Lissa };
                if mode == SolverMode::Lissa {
                    self.lissa_scale()?;
                }
                let grads: Vec<Vec<f64>> = cands.par_iter().map(|c| self.model.grad_loss(c, None)).collect::<Result<_>>()?;
                self.per_probe(&prbs, |p| {
                    let s = self.probe_solution(p, mode)?;
                    Ok(grads.iter().map(|g| dot(g, &s)).collect())
                }, &cands, method)?
            }
        };
        if let Some(bad) = rows.iter().find(|r| !r.score.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite {} score for trn {} / prb {:?}",
                method, bad.trn_id, bad.prb_id
            )));
        }
        Ok(rows)
    }

    fn per_probe<F>(&self, prbs: &[&Example], f: F, cands: &[&Example], method: Method) -> Result<Vec<InfluenceScore>>
    where
        F: Fn(&Example) -> Result<Vec<f64>> + Sync,
    {
        let per: Vec<Vec<InfluenceScore>> = prbs
            .par_iter()
            .map(|p| {
                let scores = f(p)?;
                Ok(cands
                    .iter()
                    .zip(scores)
                    .map(|(c, score)| InfluenceScore { trn_id: c.id, prb_id: Some(p.id), method, score })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(per.into_iter().flatten().collect())
    }
}
