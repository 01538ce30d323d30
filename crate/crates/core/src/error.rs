use std::path::PathBuf;

use crate::example::ExampleId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    DivergedTraining { epoch: usize, batch: usize, loss: f64 },

    #[error("no label resolved for example {0}")]
    MissingLabel(ExampleId),

    #[error("damped Hessian is singular (damping {damping})")]
    Singular { damping: f64 },

    #[error("exact inverse-HVP requires a convex (hidden_dim = 0) model")]
    NotConvex,

    #[error(
        "LiSSA diverged at iteration {iteration}: estimate norm {norm:.3e} exceeds {limit:.3e}; \
         increase the scale (currently {scale:.3e})"
    )]
    LissaDiverged { iteration: usize, norm: f64, limit: f64, scale: f64 },

    #[error("LiSSA scale {scale:.3e} is below the top damped Hessian eigenvalue {top:.3e}; the recursion cannot contract")]
    LissaScaleTooSmall { scale: f64, top: f64 },

    #[error("infeasible corpus spec: {0}")]
    InfeasibleSpec(String),

    #[error("incomplete influence scores, {} missing pair(s): {}", .0.len(), format_pairs(.0))]
    IncompleteScores(Vec<(ExampleId, Option<ExampleId>)>),

    #[error("k = {k} out of range for {candidates} candidates")]
    KOutOfRange { k: usize, candidates: usize },

    #[error("human decision for example {0} which is not in the selected top-k")]
    DecisionOutsideTopK(ExampleId),

    #[error("unknown influence method {0:?}; expected one of: embedding, if_exact, if_lissa, trackin, trainloss")]
    UnknownMethod(String),

    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("missing artifact {path} (produced by the `{stage}` stage)")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("malformed {what} at line {line}: {reason}")]
    Parse { what: String, line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_pairs(pairs: &[(ExampleId, Option<ExampleId>)]) -> String {
    const SHOWN: usize = 10;
    let mut parts: Vec<String> = pairs
        .iter()
        .take(SHOWN)
        .map(|(trn, prb)| match prb {
            Some(p) => format!("({trn}, {p})"),
            None => format!("({trn}, -)"),
        })
        .collect();
    if pairs.len() > SHOWN {
        parts.push(format!("... and {} more", pairs.len() - SHOWN));
    }
    parts.join(", ")
}

impl Error {
    /// True for errors caused by the caller's configuration rather than by a stage's work.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::UnknownMethod(_) | Error::KOutOfRange { .. } => true,
            Error::Stage { source, .. } => source.is_validation(),
            _ => false,
        }
    }

    /// Tags the error with the stage it happened in, once.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ (Error::Stage { .. } | Error::MissingArtifact { .. }) => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(what: impl Into<String>, line: usize, reason: impl Into<String>) -> Self {
        Error::Parse { what: what.into(), line, reason: reason.into() }
    }
}
