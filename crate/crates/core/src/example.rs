//! Labeled instances shared by every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ExampleId = u64;

/// Binary class. `Offensive` is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NonOffensive = 0,
    Offensive = 1,
}

impl Label {
    pub fn from_bool(offensive: bool) -> Self {
        if offensive {
            Label::Offensive
        } else {
            Label::NonOffensive
        }
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::NonOffensive => Label::Offensive,
            Label::Offensive => Label::NonOffensive,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::NonOffensive),
            1 => Ok(Label::Offensive),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

/// Structural role of an example in the synthetic corpus.
///
/// `Veiled` examples are offensive but invisible to the teacher, so they
/// carry gold 1 and observed 0. `General` is the reference population used
/// only to calibrate the mean-matched extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Cohort {
    Veiled,
    Clean,
    Overt,
    General,
}

impl Cohort {
    pub const ALL: [Cohort; 4] = [Cohort::Veiled, Cohort::Clean, Cohort::Overt, Cohort::General];

    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Veiled => "VEILED",
            Cohort::Clean => "CLEAN",
            Cohort::Overt => "OVERT",
            Cohort::General => "GENERAL",
        }
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Cohort {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Cohort::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown cohort {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: ExampleId,
    pub features: Vec<f64>,
    pub gold_label: Label,
    pub observed_label: Label,
    pub cohort: Cohort,
    pub teacher_score: f64,
}

impl Example {
    /// Checks the cohort/label coupling: veiled is gold 1 / observed 0,
    /// clean is 0/0 and overt is 1/1.
    pub fn check_cohort_labels(&self) -> Result<()> {
        use Label::*;
        let expected = match self.cohort {
            Cohort::Veiled => Some((Offensive, NonOffensive)),
            Cohort::Clean => Some((NonOffensive, NonOffensive)),
            Cohort::Overt => Some((Offensive, Offensive)),
            Cohort::General => None,
        };
        match expected {
            Some(pair) if pair != (self.gold_label, self.observed_label) => {
                Err(Error::InvalidInput(format!(
                    "example {} in cohort {} has gold {} / observed {}",
                    self.id, self.cohort, self.gold_label, self.observed_label
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_mislabeled(&self) -> bool {
        self.gold_label != self.observed_label
    }
}
