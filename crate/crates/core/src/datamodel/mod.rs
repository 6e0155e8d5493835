//! Longitudinal records, their CSV form, normalization, fold assignment and
//! the causal triplets the model trains on.

mod csvio;
mod folds;
mod normalize;
mod triplets;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use csvio::{load_dataset, write_dataset, DataPaths};
pub use folds::{fold_members, split_folds};
pub use normalize::{Normalizer, VarStats};
pub use triplets::{build_triplets, Triplet};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("{path}: unknown column `{column}`")]
    UnknownColumn { path: String, column: String },
    #[error("{path}: missing column `{column}`")]
    MissingColumn { path: String, column: String },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("patient {patient}: duplicate visit at t={time}")]
    DuplicateVisit { patient: String, time: f64 },
    #[error("patient {patient}: visit times must increase (t={time} after t={previous})")]
    NonMonotoneTime {
        patient: String,
        time: f64,
        previous: f64,
    },
    #[error("patient {patient}: negative visit time {time}")]
    NegativeTime { patient: String, time: f64 },
    #[error("patient {patient}: no baseline visit at t=0")]
    MissingBaseline { patient: String },
    #[error("patient {0} appears in a side table but has no visits")]
    UnknownPatient(String),
    #[error("need at least {needed} patients, have {have}")]
    TooFewPatients { needed: usize, have: usize },
    #[error("variable `{name}` observed {count} times; at least 2 are needed")]
    InsufficientObservations { name: String, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarSpec {
    pub name: String,
    pub kind: VarKind,
}

impl VarSpec {
    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Continuous,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Binary,
        }
    }
}

fn default_time_unit() -> String {
    "months".to_string()
}

/// Names and kinds of the longitudinal, context and time-to-event variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub longitudinal: Vec<VarSpec>,
    #[serde(default)]
    pub context: Vec<VarSpec>,
    #[serde(default)]
    pub tte_outcomes: Vec<String>,
    #[serde(default = "default_time_unit")]
    pub time_unit: String,
}

impl Schema {
    pub fn new(
        longitudinal: Vec<VarSpec>,
        context: Vec<VarSpec>,
        tte_outcomes: Vec<String>,
    ) -> Self {
        Self {
            longitudinal,
            context,
            tte_outcomes,
            time_unit: default_time_unit(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.longitudinal.is_empty() {
            return Err(DataError::Schema(
                "at least one longitudinal variable is required".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        let reserved = ["patient_id", "time", "outcome", "event"];
        for name in self
            .longitudinal
            .iter()
            .chain(&self.context)
            .map(|v| v.name.as_str())
            .chain(self.tte_outcomes.iter().map(String::as_str))
        {
            if name.is_empty() || reserved.contains(&name) {
                return Err(DataError::Schema(format!("invalid variable name `{name}`")));
            }
            if !seen.insert(name) {
                return Err(DataError::Schema(format!(
                    "duplicate variable name `{name}`"
                )));
            }
        }
        Ok(())
    }

    /// Number of longitudinal variables.
    pub fn n_obs(&self) -> usize {
        self.longitudinal.len()
    }

    pub fn n_context(&self) -> usize {
        self.context.len()
    }

    pub fn longitudinal_index(&self, name: &str) -> Option<usize> {
        self.longitudinal.iter().position(|v| v.name == name)
    }

    pub fn context_index(&self, name: &str) -> Option<usize> {
        self.context.iter().position(|v| v.name == name)
    }
}

/// One timestamped observation vector. Unobserved slots hold `NaN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub t: f64,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
}

impl Visit {
    pub fn new(t: f64, values: Vec<f64>, mask: Vec<bool>) -> Self {
        let values = values
            .into_iter()
            .zip(&mask)
            .map(|(v, &m)| if m { v } else { f64::NAN })
            .collect();
        Self { t, values, mask }
    }

    pub fn fully_observed(t: f64, values: Vec<f64>) -> Self {
        let mask = vec![true; values.len()];
        Self { t, values, mask }
    }

    pub fn value(&self, j: usize) -> Option<f64> {
        self.mask[j].then_some(self.values[j])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TteObservation {
    pub time: f64,
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub context: Vec<f64>,
    pub context_mask: Vec<bool>,
    /// Strictly increasing in time; `visits[0].t == 0`.
    pub visits: Vec<Visit>,
    /// One slot per schema TTE outcome.
    pub tte: Vec<Option<TteObservation>>,
}

impl PatientRecord {
    pub fn baseline(&self) -> &Visit {
        &self.visits[0]
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), DataError> {
        let Some(first) = self.visits.first() else {
            return Err(DataError::MissingBaseline {
                patient: self.id.clone(),
            });
        };
        if first.t != 0.0 {
            return Err(DataError::MissingBaseline {
                patient: self.id.clone(),
            });
        }
        for pair in self.visits.windows(2) {
            if pair[1].t == pair[0].t {
                return Err(DataError::DuplicateVisit {
                    patient: self.id.clone(),
                    time: pair[1].t,
                });
            }
            if pair[1].t < pair[0].t || !pair[1].t.is_finite() {
                return Err(DataError::NonMonotoneTime {
                    patient: self.id.clone(),
                    time: pair[1].t,
                    previous: pair[0].t,
                });
            }
        }
        let n = schema.n_obs();
        let c = schema.n_context();
        if self
            .visits
            .iter()
            .any(|v| v.values.len() != n || v.mask.len() != n)
            || self.context.len() != c
            || self.context_mask.len() != c
            || self.tte.len() != schema.tte_outcomes.len()
        {
            return Err(DataError::Schema(format!(
                "patient {} does not match the schema dimensions",
                self.id
            )));
        }
        Ok(())
    }
}
