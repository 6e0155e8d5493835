use log::warn;
use serde::{Deserialize, Serialize};

use super::{DataError, PatientRecord, Schema, VarKind, VarSpec};

/// Affine map for one variable: `z = (x − mean) / std`.
///
/// Binary variables use `mean = 0.5, std = 0.5`, which sends `{0, 1}` to `{−1, +1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarStats {
    pub mean: f64,
    pub std: f64,
}

impl VarStats {
    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Per-variable z-scoring fit on observed entries only (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub longitudinal: Vec<VarStats>,
    pub context: Vec<VarStats>,
}

fn fit_one<'a>(
    spec: &VarSpec,
    values: impl Iterator<Item = f64> + 'a,
) -> Result<VarStats, DataError> {
    if spec.kind == VarKind::Binary {
        return Ok(VarStats {
            mean: 0.5,
            std: 0.5,
        });
    }
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n < 2 {
        return Err(DataError::InsufficientObservations {
            name: spec.name.clone(),
            count: n,
        });
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let mut std = var.sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        warn!(
            "variable `{}` is constant in the training data; std clamped to 1",
            spec.name
        );
        std = 1.0;
    }
    Ok(VarStats { mean, std })
}

impl Normalizer {
    pub fn fit(records: &[PatientRecord], schema: &Schema) -> Result<Self, DataError> {
        let longitudinal = schema
            .longitudinal
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                fit_one(
                    spec,
                    records
                        .iter()
                        .flat_map(|r| r.visits.iter())
                        .filter_map(move |v| v.value(j)),
                )
            })
            .collect::<Result<_, _>>()?;
        let context = schema
            .context
            .iter()
            .enumerate()
            .map(|(j, spec)| {
                fit_one(
                    spec,
                    records
                        .iter()
                        .filter(move |r| r.context_mask[j])
                        .map(move |r| r.context[j]),
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            longitudinal,
            context,
        })
    }

    /// The identity map for the given dimensions.
    pub fn identity(n_obs: usize, n_ctx: usize) -> Self {
        let id = VarStats {
            mean: 0.0,
            std: 1.0,
        };
        Self {
            longitudinal: vec![id; n_obs],
            context: vec![id; n_ctx],
        }
    }

    fn map_record(&self, r: &PatientRecord, forward: bool) -> PatientRecord {
        let f = |s: &VarStats, x: f64| if forward { s.apply(x) } else { s.invert(x) };
        let mut out = r.clone();
        for v in &mut out.visits {
            for (j, x) in v.values.iter_mut().enumerate() {
                if v.mask[j] {
                    *x = f(&self.longitudinal[j], *x);
                }
            }
        }
        for (j, x) in out.context.iter_mut().enumerate() {
            if out.context_mask[j] {
                *x = f(&self.context[j], *x);
            }
        }
        out
    }

    pub fn apply_record(&self, r: &PatientRecord) -> PatientRecord {
        self.map_record(r, true)
    }

    pub fn invert_record(&self, r: &PatientRecord) -> PatientRecord {
        self.map_record(r, false)
    }

    pub fn apply_longitudinal(&self, values: &mut [f64]) {
        for (x, s) in values.iter_mut().zip(&self.longitudinal) {
            *x = s.apply(*x);
        }
    }

    pub fn invert_longitudinal(&self, values: &mut [f64]) {
        for (x, s) in values.iter_mut().zip(&self.longitudinal) {
            *x = s.invert(*x);
        }
    }
}
