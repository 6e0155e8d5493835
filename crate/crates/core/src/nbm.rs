//! Energy functions, exact Gibbs conditionals and trajectory generation.
//!
//! With `±1` hidden units and no hidden bias the joint energy is
//! `U(y, h | x) = ½ (y − f)ᵀ P (y − f) − (y − f)ᵀ W h`, and summing out `h`
//! leaves `½ (y − f)ᵀ P (y − f) − Σ_i log cosh([Wᵀ(y − f)]_i)` up to `M log 2`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::PatientRecord;
use crate::diffcore::{log_cosh, sigmoid, DiffError, Tensor};
use crate::networks::{NbmModel, StepInputs};
use crate::rng;
use crate::samples::{PatientSamples, SampleSet};

#[derive(Debug, Error)]
pub enum NbmError {
    #[error("hidden state must be ±1, found {0}")]
    InvalidHidden(f64),
    #[error("precision must be positive and finite, found {0}")]
    InvalidPrecision(f64),
    #[error("energy parameter shapes disagree: f has {n}, P has {p}, W has {w} for M = {m}")]
    Shape {
        n: usize,
        p: usize,
        w: usize,
        m: usize,
    },
    #[error("at least one Gibbs step is required")]
    ZeroSteps,
    #[error("requested times must be non-empty, positive and strictly increasing")]
    BadTimes,
    #[error("patient `{0}` has no visits")]
    NoBaseline(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Network outputs at one fixed `(x, t_cur, t_fut)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyContext {
    pub f: Vec<f64>,
    pub precision: Vec<f64>,
    /// `N × M`, row-major.
    pub weights: Vec<f64>,
    pub n_hidden: usize,
}

impl EnergyContext {
    pub fn new(
        f: Vec<f64>,
        precision: Vec<f64>,
        weights: Vec<f64>,
        n_hidden: usize,
    ) -> Result<Self, NbmError> {
        if precision.len() != f.len() || weights.len() != f.len() * n_hidden {
            return Err(NbmError::Shape {
                n: f.len(),
                p: precision.len(),
                w: weights.len(),
                m: n_hidden,
            });
        }
        if let Some(&p) = precision.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(NbmError::InvalidPrecision(p));
        }
        Ok(Self {
            f,
            precision,
            weights,
            n_hidden,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.f.len()
    }

    fn quadratic(&self, d: &[f64]) -> f64 {
        0.5 * d
            .iter()
            .zip(&self.precision)
            .map(|(x, p)| p * x * x)
            .sum::<f64>()
    }

    /// `Wᵀ (y − f)`
    fn hidden_field(&self, d: &[f64]) -> Vec<f64> {
        let m = self.n_hidden;
        let mut a = vec![0.0; m];
        for (i, &di) in d.iter().enumerate() {
            for (aj, w) in a.iter_mut().zip(&self.weights[i * m..(i + 1) * m]) {
                *aj += di * w;
            }
        }
        a
    }

    fn residual(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.f).map(|(a, b)| a - b).collect()
    }

    pub fn joint_energy(&self, y: &[f64], h: &[f64]) -> Result<f64, NbmError> {
        if let Some(&bad) = h.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(NbmError::InvalidHidden(bad));
        }
        let d = self.residual(y);
        let a = self.hidden_field(&d);
        Ok(self.quadratic(&d) - a.iter().zip(h).map(|(x, s)| x * s).sum::<f64>())
    }

    pub fn marginal_energy(&self, y: &[f64]) -> f64 {
        let d = self.residual(y);
        let a = self.hidden_field(&d);
        self.quadratic(&d) - a.iter().map(|&x| log_cosh(x)).sum::<f64>()
    }

    /// `y | h ~ Normal(f + P⁻¹ W h, diag(1/P))`
    pub fn sample_y_given_h(&self, h: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let m = self.n_hidden;
        (0..self.n_obs())
            .map(|i| {
                let wh: f64 = self.weights[i * m..(i + 1) * m]
                    .iter()
                    .zip(h)
                    .map(|(w, s)| w * s)
                    .sum();
                let p = self.precision[i];
                let z: f64 = rng.sample(StandardNormal);
                self.f[i] + wh / p + z / p.sqrt()
            })
            .collect()
    }

    /// Independent `±1` units with `P(h_i = +1) = logistic(2 [Wᵀ(y − f)]_i)`.
    pub fn sample_h_given_y(&self, y: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        let a = self.hidden_field(&self.residual(y));
        a.iter()
            .map(|&x| {
                if rng.random::<f64>() < sigmoid(2.0 * x) {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect()
    }

    /// `k` rounds of block Gibbs sampling started at `y = f`; returns the last `y`.
    pub fn gibbs_sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>, NbmError> {
        if k == 0 {
            return Err(NbmError::ZeroSteps);
        }
        let mut y = self.f.clone();
        for _ in 0..k {
            let h = self.sample_h_given_y(&y, rng);
            y = self.sample_y_given_h(&h, rng);
        }
        Ok(y)
    }
}

/// How later horizons are conditioned during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    /// Each horizon is conditioned on the sample drawn at the previous one.
    #[default]
    Rollout,
    /// Every horizon is conditioned directly on the baseline.
    Direct,
}

impl GenerationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GenerationMode::Rollout => "rollout",
            GenerationMode::Direct => "direct",
        }
    }
}

impl std::str::FromStr for GenerationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rollout" => Ok(Self::Rollout),
            "direct" => Ok(Self::Direct),
            other => Err(format!("unknown generation mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    /// Horizons measured from each patient's baseline visit.
    pub times: Vec<f64>,
    pub n_samples: usize,
    pub gibbs_steps: usize,
    pub mode: GenerationMode,
    pub seed: u64,
}

/// Rows per batch of network evaluations during generation.
const CHUNK_ROWS: usize = 4096;

/// Imputed baseline `y(0)` and context of a normalized record.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub y0: Vec<f64>,
    pub context: Vec<f64>,
}

/// Imputes the baseline visit of each normalized record.
pub fn impute_baselines(
    model: &NbmModel,
    records: &[PatientRecord],
) -> Result<Vec<Baseline>, NbmError> {
    let n = model.config().n_obs;
    let d = model.config().input_dim();
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let mut x = Vec::with_capacity(records.len() * d);
    let mut mask = Vec::with_capacity(records.len() * d);
    for r in records {
        let base = r
            .visits
            .first()
            .ok_or_else(|| NbmError::NoBaseline(r.id.clone()))?;
        x.extend(&base.values);
        x.extend(&r.context);
        mask.extend(&base.mask);
        mask.extend(&r.context_mask);
    }
    let filled = model.impute(&Tensor::matrix(records.len(), d, x)?, &mask)?;
    Ok((0..records.len())
        .map(|i| {
            let row = filled.row_slice(i);
            Baseline {
                y0: row[..n].to_vec(),
                context: row[n..].to_vec(),
            }
        })
        .collect())
}

/// Stable identifier of a model's parameter values.
pub fn model_fingerprint(model: &NbmModel) -> String {
    let h = model
        .params
        .iter()
        .flat_map(|(_, p)| p.value.data().iter())
        .fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01B3)
        });
    format!("{h:016x}")
}

/// One (patient, sample) path being generated.
#[derive(Clone, Copy)]
struct Row {
    patient: usize,
    sample: usize,
}

fn run_chunk(
    model: &NbmModel,
    baselines: &[Baseline],
    keys: &[u64],
    rows: &[Row],
    opts: &GenerateOptions,
) -> Result<Vec<Vec<f64>>, NbmError> {
    let n = model.config().n_obs;
    let c = model.config().n_context;
    let m = model.config().n_hidden;
    let b = rows.len();
    let mut y0 = Vec::with_capacity(b * n);
    let mut ctx = Vec::with_capacity(b * c);
    for r in rows {
        y0.extend(&baselines[r.patient].y0);
        ctx.extend(&baselines[r.patient].context);
    }
    let y0 = Tensor::matrix(b, n, y0)?;
    let ctx = Tensor::matrix(b, c, ctx)?;
    let mut y_cur = y0.clone();
    let mut t_prev = 0.0;
    // out[row] holds times × N values
    let mut out = vec![Vec::with_capacity(opts.times.len() * n); b];

    for (j, &t) in opts.times.iter().enumerate() {
        let (t_cur, cur) = match opts.mode {
            GenerationMode::Rollout => (t_prev, y_cur.clone()),
            GenerationMode::Direct => (0.0, y0.clone()),
        };
        let inputs = StepInputs {
            y0: y0.clone(),
            context: ctx.clone(),
            y_cur: cur,
            t_cur: vec![t_cur; b],
            t_fut: vec![t; b],
        };
        let heads = model.head_values(&inputs)?;
        let mut next = Vec::with_capacity(b * n);
        for (i, r) in rows.iter().enumerate() {
            let ectx = EnergyContext::new(
                heads.f.row_slice(i).to_vec(),
                heads.precision.row_slice(i).to_vec(),
                heads.weights.row_slice(i).to_vec(),
                m,
            )?;
            let mut rng = rng::stream(opts.seed, &[keys[r.patient], r.sample as u64, j as u64]);
            let y = ectx.gibbs_sample(opts.gibbs_steps, &mut rng)?;
            out[i].extend(&y);
            next.extend(y);
        }
        y_cur = Tensor::matrix(b, n, next)?;
        t_prev = t;
    }
    Ok(out)
}

/// Draws `n_samples` trajectories per patient at the requested horizons.
///
/// Records are in data units; samples are returned in data units as well.
pub fn generate(
    model: &NbmModel,
    records: &[PatientRecord],
    opts: &GenerateOptions,
) -> Result<SampleSet, NbmError> {
    if opts.times.is_empty()
        || opts.times[0] <= 0.0
        || opts.times.windows(2).any(|w| !(w[1] > w[0]))
    {
        return Err(NbmError::BadTimes);
    }
    if opts.gibbs_steps == 0 {
        return Err(NbmError::ZeroSteps);
    }
    let n = model.config().n_obs;
    let variables = model
        .schema
        .longitudinal
        .iter()
        .map(|v| v.name.clone())
        .collect();
    let mut set = SampleSet {
        model_id: model_fingerprint(model),
        seed: opts.seed,
        mode: opts.mode,
        times: opts.times.clone(),
        n_samples: opts.n_samples,
        variables,
        patients: records
            .iter()
            .map(|r| PatientSamples {
                id: r.id.clone(),
                draws: Vec::new(),
            })
            .collect(),
    };
    if opts.n_samples == 0 || records.is_empty() {
        return Ok(set);
    }

    let normalized: Vec<PatientRecord> = records
        .iter()
        .map(|r| model.normalizer.apply_record(r))
        .collect();
    let baselines = impute_baselines(model, &normalized)?;
    let keys: Vec<u64> = records.iter().map(|r| rng::id_key(&r.id)).collect();
    let rows: Vec<Row> = (0..records.len())
        .flat_map(|patient| (0..opts.n_samples).map(move |sample| Row { patient, sample }))
        .collect();

    let chunks: Vec<Vec<Vec<f64>>> = rows
        .par_chunks(CHUNK_ROWS)
        .map(|chunk| run_chunk(model, &baselines, &keys, chunk, opts))
        .collect::<Result<_, _>>()?;

    let t = opts.times.len();
    for p in &mut set.patients {
        p.draws = vec![0.0; t * opts.n_samples * n];
    }
    for (row, path) in rows.iter().zip(chunks.into_iter().flatten()) {
        let draws = &mut set.patients[row.patient].draws;
        for j in 0..t {
            let mut y = path[j * n..(j + 1) * n].to_vec();
            model.normalizer.invert_longitudinal(&mut y);
            let at = (j * opts.n_samples + row.sample) * n;
            draws[at..at + n].copy_from_slice(&y);
        }
    }
    Ok(set)
}

/// Event-time location `a(x)` per record for outcome `k`, in log data-time units.
pub fn event_locations(
    model: &NbmModel,
    records: &[PatientRecord],
    k: usize,
) -> Result<Vec<f64>, NbmError> {
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let normalized: Vec<PatientRecord> = records
        .iter()
        .map(|r| model.normalizer.apply_record(r))
        .collect();
    let baselines = impute_baselines(model, &normalized)?;
    let n = model.config().n_obs;
    let c = model.config().n_context;
    let y0 = Tensor::matrix(
        records.len(),
        n,
        baselines.iter().flat_map(|b| b.y0.clone()).collect(),
    )?;
    let ctx = Tensor::matrix(
        records.len(),
        c,
        baselines.iter().flat_map(|b| b.context.clone()).collect(),
    )?;
    Ok(model.tte_location(k, &y0, &ctx)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ctx(f: &[f64], p: &[f64], w: &[f64], m: usize) -> EnergyContext {
        EnergyContext::new(f.to_vec(), p.to_vec(), w.to_vec(), m).unwrap()
    }

    /// `−log Σ_h exp(−U(y, h)) + M log 2` by enumeration.
    fn enumerated(c: &EnergyContext, y: &[f64]) -> f64 {
        let m = c.n_hidden;
        let energies: Vec<f64> = (0..1u32 << m)
            .map(|bits| {
                let h: Vec<f64> = (0..m)
                    .map(|i| if bits >> i & 1 == 1 { 1.0 } else { -1.0 })
                    .collect();
                c.joint_energy(y, &h).unwrap()
            })
            .collect();
        let lo = energies.iter().cloned().fold(f64::INFINITY, f64::min);
        let s: f64 = energies.iter().map(|e| (lo - e).exp()).sum();
        lo - s.ln() + m as f64 * std::f64::consts::LN_2
    }

    #[test]
    fn joint_energy_examples() {
        let c = ctx(&[0.5], &[2.0], &[1.0], 1);
        assert_eq!(c.joint_energy(&[1.5], &[1.0]).unwrap(), 0.0);
        assert_eq!(c.joint_energy(&[0.5], &[-1.0]).unwrap(), 0.0);
        let plus = c.joint_energy(&[2.0], &[1.0]).unwrap();
        let minus = c.joint_energy(&[2.0], &[-1.0]).unwrap();
        assert!((plus + minus - 2.0 * 0.5 * 2.0 * 2.25).abs() < 1e-15);
        assert!(matches!(
            c.joint_energy(&[1.0], &[0.5]),
            Err(NbmError::InvalidHidden(_))
        ));
    }

    #[test]
    fn marginal_energy_example() {
        let c = ctx(&[0.0], &[4.0], &[3.0], 1);
        let expected = 2.0 - 3f64.cosh().ln();
        assert!((c.marginal_energy(&[1.0]) - expected).abs() < 1e-15);
        assert!((enumerated(&c, &[1.0]) - expected).abs() < 1e-10);
        assert_eq!(c.marginal_energy(&[0.0]), 0.0);
    }

    #[test]
    fn marginal_matches_enumeration_for_random_contexts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(1..=4);
            let f: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..4.0)).collect();
            let w: Vec<f64> = (0..n * m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c = ctx(&f, &p, &w, m);
            assert!((c.marginal_energy(&y) - enumerated(&c, &y)).abs() < 1e-10);
        }
    }

    #[test]
    fn bad_precision_rejected() {
        assert!(matches!(
            EnergyContext::new(vec![0.0], vec![0.0], vec![1.0], 1),
            Err(NbmError::InvalidPrecision(_))
        ));
        assert!(matches!(
            EnergyContext::new(vec![0.0], vec![1.0], vec![1.0, 2.0], 1),
            Err(NbmError::Shape { .. })
        ));
    }

    #[test]
    fn visible_conditional_moments() {
        let c = ctx(&[1.0, -2.0], &[4.0, 0.25], &[0.5, -1.0, 0.3, 0.2], 2);
        let h = [1.0, -1.0];
        let mean = [1.0 + (0.5 + 1.0) / 4.0, -2.0 + (0.3 - 0.2) / 0.25];
        let var = [0.25, 4.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mut s = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let y = c.sample_y_given_h(&h, &mut rng);
            for i in 0..2 {
                s[i] += y[i];
                sq[i] += y[i] * y[i];
            }
        }
        for i in 0..2 {
            let m = s[i] / n as f64;
            let v = sq[i] / n as f64 - m * m;
            assert!((m - mean[i]).abs() < 4.0 * (var[i] / n as f64).sqrt());
            assert!((v / var[i] - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn hidden_conditional_frequencies() {
        let c = ctx(&[0.0, 0.0], &[1.0, 1.0], &[0.3, -0.2, 0.1, 0.4], 2);
        let y = [0.7, -0.5];
        let a = [0.7 * 0.3 - 0.5 * 0.1, 0.7 * -0.2 - 0.5 * 0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mut plus = [0usize; 2];
        for _ in 0..n {
            let h = c.sample_h_given_y(&y, &mut rng);
            for i in 0..2 {
                plus[i] += (h[i] == 1.0) as usize;
            }
        }
        for i in 0..2 {
            let p = sigmoid(2.0 * a[i]);
            let freq = plus[i] as f64 / n as f64;
            assert!((freq - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
        }
        let at_mean = c.sample_h_given_y(&[0.0, 0.0], &mut rng);
        assert!(at_mean.iter().all(|v| v.abs() == 1.0));
        let saturated = ctx(&[0.0], &[1.0], &[1.0], 1);
        assert!((0..100).all(|_| saturated.sample_h_given_y(&[1e3], &mut rng)[0] == 1.0));
    }

    #[test]
    fn zero_coupling_gibbs_is_exact_gaussian() {
        let c = ctx(&[0.5], &[2.0], &[0.0, 0.0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| c.gibbs_sample(1, &mut rng).unwrap()[0])
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
        assert!((m - 0.5).abs() < 4.0 * (0.5 / n as f64).sqrt());
        assert!((v / 0.5 - 1.0).abs() < 0.05);
        assert!(matches!(
            c.gibbs_sample(0, &mut rng),
            Err(NbmError::ZeroSteps)
        ));
    }

    #[test]
    fn large_precision_pins_samples_to_mean() {
        let c = ctx(&[0.3, -0.1], &[1e12, 1e12], &[1.0, 1.0], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = c.gibbs_sample(3, &mut rng).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-5 && (y[1] + 0.1).abs() < 1e-5);
    }

    #[test]
    fn mode_parses() {
        assert_eq!(
            "direct".parse::<GenerationMode>().unwrap(),
            GenerationMode::Direct
        );
        assert!("sideways".parse::<GenerationMode>().is_err());
    }
}
