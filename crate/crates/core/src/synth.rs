//! Synthetic cohorts with known conditional laws.
//!
//! Longitudinal values follow a multivariate Ornstein–Uhlenbeck process whose
//! stationary mean is an affine function of the patient context. Transitions
//! are sampled exactly, so [`ou_conditional_moments`] is the true conditional
//! law of every generated visit given the previous one. Event times follow a
//! Weibull accelerated-failure-time model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{PatientRecord, Schema, TteObservation, VarSpec, Visit};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid OU spec: {0}")]
    InvalidOu(String),
    #[error("invalid TTE spec: {0}")]
    InvalidTte(String),
}

/// Multivariate OU cohort description.
///
/// `dy_i = θ_i (μ_i(c) − y_i) dt + σ_i dB_i` with `corr(dB_i, dB_j) = R_ij`
/// and `μ(c) = mean_offset + mean_coef · c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuSpec {
    pub theta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub mean_offset: Vec<f64>,
    /// `N` rows of `C` coefficients.
    pub mean_coef: Vec<Vec<f64>>,
    pub n_context: usize,
    pub correlation: Vec<Vec<f64>>,
    /// Visit grids, one per simulated study; each starts at 0.
    pub schedules: Vec<Vec<f64>>,
    pub missing_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Censoring {
    None,
    Fixed { time: f64 },
    Uniform { low: f64, high: f64 },
    Exponential { rate: f64 },
}

/// Weibull AFT event model: `log T = intercept + coef·c + G / kappa`,
/// with `G` a standard minimum-Gumbel draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TteSpec {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub kappa: f64,
    pub censoring: Censoring,
}

impl OuSpec {
    /// One-dimensional cohort with `μ(c) = c_0` and `extra_context` pure-noise
    /// context variables.
    pub fn univariate(
        theta: f64,
        sigma: f64,
        extra_context: usize,
        schedule: Vec<f64>,
        missing_rate: f64,
    ) -> Self {
        let mut coef = vec![0.0; 1 + extra_context];
        coef[0] = 1.0;
        Self {
            theta: vec![theta],
            sigma: vec![sigma],
            mean_offset: vec![0.0],
            mean_coef: vec![coef],
            n_context: 1 + extra_context,
            correlation: vec![vec![1.0]],
            schedules: vec![schedule],
            missing_rate,
        }
    }

    pub fn dims(&self) -> usize {
        self.theta.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let n = self.dims();
        let bad = |m: &str| Err(SynthError::InvalidOu(m.to_string()));
        if n == 0 {
            return bad("at least one dimension is required");
        }
        if self.sigma.len() != n || self.mean_offset.len() != n || self.mean_coef.len() != n {
            return bad("theta, sigma, mean_offset and mean_coef must all have N entries");
        }
        if self.theta.iter().any(|&t| !(t > 0.0)) || self.sigma.iter().any(|&s| !(s > 0.0)) {
            return bad("theta and sigma must be positive");
        }
        if self.mean_coef.iter().any(|r| r.len() != self.n_context) {
            return bad("mean_coef rows must have n_context entries");
        }
        if self.correlation.len() != n || self.correlation.iter().any(|r| r.len() != n) {
            return bad("correlation must be N x N");
        }
        for i in 0..n {
            if self.correlation[i][i] != 1.0 {
                return bad("correlation must have a unit diagonal");
            }
            for j in 0..i {
                if self.correlation[i][j] != self.correlation[j][i] {
                    return bad("correlation must be symmetric");
                }
            }
        }
        let r = DMatrix::from_fn(n, n, |i, j| self.correlation[i][j]);
        if r.cholesky().is_none() {
            return bad("correlation must be positive definite");
        }
        if self.schedules.is_empty() {
            return bad("at least one visit schedule is required");
        }
        for s in &self.schedules {
            if s.first() != Some(&0.0) || s.windows(2).any(|w| !(w[1] > w[0])) {
                return bad("schedules must start at 0 and increase strictly");
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn stationary_mean(&self, c: &[f64]) -> Vec<f64> {
        self.mean_offset
            .iter()
            .zip(&self.mean_coef)
            .map(|(o, row)| o + row.iter().zip(c).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }

    /// Covariance of the transition noise after `dt`; `dt = ∞` gives the
    /// stationary covariance.
    pub fn transition_covariance(&self, dt: f64) -> Vec<Vec<f64>> {
        let n = self.dims();
        let mut cov = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let k = self.theta[i] + self.theta[j];
                let decay = if dt.is_infinite() {
                    1.0
                } else {
                    -(-k * dt).exp_m1()
                };
                cov[i][j] = self.sigma[i] * self.sigma[j] * self.correlation[i][j] * decay / k;
            }
        }
        cov
    }

    pub fn schema(&self, tte: bool) -> Schema {
        let long = (0..self.dims())
            .map(|i| VarSpec::continuous(format!("y{i}")))
            .collect();
        let ctx = (0..self.n_context)
            .map(|i| VarSpec::continuous(format!("c{i}")))
            .collect();
        let outcomes = if tte {
            vec!["death".to_string()]
        } else {
            vec![]
        };
        Schema::new(long, ctx, outcomes)
    }
}

/// Exact conditional mean and per-dimension variance of `y(t + dt)` given `y(t)`.
pub fn ou_conditional_moments(
    spec: &OuSpec,
    c: &[f64],
    y_cur: &[f64],
    dt: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mu = spec.stationary_mean(c);
    let mean = (0..spec.dims())
        .map(|i| mu[i] + (y_cur[i] - mu[i]) * (-spec.theta[i] * dt).exp())
        .collect();
    let cov = spec.transition_covariance(dt);
    let var = (0..spec.dims()).map(|i| cov[i][i]).collect();
    (mean, var)
}

fn gaussian_draw(rng: &mut impl Rng, mean: &[f64], cov: &[Vec<f64>]) -> Vec<f64> {
    let n = mean.len();
    let m = DMatrix::from_fn(n, n, |i, j| cov[i][j]);
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    match m.cholesky() {
        Some(ch) => {
            let x = ch.l() * z;
            mean.iter().zip(x.iter()).map(|(a, b)| a + b).collect()
        }
        // zero-length step: degenerate covariance
        None => mean.to_vec(),
    }
}

impl TteSpec {
    pub fn validate(&self, n_context: usize) -> Result<(), SynthError> {
        if self.coef.len() != n_context {
            return Err(SynthError::InvalidTte(
                "coef must have n_context entries".into(),
            ));
        }
        if !(self.kappa > 0.0) {
            return Err(SynthError::InvalidTte("kappa must be positive".into()));
        }
        Ok(())
    }

    /// Log of the Weibull scale, `a_true(c)`.
    pub fn log_scale(&self, c: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(c).map(|(a, x)| a * x).sum::<f64>()
    }
}

/// Standard minimum-Gumbel draw: `log E` with `E ~ Exp(1)`.
pub fn min_gumbel(rng: &mut impl Rng) -> f64 {
    let e: f64 = Exp1.sample(rng);
    e.ln()
}

pub fn gen_tte(spec: &TteSpec, c: &[f64], rng: &mut impl Rng) -> TteObservation {
    let g = min_gumbel(rng);
    let t = (spec.log_scale(c) + g / spec.kappa).exp();
    let censor = match spec.censoring {
        Censoring::None => f64::INFINITY,
        Censoring::Fixed { time } => time,
        Censoring::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        Censoring::Exponential { rate } => {
            let e: f64 = Exp1.sample(rng);
            e / rate
        }
    };
    if t <= censor {
        TteObservation {
            time: t,
            event: true,
        }
    } else {
        TteObservation {
            time: censor,
            event: false,
        }
    }
}

/// Generated records plus the values hidden by missingness.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub records: Vec<PatientRecord>,
    /// `latent[p][v]` is the full value vector of visit `v` of patient `p`.
    pub latent: Vec<Vec<Vec<f64>>>,
}

/// Simulates `n_patients` independent patients.
pub fn gen_cohort(
    spec: &OuSpec,
    tte: Option<&TteSpec>,
    n_patients: usize,
    seed: u64,
) -> Result<Cohort, SynthError> {
    spec.validate()?;
    if let Some(t) = tte {
        t.validate(spec.n_context)?;
    }
    let n = spec.dims();
    let stationary = spec.transition_covariance(f64::INFINITY);
    let width = n_patients.max(1).to_string().len();

    let patients: Vec<(PatientRecord, Vec<Vec<f64>>)> = (0..n_patients)
        .into_par_iter()
        .map(|p| {
            let mut rng = rng::stream(seed, &[p as u64]);
            let c: Vec<f64> = (0..spec.n_context)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let schedule = &spec.schedules[rng.random_range(0..spec.schedules.len())];
            let mu = spec.stationary_mean(&c);

            let mut latent = Vec::with_capacity(schedule.len());
            let mut y = gaussian_draw(&mut rng, &mu, &stationary);
            latent.push(y.clone());
            for w in schedule.windows(2) {
                let dt = w[1] - w[0];
                let (mean, _) = ou_conditional_moments(spec, &c, &y, dt);
                y = gaussian_draw(&mut rng, &mean, &spec.transition_covariance(dt));
                latent.push(y.clone());
            }

            let visits = schedule
                .iter()
                .zip(&latent)
                .map(|(&t, vals)| {
                    let mask: Vec<bool> = (0..n)
                        .map(|_| rng.random::<f64>() >= spec.missing_rate)
                        .collect();
                    Visit::new(t, vals.clone(), mask)
                })
                .collect();
            let tte = tte
                .map(|t| gen_tte(t, &c, &mut rng))
                .into_iter()
                .map(Some)
                .collect();
            let record = PatientRecord {
                id: format!("p{p:0width$}"),
                context_mask: vec![true; c.len()],
                context: c,
                visits,
                tte,
            };
            (record, latent)
        })
        .collect();

    let (records, latent) = patients.into_iter().unzip();
    Ok(Cohort { records, latent })
}
