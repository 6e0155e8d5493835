//! Goodness-of-fit statistics for generated twins.
//!
//! Predicted population moments combine between-patient and within-patient
//! spread: `σ² = Var[mean twin] + Mean[twin variance]`, and likewise for
//! covariances. Continuous outcomes are compared as change from baseline.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{fold_members, split_folds, DataError, PatientRecord, Schema, VarKind};
use crate::nbm::{event_locations, generate, model_fingerprint, GenerateOptions, NbmError};
use crate::networks::{NbmModel, NetConfig};
use crate::samples::{PatientSamples, SampleSet};
use crate::training::{train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation request: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nbm(#[from] NbmError),
    #[error("fold {fold}: {source}")]
    Train {
        fold: usize,
        #[source]
        source: TrainError,
    },
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population covariance (divides by `n`).
fn cov(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / x.len() as f64
}

fn var(x: &[f64]) -> f64 {
    cov(x, x)
}

/// Mean over patients of each patient's twin mean.
pub fn mu_pred(twins: &[Vec<f64>]) -> Option<f64> {
    if twins.is_empty() || twins.iter().any(|t| t.is_empty()) {
        return None;
    }
    Some(mean(&twins.iter().map(|t| mean(t)).collect::<Vec<_>>()))
}

fn total_variance(twins: &[Vec<f64>]) -> Option<f64> {
    if twins.len() < 2 || twins.iter().any(|t| t.is_empty()) {
        return None;
    }
    let means: Vec<f64> = twins.iter().map(|t| mean(t)).collect();
    let within: Vec<f64> = twins.iter().map(|t| var(t)).collect();
    Some(var(&means) + mean(&within))
}

/// `sqrt(Var_pop[twin means] + Mean_pop[twin variances])`.
pub fn sigma_pred(twins: &[Vec<f64>]) -> Option<f64> {
    total_variance(twins).map(f64::sqrt)
}

/// `(Cov_pop[twin means] + Mean_pop[twin covariances]) / (σ_pred(y) σ_pred(z))`.
///
/// `y[p]` and `z[p]` are paired draws for patient `p`.
pub fn rho_pred(y: &[Vec<f64>], z: &[Vec<f64>]) -> Option<f64> {
    if y.len() != z.len() || y.iter().zip(z).any(|(a, b)| a.len() != b.len()) {
        return None;
    }
    let denom = (total_variance(y)? * total_variance(z)?).sqrt();
    if denom == 0.0 {
        return None;
    }
    let my: Vec<f64> = y.iter().map(|t| mean(t)).collect();
    let mz: Vec<f64> = z.iter().map(|t| mean(t)).collect();
    let within: Vec<f64> = y.iter().zip(z).map(|(a, b)| cov(a, b)).collect();
    let r = (cov(&my, &mz) + mean(&within)) / denom;
    Some(r.clamp(-1.0, 1.0))
}

/// Pearson correlation; absent for fewer than 3 points or zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return None;
    }
    let (vx, vy) = (var(x), var(y));
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some((cov(x, y) / (vx * vy).sqrt()).clamp(-1.0, 1.0))
}

/// Area under the ROC curve, ties counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

/// Harrell's C for predicted log-time locations `a` (larger means later event).
///
/// A pair is comparable when the earlier time is an event. Events after
/// `horizon` count as censored at the horizon. Tied locations score one half.
pub fn concordance_index(
    a: &[f64],
    times: &[f64],
    events: &[bool],
    horizon: Option<f64>,
) -> Option<f64> {
    let n = a.len();
    if times.len() != n || events.len() != n {
        return None;
    }
    let h = horizon.unwrap_or(f64::INFINITY);
    let obs: Vec<(f64, bool)> = times
        .iter()
        .zip(events)
        .map(|(&t, &e)| if t > h { (h, false) } else { (t, e) })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..n {
        let (ti, ei) = obs[i];
        if !ei {
            continue;
        }
        for j in 0..n {
            if obs[j].0 > ti {
                den += 1.0;
                num += if a[i] < a[j] {
                    1.0
                } else if a[i] == a[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensitySummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn normal_pdf(x: f64, s: &DensitySummary) -> f64 {
    let z = (x - s.mean) / s.std;
    (-0.5 * z * z).exp() / (s.std * (2.0 * std::f64::consts::PI).sqrt())
}

/// `pdf_top(x) − pdf_bottom(x)` on `grid` for Gaussian summaries.
pub fn difference_density(bottom: &DensitySummary, top: &DensitySummary, grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&x| normal_pdf(x, top) - normal_pdf(x, bottom))
        .collect()
}

/// Evenly spaced grid of `n` points on `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuartileDensity {
    pub bottom_data: DensitySummary,
    pub top_data: DensitySummary,
    pub bottom_twin: DensitySummary,
    pub top_twin: DensitySummary,
    pub grid: Vec<f64>,
    pub data_difference: Vec<f64>,
    pub twin_difference: Vec<f64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Bottom and top quartile cohorts by `stratifier`, compared through Gaussian summaries.
///
/// Inputs are parallel per patient. Patients without a stratifier or
/// observation are dropped. Absent below 8 usable patients or when a cohort
/// has zero spread.
pub fn quartile_difference_density(
    stratifier: &[Option<f64>],
    observed: &[Option<f64>],
    twins: &[Vec<f64>],
    grid: &[f64],
) -> Option<QuartileDensity> {
    let rows: Vec<(f64, f64, &Vec<f64>)> = stratifier
        .iter()
        .zip(observed)
        .zip(twins)
        .filter_map(|((s, o), t)| Some((((*s)?), (*o)?, t)))
        .filter(|(_, _, t)| !t.is_empty())
        .collect();
    if rows.len() < 8 {
        return None;
    }
    let mut sorted: Vec<f64> = rows.iter().map(|r| r.0).collect();
    sorted.sort_by(f64::total_cmp);
    let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
    let summarize = |keep: &dyn Fn(f64) -> bool| -> Option<(DensitySummary, DensitySummary)> {
        let cohort: Vec<_> = rows.iter().filter(|r| keep(r.0)).collect();
        let obs: Vec<f64> = cohort.iter().map(|r| r.1).collect();
        let tw: Vec<Vec<f64>> = cohort.iter().map(|r| r.2.clone()).collect();
        let data = DensitySummary {
            mean: mean(&obs),
            std: var(&obs).sqrt(),
            n: obs.len(),
        };
        let twin = DensitySummary {
            mean: mu_pred(&tw)?,
            std: sigma_pred(&tw)?,
            n: tw.len(),
        };
        (data.std > 0.0 && twin.std > 0.0).then_some((data, twin))
    };
    let (bottom_data, bottom_twin) = summarize(&|s| s <= q1)?;
    let (top_data, top_twin) = summarize(&|s| s >= q3)?;
    Some(QuartileDensity {
        data_difference: difference_density(&bottom_data, &top_data, grid),
        twin_difference: difference_density(&bottom_twin, &top_twin, grid),
        bottom_data,
        top_data,
        bottom_twin,
        top_twin,
        grid: grid.to_vec(),
    })
}

/// Observation paired with twin draws for one patient at one horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedCell {
    pub ids: Vec<String>,
    pub observed: Vec<f64>,
    pub twins: Vec<Vec<f64>>,
}

/// Observed value of `var` in the bin centred on `t` (nearest visit within half a width).
///
/// The baseline visit is never used as a follow-up observation.
pub fn observed_near(record: &PatientRecord, var: usize, t: f64, width: f64) -> Option<f64> {
    record
        .visits
        .iter()
        .skip(1)
        .filter(|v| v.mask[var] && (v.t - t).abs() <= width / 2.0)
        .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
        .map(|v| v.values[var])
}

/// Pairs observations with twins for `var` at horizon index `time`.
///
/// With `change`, both sides are shifted by the observed baseline, and
/// patients without one are dropped.
pub fn paired_cell(
    set: &SampleSet,
    records: &[PatientRecord],
    var: usize,
    time: usize,
    width: f64,
    change: bool,
) -> PairedCell {
    let index: HashMap<&str, usize> = set
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect();
    let t = set.times[time];
    let mut cell = PairedCell {
        ids: Vec::new(),
        observed: Vec::new(),
        twins: Vec::new(),
    };
    for r in records {
        let Some(&p) = index.get(r.id.as_str()) else {
            continue;
        };
        let Some(obs) = observed_near(r, var, t, width) else {
            continue;
        };
        let shift = if change {
            match r.visits.first().and_then(|v| v.value(var)) {
                Some(b) => b,
                None => continue,
            }
        } else {
            0.0
        };
        cell.ids.push(r.id.clone());
        cell.observed.push(obs - shift);
        cell.twins
            .push(set.values(p, time, var).iter().map(|v| v - shift).collect());
    }
    cell
}

/// Pearson r between observed change from baseline and the mean-twin change.
pub fn pearson_obs_vs_meantwin(
    set: &SampleSet,
    records: &[PatientRecord],
    var: usize,
    time: usize,
    width: f64,
) -> Option<f64> {
    let cell = paired_cell(set, records, var, time, width, true);
    let means: Vec<f64> = cell.twins.iter().map(|t| mean(t)).collect();
    pearson(&cell.observed, &means)
}

/// A baseline input whose mask can be forced off.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Longitudinal variable at the baseline visit.
    Baseline(usize),
    Context(usize),
}

impl Feature {
    /// Resolves a name, preferring longitudinal variables.
    pub fn resolve(schema: &Schema, name: &str) -> Option<Self> {
        schema
            .longitudinal_index(name)
            .map(Feature::Baseline)
            .or_else(|| schema.context_index(name).map(Feature::Context))
    }

    /// Copies of `records` with this feature marked unobserved.
    pub fn mask(self, records: &[PatientRecord]) -> Vec<PatientRecord> {
        records
            .iter()
            .cloned()
            .map(|mut r| {
                match self {
                    Feature::Baseline(j) => {
                        if let Some(v) = r.visits.first_mut() {
                            v.mask[j] = false;
                            v.values[j] = f64::NAN;
                        }
                    }
                    Feature::Context(k) => {
                        r.context_mask[k] = false;
                        r.context[k] = f64::NAN;
                    }
                }
                r
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    pub full: Option<f64>,
    pub masked: Option<f64>,
    /// `masked − full`; negative when the feature carried signal.
    pub delta: Option<f64>,
}

/// Change in `pearson_obs_vs_meantwin` when `feature` is hidden from the model.
///
/// Observations, including the baselines used for the change, are never masked.
pub fn input_sensitivity(
    model: &NbmModel,
    records: &[PatientRecord],
    feature: Feature,
    outcome: usize,
    time: usize,
    opts: &GenerateOptions,
    width: f64,
) -> Result<Sensitivity, EvalError> {
    let full = generate(model, records, opts)?;
    let masked = generate(model, &feature.mask(records), opts)?;
    let full = pearson_obs_vs_meantwin(&full, records, outcome, time, width);
    let masked = pearson_obs_vs_meantwin(&masked, records, outcome, time, width);
    Ok(Sensitivity {
        full,
        masked,
        delta: full.zip(masked).map(|(f, m)| m - f),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Width of the time bins centred on each generated horizon.
    pub bin_width: f64,
    /// Events after this time count as censored for the concordance index.
    pub horizon: Option<f64>,
    pub cohort: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bin_width: 3.0,
            horizon: None,
            cohort: "all".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentCell {
    pub variable: String,
    pub time: f64,
    /// Patients with an observation in the bin.
    pub n: usize,
    pub observed_mean: Option<f64>,
    pub observed_std: Option<f64>,
    pub predicted_mean: Option<f64>,
    pub predicted_std: Option<f64>,
    pub pearson_r: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationCell {
    pub a: String,
    pub b: String,
    pub time: f64,
    pub n: usize,
    pub observed: Option<f64>,
    pub predicted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventCell {
    pub outcome: String,
    pub n: usize,
    pub n_events: usize,
    pub concordance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cohort: String,
    pub model_id: String,
    pub bin_width: f64,
    pub moments: Vec<MomentCell>,
    pub correlations: Vec<CorrelationCell>,
    pub events: Vec<EventCell>,
}

/// Builds the report for `set` against the observed `records`.
///
/// `locations[k]` holds the event-time locations of outcome `k`, parallel to `records`.
pub fn evaluate(
    set: &SampleSet,
    records: &[PatientRecord],
    schema: &Schema,
    locations: &[Vec<f64>],
    cfg: &EvalConfig,
) -> EvalReport {
    let w = cfg.bin_width;
    let mut moments = Vec::new();
    let mut correlations = Vec::new();
    for (ti, &t) in set.times.iter().enumerate() {
        for (j, spec) in schema.longitudinal.iter().enumerate() {
            let binary = spec.kind == VarKind::Binary;
            let cell = paired_cell(set, records, j, ti, w, !binary);
            let means: Vec<f64> = cell.twins.iter().map(|t| mean(t)).collect();
            let nonempty = !cell.observed.is_empty();
            moments.push(MomentCell {
                variable: spec.name.clone(),
                time: t,
                n: cell.observed.len(),
                observed_mean: nonempty.then(|| mean(&cell.observed)),
                observed_std: (cell.observed.len() >= 2).then(|| var(&cell.observed).sqrt()),
                predicted_mean: mu_pred(&cell.twins),
                predicted_std: sigma_pred(&cell.twins),
                pearson_r: if binary {
                    None
                } else {
                    pearson(&cell.observed, &means)
                },
                auc: if binary {
                    auc(
                        &means,
                        &cell.observed.iter().map(|&v| v > 0.5).collect::<Vec<_>>(),
                    )
                } else {
                    None
                },
            });
        }
        let continuous: Vec<usize> = (0..schema.n_obs())
            .filter(|&j| schema.longitudinal[j].kind == VarKind::Continuous)
            .collect();
        for (ia, &a) in continuous.iter().enumerate() {
            for &b in &continuous[ia + 1..] {
                let ca = paired_cell(set, records, a, ti, w, true);
                let cb = paired_cell(set, records, b, ti, w, true);
                let in_b: HashMap<&str, usize> = cb
                    .ids
                    .iter()
                    .enumerate()
                    .map(|(i, id)| (id.as_str(), i))
                    .collect();
                let (mut oa, mut ob, mut ta, mut tb) =
                    (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for (i, id) in ca.ids.iter().enumerate() {
                    if let Some(&k) = in_b.get(id.as_str()) {
                        oa.push(ca.observed[i]);
                        ob.push(cb.observed[k]);
                        ta.push(ca.twins[i].clone());
                        tb.push(cb.twins[k].clone());
                    }
                }
                correlations.push(CorrelationCell {
                    a: schema.longitudinal[a].name.clone(),
                    b: schema.longitudinal[b].name.clone(),
                    time: t,
                    n: oa.len(),
                    observed: pearson(&oa, &ob),
                    predicted: rho_pred(&ta, &tb),
                });
            }
        }
    }

    let events = schema
        .tte_outcomes
        .iter()
        .enumerate()
        .filter_map(|(k, name)| {
            let locs = locations.get(k)?;
            let (mut a, mut times, mut ev) = (Vec::new(), Vec::new(), Vec::new());
            for (r, &loc) in records.iter().zip(locs) {
                if let Some(o) = r.tte.get(k).copied().flatten() {
                    a.push(loc);
                    times.push(o.time);
                    ev.push(o.event);
                }
            }
            Some(EventCell {
                outcome: name.clone(),
                n: a.len(),
                n_events: ev.iter().filter(|&&e| e).count(),
                concordance: concordance_index(&a, &times, &ev, cfg.horizon),
            })
        })
        .collect();

    EvalReport {
        cohort: cfg.cohort.clone(),
        model_id: set.model_id.clone(),
        bin_width: w,
        moments,
        correlations,
        events,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One row per cell; absent metrics are empty fields.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(
            w,
            "cohort,kind,variable,variable_b,time,n,observed_mean,observed_std,predicted_mean,predicted_std,pearson_r,auc,observed_corr,predicted_corr,concordance"
        )
        .map_err(io)?;
        let c = &self.cohort;
        for m in &self.moments {
            writeln!(
                w,
                "{c},moment,{},,{},{},{},{},{},{},{},{},,,",
                m.variable,
                m.time,
                m.n,
                opt(m.observed_mean),
                opt(m.observed_std),
                opt(m.predicted_mean),
                opt(m.predicted_std),
                opt(m.pearson_r),
                opt(m.auc)
            )
            .map_err(io)?;
        }
        for x in &self.correlations {
            writeln!(
                w,
                "{c},correlation,{},{},{},{},,,,,,,{},{},",
                x.a,
                x.b,
                x.time,
                x.n,
                opt(x.observed),
                opt(x.predicted)
            )
            .map_err(io)?;
        }
        for e in &self.events {
            writeln!(
                w,
                "{c},event,{},,,{},,,,,,,,,{}",
                e.outcome,
                e.n,
                opt(e.concordance)
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn write_json(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Per-variable twin mean and standard deviation at every horizon for one patient.
///
/// Rows follow the variables, columns the horizons.
pub fn twin_summary(set: &SampleSet, patient: usize) -> Vec<Vec<(f64, f64)>> {
    (0..set.n_vars())
        .map(|j| {
            (0..set.times.len())
                .map(|t| {
                    let v = set.values(patient, t, j);
                    if v.is_empty() {
                        (f64::NAN, f64::NAN)
                    } else {
                        (mean(&v), var(&v).sqrt())
                    }
                })
                .collect()
        })
        .collect()
}

/// Merged out-of-fold predictions.
#[derive(Debug, Clone)]
pub struct CrossValidation {
    pub report: EvalReport,
    pub samples: SampleSet,
    /// Fold of each input record.
    pub folds: Vec<usize>,
    /// Ids each fold model was trained on.
    pub trained_on: Vec<Vec<String>>,
}

/// Trains one model per fold, predicts its held-out patients and evaluates the merged set.
#[allow(clippy::too_many_arguments)]
pub fn cross_validate(
    records: &[PatientRecord],
    schema: &Schema,
    net: &NetConfig,
    train_cfg: &TrainConfig,
    gen: &GenerateOptions,
    eval: &EvalConfig,
    n_folds: usize,
) -> Result<CrossValidation, EvalError> {
    let folds = split_folds(records, n_folds, train_cfg.seed)?;
    let mut patients: Vec<Option<PatientSamples>> = vec![None; records.len()];
    let mut locations = vec![vec![f64::NAN; records.len()]; schema.tte_outcomes.len()];
    let mut trained_on = Vec::with_capacity(n_folds);
    let mut ids = Vec::with_capacity(n_folds);
    for fold in 0..n_folds {
        let held = fold_members(&folds, fold);
        let train_set: Vec<PatientRecord> = records
            .iter()
            .zip(&folds)
            .filter(|(_, &f)| f != fold)
            .map(|(r, _)| r.clone())
            .collect();
        let test_set: Vec<PatientRecord> = held.iter().map(|&i| records[i].clone()).collect();
        let out = train(&train_set, schema, net, train_cfg)
            .map_err(|source| EvalError::Train { fold, source })?;
        let set = generate(&out.model, &test_set, gen)?;
        for (k, loc) in locations.iter_mut().enumerate() {
            for (&i, a) in held.iter().zip(event_locations(&out.model, &test_set, k)?) {
                loc[i] = a;
            }
        }
        for (&i, p) in held.iter().zip(set.patients) {
            patients[i] = Some(p);
        }
        trained_on.push(train_set.iter().map(|r| r.id.clone()).collect());
        ids.push(model_fingerprint(&out.model));
    }
    let samples = SampleSet {
        model_id: ids.join("+"),
        seed: gen.seed,
        mode: gen.mode,
        times: gen.times.clone(),
        n_samples: gen.n_samples,
        variables: schema.longitudinal.iter().map(|v| v.name.clone()).collect(),
        patients: patients
            .into_iter()
            .map(|p| p.expect("every patient is held out once"))
            .collect(),
    };
    let report = evaluate(&samples, records, schema, &locations, eval);
    Ok(CrossValidation {
        report,
        samples,
        folds,
        trained_on,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{VarSpec, Visit};
    use crate::nbm::GenerationMode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mu_pred_examples() {
        assert_eq!(mu_pred(&[vec![0.0, 2.0], vec![3.0, 3.0]]), Some(2.0));
        assert_eq!(mu_pred(&[vec![1.0, 2.0, 6.0]]), Some(3.0));
        assert_eq!(mu_pred(&[vec![7.5; 4], vec![7.5; 4]]), Some(7.5));
        assert_eq!(mu_pred(&[]), None);
    }

    #[test]
    fn sigma_pred_examples() {
        // means {1, 3}, per-patient population variances {1, 1}
        let twins = [vec![0.0, 2.0], vec![2.0, 4.0]];
        assert_eq!(sigma_pred(&twins), Some(2f64.sqrt()));
        assert_eq!(sigma_pred(&[vec![4.0; 3], vec![4.0; 3]]), Some(0.0));
        let constant = [vec![1.0; 2], vec![5.0; 2]];
        assert_eq!(sigma_pred(&constant), Some(2.0));
        assert_eq!(sigma_pred(&[vec![1.0, 2.0]]), None);
    }

    #[test]
    fn rho_pred_examples() {
        // mean pairs (0,0), (2,2); per-patient variances 1, covariance 0
        let y = [vec![-1.0, 1.0, -1.0, 1.0], vec![1.0, 3.0, 1.0, 3.0]];
        let z = [vec![-1.0, -1.0, 1.0, 1.0], vec![1.0, 1.0, 3.0, 3.0]];
        assert_eq!(rho_pred(&y, &z), Some(0.5));
        assert_eq!(rho_pred(&y, &y), Some(1.0));
        assert_eq!(rho_pred(&[vec![1.0; 2], vec![1.0; 2]], &z), None);
    }

    #[test]
    fn rho_pred_independent_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..50).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect()
        };
        let (y, z) = (draw(400), draw(400));
        // 20000 pooled pairs: the standard error is about 1/√20000
        let r = rho_pred(&y, &z).unwrap();
        assert!(r.abs() < 4.0 / 20000f64.sqrt(), "{r}");
    }

    #[test]
    fn pearson_and_auc_examples() {
        let x = [1.0, 2.0, 4.0, 7.0];
        assert!(close(pearson(&x, &x).unwrap(), 1.0, 1e-15));
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(close(pearson(&x, &neg).unwrap(), -1.0, 1e-15));
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), None);
        assert_eq!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]),
            Some(1.0)
        );
        assert_eq!(auc(&[0.5, 0.5], &[false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.2], &[true, true]), None);
    }

    #[test]
    fn concordance_examples() {
        let times = [1.0, 2.0, 3.0, 4.0];
        let events = [true; 4];
        assert_eq!(
            concordance_index(&[0.0, 1.0, 2.0, 3.0], &times, &events, None),
            Some(1.0)
        );
        assert_eq!(
            concordance_index(&[3.0, 2.0, 1.0, 0.0], &times, &events, None),
            Some(0.0)
        );
        assert_eq!(
            concordance_index(&[0.0; 4], &times, &[false; 4], None),
            None
        );
        // events beyond the horizon stop counting as events
        assert_eq!(
            concordance_index(&[1.0, 0.0], &[5.0, 6.0], &[true, true], Some(4.0)),
            None
        );
        // a censored time ahead of an event is not comparable
        assert_eq!(
            concordance_index(&[0.0, 1.0], &[3.0, 2.0], &[true, false], None),
            None
        );
    }

    #[test]
    fn concordance_random_scores_near_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 600;
        let times: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
        let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let c = concordance_index(&a, &times, &events, None).unwrap();
        // about 1.3e5 comparable pairs; the C-statistic SE is about 1/√(3n)
        assert!((c - 0.5).abs() < 4.0 / (3.0 * n as f64).sqrt(), "{c}");
    }

    #[test]
    fn difference_density_crossing() {
        let bottom = DensitySummary {
            mean: 0.0,
            std: 1.0,
            n: 10,
        };
        let top = DensitySummary {
            mean: 1.0,
            std: 1.0,
            n: 10,
        };
        let grid = linear_grid(-3.0, 4.0, 141);
        let d = difference_density(&bottom, &top, &grid);
        for (x, v) in grid.iter().zip(&d) {
            if (x - 0.5).abs() < 1e-12 {
                assert!(v.abs() < 1e-15);
            } else {
                assert_eq!(v.signum(), (x - 0.5).signum(), "at {x}");
            }
        }
    }

    fn quartile_inputs(
        n: usize,
        shift: f64,
    ) -> (Vec<Option<f64>>, Vec<Option<f64>>, Vec<Vec<f64>>) {
        let strat: Vec<Option<f64>> = (0..n).map(|i| Some(i as f64)).collect();
        let obs: Vec<Option<f64>> = (0..n)
            .map(|i| Some(shift * i as f64 + (i % 3) as f64))
            .collect();
        let twins = obs
            .iter()
            .map(|o| vec![o.unwrap() - 0.5, o.unwrap() + 0.5])
            .collect();
        (strat, obs, twins)
    }

    #[test]
    fn quartile_density_examples() {
        let grid = linear_grid(-5.0, 20.0, 51);
        let (s, o, t) = quartile_inputs(16, 0.0);
        let q = quartile_difference_density(&s, &o, &t, &grid).unwrap();
        assert!(
            q.data_difference.iter().all(|v| v.abs() < 1e-12),
            "{:?}",
            q.data_difference
        );

        // twins equal to the data (no spread): the twin difference is the data difference
        let (s, o, _) = quartile_inputs(16, 1.0);
        let same: Vec<Vec<f64>> = o.iter().map(|v| vec![v.unwrap()]).collect();
        let q = quartile_difference_density(&s, &o, &same, &grid).unwrap();
        assert_eq!(q.twin_difference, q.data_difference);

        assert!(quartile_difference_density(&s[..7], &o[..7], &same[..7], &grid).is_none());
    }

    fn pooled_variance(twins: &[Vec<f64>]) -> f64 {
        let all: Vec<f64> = twins.iter().flatten().copied().collect();
        let m = all.iter().sum::<f64>() / all.len() as f64;
        all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64
    }

    fn balanced() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..12, 1usize..8).prop_flat_map(|(p, s)| {
            prop::collection::vec(prop::collection::vec(-50.0f64..50.0, s), p)
        })
    }

    proptest! {
        #[test]
        fn sigma_pred_is_pooled_std(twins in balanced()) {
            let s = sigma_pred(&twins).unwrap();
            prop_assert!((s * s - pooled_variance(&twins)).abs() < 1e-9);
        }

        #[test]
        fn rho_pred_bounded_and_order_invariant(y in balanced(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z: Vec<Vec<f64>> = y.iter().map(|t| t.iter().map(|v| 0.3 * v + rng.random_range(-10.0..10.0)).collect()).collect();
            let r = rho_pred(&y, &z);
            if let Some(r) = r {
                prop_assert!((-1.0..=1.0).contains(&r));
                prop_assert!((rho_pred(&y, &y).unwrap() - 1.0).abs() < 1e-12);
            }
            let (mut ry, mut rz) = (y.clone(), z.clone());
            ry.reverse();
            rz.reverse();
            let r2 = rho_pred(&ry, &rz);
            prop_assert_eq!(r.is_some(), r2.is_some());
            if let (Some(a), Some(b)) = (r, r2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            let (s1, s2) = (sigma_pred(&y).unwrap(), sigma_pred(&ry).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-9);
        }

        #[test]
        fn concordance_in_unit_interval(n in 2usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let t: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let e: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if let Some(c) = concordance_index(&a, &t, &e, None) {
                prop_assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn oracle_moments_match_simulation() {
        // per-patient Gaussian conditionals; σ_pred from exact moments versus
        // from 400 draws per patient
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = 300;
        let mus: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sds: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..1.5)).collect();
        let exact = (var(&mus) + mean(&sds.iter().map(|s| s * s).collect::<Vec<_>>())).sqrt();
        let twins: Vec<Vec<f64>> = mus
            .iter()
            .zip(&sds)
            .map(|(m, s)| {
                (0..400)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m + s * e
                    })
                    .collect()
            })
            .collect();
        let sim = sigma_pred(&twins).unwrap();
        // dominated by the within-patient noise: SE(σ²) ≈ σ²·√(2/n_draws)
        let se = exact * exact * (2.0 / (p * 400) as f64).sqrt();
        assert!(
            (sim * sim - exact * exact).abs() < 4.0 * se,
            "{sim} vs {exact}"
        );
        let exact_mu = mean(&mus);
        let mu = mu_pred(&twins).unwrap();
        assert!((mu - exact_mu).abs() < 4.0 * exact / ((p * 400) as f64).sqrt());
    }

    fn toy_set() -> (SampleSet, Vec<PatientRecord>, Schema) {
        let schema = Schema::new(vec![VarSpec::continuous("y")], vec![], vec!["death".into()]);
        let records: Vec<PatientRecord> = (0..4)
            .map(|i| PatientRecord {
                id: format!("p{i}"),
                context: vec![],
                context_mask: vec![],
                visits: vec![
                    Visit::fully_observed(0.0, vec![i as f64]),
                    Visit::fully_observed(3.2, vec![2.0 * i as f64]),
                ],
                tte: vec![Some(crate::datamodel::TteObservation {
                    time: 1.0 + i as f64,
                    event: i != 3,
                })],
            })
            .collect();
        let set = SampleSet {
            model_id: "m".into(),
            seed: 0,
            mode: GenerationMode::Rollout,
            times: vec![3.0, 9.0],
            n_samples: 2,
            variables: vec!["y".into()],
            patients: (0..4)
                .rev()
                .map(|i| PatientSamples {
                    id: format!("p{i}"),
                    draws: vec![2.0 * i as f64 - 1.0, 2.0 * i as f64 + 1.0, 0.0, 0.0],
                })
                .collect(),
        };
        (set, records, schema)
    }

    #[test]
    fn report_pairs_by_id_and_uses_change_from_baseline() {
        let (set, records, schema) = toy_set();
        let locs = vec![vec![0.0, 1.0, 2.0, 3.0]];
        let report = evaluate(&set, &records, &schema, &locs, &EvalConfig::default());
        let m = &report.moments[0];
        assert_eq!(m.n, 4);
        // observed change i, twin change i ± 1
        assert_eq!(m.observed_mean, Some(1.5));
        assert_eq!(m.predicted_mean, Some(1.5));
        assert!(close(m.pearson_r.unwrap(), 1.0, 1e-12));
        // nothing observed near t = 9
        assert_eq!(report.moments[1].n, 0);
        assert_eq!(report.moments[1].predicted_mean, None);
        assert_eq!(report.events[0].concordance, Some(1.0));

        let dir = tempfile::tempdir().unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        report.write_json(&dir.path().join("r.json")).unwrap();
        let back: EvalReport =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap())
                .unwrap();
        assert_eq!(back, report);
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 1 + 2 + 1);
        let width = csv.lines().next().unwrap().split(',').count();
        assert!(csv.lines().all(|l| l.split(',').count() == width));
    }

    #[test]
    fn all_censored_report_has_no_concordance() {
        let (set, mut records, schema) = toy_set();
        for r in &mut records {
            r.tte[0].as_mut().unwrap().event = false;
        }
        let report = evaluate(
            &set,
            &records,
            &schema,
            &[vec![0.0; 4]],
            &EvalConfig::default(),
        );
        assert_eq!(report.events[0].concordance, None);
        assert_eq!(report.events[0].n_events, 0);
    }

    #[test]
    fn report_is_order_invariant() {
        let (set, records, schema) = toy_set();
        let locs = vec![vec![0.0, 1.0, 2.0, 3.0]];
        let a = evaluate(&set, &records, &schema, &locs, &EvalConfig::default());
        let mut rev = records.clone();
        rev.reverse();
        let rlocs = vec![vec![3.0, 2.0, 1.0, 0.0]];
        let b = evaluate(&set, &rev, &schema, &rlocs, &EvalConfig::default());
        for (x, y) in a.moments.iter().zip(&b.moments) {
            assert_eq!(x.n, y.n);
            for (u, v) in [
                (x.observed_mean, y.observed_mean),
                (x.predicted_std, y.predicted_std),
                (x.pearson_r, y.pearson_r),
            ] {
                assert_eq!(u.is_some(), v.is_some());
                if let (Some(u), Some(v)) = (u, v) {
                    assert!(close(u, v, 1e-12));
                }
            }
        }
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn twin_summary_shape() {
        let (set, _, _) = toy_set();
        let s = twin_summary(&set, 0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 2);
        assert_eq!(s[0][0], (6.0, 1.0));
    }

    #[test]
    fn masking_features() {
        let (_, records, _) = toy_set();
        let m = Feature::Baseline(0).mask(&records);
        assert!(m
            .iter()
            .all(|r| !r.visits[0].mask[0] && r.visits[1].mask[0]));
        let schema = Schema::new(
            vec![VarSpec::continuous("y")],
            vec![VarSpec::continuous("age")],
            vec![],
        );
        assert_eq!(Feature::resolve(&schema, "age"), Some(Feature::Context(0)));
        assert_eq!(Feature::resolve(&schema, "y"), Some(Feature::Baseline(0)));
        assert_eq!(Feature::resolve(&schema, "bmi"), None);
    }
}
