//! Losses, optimizer and the training loop.
//!
//! The total loss is a weighted sum of five terms:
//!
//! * imputer reconstruction (reaches only the imputer),
//! * contrastive divergence on the marginal energy,
//! * precision-weighted squared error of the flow predictor `g`,
//! * consistency between `g(t_fut)` and the composed `g(g(t_cur), t_fut)`,
//! * negative log-likelihood of the event times.

use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    build_triplets, DataError, Normalizer, PatientRecord, Schema, TteObservation, VarSpec, Visit,
};
use crate::diffcore::{
    grad_check, DiffError, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::nbm::{EnergyContext, NbmError};
use crate::networks::{
    is_gate, param_group, zero_fill, NbmModel, NetConfig, NetError, Networks, StepInputs, StepVars,
};
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Nbm(#[from] NbmError),
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({terms}); patients: {patients:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        terms: String,
        patients: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub imputer: f64,
    pub rbm: f64,
    pub mse: f64,
    pub consistency: f64,
    pub event: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            imputer: 1.0,
            rbm: 1.0,
            mse: 1.0,
            consistency: 1.0,
            event: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [
            self.imputer,
            self.rbm,
            self.mse,
            self.consistency,
            self.event,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(TrainError::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(TrainError::Config(
                "at least one loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled weight decay per sub-network. Gates and scales are never decayed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightDecay {
    pub imputer: f64,
    pub flow: f64,
    pub corrector: f64,
    pub wnet: f64,
    pub pnet: f64,
    pub tte: f64,
}

impl Default for WeightDecay {
    fn default() -> Self {
        Self {
            imputer: 0.1,
            flow: 0.1,
            corrector: 0.1,
            wnet: 0.1,
            pnet: 0.1,
            tte: 0.1,
        }
    }
}

impl WeightDecay {
    pub fn uniform(d: f64) -> Self {
        Self {
            imputer: d,
            flow: d,
            corrector: d,
            wnet: d,
            pnet: d,
            tte: d,
        }
    }

    /// Decay for the parameter called `name`.
    pub fn for_param(&self, name: &str) -> f64 {
        if is_gate(name) {
            return 0.0;
        }
        match param_group(name) {
            "imputer" => self.imputer,
            "flow" => self.flow,
            "corrector" => self.corrector,
            "wnet" => self.wnet,
            "pnet" => self.pnet,
            g if g.starts_with("tte") => self.tte,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Patients per batch.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gibbs_steps: usize,
    pub seed: u64,
    /// Share of training patients held out to pick the best epoch.
    pub validation_fraction: f64,
    pub weights: LossWeights,
    pub weight_decay: WeightDecay,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            gibbs_steps: 16,
            seed: 0,
            validation_fraction: 0.1,
            weights: LossWeights::default(),
            weight_decay: WeightDecay::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.gibbs_steps == 0 {
            return Err(TrainError::Config("gibbs_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(TrainError::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config(
                "validation_fraction must lie in [0, 1)".into(),
            ));
        }
        self.weights.validate()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    decay: Vec<f64>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    /// `decay[i]` applies to the `i`-th parameter of `store`.
    pub fn new(store: &ParamStore, lr: f64, decay: Vec<f64>) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            decay,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// `θ ← θ(1 − lr·d) − lr · m̂ / (√v̂ + ε)`, using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).data().to_vec();
            let shrink = 1.0 - self.lr * self.decay[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in store.value_mut(id).data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p = *p * shrink - self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One value per loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms<T> {
    pub imputer: T,
    pub rbm: T,
    pub mse: T,
    pub consistency: T,
    pub event: T,
}

impl LossTerms<f64> {
    fn all_finite(&self) -> bool {
        [
            self.imputer,
            self.rbm,
            self.mse,
            self.consistency,
            self.event,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn describe(&self) -> String {
        format!(
            "imputer={} rbm={} mse={} consistency={} event={}",
            self.imputer, self.rbm, self.mse, self.consistency, self.event
        )
    }
}

/// `(1/(V·N)) Σ_i Σ_j w_i m_ij (recon_ij − x_ij)²`.
///
/// `visit_weights` holds `w_i`; `n_obs` is the longitudinal width `N`.
pub fn imputer_loss(
    tape: &mut Tape,
    recon: Var,
    target: &Tensor,
    mask: &[bool],
    visit_weights: &[f64],
    n_obs: usize,
) -> Result<Var, DiffError> {
    let (v, d) = target.dims2()?;
    let scale = 1.0 / (v * n_obs) as f64;
    let coef: Vec<f64> = (0..v * d)
        .map(|k| {
            if mask[k] {
                visit_weights[k / d] * scale
            } else {
                0.0
            }
        })
        .collect();
    let t = tape.constant(zero_fill(target, mask));
    let diff = tape.sub(recon, t)?;
    let sq = tape.square(diff);
    let c = tape.constant(Tensor::matrix(v, d, coef)?);
    let weighted = tape.mul(sq, c)?;
    Ok(tape.sum_all(weighted))
}

/// Per-visit weights `w_i = V / (P · visits of the owning patient)`; they sum to `V`.
pub fn visit_weights(visits_per_patient: &[usize]) -> Vec<f64> {
    let v: usize = visits_per_patient.iter().sum();
    let p = visits_per_patient.iter().filter(|&&n| n > 0).count();
    visits_per_patient
        .iter()
        .flat_map(|&n| std::iter::repeat_n(v as f64 / (p * n) as f64, n))
        .collect()
}

/// Marginal energy per row, `B × 1`.
pub fn marginal_energy(
    tape: &mut Tape,
    f: Var,
    precision: Var,
    weights: Var,
    y: Var,
    m: usize,
) -> Result<Var, DiffError> {
    let d = tape.sub(y, f)?;
    let sq = tape.square(d);
    let pq = tape.mul(precision, sq)?;
    let quad = tape.sum_cols(pq)?;
    let quad = tape.scale(quad, 0.5);
    let a = tape.batch_vec_mat(d, weights, m)?;
    let lc = tape.log_cosh(a);
    let lc = tape.sum_cols(lc)?;
    tape.sub(quad, lc)
}

/// `mean U(y_data) − mean U(y_model)`; both sample sets enter as constants.
pub fn rbm_loss(
    tape: &mut Tape,
    f: Var,
    precision: Var,
    weights: Var,
    y_data: &Tensor,
    y_model: &Tensor,
    m: usize,
) -> Result<Var, DiffError> {
    let yd = tape.constant(y_data.clone());
    let ym = tape.constant(y_model.clone());
    let pos = marginal_energy(tape, f, precision, weights, yd, m)?;
    let neg = marginal_energy(tape, f, precision, weights, ym, m)?;
    let diff = tape.sub(pos, neg)?;
    Ok(tape.mean_all(diff))
}

/// `mean_b Σ_j m_j P_j (g_j − y_j)²` with `P` held constant.
pub fn featurewise_mse(
    tape: &mut Tape,
    g: Var,
    y: &Tensor,
    mask: &[bool],
    precision: Var,
) -> Result<Var, DiffError> {
    let (b, n) = y.dims2()?;
    let target = tape.constant(zero_fill(y, mask));
    let m = tape.constant(Tensor::matrix(
        b,
        n,
        mask.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
    )?);
    let p = tape.detach(precision);
    let diff = tape.sub(g, target)?;
    let sq = tape.square(diff);
    let w = tape.mul(sq, p)?;
    let w = tape.mul(w, m)?;
    let per_row = tape.sum_cols(w)?;
    Ok(tape.mean_all(per_row))
}

/// `mean_b |g(t_fut) − f*|²`.
pub fn consistency_loss(tape: &mut Tape, g_fut: Var, f_star: Var) -> Result<Var, DiffError> {
    let d = tape.sub(g_fut, f_star)?;
    let sq = tape.square(d);
    let per_row = tape.sum_cols(sq)?;
    Ok(tape.mean_all(per_row))
}

/// An observed or right-censored event time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventObs {
    pub time: f64,
    pub event: bool,
}

/// Mean negative log-likelihood of `log T ~ a + σ·MinGumbel`.
///
/// With `z = (log T − a)/σ`, an event contributes `log σ − z + e^z` and a
/// right-censored time contributes `e^z`. A time censored at zero contributes
/// nothing. `obs` rows that are `None` are skipped.
pub fn event_nll(
    tape: &mut Tape,
    a: Var,
    log_sigma: Var,
    obs: &[Option<EventObs>],
) -> Result<Var, DiffError> {
    let n = obs.len();
    let counted = obs.iter().filter(|o| o.is_some()).count().max(1) as f64;
    let mut log_t = vec![0.0; n];
    let mut is_event = vec![0.0; n];
    let mut w = vec![0.0; n];
    for (i, o) in obs.iter().enumerate() {
        if let Some(o) = o {
            if o.time > 0.0 {
                log_t[i] = o.time.ln();
                is_event[i] = if o.event { 1.0 } else { 0.0 };
                w[i] = 1.0 / counted;
            }
        }
    }
    let lt = tape.constant(Tensor::column(&log_t));
    let ev = tape.constant(Tensor::column(&is_event));
    let wt = tape.constant(Tensor::column(&w));
    let sigma = tape.exp(log_sigma);
    let diff = tape.sub(lt, a)?;
    let z = tape.div(diff, sigma)?;
    let ez = tape.exp(z);
    let density = tape.sub(log_sigma, z)?;
    let density = tape.mul(ev, density)?;
    let term = tape.add(density, ez)?;
    let term = tape.mul(wt, term)?;
    Ok(tape.sum_all(term))
}

/// Everything a batch needs, in normalized units with imputation applied.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    /// One row per triplet.
    pub steps: StepInputs,
    /// Imputed future values.
    pub y_fut: Tensor,
    /// Raw future values (masked entries arbitrary).
    pub y_fut_raw: Tensor,
    pub fut_mask: Vec<bool>,
    /// RNG key per triplet row.
    pub row_keys: Vec<[u64; 3]>,
    /// Zero-filled `[y, c]` per visit, with its mask and weight.
    pub visits: Tensor,
    pub visit_mask: Vec<bool>,
    pub visit_weights: Vec<f64>,
    /// Baseline inputs per patient.
    pub y0: Tensor,
    pub context: Tensor,
    /// `events[k][p]` for outcome `k`, patient `p`.
    pub events: Vec<Vec<Option<EventObs>>>,
    pub ids: Vec<String>,
}

/// Builds the batch tensors for normalized records.
pub fn prepare_batch(
    model: &NbmModel,
    records: &[&PatientRecord],
) -> Result<PreparedBatch, TrainError> {
    let cfg = model.config();
    let (n, c) = (cfg.n_obs, cfg.n_context);
    let d = n + c;

    let counts: Vec<usize> = records.iter().map(|r| r.visits.len()).collect();
    let total: usize = counts.iter().sum();
    let mut x = Vec::with_capacity(total * d);
    let mut mask = Vec::with_capacity(total * d);
    for r in records {
        for v in &r.visits {
            x.extend(&v.values);
            x.extend(&r.context);
            mask.extend(&v.mask);
            mask.extend(&r.context_mask);
        }
    }
    let visits = Tensor::matrix(total, d, x)?;
    let imputed = model.impute(&visits, &mask)?;

    let mut offsets = Vec::with_capacity(records.len());
    let mut acc = 0;
    for &k in &counts {
        offsets.push(acc);
        acc += k;
    }

    let mut y0 = Vec::new();
    let mut ctx = Vec::new();
    let (mut ry0, mut rctx, mut ycur, mut yfut, mut yraw) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut tcur, mut tfut, mut fmask, mut keys) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (p, r) in records.iter().enumerate() {
        let base = imputed.row_slice(offsets[p]);
        y0.extend(&base[..n]);
        ctx.extend(&base[n..]);
        let pid = rng::id_key(&r.id);
        for tr in build_triplets(r) {
            ry0.extend(&base[..n]);
            rctx.extend(&base[n..]);
            ycur.extend(&imputed.row_slice(offsets[p] + tr.current)[..n]);
            yfut.extend(&imputed.row_slice(offsets[p] + tr.future)[..n]);
            let fv = tr.future_visit();
            yraw.extend(&fv.values);
            fmask.extend(&fv.mask);
            tcur.push(tr.t_cur());
            tfut.push(tr.t_fut());
            keys.push([pid, tr.current as u64, tr.future as u64]);
        }
    }
    let b = tcur.len();
    let events = (0..cfg.n_events)
        .map(|k| {
            records
                .iter()
                .map(|r| {
                    r.tte.get(k).copied().flatten().map(|o| EventObs {
                        time: o.time,
                        event: o.event,
                    })
                })
                .collect()
        })
        .collect();
    Ok(PreparedBatch {
        steps: StepInputs {
            y0: Tensor::matrix(b, n, ry0)?,
            context: Tensor::matrix(b, c, rctx)?,
            y_cur: Tensor::matrix(b, n, ycur)?,
            t_cur: tcur,
            t_fut: tfut,
        },
        y_fut: Tensor::matrix(b, n, yfut)?,
        y_fut_raw: Tensor::matrix(b, n, yraw)?,
        fut_mask: fmask,
        row_keys: keys,
        visits,
        visit_mask: mask,
        visit_weights: visit_weights(&counts),
        y0: Tensor::matrix(records.len(), n, y0)?,
        context: Tensor::matrix(records.len(), c, ctx)?,
        events,
        ids: records.iter().map(|r| r.id.clone()).collect(),
    })
}

/// Source of the negative-phase samples.
#[derive(Debug, Clone, Copy)]
pub enum Negatives<'a> {
    /// Precomputed samples, one row per triplet.
    Fixed(&'a Tensor),
    /// Draw with `k` Gibbs steps from the current network outputs.
    Sample { k: usize, seed: u64, epoch: u64 },
}

/// The loss graph of one batch.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    pub total: Var,
    pub terms: LossTerms<Var>,
    pub negatives: Tensor,
}

/// Draws one Gibbs sample per row from the given head values.
pub fn draw_negatives(
    f: &Tensor,
    precision: &Tensor,
    weights: &Tensor,
    m: usize,
    k: usize,
    seed: u64,
    epoch: u64,
    keys: &[[u64; 3]],
) -> Result<Tensor, NbmError> {
    let rows: Vec<Vec<f64>> = (0..keys.len())
        .into_par_iter()
        .map(|i| {
            let ctx = EnergyContext::new(
                f.row_slice(i).to_vec(),
                precision.row_slice(i).to_vec(),
                weights.row_slice(i).to_vec(),
                m,
            )?;
            let key = keys[i];
            let mut r = rng::stream(seed, &[0x6e65, epoch, key[0], key[1], key[2]]);
            ctx.gibbs_sample(k, &mut r)
        })
        .collect::<Result<_, _>>()?;
    Ok(Tensor::matrix(keys.len(), f.cols(), rows.concat()).map_err(NbmError::from)?)
}

/// Records the weighted loss of `batch` on `tape`.
pub fn batch_loss(
    nets: &Networks,
    tape: &mut Tape,
    store: &ParamStore,
    batch: &PreparedBatch,
    weights: &LossWeights,
    negatives: Negatives<'_>,
) -> Result<BatchLoss, TrainError> {
    let cfg = &nets.config;
    let m = cfg.n_hidden;

    let zero = tape.constant(Tensor::scalar(0.0));
    let mut terms = LossTerms {
        imputer: zero,
        rbm: zero,
        mse: zero,
        consistency: zero,
        event: zero,
    };

    let xv = tape.constant(zero_fill(&batch.visits, &batch.visit_mask));
    let recon = nets.imputer.reconstruct(tape, store, xv)?;
    terms.imputer = imputer_loss(
        tape,
        recon,
        &batch.visits,
        &batch.visit_mask,
        &batch.visit_weights,
        cfg.n_obs,
    )?;

    let mut neg = Tensor::zeros(&[0, cfg.n_obs]);
    if batch.steps.rows() > 0 {
        let s = StepVars::new(tape, &batch.steps)?;
        let heads = nets.heads(tape, store, &s)?;
        neg = match negatives {
            Negatives::Fixed(t) => t.clone(),
            Negatives::Sample { k, seed, epoch } => draw_negatives(
                tape.value(heads.f),
                tape.value(heads.precision),
                tape.value(heads.weights),
                m,
                k,
                seed,
                epoch,
                &batch.row_keys,
            )?,
        };
        terms.rbm = rbm_loss(
            tape,
            heads.f,
            heads.precision,
            heads.weights,
            &batch.y_fut,
            &neg,
            m,
        )?;
        let g_fut = nets.g(tape, store, s.y0, s.context, s.t_fut)?;
        terms.mse = featurewise_mse(
            tape,
            g_fut,
            &batch.y_fut_raw,
            &batch.fut_mask,
            heads.precision,
        )?;
        let f_star = nets.mean_f_star(tape, store, &s)?;
        terms.consistency = consistency_loss(tape, g_fut, f_star)?;
    }

    if !nets.tte.is_empty() && !batch.ids.is_empty() {
        let y0 = tape.constant(batch.y0.clone());
        let c = (batch.context.cols() > 0).then(|| tape.constant(batch.context.clone()));
        let mut parts = Vec::new();
        for (k, obs) in batch.events.iter().enumerate() {
            let a = nets.tte_location(tape, store, k, y0, c)?;
            let ls = tape.param(store, nets.tte[k].log_sigma);
            parts.push(event_nll(tape, a, ls, obs)?);
        }
        let mut ev = parts[0];
        for &p in &parts[1..] {
            ev = tape.add(ev, p)?;
        }
        terms.event = ev;
    }

    let pairs = [
        (terms.imputer, weights.imputer),
        (terms.rbm, weights.rbm),
        (terms.mse, weights.mse),
        (terms.consistency, weights.consistency),
        (terms.event, weights.event),
    ];
    let mut total = zero;
    for (v, w) in pairs {
        if w != 0.0 {
            let s = tape.scale(v, w);
            total = tape.add(total, s)?;
        }
    }
    Ok(BatchLoss {
        total,
        terms,
        negatives: neg,
    })
}

fn term_values(tape: &Tape, t: &LossTerms<Var>) -> LossTerms<f64> {
    let v = |x: Var| tape.value(x).data()[0];
    LossTerms {
        imputer: v(t.imputer),
        rbm: v(t.rbm),
        mse: v(t.mse),
        consistency: v(t.consistency),
        event: v(t.event),
    }
}

/// Per-epoch training telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub losses: LossTerms<f64>,
    pub total: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NbmModel,
    pub telemetry: Vec<EpochStats>,
    /// Epoch whose parameters were kept; `None` when no epoch ran.
    pub best_epoch: Option<usize>,
}

/// Squared error of the mean `f` on observed future entries plus the event NLL.
pub fn validation_score(
    model: &NbmModel,
    records: &[&PatientRecord],
    weights: &LossWeights,
) -> Result<f64, TrainError> {
    let batch = prepare_batch(model, records)?;
    let mut tape = Tape::new();
    let mut score = 0.0;
    if batch.steps.rows() > 0 {
        let s = StepVars::new(&mut tape, &batch.steps)?;
        let f = model.nets.mean_f(&mut tape, &model.params, &s)?;
        let fv = tape.value(f);
        let mut sum = 0.0;
        for (&obs, (a, b)) in batch
            .fut_mask
            .iter()
            .zip(fv.data().iter().zip(batch.y_fut_raw.data()))
        {
            if obs {
                sum += (a - b) * (a - b);
            }
        }
        score += sum / batch.steps.rows() as f64;
    }
    if !model.nets.tte.is_empty() && weights.event > 0.0 {
        let y0 = tape.constant(batch.y0.clone());
        let c = (batch.context.cols() > 0).then(|| tape.constant(batch.context.clone()));
        for (k, obs) in batch.events.iter().enumerate() {
            let a = model
                .nets
                .tte_location(&mut tape, &model.params, k, y0, c)?;
            let ls = tape.param(&model.params, model.nets.tte[k].log_sigma);
            let nll = event_nll(&mut tape, a, ls, obs)?;
            score += weights.event * tape.value(nll).data()[0];
        }
    }
    Ok(score)
}

fn check_events(records: &[PatientRecord]) -> Result<(), TrainError> {
    for r in records {
        for o in r.tte.iter().flatten() {
            if o.event && !(o.time > 0.0) {
                return Err(TrainError::Config(format!(
                    "patient {}: an event time must be positive, found {}",
                    r.id, o.time
                )));
            }
        }
    }
    Ok(())
}

/// Fits the normalizer on `records` and trains a fresh model.
pub fn train(
    records: &[PatientRecord],
    schema: &Schema,
    net: &NetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(TrainError::Config("no training records".into()));
    }
    schema.validate()?;
    for r in records {
        r.validate(schema)?;
    }
    check_events(records)?;
    let normalizer = Normalizer::fit(records, schema)?;
    let mut model = NbmModel::new(net, schema.clone(), normalizer, cfg.seed)?;
    let data: Vec<PatientRecord> = records
        .iter()
        .map(|r| model.normalizer.apply_record(r))
        .collect();

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[0x7661]));
    let n_val = (cfg.validation_fraction * data.len() as f64).floor() as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let val: Vec<&PatientRecord> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        return Err(TrainError::Config(
            "validation split leaves no training patients".into(),
        ));
    }

    let decay: Vec<f64> = model
        .params
        .iter()
        .map(|(_, p)| cfg.weight_decay.for_param(&p.name))
        .collect();
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, decay);
    let mut telemetry = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let mut perm = train_idx.clone();
        perm.shuffle(&mut rng::stream(cfg.seed, &[0x7368, epoch as u64]));
        let mut sums = LossTerms::<f64>::default();
        let mut total = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in perm.chunks(cfg.batch_size).enumerate() {
            let recs: Vec<&PatientRecord> = chunk.iter().map(|&i| &data[i]).collect();
            let batch = prepare_batch(&model, &recs)?;
            let mut tape = Tape::new();
            let loss = batch_loss(
                &model.nets,
                &mut tape,
                &model.params,
                &batch,
                &cfg.weights,
                Negatives::Sample {
                    k: cfg.gibbs_steps,
                    seed: cfg.seed,
                    epoch: epoch as u64,
                },
            );
            // a degenerate precision means the parameters have already blown up
            let loss = match loss {
                Err(TrainError::Nbm(e @ NbmError::InvalidPrecision(_))) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: bi,
                        terms: e.to_string(),
                        patients: batch.ids.clone(),
                    })
                }
                other => other?,
            };
            let terms = term_values(&tape, &loss.terms);
            let value = tape.value(loss.total).data()[0];
            if !terms.all_finite() || !value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    terms: terms.describe(),
                    patients: batch.ids.clone(),
                });
            }
            model.params.zero_grad();
            tape.backward_scalar(loss.total, &mut model.params)?;
            opt.step(&mut model.params);
            if let Some((_, p)) = model.params.iter().find(|(_, p)| !p.value.all_finite()) {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: bi,
                    terms: format!(
                        "parameter {} became non-finite; {}",
                        p.name,
                        terms.describe()
                    ),
                    patients: batch.ids.clone(),
                });
            }
            sums.imputer += terms.imputer;
            sums.rbm += terms.rbm;
            sums.mse += terms.mse;
            sums.consistency += terms.consistency;
            sums.event += terms.event;
            total += value;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let losses = LossTerms {
            imputer: sums.imputer / nb,
            rbm: sums.rbm / nb,
            mse: sums.mse / nb,
            consistency: sums.consistency / nb,
            event: sums.event / nb,
        };
        let validation = if val.is_empty() {
            None
        } else {
            Some(validation_score(&model, &val, &cfg.weights)?)
        };
        info!(
            "epoch {epoch}: total {:.5} ({}) validation {:?}",
            total / nb,
            losses.describe(),
            validation
        );
        let score = validation.unwrap_or(0.0);
        let improved = validation.is_none() || best.as_ref().is_none_or(|(s, _, _)| score < *s);
        if improved && score.is_finite() {
            best = Some((score, epoch, model.params.clone()));
        }
        telemetry.push(EpochStats {
            epoch,
            losses,
            total: total / nb,
            validation,
        });
    }

    let best_epoch = best.as_ref().map(|b| b.1);
    if let Some((_, epoch, params)) = best {
        debug!("keeping parameters from epoch {epoch}");
        model.params = params;
    }
    Ok(TrainOutcome {
        model,
        telemetry,
        best_epoch,
    })
}

/// Writes telemetry as CSV, one row per epoch.
pub fn write_telemetry(stats: &[EpochStats], path: &Path) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(
        w,
        "epoch,total,imputer,rbm,mse,consistency,event,validation"
    )
    .map_err(io)?;
    for s in stats {
        let l = &s.losses;
        let v = s.validation.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.epoch, s.total, l.imputer, l.rbm, l.mse, l.consistency, l.event, v
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One line of the gradient suite.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub component: String,
    pub report: GradCheckReport,
}

/// Two patients with N = 2 longitudinal variables, one context variable and
/// one event outcome, giving three triplets. Records are already in model units.
pub fn gradcheck_fixture(
    net: &NetConfig,
    seed: u64,
) -> Result<(NbmModel, Vec<PatientRecord>), TrainError> {
    let schema = Schema::new(
        vec![VarSpec::continuous("a"), VarSpec::continuous("b")],
        vec![VarSpec::continuous("c")],
        vec!["death".into()],
    );
    let cfg = NetConfig {
        n_obs: 2,
        n_context: 1,
        n_events: 1,
        ..net.clone()
    };
    let model = NbmModel::new(&cfg, schema, Normalizer::identity(2, 1), seed)?;
    let records = vec![
        PatientRecord {
            id: "g0".into(),
            context: vec![0.4],
            context_mask: vec![true],
            visits: vec![
                Visit::fully_observed(0.0, vec![0.1, -0.5]),
                Visit::new(1.0, vec![0.3, f64::NAN], vec![true, false]),
                Visit::fully_observed(2.5, vec![-0.2, 0.9]),
            ],
            tte: vec![Some(TteObservation {
                time: 3.0,
                event: true,
            })],
        },
        PatientRecord {
            id: "g1".into(),
            context: vec![-1.0],
            context_mask: vec![true],
            visits: vec![Visit::fully_observed(0.0, vec![1.0, 0.2])],
            tte: vec![Some(TteObservation {
                time: 5.0,
                event: false,
            })],
        },
    ];
    Ok((model, records))
}

/// Finite-difference checks of every network output and every loss term.
///
/// Network outputs are reduced through a fixed projection so that every
/// element contributes. Loss terms use fixed negative samples.
pub fn gradient_suite(
    model: &NbmModel,
    records: &[PatientRecord],
    step: f64,
) -> Result<Vec<SuiteEntry>, TrainError> {
    let refs: Vec<&PatientRecord> = records.iter().collect();
    let batch = prepare_batch(model, &refs)?;
    let nets = &model.nets;
    let mut store = model.params.clone();
    let ids_of = |store: &ParamStore, groups: &[&str], skip: &[&str]| -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| {
                let g = param_group(&p.name);
                groups.iter().any(|x| g.starts_with(x)) && !skip.contains(&g)
            })
            .map(|(id, _)| id)
            .collect()
    };
    let project = |tape: &mut Tape, out: Var| -> Result<Var, DiffError> {
        let (r, c) = tape.value(out).dims2()?;
        let w = Tensor::matrix(
            r,
            c,
            (0..r * c).map(|i| (0.37 * i as f64 + 0.1).sin()).collect(),
        )?;
        let w = tape.constant(w);
        let p = tape.mul(out, w)?;
        Ok(tape.sum_all(p))
    };

    type Head<'a> = Box<dyn Fn(&mut Tape, &ParamStore, &StepVars) -> Result<Var, DiffError> + 'a>;
    let heads: Vec<(&str, &[&str], Head)> = vec![
        (
            "imputer",
            &["imputer"],
            Box::new(|t, s, _| {
                let x = t.constant(zero_fill(&batch.visits, &batch.visit_mask));
                nets.imputer.reconstruct(t, s, x)
            }),
        ),
        (
            "flow g",
            &["flow"],
            Box::new(|t, s, v| nets.g(t, s, v.y0, v.context, v.t_fut)),
        ),
        (
            "mean f",
            &["flow", "corrector"],
            Box::new(|t, s, v| nets.mean_f(t, s, v)),
        ),
        (
            "composed mean f*",
            &["flow"],
            Box::new(|t, s, v| nets.mean_f_star(t, s, v)),
        ),
        (
            "precision P",
            &["pnet"],
            Box::new(|t, s, v| nets.heads(t, s, v).map(|h| h.precision)),
        ),
        (
            "weights W",
            &["wnet"],
            Box::new(|t, s, v| nets.heads(t, s, v).map(|h| h.weights)),
        ),
        (
            "event location a",
            &["tte"],
            Box::new(|t, s, _| {
                let y0 = t.constant(batch.y0.clone());
                let c = t.constant(batch.context.clone());
                nets.tte_location(t, s, 0, y0, Some(c))
            }),
        ),
    ];

    let mut out = Vec::new();
    for (name, groups, head) in &heads {
        if *name == "event location a" && nets.tte.is_empty() {
            continue;
        }
        let ids = ids_of(&store, groups, &[]);
        let report = grad_check(
            |tape: &mut Tape, s: &ParamStore| -> Result<Var, DiffError> {
                let v = StepVars::new(tape, &batch.steps)?;
                let o = head(tape, s, &v)?;
                project(tape, o)
            },
            &mut store,
            &ids,
            step,
        );
        out.push(SuiteEntry {
            component: name.to_string(),
            report,
        });
    }

    let negatives = {
        let mut tape = Tape::new();
        batch_loss(
            nets,
            &mut tape,
            &store,
            &batch,
            &LossWeights::default(),
            Negatives::Sample {
                k: 4,
                seed: 1,
                epoch: 0,
            },
        )?
        .negatives
    };
    let only = |pick: usize| {
        let mut w = [0.0; 5];
        w[pick] = 1.0;
        LossWeights {
            imputer: w[0],
            rbm: w[1],
            mse: w[2],
            consistency: w[3],
            event: w[4],
        }
    };
    let all = ["imputer", "flow", "corrector", "wnet", "pnet", "tte"];
    let losses = [
        ("imputer loss", only(0), &[][..]),
        ("rbm loss", only(1), &[][..]),
        // P is held constant in this term
        ("squared-error loss", only(2), &["pnet"][..]),
        ("consistency loss", only(3), &[][..]),
        ("event loss", only(4), &[][..]),
        (
            "total loss without squared error",
            LossWeights {
                mse: 0.0,
                ..LossWeights::default()
            },
            &[][..],
        ),
    ];
    for (name, w, skip) in losses {
        if w.event > 0.0 && w.rbm == 0.0 && nets.tte.is_empty() {
            continue;
        }
        let ids = ids_of(&store, &all, skip);
        let report = grad_check(
            |tape: &mut Tape, s: &ParamStore| {
                batch_loss(nets, tape, s, &batch, &w, Negatives::Fixed(&negatives)).map(|l| l.total)
            },
            &mut store,
            &ids,
            step,
        );
        out.push(SuiteEntry {
            component: name.to_string(),
            report,
        });
    }
    Ok(out)
}
