//! Networks that map the conditioning information `x` to the parameters of the
//! Boltzmann machine: the imputer, the flow predictor `g`, the corrector `q`,
//! the coupling weights `W`, the precision `P`, and the time-to-event head.
//!
//! Everything operates on row batches: one row per prediction step.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{Normalizer, Schema};
use crate::diffcore::{DiffError, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Normalization of the `1/√(output dim)` factor applied to `w(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WScale {
    /// `1/√(N·M)`
    #[default]
    Total,
    /// `1/√M`
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub n_obs: usize,
    pub n_hidden: usize,
    pub n_context: usize,
    pub imputer_embed_dim: usize,
    pub flow_depth: usize,
    pub corrector_layers: usize,
    pub wnet_layers: usize,
    pub pnet_layers: usize,
    pub tte_residual_layers: usize,
    /// One time-to-event head per outcome.
    pub n_events: usize,
    pub w_scale: WScale,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            n_obs: 1,
            n_hidden: 8,
            n_context: 0,
            imputer_embed_dim: 16,
            flow_depth: 3,
            corrector_layers: 1,
            wnet_layers: 1,
            pnet_layers: 1,
            tte_residual_layers: 1,
            n_events: 0,
            w_scale: WScale::Total,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let positive = [
            ("n_obs", self.n_obs),
            ("n_hidden", self.n_hidden),
            ("imputer_embed_dim", self.imputer_embed_dim),
            ("flow_depth", self.flow_depth),
            ("corrector_layers", self.corrector_layers),
            ("wnet_layers", self.wnet_layers),
            ("pnet_layers", self.pnet_layers),
            ("tte_residual_layers", self.tte_residual_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(NetError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Width of `x = [y, c]`.
    pub fn input_dim(&self) -> usize {
        self.n_obs + self.n_context
    }

    fn w_factor(&self) -> f64 {
        match self.w_scale {
            WScale::Total => 1.0 / ((self.n_obs * self.n_hidden) as f64).sqrt(),
            WScale::Hidden => 1.0 / (self.n_hidden as f64).sqrt(),
        }
    }
}

/// Parameter names ending in one of these are gates or scales, not weights.
pub const GATE_SUFFIXES: [&str; 4] = ["log_s", "lambda", "beta", "log_sigma"];

/// Sub-network a parameter belongs to, read from its name prefix.
pub fn param_group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn is_gate(name: &str) -> bool {
    name.rsplit('.')
        .next()
        .is_some_and(|s| GATE_SUFFIXES.contains(&s))
}

/// `LayerNorm(x)/√dim(x)` applied row-wise.
pub fn norm(tape: &mut Tape, x: Var) -> Result<Var, DiffError> {
    let (_, d) = tape.value(x).dims2()?;
    let ln = tape.layer_norm(x)?;
    Ok(tape.scale(ln, 1.0 / (d as f64).sqrt()))
}

fn normal_init(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Affine layer `x W + b` with `W` stored `fan_in × fan_out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = normal_init(rng, fan_in * fan_out, 1.0 / (fan_in as f64).sqrt());
        Self::with_weight(
            store,
            name,
            Tensor::matrix(fan_in, fan_out, w).expect("sized"),
        )
    }

    fn with_weight(store: &mut ParamStore, name: &str, weight: Tensor) -> Self {
        let out = weight.cols();
        Self {
            weight: store.register(format!("{name}.weight"), weight),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[1, out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }

    /// `Linear(Norm(x))`
    pub fn forward_normed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, DiffError> {
        let n = norm(tape, x)?;
        self.forward(tape, store, n)
    }
}

fn concat_context(tape: &mut Tape, z: Var, c: Option<Var>) -> Result<Var, DiffError> {
    match c {
        Some(c) => tape.concat_cols(&[z, c]),
        None => Ok(z),
    }
}

/// `exp(−|λ|·Δt)`, one row per step.
fn decay_gate(
    tape: &mut Tape,
    store: &ParamStore,
    lambda: ParamId,
    dt: Var,
) -> Result<Var, DiffError> {
    let l = tape.param(store, lambda);
    let l = tape.abs(l);
    let a = tape.mul(dt, l)?;
    let a = tape.neg(a);
    Ok(tape.exp(a))
}

/// Auto-encoder imputer with two `arcsinh(Linear(Norm(·)))` layers on each side.
#[derive(Debug, Clone)]
pub struct Imputer {
    pub encoder: Vec<Linear>,
    pub decoder: Vec<Linear>,
}

impl Imputer {
    fn new(store: &mut ParamStore, dim: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self {
            encoder: vec![
                Linear::new(store, "imputer.enc0", dim, embed, rng),
                Linear::new(store, "imputer.enc1", embed, embed, rng),
            ],
            decoder: vec![
                Linear::new(store, "imputer.dec0", embed, embed, rng),
                Linear::new(store, "imputer.dec1", embed, dim, rng),
            ],
        }
    }

    /// `d(e(x))` for a zero-filled input.
    pub fn reconstruct(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
    ) -> Result<Var, DiffError> {
        let mut h = x;
        for layer in self.encoder.iter().chain(&self.decoder) {
            let z = layer.forward_normed(tape, store, h)?;
            h = tape.arcsinh(z);
        }
        Ok(h)
    }

    /// Observed entries pass through unchanged; missing ones come from the
    /// decoder. The result is detached.
    pub fn impute(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &Tensor,
        mask: &[bool],
    ) -> Result<Var, DiffError> {
        let filled = zero_fill(x, mask);
        let input = tape.constant(filled);
        let recon = self.reconstruct(tape, store, input)?;
        let out = tape.select(mask, input, recon)?;
        Ok(tape.detach(out))
    }
}

/// Copy of `x` with unobserved entries set to zero.
pub fn zero_fill(x: &Tensor, mask: &[bool]) -> Tensor {
    let mut out = x.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    out
}

/// Stack of flow blocks `z ← θ(z + t·Linear[Norm([z, c])])` with
/// `θ(u) = s ⊙ arcsinh(u / s)`.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub blocks: Vec<Linear>,
    pub log_s: ParamId,
}

impl FlowNet {
    fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let blocks = (0..cfg.flow_depth)
            .map(|l| {
                Linear::new(
                    store,
                    &format!("flow.block{l}"),
                    cfg.input_dim(),
                    cfg.n_obs,
                    rng,
                )
            })
            .collect();
        let log_s = store.register("flow.log_s", Tensor::zeros(&[1, cfg.n_obs]));
        Self { blocks, log_s }
    }

    fn theta(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var, DiffError> {
        let log_s = tape.param(store, self.log_s);
        let s = tape.exp(log_s);
        let scaled = tape.div(u, s)?;
        let a = tape.arcsinh(scaled);
        tape.mul(a, s)
    }

    /// `g(y0, c, t)`; `t` is a `B × 1` column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        c: Option<Var>,
        t: Var,
    ) -> Result<Var, DiffError> {
        let mut z = y0;
        for block in &self.blocks {
            let zc = concat_context(tape, z, c)?;
            let v = block.forward_normed(tape, store, zc)?;
            let tv = tape.mul(t, v)?;
            let u = tape.add(z, tv)?;
            z = self.theta(tape, store, u)?;
        }
        Ok(z)
    }
}

/// Linear corrector `q` applied to the residual at the current time.
#[derive(Debug, Clone)]
pub struct Corrector {
    pub layers: Vec<Linear>,
    pub lambda: ParamId,
}

impl Corrector {
    /// The composed map starts at `−I`, so that `f` initially reproduces the
    /// current observation when `Δt = 0`.
    fn new(store: &mut ParamStore, cfg: &NetConfig) -> Self {
        let n = cfg.n_obs;
        let layers = (0..cfg.corrector_layers)
            .map(|l| {
                let mut w = Tensor::identity(n);
                if l == 0 {
                    w = w.map(|v| -v);
                }
                Linear::with_weight(store, &format!("corrector.layer{l}"), w)
            })
            .collect();
        let lambda = store.register("corrector.lambda", Tensor::filled(&[1, n], 0.1));
        Self { layers, lambda }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        residual: Var,
    ) -> Result<Var, DiffError> {
        let mut h = residual;
        for layer in &self.layers {
            h = layer.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// `w(x)`: a stack of `Linear(Norm(·))` layers emitting `N·M` values, plus the row gate.
#[derive(Debug, Clone)]
pub struct WeightNet {
    pub layers: Vec<Linear>,
    pub lambda: ParamId,
}

impl WeightNet {
    fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let out = cfg.n_obs * cfg.n_hidden;
        let layers = (0..cfg.wnet_layers)
            .map(|l| {
                let fan_in = if l == 0 { cfg.input_dim() } else { out };
                Linear::new(store, &format!("wnet.layer{l}"), fan_in, out, rng)
            })
            .collect();
        let lambda = store.register("wnet.lambda", Tensor::filled(&[1, cfg.n_obs], 0.1));
        Self { layers, lambda }
    }
}

/// `p(x)`: a stack of `Linear(Norm(·))` layers emitting `N` values, plus `β` and the gate.
#[derive(Debug, Clone)]
pub struct PrecisionNet {
    pub layers: Vec<Linear>,
    pub lambda: ParamId,
    pub beta: ParamId,
}

impl PrecisionNet {
    fn new(store: &mut ParamStore, cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let layers = (0..cfg.pnet_layers)
            .map(|l| {
                let fan_in = if l == 0 { cfg.input_dim() } else { cfg.n_obs };
                Linear::new(store, &format!("pnet.layer{l}"), fan_in, cfg.n_obs, rng)
            })
            .collect();
        let lambda = store.register("pnet.lambda", Tensor::filled(&[1, cfg.n_obs], 0.1));
        let beta = store.register("pnet.beta", Tensor::zeros(&[1, cfg.n_obs]));
        Self {
            layers,
            lambda,
            beta,
        }
    }
}

fn stack(layers: &[Linear], tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
    let mut h = x;
    for layer in layers {
        h = layer.forward_normed(tape, store, h)?;
    }
    Ok(h)
}

/// Log event time `log T = a(x) + σ·ε` with `ε` standard minimum-Gumbel.
#[derive(Debug, Clone)]
pub struct TteHead {
    pub residual: Vec<Linear>,
    pub out: Linear,
    pub log_sigma: ParamId,
}

impl TteHead {
    fn new(store: &mut ParamStore, cfg: &NetConfig, k: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.input_dim();
        let residual = (0..cfg.tte_residual_layers)
            .map(|l| Linear::new(store, &format!("tte{k}.res{l}"), d, d, rng))
            .collect();
        let out = Linear::new(store, &format!("tte{k}.out"), d, 1, rng);
        let log_sigma = store.register(format!("tte{k}.log_sigma"), Tensor::zeros(&[1, 1]));
        Self {
            residual,
            out,
            log_sigma,
        }
    }

    /// Location `a(x)`, one row per input.
    pub fn location(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let mut r = x;
        for layer in &self.residual {
            let z = layer.forward_normed(tape, store, r)?;
            let z = tape.arcsinh(z);
            r = tape.add(r, z)?;
        }
        self.out.forward_normed(tape, store, r)
    }

    pub fn sigma(&self, store: &ParamStore) -> f64 {
        store.value(self.log_sigma).data()[0].exp()
    }
}

/// Imputed inputs for a batch of prediction steps.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Baseline values, `B × N`.
    pub y0: Tensor,
    /// Context, `B × C`.
    pub context: Tensor,
    /// Values at the current time, `B × N`.
    pub y_cur: Tensor,
    pub t_cur: Vec<f64>,
    pub t_fut: Vec<f64>,
}

impl StepInputs {
    pub fn rows(&self) -> usize {
        self.t_cur.len()
    }
}

/// Step inputs placed on a tape.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub y0: Var,
    pub context: Option<Var>,
    pub y_cur: Var,
    pub t_cur: Var,
    pub t_fut: Var,
    pub dt: Var,
}

impl StepVars {
    pub fn new(tape: &mut Tape, inputs: &StepInputs) -> Result<Self, DiffError> {
        let y0 = tape.constant(inputs.y0.clone());
        let context = (inputs.context.cols() > 0).then(|| tape.constant(inputs.context.clone()));
        let y_cur = tape.constant(inputs.y_cur.clone());
        let t_cur = tape.constant(Tensor::column(&inputs.t_cur));
        let t_fut = tape.constant(Tensor::column(&inputs.t_fut));
        let dt = tape.sub(t_fut, t_cur)?;
        Ok(Self {
            y0,
            context,
            y_cur,
            t_cur,
            t_fut,
            dt,
        })
    }
}

/// The energy parameters for a batch of steps.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    /// Mean `f`, `B × N`.
    pub f: Var,
    /// Diagonal precision `P`, `B × N`.
    pub precision: Var,
    /// Coupling `W`, `B × (N·M)` row-major.
    pub weights: Var,
}

/// Parameter handles for every sub-network. The values live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Networks {
    pub config: NetConfig,
    pub imputer: Imputer,
    pub flow: FlowNet,
    pub corrector: Corrector,
    pub wnet: WeightNet,
    pub pnet: PrecisionNet,
    pub tte: Vec<TteHead>,
}

impl Networks {
    /// Registers all parameters in a fixed declaration order.
    pub fn new(config: &NetConfig, store: &mut ParamStore, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = rng::stream(seed, &[0x1417]);
        let imputer = Imputer::new(
            store,
            config.input_dim(),
            config.imputer_embed_dim,
            &mut rng,
        );
        let flow = FlowNet::new(store, config, &mut rng);
        let corrector = Corrector::new(store, config);
        let wnet = WeightNet::new(store, config, &mut rng);
        let pnet = PrecisionNet::new(store, config, &mut rng);
        let tte = (0..config.n_events)
            .map(|k| TteHead::new(store, config, k, &mut rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            imputer,
            flow,
            corrector,
            wnet,
            pnet,
            tte,
        })
    }

    pub fn g(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        c: Option<Var>,
        t: Var,
    ) -> Result<Var, DiffError> {
        self.flow.forward(tape, store, y0, c, t)
    }

    /// `f = g(t_fut) + exp(−|λ|Δt) ⊙ q(g(t_cur) − y_cur)`.
    pub fn mean_f(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &StepVars,
    ) -> Result<Var, DiffError> {
        let g_fut = self.g(tape, store, s.y0, s.context, s.t_fut)?;
        let g_cur = self.g(tape, store, s.y0, s.context, s.t_cur)?;
        let resid = tape.sub(g_cur, s.y_cur)?;
        let corr = self.corrector.forward(tape, store, resid)?;
        let gate = decay_gate(tape, store, self.corrector.lambda, s.dt)?;
        let corr = tape.mul(gate, corr)?;
        tape.add(g_fut, corr)
    }

    /// `f* = g([g(t_cur), c], t_fut)`.
    pub fn mean_f_star(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &StepVars,
    ) -> Result<Var, DiffError> {
        let g_cur = self.g(tape, store, s.y0, s.context, s.t_cur)?;
        self.g(tape, store, g_cur, s.context, s.t_fut)
    }

    /// Raw `w(x)` before the time gate, `B × (N·M)`.
    pub fn w_raw(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, DiffError> {
        let h = stack(&self.wnet.layers, tape, store, x)?;
        Ok(tape.scale(h, self.config.w_factor()))
    }

    /// `W = exp(−|λ|Δt)` (per row of `W`) `⊙ w(x)`.
    pub fn weights_w(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dt: Var,
    ) -> Result<Var, DiffError> {
        let w = self.w_raw(tape, store, x)?;
        let gate = decay_gate(tape, store, self.wnet.lambda, dt)?;
        let gate = tape.repeat_each(gate, self.config.n_hidden)?;
        tape.mul(gate, w)
    }

    /// `P = exp[β − log(1 + (1 − e^{−|λ|Δt}) e^{p(x)})]`.
    pub fn precision_p(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        dt: Var,
    ) -> Result<Var, DiffError> {
        let p = stack(&self.pnet.layers, tape, store, x)?;
        let gate = decay_gate(tape, store, self.pnet.lambda, dt)?;
        let neg = tape.neg(gate);
        let one_minus = tape.add_scalar(neg, 1.0);
        let ep = tape.exp(p);
        let prod = tape.mul(one_minus, ep)?;
        let log_term = tape.ln_1p(prod);
        let beta = tape.param(store, self.pnet.beta);
        let e = tape.sub(beta, log_term)?;
        Ok(tape.exp(e))
    }

    pub fn heads(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        s: &StepVars,
    ) -> Result<Heads, DiffError> {
        let f = self.mean_f(tape, store, s)?;
        let x = concat_context(tape, s.y_cur, s.context)?;
        let precision = self.precision_p(tape, store, x, s.dt)?;
        let weights = self.weights_w(tape, store, x, s.dt)?;
        Ok(Heads {
            f,
            precision,
            weights,
        })
    }

    /// Event-time location for outcome `k` from baseline inputs.
    pub fn tte_location(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        k: usize,
        y0: Var,
        c: Option<Var>,
    ) -> Result<Var, DiffError> {
        let x = concat_context(tape, y0, c)?;
        self.tte[k].location(tape, store, x)
    }
}

/// Plain-value copies of the energy parameters for a batch of steps.
#[derive(Debug, Clone)]
pub struct HeadValues {
    pub f: Tensor,
    pub precision: Tensor,
    pub weights: Tensor,
}

/// A trained or freshly initialized model together with the data transform
/// it was fit with.
#[derive(Debug, Clone)]
pub struct NbmModel {
    pub schema: Schema,
    pub normalizer: Normalizer,
    pub nets: Networks,
    pub params: ParamStore,
}

impl NbmModel {
    pub fn new(
        config: &NetConfig,
        schema: Schema,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self, NetError> {
        if config.n_obs != schema.n_obs()
            || config.n_context != schema.n_context()
            || config.n_events != schema.tte_outcomes.len()
        {
            return Err(NetError::Config(format!(
                "network dims (N={}, C={}, events={}) do not match the schema (N={}, C={}, events={})",
                config.n_obs,
                config.n_context,
                config.n_events,
                schema.n_obs(),
                schema.n_context(),
                schema.tte_outcomes.len()
            )));
        }
        let mut params = ParamStore::new();
        let nets = Networks::new(config, &mut params, seed)?;
        Ok(Self {
            schema,
            normalizer,
            nets,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.nets.config
    }

    /// Imputes rows of `x = [y, c]` (normalized units).
    pub fn impute(&self, x: &Tensor, mask: &[bool]) -> Result<Tensor, DiffError> {
        let mut tape = Tape::new();
        let v = self.nets.imputer.impute(&mut tape, &self.params, x, mask)?;
        Ok(tape.value(v).clone())
    }

    pub fn head_values(&self, inputs: &StepInputs) -> Result<HeadValues, DiffError> {
        let mut tape = Tape::new();
        let s = StepVars::new(&mut tape, inputs)?;
        let h = self.nets.heads(&mut tape, &self.params, &s)?;
        Ok(HeadValues {
            f: tape.value(h.f).clone(),
            precision: tape.value(h.precision).clone(),
            weights: tape.value(h.weights).clone(),
        })
    }

    /// `a(x)` for outcome `k`, one value per row of the baseline inputs.
    pub fn tte_location(
        &self,
        k: usize,
        y0: &Tensor,
        context: &Tensor,
    ) -> Result<Vec<f64>, DiffError> {
        let mut tape = Tape::new();
        let y = tape.constant(y0.clone());
        let c = (context.cols() > 0).then(|| tape.constant(context.clone()));
        let a = self.nets.tte_location(&mut tape, &self.params, k, y, c)?;
        Ok(tape.value(a).data().to_vec())
    }
}
