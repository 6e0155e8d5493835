use std::f64::consts::LN_2;

use super::{DiffError, ParamId, ParamStore, Tensor};

/// LayerNorm variance regularizer.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Arcsinh,
    Tanh,
    LogCosh,
    Exp,
    Log,
    Log1p,
    Softplus,
    Abs,
    Square,
    Neg,
}

impl UnaryKind {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Arcsinh => x.asinh(),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::LogCosh => log_cosh(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Log1p => x.ln_1p(),
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Square => x * x,
            UnaryKind::Neg => -x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Arcsinh => 1.0 / (1.0 + x * x).sqrt(),
            UnaryKind::Tanh => 1.0 - y * y,
            UnaryKind::LogCosh => x.tanh(),
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Log1p => 1.0 / (1.0 + x),
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Neg => -1.0,
        }
    }
}

/// `log(cosh(x))` without overflow.
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    Binary(BinaryKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(UnaryKind, Var),
    MatMul(Var, Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    SliceCols { input: Var, start: usize },
    SumAll(Var),
    SumCols(Var),
    RepeatEach { input: Var, times: usize },
    BatchVecMat { vec: Var, mat: Var, m: usize },
    Select { mask: Vec<bool>, on: Var, off: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Records a forward computation so it can be differentiated in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize), DiffError> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(DiffError::ShapeMismatch {
            op,
            left: vec![a.0, a.1],
            right: vec![b.0, b.1],
        }),
    }
}

#[inline]
fn bidx(shape: (usize, usize), i: usize, j: usize) -> usize {
    let r = if shape.0 == 1 { 0 } else { i };
    let c = if shape.1 == 1 { 0 } else { j };
    r * shape.1 + c
}

/// Sums `g` (shape `out`) down to `target` by collapsing broadcast axes.
fn reduce_to(g: &Tensor, out: (usize, usize), target: (usize, usize)) -> Tensor {
    if out == target {
        return g.clone();
    }
    let mut acc = Tensor::zeros(&[target.0, target.1]);
    let gd = g.data();
    let ad = acc.data_mut();
    for i in 0..out.0 {
        for j in 0..out.1 {
            ad[bidx(target, i, j)] += gd[i * out.1 + j];
        }
    }
    acc
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node, DiffError> {
        self.nodes.get(v.0).ok_or(DiffError::NotRecorded {
            index: v.0,
            len: self.nodes.len(),
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), DiffError> {
        self.node(v)?.value.dims2()
    }

    /// Records a constant. Gradients never flow out of constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Stop-gradient barrier: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds a trainable parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id.index()) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        if self.param_vars.len() <= id.index() {
            self.param_vars.resize(id.index() + 1, None);
        }
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let sa = self.dims(a)?;
        let sb = self.dims(b)?;
        let (r, c) = broadcast_shape(name, sa, sb)?;
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = ad[bidx(sa, i, j)];
                let y = bd[bidx(sb, i, j)];
                out.push(match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => x / y,
                });
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    /// Elementwise sum with row/column broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x * k);
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.map(|x| x + k);
        self.push(value, Op::AddScalar(a))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let value = self.nodes[a.0].value.map(|x| kind.apply(x));
        self.push(value, Op::Unary(kind, a))
    }

    pub fn arcsinh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Arcsinh, a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn log_cosh(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::LogCosh, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log, a)
    }

    pub fn ln_1p(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Log1p, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }

    /// `(r × k) · (k × c)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (r, k) = self.dims(a)?;
        let (k2, c) = self.dims(b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: vec![r, k],
                right: vec![k2, c],
            });
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let orow = &mut out[i * c..(i + 1) * c];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * c..(p + 1) * c];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Row-wise `(x − mean) / sqrt(var + ε)` with population variance and no affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(a)?;
        if c == 0 {
            return Err(DiffError::Empty { op: "layer_norm" });
        }
        let x = self.nodes[a.0].value.data();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::LayerNorm { input: a, inv_std }))
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::Empty { op: "concat_cols" });
        };
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, 0],
                    right: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.nodes[p.0].value.data();
                out.extend_from_slice(&d[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::Concat(parts.to_vec())))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(a)?;
        if start > end || end > c {
            return Err(DiffError::ShapeMismatch {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, end],
            });
        }
        let w = end - start;
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        let value = Tensor::new(vec![r, w], out)?;
        Ok(self.push(value, Op::SliceCols { input: a, start }))
    }

    /// Sum of every element, as a `1 × 1` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row sum: `r × c → r × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let (r, c) = self.dims(a)?;
        let d = self.nodes[a.0].value.data();
        let out: Vec<f64> = (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect();
        let value = Tensor::new(vec![r, 1], out)?;
        Ok(self.push(value, Op::SumCols(a)))
    }

    /// `out[b, n·times + k] = x[b, n]`.
    pub fn repeat_each(&mut self, a: Var, times: usize) -> Result<Var, DiffError> {
        let (r, c) = self.dims(a)?;
        let d = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(r * c * times);
        for &x in d {
            out.extend(std::iter::repeat_n(x, times));
        }
        let value = Tensor::new(vec![r, c * times], out)?;
        Ok(self.push(value, Op::RepeatEach { input: a, times }))
    }

    /// Per-row `vᵀ W` where row `b` of `mat` holds a row-major `n × m` matrix:
    /// `out[b, j] = Σ_n vec[b, n] · mat[b, n·m + j]`.
    pub fn batch_vec_mat(&mut self, vec: Var, mat: Var, m: usize) -> Result<Var, DiffError> {
        let (r, n) = self.dims(vec)?;
        let (r2, nm) = self.dims(mat)?;
        if (r != r2 && r2 != 1) || nm != n * m {
            return Err(DiffError::ShapeMismatch {
                op: "batch_vec_mat",
                left: vec![r, n],
                right: vec![r2, nm],
            });
        }
        let vd = self.nodes[vec.0].value.data();
        let md = self.nodes[mat.0].value.data();
        let mut out = vec![0.0; r * m];
        for b in 0..r {
            let mrow = if r2 == 1 { 0 } else { b };
            for i in 0..n {
                let x = vd[b * n + i];
                let base = mrow * nm + i * m;
                for j in 0..m {
                    out[b * m + j] += x * md[base + j];
                }
            }
        }
        let value = Tensor::new(vec![r, m], out)?;
        Ok(self.push(value, Op::BatchVecMat { vec, mat, m }))
    }

    /// `mask ? on : off`, elementwise. Values are copied, never blended.
    pub fn select(&mut self, mask: &[bool], on: Var, off: Var) -> Result<Var, DiffError> {
        let sa = self.dims(on)?;
        let sb = self.dims(off)?;
        if sa != sb || mask.len() != sa.0 * sa.1 {
            return Err(DiffError::ShapeMismatch {
                op: "select",
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        let a = self.nodes[on.0].value.data();
        let b = self.nodes[off.0].value.data();
        let out: Vec<f64> = mask
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Tensor::new(vec![sa.0, sa.1], out)?;
        Ok(self.push(
            value,
            Op::Select {
                mask: mask.to_vec(),
                on,
                off,
            },
        ))
    }

    /// Reverse sweep from `output` seeded with `seed`; parameter gradients are
    /// accumulated into `store`.
    pub fn backward(
        &self,
        output: Var,
        seed: &Tensor,
        store: &mut ParamStore,
    ) -> Result<Gradients, DiffError> {
        let grads = self.gradients(output, seed)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(*id, g);
            }
        }
        Ok(grads)
    }

    /// Backward from a `1 × 1` output with unit seed.
    pub fn backward_scalar(
        &self,
        output: Var,
        store: &mut ParamStore,
    ) -> Result<Gradients, DiffError> {
        self.backward(output, &Tensor::scalar(1.0), store)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn gradients(&self, output: Var, seed: &Tensor) -> Result<Gradients, DiffError> {
        let out = self.node(output)?;
        if out.value.shape() != seed.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "backward",
                left: out.value.shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        let out_dims = node.value.dims2()?;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let sa = va.dims2()?;
                let sb = vb.dims2()?;
                let (r, c) = out_dims;
                let gd = g.data();
                match kind {
                    BinaryKind::Add => {
                        accumulate(&mut grads[a.0], reduce_to(g, out_dims, sa));
                        accumulate(&mut grads[b.0], reduce_to(g, out_dims, sb));
                    }
                    BinaryKind::Sub => {
                        accumulate(&mut grads[a.0], reduce_to(g, out_dims, sa));
                        let neg = g.map(|x| -x);
                        accumulate(&mut grads[b.0], reduce_to(&neg, out_dims, sb));
                    }
                    BinaryKind::Mul | BinaryKind::Div => {
                        let ad = va.data();
                        let bd = vb.data();
                        let mut ga = Vec::with_capacity(r * c);
                        let mut gb = Vec::with_capacity(r * c);
                        for i in 0..r {
                            for j in 0..c {
                                let x = ad[bidx(sa, i, j)];
                                let y = bd[bidx(sb, i, j)];
                                let go = gd[i * c + j];
                                if *kind == BinaryKind::Mul {
                                    ga.push(go * y);
                                    gb.push(go * x);
                                } else {
                                    ga.push(go / y);
                                    gb.push(-go * x / (y * y));
                                }
                            }
                        }
                        let ga = Tensor::new(vec![r, c], ga)?;
                        let gb = Tensor::new(vec![r, c], gb)?;
                        accumulate(&mut grads[a.0], reduce_to(&ga, out_dims, sa));
                        accumulate(&mut grads[b.0], reduce_to(&gb, out_dims, sb));
                    }
                }
            }
            Op::Scale(a, k) => accumulate(&mut grads[a.0], g.map(|x| x * k)),
            Op::AddScalar(a) => accumulate(&mut grads[a.0], g.clone()),
            Op::Unary(kind, a) => {
                let x = self.nodes[a.0].value.data();
                let y = node.value.data();
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(go, (&xi, &yi))| go * kind.derivative(xi, yi))
                    .collect();
                accumulate(&mut grads[a.0], Tensor::new(g.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let (r, k) = va.dims2()?;
                let (_, c) = vb.dims2()?;
                let (ad, bd, gd) = (va.data(), vb.data(), g.data());
                let mut ga = vec![0.0; r * k];
                let mut gb = vec![0.0; k * c];
                for i in 0..r {
                    let grow = &gd[i * c..(i + 1) * c];
                    for p in 0..k {
                        let brow = &bd[p * c..(p + 1) * c];
                        ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let x = ad[i * k + p];
                        if x != 0.0 {
                            for (o, go) in gb[p * c..(p + 1) * c].iter_mut().zip(grow) {
                                *o += x * go;
                            }
                        }
                    }
                }
                accumulate(&mut grads[a.0], Tensor::new(vec![r, k], ga)?);
                accumulate(&mut grads[b.0], Tensor::new(vec![k, c], gb)?);
            }
            Op::LayerNorm { input, inv_std } => {
                let (r, c) = out_dims;
                let y = node.value.data();
                let gd = g.data();
                let mut gx = vec![0.0; r * c];
                let n = c as f64;
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                accumulate(&mut grads[input.0], Tensor::new(vec![r, c], gx)?);
            }
            Op::Concat(parts) => {
                let (r, total) = out_dims;
                let gd = g.data();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut part = Vec::with_capacity(r * w);
                    for i in 0..r {
                        part.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(&mut grads[p.0], Tensor::new(vec![r, w], part)?);
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let (r, c) = self.nodes[input.0].value.dims2()?;
                let w = out_dims.1;
                let mut gx = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    gx.row_slice_mut(i)[*start..*start + w].copy_from_slice(g.row_slice(i));
                }
                accumulate(&mut grads[input.0], gx);
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let n = self.nodes[a.0].value.len();
                accumulate(&mut grads[a.0], Tensor::new(shape, vec![g.data()[0]; n])?);
            }
            Op::SumCols(a) => {
                let (r, c) = self.nodes[a.0].value.dims2()?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend(std::iter::repeat_n(g.data()[i], c));
                }
                accumulate(&mut grads[a.0], Tensor::new(vec![r, c], data)?);
            }
            Op::RepeatEach { input, times } => {
                let (r, c) = self.nodes[input.0].value.dims2()?;
                let data: Vec<f64> = g.data().chunks(*times).map(|ch| ch.iter().sum()).collect();
                accumulate(&mut grads[input.0], Tensor::new(vec![r, c], data)?);
            }
            Op::BatchVecMat { vec, mat, m } => {
                let m = *m;
                let vv = &self.nodes[vec.0].value;
                let mv = &self.nodes[mat.0].value;
                let (r, n) = vv.dims2()?;
                let (r2, nm) = mv.dims2()?;
                let (vd, md, gd) = (vv.data(), mv.data(), g.data());
                let mut gv = vec![0.0; r * n];
                let mut gm = vec![0.0; r2 * nm];
                for b in 0..r {
                    let mrow = if r2 == 1 { 0 } else { b };
                    let grow = &gd[b * m..(b + 1) * m];
                    for i in 0..n {
                        let base = mrow * nm + i * m;
                        let x = vd[b * n + i];
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += grow[j] * md[base + j];
                            gm[base + j] += x * grow[j];
                        }
                        gv[b * n + i] = acc;
                    }
                }
                accumulate(&mut grads[vec.0], Tensor::new(vec![r, n], gv)?);
                accumulate(&mut grads[mat.0], Tensor::new(vec![r2, nm], gm)?);
            }
            Op::Select { mask, on, off } => {
                let shape = g.shape().to_vec();
                let (ga, gb): (Vec<f64>, Vec<f64>) = mask
                    .iter()
                    .zip(g.data())
                    .map(|(&m, &x)| if m { (x, 0.0) } else { (0.0, x) })
                    .unzip();
                accumulate(&mut grads[on.0], Tensor::new(shape.clone(), ga)?);
                accumulate(&mut grads[off.0], Tensor::new(shape, gb)?);
            }
        }
        Ok(())
    }
}
