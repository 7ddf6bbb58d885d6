//! Reverse-mode tape over dense 2-D arrays.
//!
//! Every operation evaluates eagerly and records how to push gradients back
//! to its inputs. Parameters are referenced from a [`ParamStore`] rather than
//! copied, and each parameter maps to a single node per tape so that shared
//! weights accumulate their gradient in one place.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::array::{matmul, matmul_nt, matmul_tn_acc};
use super::{Array, Gradients, ParamId, ParamStore};
use crate::error::{MatrError, Result};

/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Norms below this are treated as zero by [`Tape::cosine_cost`].
pub const ZERO_NORM: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    CosineCost {
        t: Var,
        q: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        t_norm: Vec<f64>,
        q_norm: Vec<f64>,
    },
    /// Scalar-valued op whose local gradients were computed during forward.
    ScalarFn {
        inputs: Vec<Var>,
        local: Vec<Vec<f64>>,
    },
}

struct Node {
    /// `None` for parameter nodes; their value lives in the store.
    value: Option<Array>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
    grads: Vec<Option<Vec<f64>>>,
}

impl<'p> Tape<'p> {
    /// Evaluation tape: dropout is the identity.
    pub fn eval(params: &'p ParamStore) -> Self {
        Self::with_mode(params, Mode::Eval, 0)
    }

    /// Training tape; dropout masks are drawn from a generator seeded with `seed`.
    pub fn train(params: &'p ParamStore, seed: u64) -> Self {
        Self::with_mode(params, Mode::Train, seed)
    }

    pub fn with_mode(params: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            grads: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(a), _) => a,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input or differentiable leaf.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(MatrError::shape(op, format!("expected a 2-D array, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(MatrError::shape(
                "matmul",
                format!("[{m}, {k}] x [{k2}, {n}]"),
            ));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(MatrError::shape(
                "matmul_nt",
                format!("[{m}, {k}] x [{n}, {k2}]^T"),
            ));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MatrError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let out: Vec<f64> = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Array::from_parts(shape, out), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` array.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(MatrError::shape(
                "add_row",
                format!("[{m}, {n}] + row {:?}", self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Array::from_parts(vec![m, n], out), Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|x| x * s).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::from_parts(shape, out), Op::Scale(a, s), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let out = va.data().iter().map(|x| f(*x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::from_parts(shape, out), op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.cols();
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Array::from_parts(shape, out), Op::SoftmaxRows(a), rg)
    }

    /// Normalizes each row to zero mean / unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(MatrError::shape(
                "layer_norm",
                format!(
                    "input [{m}, {n}] with gain {:?} and bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Array::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(MatrError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let vx = self.value(x);
        let out = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = vx.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Array::from_parts(shape, out), Op::Dropout { x, mask }, rg))
    }

    /// Width-3 temporal convolution with zero padding and stride 1.
    ///
    /// `x` is `[L, c_in]`, `w` is `[3, c_in, c_out]`, `b` has `c_out` entries.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (l, cin) = self.dims2(x, "conv1d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[0] != 3 || ws[1] != cin || self.value(b).len() != ws[2] {
            return Err(MatrError::shape(
                "conv1d",
                format!(
                    "input [{l}, {cin}], weight {ws:?}, bias {:?}",
                    self.shape(b)
                ),
            ));
        }
        let cout = ws[2];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = Vec::with_capacity(l * cout);
        for _ in 0..l {
            out.extend_from_slice(bd);
        }
        for k in 0..3 {
            let wk = &wd[k * cin * cout..(k + 1) * cin * cout];
            // output t reads input t + k - 1
            let (t0, t1) = conv_range(l, k);
            if t0 >= t1 {
                continue;
            }
            let src = &xd[(t0 + k - 1) * cin..(t1 + k - 1) * cin];
            let part = matmul(src, wk, t1 - t0, cin, cout);
            for (o, p) in out[t0 * cout..t1 * cout].iter_mut().zip(&part) {
                *o += p;
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Array::from_parts(vec![l, cout], out), Op::Conv1d { x, w, b }, rg))
    }

    /// Concatenates 2-D arrays along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(MatrError::shape(
                "concat",
                format!("{} parts along axis {axis}", parts.len()),
            ));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let out = if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(MatrError::shape("concat", format!("axis 0 with {dims:?}")));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Array::from_parts(vec![rows, c0], data)
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(MatrError::shape("concat", format!("axis 1 with {dims:?}")));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for r in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Array::from_parts(vec![r0, cols], data)
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Rows `start..end` of a 2-D array.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_rows")?;
        if start >= end || end > m {
            return Err(MatrError::shape(
                "slice_rows",
                format!("rows {start}..{end} of [{m}, {n}]"),
            ));
        }
        if start == 0 && end == m {
            return Ok(x);
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Array::from_parts(vec![end - start, n], data),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Columns `start..end` of a 2-D array.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_cols")?;
        if start >= end || end > n {
            return Err(MatrError::shape(
                "slice_cols",
                format!("cols {start}..{end} of [{m}, {n}]"),
            ));
        }
        if start == 0 && end == n {
            return Ok(x);
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            data.extend_from_slice(&src.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Array::from_parts(vec![m, end - start], data),
            Op::SliceCols { x, start },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(s), Op::Mean(x), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Result<Var> {
        let mut local = Vec::with_capacity(terms.len());
        let mut value = 0.0;
        for &(w, v) in terms {
            if !self.value(v).is_scalar() {
                return Err(MatrError::shape(
                    "weighted_sum",
                    format!("term has shape {:?}", self.shape(v)),
                ));
            }
            value += w * self.value(v).item();
            local.push(vec![w]);
        }
        let inputs = terms.iter().map(|t| t.1).collect();
        Ok(self.scalar_fn(inputs, value, local))
    }

    /// Cosine-distance matrix `1 - cos(t_i, q_j)` between the rows of `t` and `q`.
    ///
    /// Rows with (near-)zero norm have similarity 0 to everything and receive
    /// no gradient.
    pub fn cosine_cost(&mut self, t: Var, q: Var) -> Result<Var> {
        let (m, d) = self.dims2(t, "cosine_cost")?;
        let (n, d2) = self.dims2(q, "cosine_cost")?;
        if d != d2 {
            return Err(MatrError::shape(
                "cosine_cost",
                format!("target [{m}, {d}] vs query [{n}, {d2}]"),
            ));
        }
        let (u, t_norm) = unit_rows(self.value(t).data(), d);
        let (v, q_norm) = unit_rows(self.value(q).data(), d);
        let sim = matmul_nt(&u, &v, m, d, n);
        let cost = sim.iter().map(|s| 1.0 - s).collect();
        let rg = self.rg(t) || self.rg(q);
        Ok(self.push(
            Array::from_parts(vec![m, n], cost),
            Op::CosineCost {
                t,
                q,
                u,
                v,
                t_norm,
                q_norm,
            },
            rg,
        ))
    }

    /// Records a scalar op whose partial derivatives w.r.t. each input (flattened,
    /// same length as the input) are already known.
    pub fn scalar_fn(&mut self, inputs: Vec<Var>, value: f64, local: Vec<Vec<f64>>) -> Var {
        debug_assert_eq!(inputs.len(), local.len());
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Array::scalar(value), Op::ScalarFn { inputs, local }, rg)
    }

    /// Runs reverse-mode differentiation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if !self.value(loss).is_scalar() {
            return Err(MatrError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`; zeros if `v` was unreachable.
    pub fn grad(&self, v: Var) -> Array {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Array::from_parts(shape, g.clone()),
            None => Array::zeros(&shape),
        }
    }

    /// Adds `scale * dL/dparam` for every parameter used on this tape.
    pub fn accumulate_param_grads(&self, into: &mut Gradients, scale: f64) {
        for (pid, var) in self.param_vars.iter().enumerate() {
            let Some(var) = var else { continue };
            if let Some(Some(g)) = self.grads.get(var.0) {
                let dst = into.get_mut(ParamId(pid));
                for (d, s) in dst.data_mut().iter_mut().zip(g) {
                    *d += scale * s;
                }
            }
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let da = matmul_nt(g, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let buf = self.buf(grads, *b);
                    matmul_tn_acc(buf, self.value(*a).data(), g, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[0];
                if self.rg(*a) {
                    let da = matmul(g, self.value(*b).data(), m, n, k);
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    // db[n,k] = g^T[n,m] * a[m,k]
                    let buf = self.buf(grads, *b);
                    matmul_tn_acc(buf, g, self.value(*a).data(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g);
                if self.rg(*row) {
                    let n = self.value(*row).len();
                    let buf = self.buf(grads, *row);
                    for chunk in g.chunks(n) {
                        for (d, s) in buf.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid(a) => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(out.data())
                    .map(|(gi, y)| gi * y * (1.0 - y))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut da = vec![0.0; g.len()];
                for ((dr, gr), yr) in da.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - dot);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let gv = self.value(*gain).data();
                if self.rg(*gain) {
                    let buf = self.buf(grads, *gain);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            buf[c] += gr[c] * hr[c];
                        }
                    }
                }
                if self.rg(*bias) {
                    let buf = self.buf(grads, *bias);
                    for gr in g.chunks(n) {
                        for c in 0..n {
                            buf[c] += gr[c];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let nf = n as f64;
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..n {
                            let dh = gr[c] * gv[c];
                            dx[r * n + c] = is * (dh - sum_dh / nf - hr[c] * sum_dh_h / nf);
                        }
                    }
                    self.acc(grads, *x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.acc(grads, *x, &dx);
            }
            Op::Conv1d { x, w, b } => {
                let (l, cin) = (self.shape(*x)[0], self.shape(*x)[1]);
                let cout = out.cols();
                if self.rg(*b) {
                    let buf = self.buf(grads, *b);
                    for gr in g.chunks(cout) {
                        for (d, s) in buf.iter_mut().zip(gr) {
                            *d += s;
                        }
                    }
                }
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                if self.rg(*w) {
                    let buf = self.buf(grads, *w);
                    for k in 0..3 {
                        let (t0, t1) = conv_range(l, k);
                        if t0 >= t1 {
                            continue;
                        }
                        let src = &xd[(t0 + k - 1) * cin..(t1 + k - 1) * cin];
                        let gk = &g[t0 * cout..t1 * cout];
                        let wk = &mut buf[k * cin * cout..(k + 1) * cin * cout];
                        matmul_tn_acc(wk, src, gk, t1 - t0, cin, cout);
                    }
                }
                if self.rg(*x) {
                    let buf = self.buf(grads, *x);
                    for k in 0..3 {
                        let (t0, t1) = conv_range(l, k);
                        if t0 >= t1 {
                            continue;
                        }
                        let wk = &wd[k * cin * cout..(k + 1) * cin * cout];
                        let gk = &g[t0 * cout..t1 * cout];
                        let part = matmul_nt(gk, wk, t1 - t0, cout, cin);
                        let dst = &mut buf[(t0 + k - 1) * cin..(t1 + k - 1) * cin];
                        for (d, s) in dst.iter_mut().zip(&part) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        self.acc(grads, p, &g[off..off + len]);
                        off += len;
                    }
                } else {
                    let total = out.cols();
                    let mut col = 0;
                    for &p in parts {
                        let (rows, cols) = (self.shape(p)[0], self.shape(p)[1]);
                        if self.rg(p) {
                            let buf = self.buf(grads, p);
                            for r in 0..rows {
                                let src = &g[r * total + col..r * total + col + cols];
                                for (d, s) in buf[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        col += cols;
                    }
                }
            }
            Op::SliceRows { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
                if !self.rg(*x) => {}
            Op::SliceRows { x, start } => {
                let n = out.cols();
                let buf = self.buf(grads, *x);
                for (d, s) in buf[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.shape(*x)[1];
                let w = out.cols();
                let buf = self.buf(grads, *x);
                for (r, gr) in g.chunks(w).enumerate() {
                    for (d, s) in buf[r * n + start..r * n + start + w].iter_mut().zip(gr) {
                        *d += s;
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let buf = self.buf(grads, *x);
                buf.iter_mut().take(len).for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let s = g[0] / len as f64;
                let buf = self.buf(grads, *x);
                buf.iter_mut().for_each(|d| *d += s);
            }
            Op::CosineCost {
                t,
                q,
                u,
                v,
                t_norm,
                q_norm,
            } => {
                let (m, d) = (self.shape(*t)[0], self.shape(*t)[1]);
                let n = self.shape(*q)[0];
                // dS = -dC
                let ds: Vec<f64> = g.iter().map(|x| -x).collect();
                if self.rg(*t) {
                    let du = matmul(&ds, v, m, n, d);
                    let dt = unit_rows_backward(&du, u, t_norm, d);
                    self.acc(grads, *t, &dt);
                }
                if self.rg(*q) {
                    let mut dv = vec![0.0; n * d];
                    matmul_tn_acc(&mut dv, &ds, u, m, n, d);
                    let dq = unit_rows_backward(&dv, v, q_norm, d);
                    self.acc(grads, *q, &dq);
                }
            }
            Op::ScalarFn { inputs, local } => {
                for (&inp, lg) in inputs.iter().zip(local) {
                    if self.rg(inp) {
                        let buf = self.buf(grads, inp);
                        for (d, s) in buf.iter_mut().zip(lg) {
                            *d += g[0] * s;
                        }
                    }
                }
            }
        }
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let len = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(d, s)| *d += s),
            slot @ None => *slot = Some(g.to_vec()),
        }
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

/// Output rows `t0..t1` that read a valid input row for kernel tap `k`.
fn conv_range(l: usize, k: usize) -> (usize, usize) {
    match k {
        0 => (1, l),
        1 => (0, l),
        _ => (0, l.saturating_sub(1)),
    }
}

fn unit_rows(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut u = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in u.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < ZERO_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
            norms.push(0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
    }
    (u, norms)
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows.
fn unit_rows_backward(du: &[f64], u: &[f64], norms: &[f64], d: usize) -> Vec<f64> {
    let mut dx = vec![0.0; du.len()];
    for (r, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        let dur = &du[r * d..(r + 1) * d];
        let ur = &u[r * d..(r + 1) * d];
        let proj: f64 = dur.iter().zip(ur).map(|(a, b)| a * b).sum();
        for c in 0..d {
            dx[r * d + c] = (dur[c] - proj * ur[c]) / n;
        }
    }
    dx
}
