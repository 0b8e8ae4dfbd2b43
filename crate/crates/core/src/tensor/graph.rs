use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::ops::{self, PoolBook, Rulebook, NO_NEIGHBOR};
use super::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softmax { input: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Sum { input: Var, axis: Option<usize> },
    Mean { input: Var, axis: Option<usize> },
    LayerNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    GatherRows { input: Var, indices: Vec<usize> },
    Reshape(Var),
    SparseConv { input: Var, weight: Var, bias: Var, book: Arc<Rulebook>, wt: Vec<f64> },
    MaxPool { input: Var, argmax: Vec<u32> },
    SegmentMean { input: Var, offsets: Vec<usize> },
    Focal { logits: Var, targets: Vec<usize>, gamma: f64, probs: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::SparseConv { .. } => "sparse_conv",
            Op::MaxPool { .. } => "max_pool",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Focal { .. } => "focal_loss",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// A graph is single-owner; independent graphs may be built on separate
/// threads and their gradients reduced by the caller in a fixed order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, Var>,
    named_order: Vec<(String, Var)>,
    first_nonfinite: Option<(usize, &'static str)>,
    clamped: usize,
}

/// Splits a shape around `axis` into (outer, axis extent, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

const FOCAL_CLAMP: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Number of probabilities clamped at 1e-12 inside focal-loss nodes.
    pub fn clamp_count(&self) -> usize {
        self.clamped
    }

    /// Fails if any recorded value so far is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            None => Ok(()),
            Some((node, op)) => Err(Error::NonFinite(format!("node {node} ({op})"))),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Registers a named leaf. Names must be unique within a graph.
    pub fn named_leaf(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate leaf name `{name}`")));
        }
        let v = self.push(value, Op::Leaf, requires_grad);
        self.names.insert(name.to_string(), v);
        self.named_order.push((name.to_string(), v));
        Ok(v)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.names.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}`")))?
            .clone();
        self.named_leaf(name, t, true)
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        Tensor {
            shape: self.shape(a).to_vec(),
            data,
        }
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul: {:?} x {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![0.0; n * m];
        ops::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = src[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds the vector `b` (length m) to every row of the `n×m` matrix `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, m) = self.matrix_dims("add_row", a)?;
        if self.shape(b) != [m] {
            return Err(Error::Shape(format!(
                "add_row: {:?} + row {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let bv = self.value(b).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data.chunks_mut(m) {
            for (x, y) in row.iter_mut().zip(&bv) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::AddRow(a, b), rg))
    }

    /// `x·W + b` for a row-batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x * s);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.unary(a, |x| x + s);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.unary(a, |x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::exp);
        let rg = self.rg(&[a]);
        self.push(t, Op::Exp(a), rg)
    }

    /// Natural log; non-positive inputs produce a non-finite value which
    /// [`Graph::check_finite`] reports.
    pub fn log(&mut self, a: Var) -> Var {
        let t = self.unary(a, f64::ln);
        let rg = self.rg(&[a]);
        self.push(t, Op::Log(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax: axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[idx(l)] - max).exp();
                    out[idx(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[idx(l)] /= sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input: a, axis }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat: axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {base:?} vs {s:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    fn reduce(&self, a: Var, axis: Option<usize>) -> Result<Tensor> {
        let t = self.value(a);
        match axis {
            None => Ok(Tensor::scalar(t.data().iter().sum())),
            Some(ax) => {
                let shape = t.shape();
                if ax >= shape.len() {
                    return Err(Error::Shape(format!("reduce: axis {ax} for {shape:?}")));
                }
                let (outer, len, inner) = axis_split(shape, ax);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += t.data()[(o * len + l) * inner + i];
                        }
                    }
                }
                let mut s = shape.to_vec();
                s.remove(ax);
                Tensor::new(s, out)
            }
        }
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let t = self.reduce(a, axis)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sum { input: a, axis }, rg))
    }

    /// Mean over an axis (or all entries). A zero-length axis yields zeros.
    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let mut t = self.reduce(a, axis)?;
        let n = match axis {
            None => self.value(a).len(),
            Some(ax) => self.shape(a)[ax],
        };
        if n > 0 {
            t.data.iter_mut().for_each(|v| *v /= n as f64);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Mean { input: a, axis }, rg))
    }

    /// Normalises over the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on a scalar".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: input {shape:?}, gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let src = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let x = &src[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (x[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("gather on a scalar".into()));
        }
        let row: usize = shape[1..].iter().product();
        if let Some(bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Shape(format!("gather index {bad} out of {shape:?}")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut s = shape;
        s[0] = indices.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Gather/scatter convolution over explicit active sites.
    ///
    /// `input` is `(n_in × cin)`, `weight` is `(cout, cin, kh, kw)` with
    /// `kh·kw == book.kernel`, `bias` is `(cout)`. The output has exactly
    /// `book.n_out` rows.
    pub fn sparse_conv(&mut self, input: Var, weight: Var, bias: Var, book: Arc<Rulebook>) -> Result<Var> {
        let (n_in, cin) = self.matrix_dims("sparse_conv input", input)?;
        let ws = self.shape(weight).to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] * ws[3] != book.kernel {
            return Err(Error::Shape(format!(
                "sparse_conv: input {:?} with weight {ws:?} (kernel taps {})",
                self.shape(input),
                book.kernel
            )));
        }
        if n_in != book.n_in {
            return Err(Error::Shape(format!(
                "sparse_conv: rulebook expects {} input rows, got {n_in}",
                book.n_in
            )));
        }
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(Error::Shape(format!(
                "sparse_conv: bias {:?} for {cout} output channels",
                self.shape(bias)
            )));
        }
        let wt = ops::weights_to_tap_major(self.value(weight).data(), cout, cin, book.kernel);
        let out = ops::sparse_conv_forward(
            self.value(input).data(),
            &wt,
            self.value(bias).data(),
            &book,
            cin,
            cout,
        );
        let rg = self.rg(&[input, weight, bias]);
        let t = Tensor::new(vec![book.n_out, cout], out)?;
        Ok(self.push(
            t,
            Op::SparseConv {
                input,
                weight,
                bias,
                book,
                wt,
            },
            rg,
        ))
    }

    /// Channelwise max over the groups of `book`.
    pub fn max_pool(&mut self, input: Var, book: &PoolBook) -> Result<Var> {
        let (n, c) = self.matrix_dims("max_pool", input)?;
        if n != book.n_in {
            return Err(Error::Shape(format!(
                "max_pool: book expects {} rows, got {n}",
                book.n_in
            )));
        }
        let (out, argmax) = ops::max_pool_forward(self.value(input).data(), book, c);
        let rg = self.rg(&[input]);
        let t = Tensor::new(vec![book.n_out(), c], out)?;
        Ok(self.push(t, Op::MaxPool { input, argmax }, rg))
    }

    /// Mean of consecutive row segments: segment `s` covers rows
    /// `offsets[s]..offsets[s + 1]`. Empty segments give zero rows.
    pub fn segment_mean(&mut self, input: Var, offsets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("segment_mean", input)?;
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&n)
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Shape(format!(
                "segment_mean: offsets do not partition {n} rows"
            )));
        }
        let src = self.value(input).data();
        let segs = offsets.len() - 1;
        let mut out = vec![0.0; segs * c];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if hi == lo {
                continue;
            }
            let inv = 1.0 / (hi - lo) as f64;
            let orow = &mut out[s * c..(s + 1) * c];
            for r in lo..hi {
                for (o, x) in orow.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                    *o += x;
                }
            }
            orow.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Tensor::new(vec![segs, c], out)?,
            Op::SegmentMean {
                input,
                offsets: offsets.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row focal loss `-(1 - p_t)^γ · ln p_t` of softmax(`logits`).
    ///
    /// `p_t` below 1e-12 is clamped; the number of clamps is tallied in
    /// [`Graph::clamp_count`].
    pub fn focal_loss(&mut self, logits: Var, targets: &[usize], gamma: f64) -> Result<Var> {
        let (n, k) = self.matrix_dims("focal_loss", logits)?;
        if targets.len() != n {
            return Err(Error::Shape(format!(
                "focal_loss: {n} rows but {} targets",
                targets.len()
            )));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Invalid(format!("focal_loss: target {t} ≥ {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut out = vec![0.0; n];
        let mut clamped = 0;
        for r in 0..n {
            let z = &src[r * k..(r + 1) * k];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (z[j] - max).exp();
                probs[r * k + j] = e;
                sum += e;
            }
            for j in 0..k {
                probs[r * k + j] /= sum;
            }
            let mut pt = probs[r * k + targets[r]];
            if pt < FOCAL_CLAMP {
                pt = FOCAL_CLAMP;
                clamped += 1;
            }
            out[r] = -(1.0 - pt).powf(gamma) * pt.ln();
        }
        self.clamped += clamped;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(vec![n], out)?,
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                gamma,
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            named: self.named_order.clone(),
            requires: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.acc(grads, *a, |da| ops::matmul_nt_acc(g, bv, da, n, k, m));
                self.acc(grads, *b, |db| ops::matmul_tn_acc(av, g, db, n, k, m));
            }
            Op::Transpose(a) => {
                let (n, m) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.acc(grads, *a, |da| {
                    for i in 0..n {
                        for j in 0..m {
                            da[i * m + j] += g[j * n + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                let m = self.shape(*b)[0];
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| {
                    for row in g.chunks(m) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, g)),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / av[i];
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                self.acc(grads, *input, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                d[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.acc(grads, *v, |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*input), *axis);
                let len = node.value.shape()[*axis];
                self.acc(grads, *input, |d| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut d[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                });
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let is_mean = matches!(node.op, Op::Mean { .. });
                let shape = self.shape(*input).to_vec();
                match axis {
                    None => {
                        let n = shape.iter().product::<usize>().max(1) as f64;
                        let s = if is_mean { g[0] / n } else { g[0] };
                        self.acc(grads, *input, |d| d.iter_mut().for_each(|x| *x += s));
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(&shape, *ax);
                        let scale = if is_mean && len > 0 { 1.0 / len as f64 } else { 1.0 };
                        self.acc(grads, *input, |d| {
                            for o in 0..outer {
                                for l in 0..len {
                                    for i in 0..inner {
                                        d[(o * len + l) * inner + i] += scale * g[o * inner + i];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gv = self.value(*gamma).data();
                self.acc(grads, *gamma, |dg| {
                    for (r, row) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            dg[j] += row[j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |db| {
                    for row in g.chunks(d) {
                        add_into(db, row);
                    }
                });
                self.acc(grads, *input, |dx| {
                    for (r, row) in g.chunks(d).enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = (0..d).map(|j| row[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dhh = dh.iter().zip(h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                        }
                    }
                });
            }
            Op::GatherRows { input, indices } => {
                let row: usize = self.shape(*input)[1..].iter().product();
                self.acc(grads, *input, |d| {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut d[i * row..(i + 1) * row], &g[k * row..(k + 1) * row]);
                    }
                });
            }
            Op::SparseConv {
                input,
                weight,
                bias,
                book,
                wt,
            } => {
                let cin = self.shape(*input)[1];
                let cout = self.shape(*weight)[0];
                let want_in = self.requires_grad(*input);
                let want_w = self.requires_grad(*weight);
                let (d_in, d_wt, d_b) = ops::sparse_conv_backward(
                    self.value(*input).data(),
                    wt,
                    g,
                    book,
                    cin,
                    cout,
                    want_in,
                    want_w,
                );
                if want_in {
                    self.acc(grads, *input, |d| add_into(d, &d_in));
                }
                if want_w {
                    let dw = ops::tap_major_to_weights(&d_wt, cout, cin, book.kernel);
                    self.acc(grads, *weight, |d| add_into(d, &dw));
                }
                self.acc(grads, *bias, |d| add_into(d, &d_b));
            }
            Op::MaxPool { input, argmax } => {
                let c = self.shape(*input)[1];
                self.acc(grads, *input, |d| {
                    for (k, &a) in argmax.iter().enumerate() {
                        if a != NO_NEIGHBOR {
                            d[a as usize * c + k % c] += g[k];
                        }
                    }
                });
            }
            Op::SegmentMean { input, offsets } => {
                let c = self.shape(*input)[1];
                self.acc(grads, *input, |d| {
                    for s in 0..offsets.len() - 1 {
                        let (lo, hi) = (offsets[s], offsets[s + 1]);
                        if hi == lo {
                            continue;
                        }
                        let inv = 1.0 / (hi - lo) as f64;
                        let gs = &g[s * c..(s + 1) * c];
                        for r in lo..hi {
                            for (x, y) in d[r * c..(r + 1) * c].iter_mut().zip(gs) {
                                *x += inv * y;
                            }
                        }
                    }
                });
            }
            Op::Focal {
                logits,
                targets,
                gamma,
                probs,
            } => {
                let k = self.shape(*logits)[1];
                self.acc(grads, *logits, |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        let p = &probs[r * k..(r + 1) * k];
                        let pt = p[t];
                        if pt < FOCAL_CLAMP {
                            // clamped: the loss is locally constant in p_t
                            continue;
                        }
                        let q = 1.0 - pt;
                        let pow_term = if *gamma == 0.0 {
                            0.0
                        } else if q > 0.0 {
                            gamma * q.powf(gamma - 1.0) * pt.ln()
                        } else {
                            0.0
                        };
                        // dL/dp_t
                        let dl_dpt = pow_term - q.powf(*gamma) / pt;
                        for j in 0..k {
                            let delta = if j == t { 1.0 } else { 0.0 };
                            d[r * k + j] += g[r] * dl_dpt * pt * (delta - p[j]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    named: Vec<(String, Var)>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(&shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every named leaf that requires grad, keyed by name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .filter(|(_, v)| self.requires[v.0])
            .map(|(n, v)| (n.clone(), self.get(*v)))
            .collect()
    }
}
