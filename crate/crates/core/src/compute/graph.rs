//! Dynamically recorded computation graph with reverse-mode gradients.
//!
//! Every operation appends a node holding its forward value. `backward` walks
//! the nodes in reverse insertion order, which is a valid topological order
//! because a node can only reference nodes created before it.

use std::collections::HashMap;

use super::gemm::gemm;
use super::{ParamId, ParamSet, Tensor};
use crate::error::{ensure_shape, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Relu(Var),
    Gated(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BroadcastPositions(Var),
    RepeatRows(Var),
    SliceChannels {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    MeanPositions(Var),
    Mse(Var, Var),
    Sum(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// A single forward recording. Reusable for exactly one `backward` call.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<(String, usize), Var>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims3(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[b, c, l] => Ok((b, c, l)),
        _ => Err(Error::invalid(format!("expected [B, C, L], got {shape:?}"))),
    }
}

fn dims2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        &[n, m] => Ok((n, m)),
        _ => Err(Error::invalid(format!("expected a matrix, got {shape:?}"))),
    }
}

/// Unfolds `[B, C, L]` into the `[C·K, B·L]` patch matrix of a same-length
/// dilated convolution (zero padding outside the sequence).
fn im2col(x: &[f64], b: usize, c: usize, l: usize, k: usize, dilation: usize) -> Vec<f64> {
    let half = (k / 2) as isize;
    let width = b * l;
    let mut cols = vec![0.0; c * k * width];
    for ci in 0..c {
        for ki in 0..k {
            let offset = (ki as isize - half) * dilation as isize;
            let row = &mut cols[(ci * k + ki) * width..(ci * k + ki + 1) * width];
            for bi in 0..b {
                let src = &x[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                let dst = &mut row[bi * l..(bi + 1) * l];
                for (li, d) in dst.iter_mut().enumerate() {
                    let s = li as isize + offset;
                    if s >= 0 && (s as usize) < l {
                        *d = src[s as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], dx: &mut [f64], b: usize, c: usize, l: usize, k: usize, dilation: usize) {
    let half = (k / 2) as isize;
    let width = b * l;
    for ci in 0..c {
        for ki in 0..k {
            let offset = (ki as isize - half) * dilation as isize;
            let row = &cols[(ci * k + ki) * width..(ci * k + ki + 1) * width];
            for bi in 0..b {
                let dst = &mut dx[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                let src = &row[bi * l..(bi + 1) * l];
                for (li, g) in src.iter().enumerate() {
                    let s = li as isize + offset;
                    if s >= 0 && (s as usize) < l {
                        dst[s as usize] += g;
                    }
                }
            }
        }
    }
}

/// `[B, C, L]` <-> `[C, B·L]` layout swap.
fn batch_to_channel_major(x: &[f64], b: usize, c: usize, l: usize) -> Vec<f64> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[ci * b * l + bi * l..ci * b * l + (bi + 1) * l]
                .copy_from_slice(&x[(bi * c + ci) * l..(bi * c + ci + 1) * l]);
        }
    }
    out
}

fn channel_major_to_batch(x: &[f64], b: usize, c: usize, l: usize) -> Vec<f64> {
    if b == 1 {
        return x.to_vec();
    }
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ci in 0..c {
            out[(bi * c + ci) * l..(bi * c + ci + 1) * l]
                .copy_from_slice(&x[ci * b * l + bi * l..ci * b * l + (bi + 1) * l]);
        }
    }
    out
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` root with respect to `v`, if reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Constant)
    }

    /// A leaf bound to parameter `id` of `set`. Repeated requests share a node.
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        let key = (set.tag().to_string(), id.0);
        if let Some(&v) = self.param_nodes.get(&key) {
            return v;
        }
        let t = &set.get(id).tensor;
        let v = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Param);
        self.param_nodes.insert(key, v);
        v
    }

    fn binary_same(&self, a: Var, b: Var) -> Result<Vec<usize>> {
        ensure_shape(&self.node(a).shape, &self.node(b).shape)?;
        Ok(self.node(a).shape.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(shape, value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(shape, value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same(a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(shape, value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, Op::Scale(a, s))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, value, op)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// `tanh(a) ⊙ sigmoid(b)`.
    pub fn gated(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_same(a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x.tanh() * sigmoid(y))
            .collect();
        Ok(self.push(shape, value, Op::Gated(a, b)))
    }

    /// Same-length dilated convolution: `input [B, Cin, L]`, `weight
    /// [Cout, Cin, K]` with odd `K`, optional `bias [Cout]`. Padding is
    /// symmetric, so every output position sees both neighbours.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let (b, cin, l) = dims3(self.shape(input))?;
        let (cout, wcin, k) = dims3(self.shape(weight))?;
        if wcin != cin {
            return Err(Error::ShapeMismatch {
                expected: vec![cout, cin, k],
                actual: self.shape(weight).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {k}")));
        }
        if dilation == 0 {
            return Err(Error::invalid("dilation must be at least 1"));
        }
        if let Some(bv) = bias {
            ensure_shape(&[cout], self.shape(bv))?;
        }
        let cols = im2col(self.value(input), b, cin, l, k, dilation);
        let mut out = vec![0.0; cout * b * l];
        gemm(cout, b * l, cin * k, self.value(weight), false, &cols, false, 0.0, &mut out);
        if let Some(bv) = bias {
            let bias_vals = self.value(bv);
            for (o, row) in out.chunks_mut(b * l).enumerate() {
                row.iter_mut().for_each(|v| *v += bias_vals[o]);
            }
        }
        let value = channel_major_to_batch(&out, b, cout, l);
        Ok(self.push(
            vec![b, cout, l],
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            },
        ))
    }

    /// `input [N, in] · weight[out, in]ᵀ + bias[out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, din) = dims2(self.shape(input))?;
        let (dout, win) = dims2(self.shape(weight))?;
        if win != din {
            return Err(Error::ShapeMismatch {
                expected: vec![dout, din],
                actual: self.shape(weight).to_vec(),
            });
        }
        if let Some(bv) = bias {
            ensure_shape(&[dout], self.shape(bv))?;
        }
        let mut out = vec![0.0; n * dout];
        gemm(n, dout, din, self.value(input), false, self.value(weight), true, 0.0, &mut out);
        if let Some(bv) = bias {
            let bias_vals = self.value(bv);
            for row in out.chunks_mut(dout) {
                row.iter_mut().zip(bias_vals).for_each(|(v, b)| *v += b);
            }
        }
        Ok(self.push(vec![n, dout], out, Op::Linear { input, weight, bias }))
    }

    /// `a [N, K] · b [K, M]`, or `a · bᵀ` with `b [M, K]` when `trans_b`.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, k) = dims2(self.shape(a))?;
        let (r, c) = dims2(self.shape(b))?;
        let (bk, m) = if trans_b { (c, r) } else { (r, c) };
        if bk != k {
            return Err(Error::ShapeMismatch {
                expected: vec![k, m],
                actual: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; n * m];
        gemm(n, m, k, self.value(a), false, self.value(b), trans_b, 0.0, &mut out);
        Ok(self.push(vec![n, m], out, Op::MatMul { a, b, trans_b }))
    }

    /// `[B, C]` repeated along a new trailing axis of length `len`.
    pub fn broadcast_positions(&mut self, input: Var, len: usize) -> Result<Var> {
        let (b, c) = dims2(self.shape(input))?;
        let mut value = Vec::with_capacity(b * c * len);
        for &v in self.value(input) {
            value.extend(std::iter::repeat_n(v, len));
        }
        Ok(self.push(vec![b, c, len], value, Op::BroadcastPositions(input)))
    }

    /// `[D]` (or `[1, D]`) repeated into `[rows, D]`.
    pub fn repeat_rows(&mut self, input: Var, rows: usize) -> Var {
        let row = self.value(input).to_vec();
        let d = row.len();
        let mut value = Vec::with_capacity(rows * d);
        for _ in 0..rows {
            value.extend_from_slice(&row);
        }
        self.push(vec![rows, d], value, Op::RepeatRows(input))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (b, c, l) = dims3(self.shape(input))?;
        if start + len > c || len == 0 {
            return Err(Error::invalid(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let src = self.value(input);
        let mut value = Vec::with_capacity(b * len * l);
        for bi in 0..b {
            value.extend_from_slice(&src[(bi * c + start) * l..(bi * c + start + len) * l]);
        }
        Ok(self.push(vec![b, len, l], value, Op::SliceChannels { input, start }))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = dims2(self.shape(input))?;
        if start + len > m || len == 0 {
            return Err(Error::invalid(format!("column slice {start}..{} of {m}", start + len)));
        }
        let src = self.value(input);
        let mut value = Vec::with_capacity(n * len);
        for row in src.chunks(m) {
            value.extend_from_slice(&row[start..start + len]);
        }
        Ok(self.push(vec![n, len], value, Op::SliceCols { input, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        let (n, _) = dims2(self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pm) = dims2(self.shape(p))?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    expected: vec![n, pm],
                    actual: vec![pn, pm],
                });
            }
            widths.push(pm);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(vec![n, total], value, Op::ConcatCols(parts.to_vec())))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, input: Var) -> Var {
        let shape = self.shape(input).to_vec();
        let m = *shape.last().unwrap_or(&1);
        let mut value = self.value(input).to_vec();
        for row in value.chunks_mut(m.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(shape, value, Op::Softmax(input))
    }

    /// Mean over the trailing (position) axis: `[B, C, L] -> [B, C]`.
    pub fn mean_positions(&mut self, input: Var) -> Result<Var> {
        let (b, c, l) = dims3(self.shape(input))?;
        let value = self
            .value(input)
            .chunks(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        Ok(self.push(vec![b, c], value, Op::MeanPositions(input)))
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b)?;
        let n = self.value(a).len() as f64;
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![s / n], Op::Mse(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(a).to_vec(),
                actual: shape,
            });
        }
        let value = self.value(a).to_vec();
        Ok(self.push(shape, value, Op::Reshape(a)))
    }

    /// Propagates `d root / d node` to every node, then adds the gradient of
    /// each parameter of `sets` into its tensor's gradient buffer. Parameters
    /// of a listed set that the root does not reach receive zeros.
    pub fn backward(&mut self, root: Var, sets: &mut [&mut ParamSet]) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(root).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;

        for set in sets.iter_mut() {
            let tag = set.tag().to_string();
            for idx in 0..set.len() {
                let node = self.param_nodes.get(&(tag.clone(), idx)).copied();
                let param = set.get_mut(ParamId(idx));
                match node.and_then(|v| self.grads[v.0].as_deref()) {
                    Some(g) => param.tensor.accumulate_grad(g),
                    None => {
                        let zeros = vec![0.0; param.tensor.len()];
                        param.tensor.accumulate_grad(&zeros);
                    }
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Add(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::Sub(a, b) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
                acc!(*b).iter_mut().zip(g).for_each(|(d, g)| *d -= g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let da = acc!(*a);
                for ((d, g), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += g * y;
                }
                let db = acc!(*b);
                for ((d, g), x) in db.iter_mut().zip(g).zip(av) {
                    *d += g * x;
                }
            }
            Op::Scale(a, s) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }
            Op::Tanh(a) => {
                let y = &node.value;
                for ((d, g), y) in acc!(*a).iter_mut().zip(g).zip(y) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                for ((d, g), y) in acc!(*a).iter_mut().zip(g).zip(y) {
                    *d += g * y * (1.0 - y);
                }
            }
            Op::Silu(a) => {
                let x = &nodes[a.0].value;
                for ((d, g), &x) in acc!(*a).iter_mut().zip(g).zip(x) {
                    let s = sigmoid(x);
                    *d += g * (s + x * s * (1.0 - s));
                }
            }
            Op::Relu(a) => {
                let x = &nodes[a.0].value;
                for ((d, g), &x) in acc!(*a).iter_mut().zip(g).zip(x) {
                    if x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Gated(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let da = acc!(*a);
                for (((d, g), &x), &y) in da.iter_mut().zip(g).zip(av).zip(bv) {
                    let t = x.tanh();
                    *d += g * (1.0 - t * t) * sigmoid(y);
                }
                let db = acc!(*b);
                for (((d, g), &x), &y) in db.iter_mut().zip(g).zip(av).zip(bv) {
                    let s = sigmoid(y);
                    *d += g * x.tanh() * s * (1.0 - s);
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let (b, cin, l) = dims3(&nodes[input.0].shape).unwrap();
                let (cout, _, k) = dims3(&nodes[weight.0].shape).unwrap();
                let gmat = batch_to_channel_major(g, b, cout, l);
                if let Some(bv) = bias {
                    let db = acc!(*bv);
                    for (o, row) in gmat.chunks(b * l).enumerate() {
                        db[o] += row.iter().sum::<f64>();
                    }
                }
                let cols = im2col(&nodes[input.0].value, b, cin, l, k, *dilation);
                gemm(cout, cin * k, b * l, &gmat, false, &cols, true, 1.0, acc!(*weight));
                let mut dcols = vec![0.0; cin * k * b * l];
                gemm(cin * k, b * l, cout, &nodes[weight.0].value, true, &gmat, false, 0.0, &mut dcols);
                col2im(&dcols, acc!(*input), b, cin, l, k, *dilation);
            }
            Op::Linear { input, weight, bias } => {
                let (n, din) = dims2(&nodes[input.0].shape).unwrap();
                let (dout, _) = dims2(&nodes[weight.0].shape).unwrap();
                if let Some(bv) = bias {
                    let db = acc!(*bv);
                    for row in g.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
                gemm(n, din, dout, g, false, &nodes[weight.0].value, false, 1.0, acc!(*input));
                gemm(dout, din, n, g, true, &nodes[input.0].value, false, 1.0, acc!(*weight));
            }
            Op::MatMul { a, b, trans_b } => {
                let (n, k) = dims2(&nodes[a.0].shape).unwrap();
                let m = node.shape[1];
                // C = A·op(B):  dA = dC·op(B)ᵀ
                gemm(n, k, m, g, false, &nodes[b.0].value, !trans_b, 1.0, acc!(*a));
                if *trans_b {
                    // B is [M, K]: dB = dCᵀ·A
                    gemm(m, k, n, g, true, &nodes[a.0].value, false, 1.0, acc!(*b));
                } else {
                    // B is [K, M]: dB = Aᵀ·dC
                    gemm(k, m, n, &nodes[a.0].value, true, g, false, 1.0, acc!(*b));
                }
            }
            Op::BroadcastPositions(a) => {
                let l = node.shape[2];
                for (d, row) in acc!(*a).iter_mut().zip(g.chunks(l)) {
                    *d += row.iter().sum::<f64>();
                }
            }
            Op::RepeatRows(a) => {
                let da = acc!(*a);
                let d = da.len();
                for row in g.chunks(d) {
                    da.iter_mut().zip(row).for_each(|(x, g)| *x += g);
                }
            }
            Op::SliceChannels { input, start } => {
                let (b, c, l) = dims3(&nodes[input.0].shape).unwrap();
                let len = node.shape[1];
                let dx = acc!(*input);
                for bi in 0..b {
                    let dst = &mut dx[(bi * c + start) * l..(bi * c + start + len) * l];
                    let src = &g[bi * len * l..(bi + 1) * len * l];
                    dst.iter_mut().zip(src).for_each(|(d, g)| *d += g);
                }
            }
            Op::SliceCols { input, start } => {
                let m = nodes[input.0].shape[1];
                let len = node.shape[1];
                let dx = acc!(*input);
                for (drow, grow) in dx.chunks_mut(m).zip(g.chunks(len)) {
                    drow[*start..start + len].iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[1];
                    let dp = acc!(p);
                    for (drow, grow) in dp.chunks_mut(w).zip(g.chunks(total)) {
                        drow.iter_mut().zip(&grow[offset..offset + w]).for_each(|(d, g)| *d += g);
                    }
                    offset += w;
                }
            }
            Op::Softmax(a) => {
                let m = *node.shape.last().unwrap_or(&1);
                let da = acc!(*a);
                for ((drow, yrow), grow) in da.chunks_mut(m).zip(node.value.chunks(m)).zip(g.chunks(m)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for ((d, y), g) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::MeanPositions(a) => {
                let l = nodes[a.0].shape[2];
                let inv = 1.0 / l as f64;
                for (drow, g) in acc!(*a).chunks_mut(l).zip(g) {
                    drow.iter_mut().for_each(|d| *d += g * inv);
                }
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let scale = 2.0 * g[0] / av.len() as f64;
                let da = acc!(*a);
                for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                    *d += scale * (x - y);
                }
                let db = acc!(*b);
                for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                    *d -= scale * (x - y);
                }
            }
            Op::Sum(a) => {
                acc!(*a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Reshape(a) => {
                acc!(*a).iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}
