//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamKey, ParamStore};
use super::{AdError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamKey),
    StopGrad,
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    GroupNorm { x: NodeId, gamma: NodeId, beta: NodeId, groups: usize, mean: Vec<f32>, rstd: Vec<f32> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    ScaleRows(NodeId, Vec<f32>),
    Elu(NodeId),
    Silu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(Vec<NodeId>),
    Slice { x: NodeId, start: usize },
    Reshape(NodeId),
    Sum(NodeId),
    SquaredError { pred: NodeId, target: Tensor, weights: Vec<f32> },
    BceWithLogits { logits: NodeId, labels: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::StopGrad => "stopgrad",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "groupnorm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleRows(..) => "scale_rows",
            Op::Elu(_) => "elu",
            Op::Silu(_) => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::SquaredError { .. } => "squared_error",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamKey, Tensor>,
    inputs: HashMap<usize, Tensor>,
}

impl Gradients {
    /// Gradients aligned with the store's declaration order; parameters that
    /// took no part in the graph get zeros.
    pub fn for_store(&self, store: &ParamStore) -> Vec<Tensor> {
        (0..store.len())
            .map(|i| match self.params.get(&store.key(i)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(i).shape()),
            })
            .collect()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    /// Gradient with respect to an input node created with `requires_grad`.
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id.0)
    }
}

/// Append-only tape of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    nonfinite: Option<(usize, &'static str)>,
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    beta: f32,
) {
    // a is [m,k] (or [k,m] when a_t), b is [k,n] (or [n,k] when b_t), c is [m,n].
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: strides describe in-bounds row-major views checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `[cin, h, w]` image into `[cin*k*k, ho*wo]` columns.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, cols: &mut [f32]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            x[(c * h + iy as usize) * w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, dx: &mut [f32]) {
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(w, k, stride, pad);
    let hw = ho * wo;
    for c in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(c * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Error if any recorded node produced a non-finite value.
    pub fn check_finite(&self) -> Result<(), AdError> {
        match self.nonfinite {
            Some((node, op)) => Err(AdError::NonFinite { node, op }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some((self.nodes.len(), op.name()));
        }
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is reported by backward.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input, true)
    }

    /// Parameter leaf; `trainable = false` records it as a constant.
    pub fn param(&mut self, store: &ParamStore, index: usize, trainable: bool) -> NodeId {
        self.push_arc(store.shared(index), Op::Param(store.key(index)), trainable)
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        let v = Arc::clone(&self.nodes[x.0].value);
        self.push_arc(v, Op::StopGrad, false)
    }

    /// `x · w + b` with `x: [B, in]` (trailing dims flattened), `w: [in, out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, AdError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (bsz, fin) = (xv.rows(), xv.row_len());
        if wv.shape().len() != 2 || wv.shape()[0] != fin {
            return Err(AdError::Shape(format!("linear: input width {fin} vs weight {:?}", wv.shape())));
        }
        let fout = wv.shape()[1];
        let mut out = vec![0.0f32; bsz * fout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != fout {
                return Err(AdError::Shape("linear: bias width".into()));
            }
            for r in 0..bsz {
                out[r * fout..(r + 1) * fout].copy_from_slice(bv);
            }
        }
        gemm(bsz, fin, fout, xv.data(), false, wv.data(), false, &mut out, if b.is_some() { 1.0 } else { 0.0 });
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(Tensor::new(vec![bsz, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution, `x: [B, cin, h, w]`, `w: [cout, cin, k, k]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, AdError> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape().len() != 4 || wv.shape().len() != 4 || xv.shape()[1] != wv.shape()[1] {
            return Err(AdError::Shape(format!("conv2d: input {:?} weight {:?}", xv.shape(), wv.shape())));
        }
        let (bsz, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(AdError::Shape("conv2d: kernel larger than padded input".into()));
        }
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let hw = ho * wo;
        let ck = cin * k * k;
        let mut cols = vec![0.0f32; ck * hw];
        let mut out = vec![0.0f32; bsz * cout * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for n in 0..bsz {
            im2col(&xv.data()[n * cin * h * wd..(n + 1) * cin * h * wd], cin, h, wd, k, stride, pad, &mut cols);
            let o = &mut out[n * cout * hw..(n + 1) * cout * hw];
            if let Some(bias) = &bias {
                for (c, bc) in bias.iter().enumerate() {
                    o[c * hw..(c + 1) * hw].fill(*bc);
                }
            }
            gemm(cout, ck, hw, wv.data(), false, &cols, false, o, if bias.is_some() { 1.0 } else { 0.0 });
        }
        let rg = self.rg(x) || self.rg(w) || b.map(|b| self.rg(b)).unwrap_or(false);
        Ok(self.push(Tensor::new(vec![bsz, cout, ho, wo], out)?, Op::Conv2d { x, w, b, stride, pad }, rg))
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, groups: usize) -> Result<NodeId, AdError> {
        const EPS: f32 = 1e-5;
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if shape.len() < 2 || shape[1] % groups != 0 {
            return Err(AdError::Shape(format!("group_norm: {groups} groups on {shape:?}")));
        }
        let (bsz, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * spatial;
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        if gam.len() != c || bet.len() != c {
            return Err(AdError::Shape("group_norm: affine width".into()));
        }
        let xd = xv.data();
        let mut out = vec![0.0f32; xd.len()];
        let mut means = Vec::with_capacity(bsz * groups);
        let mut rstds = Vec::with_capacity(bsz * groups);
        for n in 0..bsz {
            for g in 0..groups {
                let off = (n * c + g * cg) * spatial;
                let seg = &xd[off..off + gsize];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / gsize as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / gsize as f64;
                let rstd = 1.0 / (var + EPS as f64).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for s in 0..spatial {
                        let i = off + ci * spatial + s;
                        let xhat = ((xd[i] as f64 - mean) * rstd) as f32;
                        out[i] = gam[ch] * xhat + bet[ch];
                    }
                }
                means.push(mean as f32);
                rstds.push(rstd as f32);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
            rg,
        ))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(), AdError> {
        if self.shape(a) != self.shape(b) {
            return Err(AdError::Shape(format!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape(a, b, "add")?;
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape(a, b, "sub")?;
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AdError> {
        self.same_shape(a, b, "mul")?;
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let v = map(self.value(a), |x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn scale_rows(&mut self, a: NodeId, factors: Vec<f32>) -> Result<NodeId, AdError> {
        let av = self.value(a);
        if factors.len() != av.rows() {
            return Err(AdError::Shape("scale_rows: factor count".into()));
        }
        let mut v = av.clone();
        for (i, f) in factors.iter().enumerate() {
            v.row_mut(i).iter_mut().for_each(|x| *x *= f);
        }
        let rg = self.rg(a);
        Ok(self.push(v, Op::ScaleRows(a, factors), rg))
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(a);
        self.push(v, Op::Elu(a), rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), |x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(v, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = map(self.value(a), f32::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Concatenates `[B, n_i]` tensors along the feature axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, AdError> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(AdError::Shape("concat: row mismatch".into()));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).row_len()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, start + len)` of a `[B, n]` tensor.
    pub fn slice(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, AdError> {
        let xv = self.value(x);
        let w = xv.row_len();
        if start + len > w {
            return Err(AdError::Shape(format!("slice {start}+{len} of width {w}")));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![rows, len], out)?, Op::Slice { x, start }, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, AdError> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum() as f32;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `(1/B) Σ_b w_b Σ_j (pred − target)²`, accumulated in f64.
    pub fn squared_error(&mut self, pred: NodeId, target: Tensor, weights: Option<Vec<f32>>) -> Result<NodeId, AdError> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(AdError::Shape(format!("squared_error: {:?} vs {:?}", pv.shape(), target.shape())));
        }
        let b = pv.rows();
        let weights = weights.unwrap_or_else(|| vec![1.0; b]);
        if weights.len() != b {
            return Err(AdError::Shape("squared_error: weight count".into()));
        }
        let mut total = 0.0f64;
        for (r, w) in weights.iter().enumerate() {
            let s: f64 = pv.row(r).iter().zip(target.row(r)).map(|(&p, &t)| ((p - t) as f64).powi(2)).sum();
            total += *w as f64 * s;
        }
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar((total / b as f64) as f32), Op::SquaredError { pred, target, weights }, rg))
    }

    /// Mean binary cross-entropy of `[B, 1]` logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: Vec<f32>) -> Result<NodeId, AdError> {
        let lv = self.value(logits);
        if lv.len() != labels.len() {
            return Err(AdError::Shape("bce: label count".into()));
        }
        let total: f64 = lv
            .data()
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let z = z as f64;
                z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p()
            })
            .sum();
        let rg = self.rg(logits);
        let n = labels.len() as f64;
        Ok(self.push(Tensor::scalar((total / n) as f32), Op::BceWithLogits { logits, labels }, rg))
    }

    /// Reverse sweep; the graph cannot be swept again afterwards.
    pub fn backward(&mut self, output: NodeId, seed: Tensor) -> Result<Gradients, AdError> {
        if self.consumed {
            return Err(AdError::GraphConsumed);
        }
        let g = self.backward_retain(output, seed)?;
        self.consumed = true;
        Ok(g)
    }

    /// Reverse sweep that leaves the graph reusable (several seeds on one
    /// recording, as needed for exact Jacobian diagonals).
    pub fn backward_retain(&self, output: NodeId, seed: Tensor) -> Result<Gradients, AdError> {
        if self.consumed {
            return Err(AdError::GraphConsumed);
        }
        if seed.shape() != self.shape(output) {
            return Err(AdError::Shape(format!(
                "seed {:?} vs output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let mut out = Gradients::default();
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(key) => {
                    out.params.insert(*key, g);
                }
                Op::StopGrad => {}
                op => self.propagate(op, &node.value, g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: NodeId, g: Tensor) {
        if self.rg(to) {
            accumulate(&mut grads[to.0], g);
        }
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<(), AdError> {
        match op {
            Op::Input | Op::Param(_) | Op::StopGrad => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, fin) = (xv.rows(), xv.row_len());
                let fout = wv.shape()[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0f32; bsz * fin];
                    gemm(bsz, fout, fin, g.data(), false, wv.data(), true, &mut dx, 0.0);
                    self.send(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0f32; fin * fout];
                    gemm(fin, bsz, fout, xv.data(), true, g.data(), false, &mut dw, 0.0);
                    self.send(grads, *w, Tensor::new(vec![fin, fout], dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0f32; fout];
                        for r in 0..bsz {
                            for (d, v) in db.iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        self.send(grads, *b, Tensor::new(vec![fout], db)?);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (bsz, cin, h, wd) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let (ho, wo) = (y.shape()[2], y.shape()[3]);
                let hw = ho * wo;
                let ck = cin * k * k;
                let img = cin * h * wd;
                let mut cols = vec![0.0f32; ck * hw];
                let mut dcols = vec![0.0f32; ck * hw];
                let mut dw = vec![0.0f32; wv.len()];
                let mut dx = if self.rg(*x) { vec![0.0f32; xv.len()] } else { Vec::new() };
                for n in 0..bsz {
                    let gy = &g.data()[n * cout * hw..(n + 1) * cout * hw];
                    if self.rg(*w) {
                        im2col(&xv.data()[n * img..(n + 1) * img], cin, h, wd, k, *stride, *pad, &mut cols);
                        gemm(cout, hw, ck, gy, false, &cols, true, &mut dw, 1.0);
                    }
                    if self.rg(*x) {
                        gemm(ck, cout, hw, wv.data(), true, gy, false, &mut dcols, 0.0);
                        col2im(&dcols, cin, h, wd, k, *stride, *pad, &mut dx[n * img..(n + 1) * img]);
                    }
                }
                if self.rg(*x) {
                    self.send(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.rg(*w) {
                    self.send(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0f32; cout];
                        for n in 0..bsz {
                            for (c, d) in db.iter_mut().enumerate() {
                                let off = (n * cout + c) * hw;
                                *d += g.data()[off..off + hw].iter().sum::<f32>();
                            }
                        }
                        self.send(grads, *b, Tensor::new(vec![cout], db)?);
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.value(*x);
                let shape = xv.shape();
                let (bsz, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let cg = c / groups;
                let gsize = (cg * spatial) as f64;
                let gam = self.value(*gamma).data();
                let xd = xv.data();
                let gd = g.data();
                let mut dx = vec![0.0f32; xd.len()];
                let mut dgam = vec![0.0f32; c];
                let mut dbet = vec![0.0f32; c];
                for n in 0..bsz {
                    for gi in 0..*groups {
                        let mu = mean[n * groups + gi] as f64;
                        let r = rstd[n * groups + gi] as f64;
                        let off = (n * c + gi * cg) * spatial;
                        let mut sum_dxh = 0.0f64;
                        let mut sum_dxh_xh = 0.0f64;
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for s in 0..spatial {
                                let idx = off + ci * spatial + s;
                                let xh = (xd[idx] as f64 - mu) * r;
                                let dxh = gd[idx] as f64 * gam[ch] as f64;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                                dgam[ch] += (gd[idx] as f64 * xh) as f32;
                                dbet[ch] += gd[idx];
                            }
                        }
                        for ci in 0..cg {
                            let ch = gi * cg + ci;
                            for s in 0..spatial {
                                let idx = off + ci * spatial + s;
                                let xh = (xd[idx] as f64 - mu) * r;
                                let dxh = gd[idx] as f64 * gam[ch] as f64;
                                dx[idx] = (r / gsize * (gsize * dxh - sum_dxh - xh * sum_dxh_xh)) as f32;
                            }
                        }
                    }
                }
                self.send(grads, *x, Tensor::new(shape.to_vec(), dx)?);
                self.send(grads, *gamma, Tensor::new(vec![c], dgam)?);
                self.send(grads, *beta, Tensor::new(vec![c], dbet)?);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *b, map(&g, |v| -v));
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.send(grads, *a, zip(&g, bv, |gv, y| gv * y));
                self.send(grads, *b, zip(&g, av, |gv, x| gv * x));
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.send(grads, *a, map(&g, |v| v * c));
            }
            Op::ScaleRows(a, f) => {
                let mut d = g;
                for (i, fi) in f.iter().enumerate() {
                    d.row_mut(i).iter_mut().for_each(|v| *v *= fi);
                }
                self.send(grads, *a, d);
            }
            Op::Elu(a) => {
                let d = zip(&g, y, |gv, yv| if yv > 0.0 { gv } else { gv * (yv + 1.0) });
                self.send(grads, *a, d);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = zip(&g, x, |gv, xv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                });
                self.send(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = zip(&g, y, |gv, s| gv * s * (1.0 - s));
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip(&g, y, |gv, t| gv * (1.0 - t * t));
                self.send(grads, *a, d);
            }
            Op::Concat(parts) => {
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).row_len();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.send(grads, p, Tensor::new(self.value(p).shape().to_vec(), d)?);
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                let xv = self.value(*x);
                let w = xv.row_len();
                let len = y.row_len();
                let mut d = vec![0.0f32; xv.len()];
                for r in 0..xv.rows() {
                    d[r * w + start..r * w + start + len].copy_from_slice(g.row(r));
                }
                self.send(grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.send(grads, *x, g.reshape(shape)?);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.send(grads, *x, Tensor::full(self.value(*x).shape(), s));
            }
            Op::SquaredError { pred, target, weights } => {
                let s = g.data()[0];
                let pv = self.value(*pred);
                let b = pv.rows() as f32;
                let mut d = pv.clone();
                for (r, w) in weights.iter().enumerate() {
                    let c = 2.0 * w * s / b;
                    for (dv, t) in d.row_mut(r).iter_mut().zip(target.row(r)) {
                        *dv = c * (*dv - t);
                    }
                }
                self.send(grads, *pred, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let s = g.data()[0];
                let lv = self.value(*logits);
                let n = labels.len() as f32;
                let data = lv.data().iter().zip(labels).map(|(&z, &yl)| s * (sigmoid(z) - yl) / n).collect();
                self.send(grads, *logits, Tensor::new(lv.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", t);
        s
    }

    #[test]
    fn linear_map_weight_gradient_is_outer_product() {
        // f(x) = x W, loss = sum(f) -> dL/dW[i][j] = x[i]
        let s = store_with(Tensor::matrix(3, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let w = g.param(&s, 0, true);
        let y = g.linear(x, w, None).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l, Tensor::scalar(1.0)).unwrap();
        let dw = &grads.for_store(&s)[0];
        assert_eq!(dw.data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn stop_grad_zeroes_upstream_parameters() {
        let s = store_with(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        let w = g.param(&s, 0, true);
        let y = g.linear(x, w, None).unwrap();
        let y = g.stop_grad(y);
        let z = g.elu(y);
        let l = g.sum(z);
        let grads = g.backward(l, Tensor::scalar(1.0)).unwrap();
        assert!(grads.for_store(&s)[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn second_backward_is_an_error() {
        let s = store_with(Tensor::scalar(2.0));
        let mut g = Graph::new();
        let w = g.param(&s, 0, true);
        let l = g.sum(w);
        g.backward(l, Tensor::scalar(1.0)).unwrap();
        assert!(matches!(g.backward(l, Tensor::scalar(1.0)), Err(AdError::GraphConsumed)));
    }

    #[test]
    fn nonfinite_values_are_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![100.0]).unwrap());
        let y = g.scale(x, f32::MAX);
        let _ = g.elu(y);
        assert!(matches!(g.check_finite(), Err(AdError::NonFinite { op: "scale", .. })));
    }

    #[test]
    fn input_gradients_are_reported() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![0.5, -1.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut s = ParamStore::new();
        let wdat: Vec<f32> = (0..18).map(|i| (i as f32 * 0.37).sin()).collect();
        s.push("w", Tensor::new(vec![1, 2, 3, 3], wdat.clone()).unwrap());
        let xdat: Vec<f32> = (0..2 * 5 * 5).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2, 5, 5], xdat.clone()).unwrap());
        let w = g.param(&s, 0, true);
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 3, 3]);
        for oy in 0..3 {
            for ox in 0..3 {
                let mut acc = 0.0f32;
                for c in 0..2 {
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * 2 + ki) as isize - 1;
                            let ix = (ox * 2 + kj) as isize - 1;
                            if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                acc += wdat[(c * 3 + ki) * 3 + kj] * xdat[(c * 5 + iy as usize) * 5 + ix as usize];
                            }
                        }
                    }
                }
                assert!((g.value(y).data()[oy * 3 + ox] - acc).abs() < 1e-5);
            }
        }
    }
}
