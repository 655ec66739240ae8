//! Reverse-mode automatic differentiation over dynamically shaped `f32` arrays.
//!
//! A [`Graph`] is a flat tape of nodes built during the forward pass. Each op
//! stores its output value plus whatever small caches its backward rule needs
//! (batch-norm statistics, row norms). Calling [`Graph::backward`] walks the
//! tape in reverse and returns one gradient buffer per node.
//!
//! The tape is rebuilt from scratch on every training step, which keeps the
//! implementation simple and makes gradient flow explicit: stop-gradient is a
//! plain [`Graph::leaf`] holding a copied value, and the straight-through
//! estimator is an op whose forward value is the hard sample while its
//! backward rule is the identity into the soft sample.
//!
//! Scalars are represented as one-element arrays.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn};

pub type VarId = usize;

/// Convolution geometry shared by the forward and backward paths.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op {
    Leaf { param_slot: Option<usize> },
    Add(VarId, VarId),
    AddRow(VarId, VarId),
    AddScalar(VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f32),
    MatMul(VarId, VarId),
    Relu(VarId),
    Sigmoid(VarId),
    Tanh(VarId),
    Exp(VarId),
    Clamp(VarId, f32, f32),
    SumAll(VarId),
    RowNormalize { x: VarId, norms: Array1<f32> },
    Softmax(VarId),
    LogSoftmax(VarId),
    Conv2d { x: VarId, w: VarId, spec: ConvSpec },
    BatchNorm { x: VarId, gamma: VarId, beta: VarId, mean: Array1<f32>, invstd: Array1<f32> },
    ChanAffine { x: VarId, scale: Array1<f32> },
    GlobalAvgPool(VarId),
    StraightThrough(VarId),
    SliceCols { x: VarId, start: usize, len: usize },
    Reshape(VarId),
}

struct Node {
    value: ArrayD<f32>,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode AD tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f32> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    /// Value of a scalar node.
    pub fn scalar(&self, id: VarId) -> f32 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f32>, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Constant input; gradients do not flow into it. Also serves as the
    /// stop-gradient marker: `leaf(value(x).clone())` detaches `x`.
    pub fn leaf(&mut self, value: ArrayD<f32>) -> VarId {
        self.push(value, Op::Leaf { param_slot: None }, false)
    }

    /// Input that accumulates a gradient (used by tests probing d loss / d input).
    pub fn leaf_grad(&mut self, value: ArrayD<f32>) -> VarId {
        self.push(value, Op::Leaf { param_slot: None }, true)
    }

    /// Leaf bound to a parameter slot; `backward` reports its gradient under
    /// the slot id via [`Graph::param_grads`].
    pub fn param(&mut self, slot: usize, value: ArrayD<f32>) -> VarId {
        self.push(value, Op::Leaf { param_slot: Some(slot) }, true)
    }

    /// Detached copy of an existing node (value passes, gradient blocked).
    pub fn detach(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x].value.clone();
        self.leaf(v)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// `(B, N) + (N,)` broadcast add, used for biases.
    pub fn add_row(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&av + &bv).into_dyn();
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::AddRow(a, b), ng)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f32) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let ng = self.ng(a);
        self.push(v, Op::AddScalar(a), ng)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        debug_assert_eq!(self.shape(a), self.shape(b));
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: VarId, c: f32) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    /// 2-D matrix product `(m, k) x (k, n)`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let av = self.nodes[a].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = Array2::<f32>::zeros((av.nrows(), bv.ncols()));
        general_mat_mul(1.0, &av, &bv, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out.into_dyn(), Op::MatMul(a, b), ng)
    }

    pub fn relu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f32::tanh);
        let ng = self.ng(a);
        self.push(v, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f32::exp);
        let ng = self.ng(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// Elementwise clamp; gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: VarId, lo: f32, hi: f32) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(v, Op::Clamp(a, lo, hi), ng)
    }

    /// Sum of all entries, as a 1-element array.
    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f32 = self.nodes[a].value.sum();
        let ng = self.ng(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.nodes[a].value.len() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// L2-normalize each row of a `(B, N)` matrix. Rows with norm below
    /// `eps` are divided by `eps` instead.
    pub fn row_normalize(&mut self, x: VarId, eps: f32) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut norms = Array1::<f32>::zeros(xv.nrows());
        let mut out = xv.to_owned();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt().max(eps);
            norms[i] = n;
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::RowNormalize { x, norms }, ng)
    }

    /// Row-wise softmax of a `(B, K)` matrix.
    pub fn softmax(&mut self, x: VarId) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::Softmax(x), ng)
    }

    /// Row-wise log-softmax of a `(B, K)` matrix.
    pub fn log_softmax(&mut self, x: VarId) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<f32>().ln() + m;
            row.mapv_inplace(|v| v - lse);
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::LogSoftmax(x), ng)
    }

    /// 2-D convolution, NCHW input `(B, Cin, H, W)`, weight `(Cout, Cin, kh, kw)`,
    /// no bias (a batch-norm or explicit bias op follows where needed).
    pub fn conv2d(&mut self, x: VarId, w: VarId, spec: ConvSpec) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().unwrap();
        let out = conv2d_forward(&xv, &wv, spec);
        let ng = self.ng(x) || self.ng(w);
        self.push(out.into_dyn(), Op::Conv2d { x, w, spec }, ng)
    }

    /// Training-mode batch normalization over `(B, N)` (per column) or
    /// `(B, C, H, W)` (per channel). Normalizes with biased batch variance.
    /// Returns `(out, mean, var_biased)` so the layer can update running stats.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f32,
    ) -> (VarId, Array1<f32>, Array1<f32>) {
        let (mean, var) = channel_moments(&self.nodes[x].value);
        let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let g = self.nodes[gamma].value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let b = self.nodes[beta].value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let out = apply_channel_affine(&self.nodes[x].value, &mean, &invstd, &g, &b);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let id = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, mean: mean.clone(), invstd },
            ng,
        );
        (id, mean, var)
    }

    /// Per-channel affine `y = x * scale + shift` with constant scale/shift
    /// (evaluation-mode batch norm folded to known statistics).
    pub fn chan_affine(&mut self, x: VarId, scale: Array1<f32>, shift: Array1<f32>) -> VarId {
        let zero = Array1::zeros(scale.len());
        let one = Array1::from_elem(scale.len(), 1.0);
        let out = apply_channel_affine(&self.nodes[x].value, &zero, &one, &scale, &shift);
        let ng = self.ng(x);
        self.push(out, Op::ChanAffine { x, scale }, ng)
    }

    /// `(B, C, H, W)` -> `(B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: VarId) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let mut out = Array2::<f32>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() / (h * w) as f32;
            }
        }
        let ng = self.ng(x);
        self.push(out.into_dyn(), Op::GlobalAvgPool(x), ng)
    }

    /// Straight-through estimator: forward value is `hard`, backward is the
    /// identity into `soft`. `hard` must have the same shape as `soft`.
    pub fn straight_through(&mut self, soft: VarId, hard: ArrayD<f32>) -> VarId {
        debug_assert_eq!(self.shape(soft), hard.shape());
        let ng = self.ng(soft);
        self.push(hard, Op::StraightThrough(soft), ng)
    }

    /// Columns `[start, start+len)` of a `(B, N)` matrix.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
        let v = xv.slice(ndarray::s![.., start..start + len]).to_owned().into_dyn();
        let ng = self.ng(x);
        self.push(v, Op::SliceCols { x, start, len }, ng)
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let v = self.nodes[x]
            .value
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: incompatible shape");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    /// Runs reverse-mode accumulation from `root` (a scalar node) and returns
    /// one gradient buffer per node (`None` where no gradient flows).
    pub fn backward(&self, root: VarId) -> Vec<Option<ArrayD<f32>>> {
        let mut grads: Vec<Option<ArrayD<f32>>> = vec![None; self.nodes.len()];
        debug_assert_eq!(self.nodes[root].value.len(), 1, "backward root must be scalar");
        grads[root] = Some(ArrayD::from_elem(self.nodes[root].value.raw_dim(), 1.0));

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let gout = grads[id].take().unwrap();
            self.accumulate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        grads
    }

    /// Gradients of parameter slots after a `backward` pass, as
    /// `(slot, grad)` pairs in tape order.
    pub fn param_grads<'a>(
        &'a self,
        grads: &'a [Option<ArrayD<f32>>],
    ) -> impl Iterator<Item = (usize, &'a ArrayD<f32>)> + 'a {
        self.nodes.iter().zip(grads.iter()).filter_map(|(n, g)| match (&n.op, g) {
            (Op::Leaf { param_slot: Some(s) }, Some(g)) => Some((*s, g)),
            _ => None,
        })
    }

    fn accumulate(&self, id: VarId, gout: &ArrayD<f32>, grads: &mut Vec<Option<ArrayD<f32>>>) {
        let add_to = |grads: &mut Vec<Option<ArrayD<f32>>>, p: VarId, g: ArrayD<f32>| {
            if !self.nodes[p].needs_grad {
                return;
            }
            match &mut grads[p] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                add_to(grads, *a, gout.clone());
                add_to(grads, *b, gout.clone());
            }
            Op::AddRow(a, b) => {
                add_to(grads, *a, gout.clone());
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                add_to(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
            }
            Op::AddScalar(a) => add_to(grads, *a, gout.clone()),
            Op::Sub(a, b) => {
                add_to(grads, *a, gout.clone());
                add_to(grads, *b, gout.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                add_to(grads, *a, gout * &self.nodes[*b].value);
                add_to(grads, *b, gout * &self.nodes[*a].value);
            }
            Op::Scale(a, c) => add_to(grads, *a, gout.mapv(|v| v * c)),
            Op::MatMul(a, b) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                if self.nodes[*a].needs_grad {
                    let mut da = Array2::<f32>::zeros(av.dim());
                    general_mat_mul(1.0, &gv, &bv.t(), 0.0, &mut da);
                    add_to(grads, *a, da.into_dyn());
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Array2::<f32>::zeros(bv.dim());
                    general_mat_mul(1.0, &av.t(), &gv, 0.0, &mut db);
                    add_to(grads, *b, db.into_dyn());
                }
            }
            Op::Relu(a) => {
                let mask = self.nodes[id].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                add_to(grads, *a, gout * &mask);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, gout * &(y * &y.mapv(|v| 1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value;
                add_to(grads, *a, gout * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Exp(a) => add_to(grads, *a, gout * &self.nodes[id].value),
            Op::Clamp(a, lo, hi) => {
                let x = &self.nodes[*a].value;
                let mask = x.mapv(|v| if v >= *lo && v <= *hi { 1.0 } else { 0.0 });
                add_to(grads, *a, gout * &mask);
            }
            Op::SumAll(a) => {
                let g = gout.iter().next().copied().unwrap();
                add_to(grads, *a, ArrayD::from_elem(self.nodes[*a].value.raw_dim(), g));
            }
            Op::RowNormalize { x, norms } => {
                let y = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f32>::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yi = y.row(i);
                    let gi = gv.row(i);
                    let dot = yi.dot(&gi);
                    let n = norms[i];
                    for j in 0..y.ncols() {
                        dx[[i, j]] = (gi[j] - yi[j] * dot) / n;
                    }
                }
                add_to(grads, *x, dx.into_dyn());
            }
            Op::Softmax(a) => {
                let y = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f32>::zeros(y.dim());
                for i in 0..y.nrows() {
                    let yi = y.row(i);
                    let gi = gv.row(i);
                    let dot = yi.dot(&gi);
                    for j in 0..y.ncols() {
                        dx[[i, j]] = yi[j] * (gi[j] - dot);
                    }
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::LogSoftmax(a) => {
                let y = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f32>::zeros(y.dim());
                for i in 0..y.nrows() {
                    let gi = gv.row(i);
                    let gsum: f32 = gi.sum();
                    for j in 0..y.ncols() {
                        dx[[i, j]] = gi[j] - y[[i, j]].exp() * gsum;
                    }
                }
                add_to(grads, *a, dx.into_dyn());
            }
            Op::Conv2d { x, w, spec } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
                let (dx, dw) = conv2d_backward(
                    &xv,
                    &wv,
                    &gv,
                    *spec,
                    self.nodes[*x].needs_grad,
                    self.nodes[*w].needs_grad,
                );
                if let Some(dx) = dx {
                    add_to(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    add_to(grads, *w, dw.into_dyn());
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd } => {
                let (dx, dgamma, dbeta) = batch_norm_backward(
                    &self.nodes[*x].value,
                    gout,
                    &self.nodes[*gamma].value,
                    mean,
                    invstd,
                );
                add_to(grads, *x, dx);
                add_to(grads, *gamma, dgamma.into_dyn());
                add_to(grads, *beta, dbeta.into_dyn());
            }
            Op::ChanAffine { x, scale } => {
                let zero = Array1::zeros(scale.len());
                let one = Array1::from_elem(scale.len(), 1.0);
                let dx = apply_channel_affine(gout, &zero, &one, scale, &zero);
                add_to(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.nodes[*x].value.shape();
                let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array4::<f32>::zeros((b, c, h, w));
                let inv = 1.0 / (h * w) as f32;
                for bi in 0..b {
                    for ci in 0..c {
                        let g = gv[[bi, ci]] * inv;
                        dx.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ci).fill(g);
                    }
                }
                add_to(grads, *x, dx.into_dyn());
            }
            Op::StraightThrough(soft) => add_to(grads, *soft, gout.clone()),
            Op::SliceCols { x, start, len } => {
                let xs = self.nodes[*x].value.shape();
                let mut dx = Array2::<f32>::zeros((xs[0], xs[1]));
                let gv = gout.view().into_dimensionality::<Ix2>().unwrap();
                dx.slice_mut(ndarray::s![.., *start..*start + *len]).assign(&gv);
                add_to(grads, *x, dx.into_dyn());
            }
            Op::Reshape(x) => {
                let g = gout.clone().into_shape(self.nodes[*x].value.raw_dim()).unwrap();
                add_to(grads, *x, g);
            }
        }
    }
}

/// Per-channel mean and biased variance. `(B, N)` treats columns as channels;
/// `(B, C, H, W)` treats axis 1 as channels.
fn channel_moments(x: &ArrayD<f32>) -> (Array1<f32>, Array1<f32>) {
    match x.ndim() {
        2 => {
            let xv = x.view().into_dimensionality::<Ix2>().unwrap();
            let n = xv.nrows() as f32;
            let mean = xv.sum_axis(Axis(0)) / n;
            let mut var = Array1::<f32>::zeros(xv.ncols());
            for row in xv.rows() {
                for (j, &v) in row.iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            (mean, var / n)
        }
        4 => {
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, h, w) = xv.dim();
            let n = (b * h * w) as f32;
            let mut mean = Array1::<f32>::zeros(c);
            let mut var = Array1::<f32>::zeros(c);
            for ci in 0..c {
                let mut s = 0.0f64;
                for bi in 0..b {
                    s += xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter().map(|&v| v as f64).sum::<f64>();
                }
                mean[ci] = (s / n as f64) as f32;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut s = 0.0f64;
                for bi in 0..b {
                    for &v in xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                        let d = v - m;
                        s += (d * d) as f64;
                    }
                }
                var[ci] = (s / n as f64) as f32;
            }
            (mean, var)
        }
        d => panic!("batch norm expects 2-D or 4-D input, got {d}-D"),
    }
}

/// `y[c] = (x[c] - mean[c]) * invstd[c] * gamma[c] + beta[c]` per channel.
fn apply_channel_affine(
    x: &ArrayD<f32>,
    mean: &Array1<f32>,
    invstd: &Array1<f32>,
    gamma: &Array1<f32>,
    beta: &Array1<f32>,
) -> ArrayD<f32> {
    match x.ndim() {
        2 => {
            let xv = x.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = xv.to_owned();
            for mut row in out.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean[j]) * invstd[j] * gamma[j] + beta[j];
                }
            }
            out.into_dyn()
        }
        4 => {
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let (b, c, _, _) = xv.dim();
            let mut out = xv.to_owned();
            for bi in 0..b {
                for ci in 0..c {
                    let (m, s, g, be) = (mean[ci], invstd[ci], gamma[ci], beta[ci]);
                    out.index_axis_mut(Axis(0), bi)
                        .index_axis_mut(Axis(0), ci)
                        .mapv_inplace(|v| (v - m) * s * g + be);
                }
            }
            out.into_dyn()
        }
        d => panic!("channel affine expects 2-D or 4-D input, got {d}-D"),
    }
}

fn batch_norm_backward(
    x: &ArrayD<f32>,
    gout: &ArrayD<f32>,
    gamma: &ArrayD<f32>,
    mean: &Array1<f32>,
    invstd: &Array1<f32>,
) -> (ArrayD<f32>, Array1<f32>, Array1<f32>) {
    let c = mean.len();
    let gammav = gamma.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    // Flatten to (rows, c) channel-major views.
    let (xf, gf, rows): (Array2<f32>, Array2<f32>, usize) = match x.ndim() {
        2 => {
            let xv = x.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let gv = gout.view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let r = xv.nrows();
            (xv, gv, r)
        }
        4 => {
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let gv = gout.view().into_dimensionality::<Ix4>().unwrap();
            let (b, cc, h, w) = xv.dim();
            debug_assert_eq!(cc, c);
            let rows = b * h * w;
            let mut xf = Array2::<f32>::zeros((rows, c));
            let mut gf = Array2::<f32>::zeros((rows, c));
            let mut r = 0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        for ci in 0..c {
                            xf[[r, ci]] = xv[[bi, ci, hi, wi]];
                            gf[[r, ci]] = gv[[bi, ci, hi, wi]];
                        }
                        r += 1;
                    }
                }
            }
            (xf, gf, rows)
        }
        d => panic!("batch norm backward: {d}-D"),
    };

    let n = rows as f32;
    let mut dgamma = Array1::<f32>::zeros(c);
    let mut dbeta = Array1::<f32>::zeros(c);
    let mut sum_g = Array1::<f32>::zeros(c);
    let mut sum_gx = Array1::<f32>::zeros(c);
    for r in 0..rows {
        for ci in 0..c {
            let xhat = (xf[[r, ci]] - mean[ci]) * invstd[ci];
            let g = gf[[r, ci]];
            dgamma[ci] += g * xhat;
            dbeta[ci] += g;
            sum_g[ci] += g;
            sum_gx[ci] += g * xhat;
        }
    }
    let mut dxf = Array2::<f32>::zeros((rows, c));
    for r in 0..rows {
        for ci in 0..c {
            let xhat = (xf[[r, ci]] - mean[ci]) * invstd[ci];
            let term = n * gf[[r, ci]] - sum_g[ci] - xhat * sum_gx[ci];
            dxf[[r, ci]] = gammav[ci] * invstd[ci] / n * term;
        }
    }

    let dx: ArrayD<f32> = match x.ndim() {
        2 => dxf.into_dyn(),
        4 => {
            let xv = x.view().into_dimensionality::<Ix4>().unwrap();
            let (b, cc, h, w) = xv.dim();
            let mut dx = Array4::<f32>::zeros((b, cc, h, w));
            let mut r = 0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        for ci in 0..cc {
                            dx[[bi, ci, hi, wi]] = dxf[[r, ci]];
                        }
                        r += 1;
                    }
                }
            }
            dx.into_dyn()
        }
        _ => unreachable!(),
    };
    (dx, dgamma, dbeta)
}

fn conv_out_dim(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// im2col: `(B, Cin, H, W)` -> `(Cin*kh*kw, B*Ho*Wo)`.
fn im2col(x: &ndarray::ArrayView4<f32>, kh: usize, kw: usize, spec: ConvSpec) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    let wo = conv_out_dim(w, kw, spec.stride, spec.pad);
    let mut cols = Array2::<f32>::zeros((c * kh * kw, b * ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut col_idx = 0usize;
                for bi in 0..b {
                    let plane = x.index_axis(Axis(0), bi);
                    let plane = plane.index_axis(Axis(0), ci);
                    for oi in 0..ho {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        for oj in 0..wo {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            cols[[row, col_idx]] = if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                plane[[ii as usize, jj as usize]]
                            } else {
                                0.0
                            };
                            col_idx += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(x: &ndarray::ArrayView4<f32>, w: &ndarray::ArrayView4<f32>, spec: ConvSpec) -> Array4<f32> {
    let (b, _c, h, wd) = x.dim();
    let (cout, cin, kh, kw) = w.dim();
    debug_assert_eq!(_c, cin);
    let ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    let wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
    let cols = im2col(x, kh, kw, spec);
    let wmat = w.to_shape((cout, cin * kh * kw)).unwrap();
    let mut out_mat = Array2::<f32>::zeros((cout, b * ho * wo));
    general_mat_mul(1.0, &wmat.view(), &cols.view(), 0.0, &mut out_mat);
    let mut out = Array4::<f32>::zeros((b, cout, ho, wo));
    for co in 0..cout {
        let mut col_idx = 0usize;
        for bi in 0..b {
            for oi in 0..ho {
                for oj in 0..wo {
                    out[[bi, co, oi, oj]] = out_mat[[co, col_idx]];
                    col_idx += 1;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &ndarray::ArrayView4<f32>,
    w: &ndarray::ArrayView4<f32>,
    gout: &ndarray::ArrayView4<f32>,
    spec: ConvSpec,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Array4<f32>>, Option<Array4<f32>>) {
    let (b, c, h, wd) = x.dim();
    let (cout, cin, kh, kw) = w.dim();
    let (_, _, ho, wo) = gout.dim();

    // Flatten grad to (Cout, B*Ho*Wo) in the same ordering as the forward.
    let mut gmat = Array2::<f32>::zeros((cout, b * ho * wo));
    for co in 0..cout {
        let mut col_idx = 0usize;
        for bi in 0..b {
            for oi in 0..ho {
                for oj in 0..wo {
                    gmat[[co, col_idx]] = gout[[bi, co, oi, oj]];
                    col_idx += 1;
                }
            }
        }
    }

    let dw = if need_dw {
        let cols = im2col(x, kh, kw, spec);
        let mut dwm = Array2::<f32>::zeros((cout, cin * kh * kw));
        general_mat_mul(1.0, &gmat.view(), &cols.t(), 0.0, &mut dwm);
        Some(dwm.into_shape((cout, cin, kh, kw)).unwrap())
    } else {
        None
    };

    let dx = if need_dx {
        let wmat = w.to_shape((cout, cin * kh * kw)).unwrap();
        let mut dcols = Array2::<f32>::zeros((cin * kh * kw, b * ho * wo));
        general_mat_mul(1.0, &wmat.t(), &gmat.view(), 0.0, &mut dcols);
        // col2im scatter-add.
        let mut dx = Array4::<f32>::zeros((b, c, h, wd));
        for ci in 0..cin {
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let mut col_idx = 0usize;
                    for bi in 0..b {
                        for oi in 0..ho {
                            let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                            for oj in 0..wo {
                                let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < wd {
                                    dx[[bi, ci, ii as usize, jj as usize]] += dcols[[row, col_idx]];
                                }
                                col_idx += 1;
                            }
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient check of `f` at `x0` against `analytic`.
    fn check_grad<F>(mut f: F, x0: &ArrayD<f32>, analytic: &ArrayD<f32>, h: f32, tol: f32)
    where
        F: FnMut(&ArrayD<f32>) -> f32,
    {
        for idx in 0..x0.len() {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                (fd - an).abs() / denom < tol,
                "grad mismatch at {idx}: fd={fd}, analytic={an}"
            );
        }
    }

    fn rand_arr(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0f32))
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a0 = rand_arr(&[3, 4], &mut rng);
        let b0 = rand_arr(&[4, 2], &mut rng);
        let weights = rand_arr(&[3, 2], &mut rng);

        let run = |a: &ArrayD<f32>, b: &ArrayD<f32>| -> (f32, ArrayD<f32>, ArrayD<f32>) {
            let mut g = Graph::new();
            let av = g.leaf_grad(a.clone());
            let bv = g.leaf_grad(b.clone());
            let wv = g.leaf(weights.clone());
            let y = g.matmul(av, bv);
            let yw = g.mul(y, wv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (g.scalar(s), grads[av].clone().unwrap(), grads[bv].clone().unwrap())
        };
        let (_, da, db) = run(&a0, &b0);
        check_grad(|a| run(a, &b0).0, &a0, &da, 1e-2, 1e-2);
        check_grad(|b| run(&a0, b).0, &b0, &db, 1e-2, 1e-2);
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = rand_arr(&[2, 5], &mut rng);
        let run = |x: &ArrayD<f32>| -> (f32, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let s = g.sigmoid(xv);
            let t = g.tanh(s);
            let e = g.exp(t);
            let r = g.relu(e);
            let m = g.mean_all(r);
            let grads = g.backward(m);
            (g.scalar(m), grads[xv].clone().unwrap())
        };
        let (_, dx) = run(&x0);
        check_grad(|x| run(x).0, &x0, &dx, 1e-2, 1e-2);
    }

    #[test]
    fn softmax_and_log_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_arr(&[3, 4], &mut rng);
        let c = rand_arr(&[3, 4], &mut rng);
        let run = |x: &ArrayD<f32>| -> (f32, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let cv = g.leaf(c.clone());
            let p = g.softmax(xv);
            let lp = g.log_softmax(xv);
            let a = g.mul(p, cv);
            let b = g.mul(lp, a);
            let s = g.sum_all(b);
            let grads = g.backward(s);
            (g.scalar(s), grads[xv].clone().unwrap())
        };
        let (_, dx) = run(&x0);
        check_grad(|x| run(x).0, &x0, &dx, 1e-2, 1.5e-2);
    }

    #[test]
    fn row_normalize_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_arr(&[3, 4], &mut rng);
        let c = rand_arr(&[3, 4], &mut rng);
        let run = |x: &ArrayD<f32>| -> (f32, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let cv = g.leaf(c.clone());
            let y = g.row_normalize(xv, 1e-12);
            let yw = g.mul(y, cv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (g.scalar(s), grads[xv].clone().unwrap())
        };
        let (_, dx) = run(&x0);
        check_grad(|x| run(x).0, &x0, &dx, 1e-3, 2e-2);
    }

    #[test]
    fn conv2d_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_arr(&[2, 3, 5, 5], &mut rng);
        let w0 = rand_arr(&[4, 3, 3, 3], &mut rng);
        let c = rand_arr(&[2, 4, 3, 3], &mut rng);
        let spec = ConvSpec { stride: 2, pad: 1 };
        let run = |x: &ArrayD<f32>, w: &ArrayD<f32>| -> (f32, ArrayD<f32>, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let wv = g.leaf_grad(w.clone());
            let cv = g.leaf(c.clone());
            let y = g.conv2d(xv, wv, spec);
            let yw = g.mul(y, cv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (g.scalar(s), grads[xv].clone().unwrap(), grads[wv].clone().unwrap())
        };
        let (_, dx, dw) = run(&x0, &w0);
        check_grad(|x| run(x, &w0).0, &x0, &dx, 1e-2, 2e-2);
        check_grad(|w| run(&x0, w).0, &w0, &dw, 1e-2, 2e-2);
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_arr(&[2, 2, 4, 4], &mut rng);
        let w = rand_arr(&[3, 2, 3, 3], &mut rng);
        let spec = ConvSpec { stride: 1, pad: 1 };
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let wv = g.leaf(w.clone());
        let y = g.conv2d(xv, wv, spec);
        let yv = g.value(y).view().into_dimensionality::<Ix4>().unwrap().to_owned();

        let xa = x.view().into_dimensionality::<Ix4>().unwrap();
        let wa = w.view().into_dimensionality::<Ix4>().unwrap();
        for bi in 0..2 {
            for co in 0..3 {
                for oi in 0..4 {
                    for oj in 0..4 {
                        let mut acc = 0.0f32;
                        for ci in 0..2 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let ii = oi as isize + ki as isize - 1;
                                    let jj = oj as isize + kj as isize - 1;
                                    if ii >= 0 && jj >= 0 && ii < 4 && jj < 4 {
                                        acc += xa[[bi, ci, ii as usize, jj as usize]] * wa[[co, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        assert!((yv[[bi, co, oi, oj]] - acc).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = rand_arr(&[6, 3], &mut rng);
        let gamma0 = rand_arr(&[3], &mut rng);
        let beta0 = rand_arr(&[3], &mut rng);
        let c = rand_arr(&[6, 3], &mut rng);
        let run = |x: &ArrayD<f32>, ga: &ArrayD<f32>, be: &ArrayD<f32>| -> (f32, Vec<ArrayD<f32>>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let gv = g.leaf_grad(ga.clone());
            let bv = g.leaf_grad(be.clone());
            let cv = g.leaf(c.clone());
            let (y, _, _) = g.batch_norm_train(xv, gv, bv, 1e-5);
            let yw = g.mul(y, cv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (
                g.scalar(s),
                vec![
                    grads[xv].clone().unwrap(),
                    grads[gv].clone().unwrap(),
                    grads[bv].clone().unwrap(),
                ],
            )
        };
        let (_, d) = run(&x0, &gamma0, &beta0);
        check_grad(|x| run(x, &gamma0, &beta0).0, &x0, &d[0], 1e-2, 3e-2);
        check_grad(|ga| run(&x0, ga, &beta0).0, &gamma0, &d[1], 1e-2, 2e-2);
        check_grad(|be| run(&x0, &gamma0, be).0, &beta0, &d[2], 1e-2, 2e-2);
    }

    #[test]
    fn batch_norm_4d_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = rand_arr(&[2, 3, 4, 4], &mut rng);
        let gamma0 = rand_arr(&[3], &mut rng);
        let beta0 = rand_arr(&[3], &mut rng);
        let c = rand_arr(&[2, 3, 4, 4], &mut rng);
        let run = |x: &ArrayD<f32>| -> (f32, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let gv = g.leaf(gamma0.clone());
            let bv = g.leaf(beta0.clone());
            let cv = g.leaf(c.clone());
            let (y, _, _) = g.batch_norm_train(xv, gv, bv, 1e-5);
            let yw = g.mul(y, cv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (g.scalar(s), grads[xv].clone().unwrap())
        };
        let (_, dx) = run(&x0);
        check_grad(|x| run(x).0, &x0, &dx, 1e-2, 5e-2);
    }

    #[test]
    fn pool_slice_reshape_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = rand_arr(&[2, 3, 4, 4], &mut rng);
        let c = rand_arr(&[2, 2], &mut rng);
        let run = |x: &ArrayD<f32>| -> (f32, ArrayD<f32>) {
            let mut g = Graph::new();
            let xv = g.leaf_grad(x.clone());
            let cv = g.leaf(c.clone());
            let p = g.global_avg_pool(xv);
            let sl = g.slice_cols(p, 1, 2);
            let r = g.reshape(sl, &[2, 2]);
            let yw = g.mul(r, cv);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            (g.scalar(s), grads[xv].clone().unwrap())
        };
        let (_, dx) = run(&x0);
        check_grad(|x| run(x).0, &x0, &dx, 1e-2, 2e-2);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf_grad(arr1(&[1.0f32, 2.0]).into_dyn());
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum_all(y);
        let grads = g.backward(s);
        // d(x * sg(x))/dx = sg(x), not 2x.
        let gx = grads[x].clone().unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn straight_through_passes_gradient_bitwise() {
        let logits = arr2(&[[0.5f32, -1.0, 2.0], [0.1, 0.2, 0.3]]).into_dyn();
        let weights = arr2(&[[0.3f32, -0.7, 1.1], [0.9, -0.2, 0.4]]).into_dyn();

        let grad_with = |st: bool| -> ArrayD<f32> {
            let mut g = Graph::new();
            let l = g.leaf_grad(logits.clone());
            let soft = g.softmax(l);
            let out = if st {
                let hard = ArrayD::from_elem(IxDyn(&[2, 3]), 0.0);
                g.straight_through(soft, hard)
            } else {
                soft
            };
            let w = g.leaf(weights.clone());
            // Weighted sum whose gradient w.r.t. the output does not depend
            // on the forward value.
            let yw = g.mul(out, w);
            let s = g.sum_all(yw);
            let grads = g.backward(s);
            grads[l].clone().unwrap()
        };

        let g_st = grad_with(true);
        let g_soft = grad_with(false);
        assert_eq!(g_st.as_slice().unwrap(), g_soft.as_slice().unwrap());
    }
}
