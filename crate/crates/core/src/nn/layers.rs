//! Linear, convolution, batch-norm and embedding layers over the tape.

use ndarray::{Array1, ArrayD, Ix1};
use rand_chacha::ChaCha8Rng;

use crate::graph::{ConvSpec, VarId};
use crate::nn::{uniform_init, Ctx, ParamStore, TensorKind};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

pub struct Linear {
    w: usize,
    b: Option<usize>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let w = store.add(&format!("{name}.weight"), TensorKind::Param, uniform_init(rng, &[in_dim, out_dim], bound));
        let b = bias.then(|| store.add(&format!("{name}.bias"), TensorKind::Param, uniform_init(rng, &[out_dim], bound)));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        let w = ctx.var(self.w);
        let y = ctx.g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = ctx.var(b);
                ctx.g.add_row(y, b)
            }
            None => y,
        }
    }
}

pub struct Conv2d {
    w: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Bias-free convolution (batch norm follows everywhere it is used).
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = store.add(
            &format!("{name}.weight"),
            TensorKind::Param,
            uniform_init(rng, &[out_ch, in_ch, kernel, kernel], bound),
        );
        Conv2d { w, spec: ConvSpec { stride, pad } }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        let w = ctx.var(self.w);
        ctx.g.conv2d(x, w, self.spec)
    }
}

/// Batch normalization over `(B, N)` columns or `(B, C, H, W)` channels.
pub struct BatchNorm {
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    pub dim: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(&format!("{name}.gamma"), TensorKind::Param, ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0));
        let beta = store.add(&format!("{name}.beta"), TensorKind::Param, ArrayD::zeros(ndarray::IxDyn(&[dim])));
        let running_mean = store.add(&format!("{name}.running_mean"), TensorKind::Buffer, ArrayD::zeros(ndarray::IxDyn(&[dim])));
        let running_var = store.add(&format!("{name}.running_var"), TensorKind::Buffer, ArrayD::from_elem(ndarray::IxDyn(&[dim]), 1.0));
        BatchNorm { gamma, beta, running_mean, running_var, dim }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: VarId) -> VarId {
        if ctx.train {
            let gamma = ctx.var(self.gamma);
            let beta = ctx.var(self.beta);
            let (y, mean, var) = ctx.g.batch_norm_train(x, gamma, beta, BN_EPS);
            // Running stats use the unbiased batch variance.
            let n: usize = {
                let s = ctx.g.shape(x);
                if s.len() == 2 { s[0] } else { s[0] * s[2] * s[3] }
            };
            let unbias = if n > 1 { n as f32 / (n as f32 - 1.0) } else { 1.0 };
            let rm = ctx.store.entries[self.running_mean].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let rv = ctx.store.entries[self.running_var].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let new_rm = &rm * (1.0 - BN_MOMENTUM) + &mean * BN_MOMENTUM;
            let new_rv = &rv * (1.0 - BN_MOMENTUM) + &(var.mapv(|v| v * unbias)) * BN_MOMENTUM;
            ctx.store.set_value(self.running_mean, new_rm.into_dyn());
            ctx.store.set_value(self.running_var, new_rv.into_dyn());
            y
        } else {
            let rm = ctx.store.entries[self.running_mean].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let rv = ctx.store.entries[self.running_var].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let ga = ctx.store.entries[self.gamma].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let be = ctx.store.entries[self.beta].value.view().into_dimensionality::<Ix1>().unwrap().to_owned();
            let invstd = rv.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
            let scale = &ga * &invstd;
            let shift = Array1::from_shape_fn(self.dim, |i| be[i] - rm[i] * scale[i]);
            ctx.g.chan_affine(x, scale, shift)
        }
    }
}

/// Token embedding table applied to one-hot (or straight-through one-hot)
/// rows via matrix product, so gradients reach both the table and the
/// relaxed sample.
pub struct Embedding {
    table: usize,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(&format!("{name}.weight"), TensorKind::Param, crate::nn::normal_init(rng, &[vocab, dim]));
        Embedding { table, vocab, dim }
    }

    /// `onehot`: `(B, vocab)` -> `(B, dim)`.
    pub fn forward(&self, ctx: &mut Ctx, onehot: VarId) -> VarId {
        let t = ctx.var(self.table);
        ctx.g.matmul(onehot, t)
    }

    /// Builds the constant one-hot matrix for a batch of token ids.
    pub fn onehot(&self, ctx: &mut Ctx, tokens: &[u32]) -> VarId {
        let mut m = ndarray::Array2::<f32>::zeros((tokens.len(), self.vocab));
        for (i, &t) in tokens.iter().enumerate() {
            assert!((t as usize) < self.vocab, "token {t} out of range");
            m[[i, t as usize]] = 1.0;
        }
        ctx.g.leaf(m.into_dyn())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    #[test]
    fn batch_norm_train_updates_running_stats_and_eval_uses_them() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 3);
        let x = ArrayD::from_shape_fn(IxDyn(&[16, 3]), |ix| (ix[0] as f32) * 0.1 + ix[1] as f32);

        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, true, false);
        let xv = ctx.g.leaf(x.clone());
        let y = bn.forward(&mut ctx, xv);
        // Train-mode output is standardized per column.
        let yv = ctx.g.value(y);
        let col0: Vec<f32> = (0..16).map(|i| yv[[i, 0]]).collect();
        let mean: f32 = col0.iter().sum::<f32>() / 16.0;
        assert!(mean.abs() < 1e-5);

        let rm = store.entries.iter().find(|e| e.name == "bn.running_mean").unwrap();
        assert!(rm.value.iter().any(|&v| v != 0.0));

        // Eval mode must be deterministic given the running stats.
        let mut g2 = Graph::new();
        let mut ctx = Ctx::new(&mut g2, &mut store, false, false);
        let xv = ctx.g.leaf(x.clone());
        let y1 = bn.forward(&mut ctx, xv);
        let v1 = ctx.g.value(y1).clone();
        let mut g3 = Graph::new();
        let mut ctx = Ctx::new(&mut g3, &mut store, false, false);
        let xv = ctx.g.leaf(x);
        let y2 = bn.forward(&mut ctx, xv);
        assert_eq!(v1, *ctx.g.value(y2));
    }

    #[test]
    fn linear_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "fc", 4, 3, true);
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, true, true);
        let x = ctx.g.leaf(ArrayD::from_elem(IxDyn(&[2, 4]), 0.5));
        let y = lin.forward(&mut ctx, x);
        assert_eq!(ctx.g.shape(y), &[2, 3]);
        let s = ctx.g.sum_all(y);
        let grads = g.backward(s);
        store.absorb_grads(&g, &grads);
        assert!(store.entries.iter().all(|e| e.kind != TensorKind::Param || e.grad.iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn embedding_lookup_matches_table_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, &mut rng, "emb", 5, 3);
        let table = store.value(0).clone();
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &mut store, false, false);
        let oh = emb.onehot(&mut ctx, &[2, 4]);
        let e = emb.forward(&mut ctx, oh);
        let v = ctx.g.value(e);
        for j in 0..3 {
            assert_eq!(v[[0, j]], table[[2, j]]);
            assert_eq!(v[[1, j]], table[[4, j]]);
        }
    }
}
