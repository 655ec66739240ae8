//! LSTM cell assembled from tape primitives. Gate order follows the i, f, g,
//! o convention; backward needs no dedicated rule because every step is a
//! composition of matmul, slice and elementwise ops.

use rand_chacha::ChaCha8Rng;

use crate::graph::VarId;
use crate::nn::{uniform_init, Ctx, ParamStore, TensorKind};

pub struct LstmCell {
    wx: usize,
    wh: usize,
    b: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input_dim: usize, hidden_dim: usize) -> Self {
        let bound = 1.0 / (hidden_dim as f32).sqrt();
        let wx = store.add(&format!("{name}.weight_x"), TensorKind::Param, uniform_init(rng, &[input_dim, 4 * hidden_dim], bound));
        let wh = store.add(&format!("{name}.weight_h"), TensorKind::Param, uniform_init(rng, &[hidden_dim, 4 * hidden_dim], bound));
        let b = store.add(&format!("{name}.bias"), TensorKind::Param, uniform_init(rng, &[4 * hidden_dim], bound));
        LstmCell { wx, wh, b, input_dim, hidden_dim }
    }

    /// One step: `(x, h, c) -> (h', c')` with `x: (B, input_dim)` and
    /// `h, c: (B, hidden_dim)`.
    pub fn step(&self, ctx: &mut Ctx, x: VarId, h: VarId, c: VarId) -> (VarId, VarId) {
        let hd = self.hidden_dim;
        let wx = ctx.var(self.wx);
        let wh = ctx.var(self.wh);
        let b = ctx.var(self.b);
        let gx = ctx.g.matmul(x, wx);
        let gh = ctx.g.matmul(h, wh);
        let gsum = ctx.g.add(gx, gh);
        let gates = ctx.g.add_row(gsum, b);

        let i_raw = ctx.g.slice_cols(gates, 0, hd);
        let f_raw = ctx.g.slice_cols(gates, hd, hd);
        let g_raw = ctx.g.slice_cols(gates, 2 * hd, hd);
        let o_raw = ctx.g.slice_cols(gates, 3 * hd, hd);

        let i = ctx.g.sigmoid(i_raw);
        let f = ctx.g.sigmoid(f_raw);
        let gg = ctx.g.tanh(g_raw);
        let o = ctx.g.sigmoid(o_raw);

        let fc = ctx.g.mul(f, c);
        let ig = ctx.g.mul(i, gg);
        let c_new = ctx.g.add(fc, ig);
        let c_act = ctx.g.tanh(c_new);
        let h_new = ctx.g.mul(o, c_act);
        (h_new, c_new)
    }

    /// Zero-filled initial state for a batch.
    pub fn zero_state(&self, ctx: &mut Ctx, batch: usize) -> (VarId, VarId) {
        let h = ctx.g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[batch, self.hidden_dim])));
        let c = ctx.g.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[batch, self.hidden_dim])));
        (h, c)
    }
}
