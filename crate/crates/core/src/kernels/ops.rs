//! Tape-level (f32) compositions of the kernel formulas, used inside model
//! forward passes. Each mirrors its `f64` counterpart in the parent module;
//! consistency between the two is covered by tests here.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::graph::{Graph, VarId};

/// Log-variances are clamped to this range before exponentiation.
pub const LOGVAR_CLAMP: (f32, f32) = (-10.0, 10.0);

/// Mean over rows of `-cos(a_i, b_i)` for `(B, d)` inputs.
pub fn neg_cosine_mean(g: &mut Graph, a: VarId, b: VarId) -> VarId {
    let batch = g.shape(a)[0] as f32;
    let an = g.row_normalize(a, 1e-12);
    let bn = g.row_normalize(b, 1e-12);
    let prod = g.mul(an, bn);
    let s = g.sum_all(prod);
    g.scale(s, -1.0 / batch)
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))` summed over latent dimensions
/// and averaged over the batch; `mu` and `logvar` are `(B, d_w)`.
pub fn gaussian_kl_mean(g: &mut Graph, mu: VarId, logvar: VarId) -> VarId {
    let batch = g.shape(mu)[0] as f32;
    let lv = g.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    let mu2 = g.mul(mu, mu);
    let var = g.exp(lv);
    let a = g.add(mu2, var);
    let b = g.sub(a, lv);
    let c = g.add_scalar(b, -1.0);
    let s = g.sum_all(c);
    g.scale(s, 0.5 / batch)
}

/// `w = mu + exp(logvar/2) * eps` with fresh standard-normal noise; the
/// noise enters as a constant leaf so gradients reach only `mu`/`logvar`.
pub fn reparameterize<R: Rng>(g: &mut Graph, mu: VarId, logvar: VarId, rng: &mut R) -> VarId {
    let shape: Vec<usize> = g.shape(mu).to_vec();
    let eps = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        let u1: f32 = rng.gen_range(f32::MIN_POSITIVE..1.0);
        let u2: f32 = rng.gen::<f32>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f32::consts::PI * u2).cos()
    });
    let eps = g.leaf(eps);
    let lv = g.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1);
    let half = g.scale(lv, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps);
    g.add(mu, noise)
}

/// Mean over message positions and batch of
/// `KL(Cat(softmax(row)) || Uniform(K))`, where `step_logits` holds one
/// `(B, K)` node per autoregressive step.
pub fn categorical_kl_uniform_mean(g: &mut Graph, step_logits: &[VarId]) -> VarId {
    let l = step_logits.len();
    assert!(l >= 1, "categorical KL needs at least one position");
    let (b, k) = (g.shape(step_logits[0])[0], g.shape(step_logits[0])[1]);
    let ln_k = (k as f32).ln();
    let mut acc: Option<VarId> = None;
    for &logits in step_logits {
        let p = g.softmax(logits);
        let lp = g.log_softmax(logits);
        let plp = g.mul(p, lp);
        let s = g.sum_all(plp);
        acc = Some(match acc {
            Some(a) => g.add(a, s),
            None => s,
        });
    }
    let total = acc.unwrap();
    let scaled = g.scale(total, 1.0 / (b * l) as f32);
    g.add_scalar(scaled, ln_k)
}

/// One straight-through Gumbel-Softmax draw over a `(B, K)` batch of logits.
/// Returns the gradient-carrying one-hot node and the sampled token ids.
pub fn gumbel_softmax_st<R: Rng>(
    g: &mut Graph,
    logits: VarId,
    tau: f32,
    rng: &mut R,
) -> (VarId, Vec<u32>) {
    assert!(tau > 0.0, "gumbel softmax: tau must be > 0");
    let shape: Vec<usize> = g.shape(logits).to_vec();
    let (b, k) = (shape[0], shape[1]);
    let noise = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        let u: f32 = rng.gen::<f32>().clamp(1e-10, 1.0 - 1e-7);
        -(-u.ln()).ln()
    });

    // Hard sample: argmax of logits + noise (temperature-free).
    let logits_v = g.value(logits).clone();
    let mut hard = Array2::<f32>::zeros((b, k));
    let mut tokens = Vec::with_capacity(b);
    for i in 0..b {
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for j in 0..k {
            let v = logits_v[[i, j]] + noise[[i, j]];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        hard[[i, best]] = 1.0;
        tokens.push(best as u32);
    }

    // Soft sample carries the gradient.
    let noise_leaf = g.leaf(noise);
    let perturbed = g.add(logits, noise_leaf);
    let scaled = g.scale(perturbed, 1.0 / tau);
    let soft = g.softmax(scaled);
    let st = g.straight_through(soft, hard.into_dyn());
    (st, tokens)
}
