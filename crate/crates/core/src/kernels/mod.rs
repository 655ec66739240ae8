//! Differentiable numeric primitives shared by every model in the crate:
//! Gaussian and categorical KL divergences, reparameterized sampling,
//! Gumbel-Softmax with the straight-through estimator, and the negative
//! cosine similarity.
//!
//! Everything here is pure given an explicit rng. The `f64` functions carry
//! hand-derived analytic gradients so they can be checked against central
//! finite differences in double precision; [`ops`] re-expresses the same
//! formulas as `f32` tape compositions for training.

pub mod ops;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};

/// Mean and log-variance of a diagonal Gaussian `q(w|z)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mu: Array1<f64>,
    pub logvar: Array1<f64>,
}

impl GaussianParams {
    pub fn new(mu: Array1<f64>, logvar: Array1<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Domain("GaussianParams: dimension must be >= 1".into()));
        }
        if mu.len() != logvar.len() {
            return Err(Error::Shape(format!(
                "GaussianParams: mu has dim {}, logvar has dim {}",
                mu.len(),
                logvar.len()
            )));
        }
        if !mu.iter().chain(logvar.iter()).all(|v| v.is_finite()) {
            return Err(Error::Domain("GaussianParams: non-finite entry".into()));
        }
        Ok(Self { mu, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Unnormalized per-position log-probabilities of a message: shape
/// `(message_len L, vocab_size K)`.
#[derive(Debug, Clone)]
pub struct CategoricalLogits {
    pub logits: Array2<f64>,
}

impl CategoricalLogits {
    pub fn new(logits: Array2<f64>) -> Result<Self> {
        let (l, k) = logits.dim();
        if l < 1 {
            return Err(Error::Domain("CategoricalLogits: message length must be >= 1".into()));
        }
        if k < 2 {
            return Err(Error::Domain("CategoricalLogits: vocab size must be >= 2".into()));
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("CategoricalLogits: non-finite entry".into()));
        }
        Ok(Self { logits })
    }

    pub fn message_len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.ncols()
    }
}

/// `KL(N(mu, diag(exp(logvar))) || N(0, I))`
/// `= 1/2 sum_i (mu_i^2 + exp(logvar_i) - 1 - logvar_i)`.
pub fn gaussian_kl_std(params: &GaussianParams) -> Result<f64> {
    validate_gaussian(params)?;
    let kl = params
        .mu
        .iter()
        .zip(params.logvar.iter())
        .map(|(&m, &lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
        * 0.5;
    Ok(kl)
}

/// Analytic gradient of [`gaussian_kl_std`]: `(d/dmu, d/dlogvar)`.
pub fn gaussian_kl_std_grad(params: &GaussianParams) -> Result<(Array1<f64>, Array1<f64>)> {
    validate_gaussian(params)?;
    let dmu = params.mu.clone();
    let dlogvar = params.logvar.mapv(|lv| 0.5 * (lv.exp() - 1.0));
    Ok((dmu, dlogvar))
}

fn validate_gaussian(params: &GaussianParams) -> Result<()> {
    if !params.mu.iter().chain(params.logvar.iter()).all(|v| v.is_finite()) {
        return Err(Error::Domain("gaussian_kl_std: non-finite input".into()));
    }
    if params.mu.len() != params.logvar.len() || params.mu.is_empty() {
        return Err(Error::Shape("gaussian_kl_std: invalid dimensions".into()));
    }
    Ok(())
}

/// Row-wise softmax and log-softmax, numerically stabilized.
fn row_log_softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    row.mapv(|v| v - lse)
}

/// Mean over positions of `KL(Cat(softmax(row)) || Uniform(K)) = log K - H(p)`.
pub fn categorical_kl_uniform(logits: &CategoricalLogits) -> Result<f64> {
    let (l, k) = logits.logits.dim();
    if k < 2 {
        return Err(Error::Domain("categorical_kl_uniform: vocab size must be >= 2".into()));
    }
    let ln_k = (k as f64).ln();
    let mut total = 0.0;
    for row in logits.logits.rows() {
        let lp = row_log_softmax(row);
        // sum_k p_k log p_k + log K
        total += lp.iter().map(|&lpk| lpk.exp() * lpk).sum::<f64>() + ln_k;
    }
    Ok(total / l as f64)
}

/// Analytic gradient of [`categorical_kl_uniform`] w.r.t. the logits:
/// `d/dl_j = p_j (log p_j + H(p)) / L` per row.
pub fn categorical_kl_uniform_grad(logits: &CategoricalLogits) -> Result<Array2<f64>> {
    let (l, k) = logits.logits.dim();
    if k < 2 {
        return Err(Error::Domain("categorical_kl_uniform: vocab size must be >= 2".into()));
    }
    let mut grad = Array2::<f64>::zeros((l, k));
    for (i, row) in logits.logits.rows().into_iter().enumerate() {
        let lp = row_log_softmax(row);
        let h: f64 = -lp.iter().map(|&v| v.exp() * v).sum::<f64>();
        for j in 0..k {
            let p = lp[j].exp();
            grad[[i, j]] = p * (lp[j] + h) / l as f64;
        }
    }
    Ok(grad)
}

/// `w = mu + exp(logvar / 2) * eps`, with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize_gaussian<R: Rng>(params: &GaussianParams, rng: &mut R) -> Result<Array1<f64>> {
    validate_gaussian(params)?;
    let eps = Array1::from_shape_fn(params.dim(), |_| standard_normal(rng));
    Ok(reparameterize_with_noise(params, &eps))
}

/// Deterministic half of the reparameterization trick; gradients flow to
/// `mu` and `logvar`, never to `eps`.
pub fn reparameterize_with_noise(params: &GaussianParams, eps: &Array1<f64>) -> Array1<f64> {
    let mut out = params.mu.clone();
    for i in 0..out.len() {
        out[i] += (0.5 * params.logvar[i]).exp() * eps[i];
    }
    out
}

/// A Box-Muller standard normal; used where an `f64` draw is needed from any
/// `Rng` without pulling in a distributions dependency.
fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Clamp bounds for the uniform draw feeding the Gumbel transform.
const GUMBEL_U_LO: f64 = 1e-10;
const GUMBEL_U_HI: f64 = 1.0 - 1e-7;

/// Standard Gumbel noise `-log(-log(U))` with `U` clamped away from {0, 1}.
pub fn sample_gumbel<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let u: f64 = rng.gen::<f64>().clamp(GUMBEL_U_LO, GUMBEL_U_HI);
        -(-u.ln()).ln()
    })
}

/// Result of one Gumbel-Softmax straight-through draw.
#[derive(Debug, Clone)]
pub struct GumbelSoftmaxSample {
    /// Row-wise one-hot at the argmax of the perturbed logits.
    pub hard: Array2<f64>,
    /// `softmax((logits + gumbel) / tau)` per row.
    pub soft: Array2<f64>,
    /// Token index per position (argmax of each `hard` row).
    pub tokens: Vec<usize>,
}

/// Draws Gumbel noise and applies [`gumbel_softmax_with_noise`].
pub fn sample_gumbel_softmax_st<R: Rng>(
    logits: &CategoricalLogits,
    tau: f64,
    rng: &mut R,
) -> Result<GumbelSoftmaxSample> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("gumbel softmax: tau must be > 0, got {tau}")));
    }
    let g = sample_gumbel(logits.message_len(), logits.vocab_size(), rng);
    Ok(gumbel_softmax_with_noise(logits, tau, &g))
}

/// The deterministic part of the straight-through Gumbel-Softmax given
/// explicit noise. The hard sample is the argmax of `logits + noise`
/// (temperature-free, so its marginals equal the softmax of the logits);
/// the soft sample carries the gradient.
pub fn gumbel_softmax_with_noise(
    logits: &CategoricalLogits,
    tau: f64,
    noise: &Array2<f64>,
) -> GumbelSoftmaxSample {
    let (l, k) = logits.logits.dim();
    let mut hard = Array2::<f64>::zeros((l, k));
    let mut soft = Array2::<f64>::zeros((l, k));
    let mut tokens = Vec::with_capacity(l);
    for i in 0..l {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..k {
            let v = logits.logits[[i, j]] + noise[[i, j]];
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        hard[[i, best]] = 1.0;
        tokens.push(best);
        let scaled = Array1::from_shape_fn(k, |j| (logits.logits[[i, j]] + noise[[i, j]]) / tau);
        let lp = row_log_softmax(scaled.view());
        for j in 0..k {
            soft[[i, j]] = lp[j].exp();
        }
    }
    GumbelSoftmaxSample { hard, soft, tokens }
}

/// Vector-Jacobian product of the soft sample w.r.t. the logits at fixed
/// noise: for each row, `dl_j = s_j (u_j - sum_k u_k s_k) / tau`.
pub fn gumbel_softmax_soft_vjp(
    logits: &CategoricalLogits,
    tau: f64,
    noise: &Array2<f64>,
    upstream: &Array2<f64>,
) -> Array2<f64> {
    let sample = gumbel_softmax_with_noise(logits, tau, noise);
    let (l, k) = logits.logits.dim();
    let mut grad = Array2::<f64>::zeros((l, k));
    for i in 0..l {
        let dot: f64 = (0..k).map(|j| upstream[[i, j]] * sample.soft[[i, j]]).sum();
        for j in 0..k {
            grad[[i, j]] = sample.soft[[i, j]] * (upstream[[i, j]] - dot) / tau;
        }
    }
    grad
}

/// `-(x/|x|) . (y/|y|)` for a single pair of vectors.
pub fn neg_cosine(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape("neg_cosine: dimension mismatch".into()));
    }
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("neg_cosine: zero-norm input".into()));
    }
    Ok(-x.dot(&y) / (nx * ny))
}

/// Batched [`neg_cosine`]: mean over rows of `-cos(x_i, y_i)`.
pub fn neg_cosine_batch(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::Shape("neg_cosine_batch: shape mismatch".into()));
    }
    let mut total = 0.0;
    for (xr, yr) in x.rows().into_iter().zip(y.rows()) {
        total += neg_cosine(xr, yr)?;
    }
    Ok(total / x.nrows() as f64)
}

/// Analytic gradient of [`neg_cosine`]: with `c = cos(x, y)`,
/// `d/dx = (c * x/|x| - y/|y|) / |x|` and symmetrically for `y`.
pub fn neg_cosine_grad(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Domain("neg_cosine: zero-norm input".into()));
    }
    let c = x.dot(&y) / (nx * ny);
    let dx = Array1::from_shape_fn(x.len(), |i| (c * x[i] / nx - y[i] / ny) / nx);
    let dy = Array1::from_shape_fn(y.len(), |i| (c * y[i] / ny - x[i] / nx) / ny);
    Ok((dx, dy))
}
