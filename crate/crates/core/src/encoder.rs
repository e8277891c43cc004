//! Per-modality inference networks and product-of-experts fusion.
//!
//! The public functions work on one cell at a time. The `*_batch` variants
//! are what training uses; they process a minibatch as matrices and keep the
//! intermediates needed by the backward pass.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::params::{EncoderWeights, PoeMode};

/// Log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Gaussian posterior from a single modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityPosterior {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
}

/// Gaussian posterior after fusing all available modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedPosterior {
    pub mu: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopicState {
    pub delta: Array1<f64>,
    /// Topic mixture, `softmax(delta)`.
    pub theta: Array1<f64>,
    /// Integrated embedding `theta * (alpha + beta_d)`.
    pub z: Array1<f64>,
}

/// Runs one cell's normalized features through the modality's network.
pub fn encode_modality(x: ArrayView1<f64>, weights: &EncoderWeights) -> Result<ModalityPosterior> {
    if x.len() != weights.n_features() {
        return Err(Error::Argument(format!(
            "encoder expects {} features, got {}",
            weights.n_features(),
            x.len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::Argument("encoder input is not finite".into()));
    }
    let rows = x.insert_axis(Axis(0));
    let out = encode_batch(rows, weights);
    Ok(ModalityPosterior {
        mu: out.mu.row(0).to_owned(),
        var: out.logvar.row(0).mapv(f64::exp),
    })
}

/// Fuses per-modality posteriors into one Gaussian.
pub fn fuse_poe(posteriors: &[ModalityPosterior], mode: PoeMode) -> Result<FusedPosterior> {
    let first = posteriors
        .first()
        .ok_or_else(|| Error::Argument("cannot fuse an empty list of posteriors".into()))?;
    let k = first.mu.len();
    if posteriors.iter().any(|p| p.mu.len() != k || p.var.len() != k) {
        return Err(Error::Argument("posteriors disagree on the number of topics".into()));
    }
    let mut mu = Array1::zeros(k);
    let mut var = Array1::zeros(k);
    let mut mus = Vec::with_capacity(posteriors.len());
    let mut vars = Vec::with_capacity(posteriors.len());
    for j in 0..k {
        mus.clear();
        vars.clear();
        mus.extend(posteriors.iter().map(|p| p.mu[j]));
        vars.extend(posteriors.iter().map(|p| p.var[j]));
        let (m, v) = fuse_scalar(&mus, &vars, mode);
        mu[j] = m;
        var[j] = v;
    }
    Ok(FusedPosterior { mu, var })
}

fn fuse_scalar(mus: &[f64], vars: &[f64], mode: PoeMode) -> (f64, f64) {
    match mode {
        PoeMode::PrecisionWeighted => {
            let mut precision = 1.0;
            let mut weighted = 0.0;
            for (m, v) in mus.iter().zip(vars) {
                precision += 1.0 / v;
                weighted += m / v;
            }
            let var = 1.0 / precision;
            (weighted * var, var)
        }
        PoeMode::PaperLiteral => {
            let mut denom = 1.0;
            let mut num = 0.0;
            let mut prod = 1.0;
            for (m, v) in mus.iter().zip(vars) {
                denom += v;
                num += m * v;
                prod *= v;
            }
            (num / denom, prod / denom)
        }
    }
}

/// Reparameterized draw `mu + sqrt(var) * noise`.
pub fn sample_delta(post: &FusedPosterior, noise: ArrayView1<f64>) -> Array1<f64> {
    &post.mu + &(post.var.mapv(f64::sqrt) * noise)
}

/// Numerically stable softmax.
pub fn to_theta(delta: ArrayView1<f64>) -> Array1<f64> {
    let max = delta.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = delta.mapv(|d| (d - max).exp());
    let total = out.sum();
    out /= total;
    out
}

/// `theta * (alpha + beta_d)`.
pub fn integrate(theta: ArrayView1<f64>, alpha: &Array2<f64>, beta_d: &Array2<f64>) -> Array1<f64> {
    theta.dot(alpha) + theta.dot(beta_d)
}

/// Encoder outputs for a minibatch plus the activations backprop needs.
pub(crate) struct EncoderBatch {
    pub input: Array2<f64>,
    pub h1: Array2<f64>,
    pub h2: Array2<f64>,
    pub mu: Array2<f64>,
    /// Clamped log-variance.
    pub logvar: Array2<f64>,
    /// Whether the raw log-variance was strictly inside the clamp range.
    pub unclamped: Array2<bool>,
}

pub(crate) fn encode_batch(x: ArrayView2<f64>, w: &EncoderWeights) -> EncoderBatch {
    let k = w.n_topics();
    let mut h1 = x.dot(&w.w1.t()) + &w.b1;
    h1.mapv_inplace(f64::tanh);
    let mut h2 = h1.dot(&w.w2.t()) + &w.b2;
    h2.mapv_inplace(f64::tanh);
    let out = h2.dot(&w.w3.t()) + &w.b3;
    let mu = out.slice(ndarray::s![.., ..k]).to_owned();
    let raw = out.slice(ndarray::s![.., k..]);
    let unclamped = raw.mapv(|r| r > -LOGVAR_CLAMP && r < LOGVAR_CLAMP);
    let logvar = raw.mapv(|r| r.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    EncoderBatch {
        input: x.to_owned(),
        h1,
        h2,
        mu,
        logvar,
        unclamped,
    }
}

/// Accumulates weight gradients given upstream gradients on `mu` and the
/// clamped log-variance.
pub(crate) fn encode_batch_backward(
    batch: &EncoderBatch,
    w: &EncoderWeights,
    d_mu: &Array2<f64>,
    d_logvar: &Array2<f64>,
    grad: &mut EncoderWeights,
) {
    let k = w.n_topics();
    let n = batch.input.nrows();
    let mut d_out = Array2::zeros((n, 2 * k));
    d_out.slice_mut(ndarray::s![.., ..k]).assign(d_mu);
    Zip::from(d_out.slice_mut(ndarray::s![.., k..]))
        .and(d_logvar)
        .and(&batch.unclamped)
        .for_each(|o, &g, &inside| *o = if inside { g } else { 0.0 });

    grad.w3 += &d_out.t().dot(&batch.h2);
    grad.b3 += &d_out.sum_axis(Axis(0));
    let mut d_a2 = d_out.dot(&w.w3);
    Zip::from(&mut d_a2).and(&batch.h2).for_each(|g, &h| *g *= 1.0 - h * h);

    grad.w2 += &d_a2.t().dot(&batch.h1);
    grad.b2 += &d_a2.sum_axis(Axis(0));
    let mut d_a1 = d_a2.dot(&w.w2);
    Zip::from(&mut d_a1).and(&batch.h1).for_each(|g, &h| *g *= 1.0 - h * h);

    grad.w1 += &d_a1.t().dot(&batch.input);
    grad.b1 += &d_a1.sum_axis(Axis(0));
}

/// Batched fusion over cells. `mus[i]`/`logvars[i]` are B x K for the i-th
/// available modality.
pub(crate) fn fuse_batch(mus: &[&Array2<f64>], logvars: &[&Array2<f64>], mode: PoeMode) -> (Array2<f64>, Array2<f64>) {
    let (b, k) = mus[0].dim();
    let mut mu = Array2::zeros((b, k));
    let mut var = Array2::zeros((b, k));
    let mut ms = vec![0.0; mus.len()];
    let mut vs = vec![0.0; mus.len()];
    for r in 0..b {
        for j in 0..k {
            for i in 0..mus.len() {
                ms[i] = mus[i][[r, j]];
                vs[i] = logvars[i][[r, j]].exp();
            }
            let (m, v) = fuse_scalar(&ms, &vs, mode);
            mu[[r, j]] = m;
            var[[r, j]] = v;
        }
    }
    (mu, var)
}

/// Backward of [`fuse_batch`]: gradients on each modality's mean and clamped
/// log-variance.
pub(crate) fn fuse_batch_backward(
    mus: &[&Array2<f64>],
    logvars: &[&Array2<f64>],
    fused_mu: &Array2<f64>,
    fused_var: &Array2<f64>,
    d_fused_mu: &Array2<f64>,
    d_fused_var: &Array2<f64>,
    mode: PoeMode,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let (b, k) = mus[0].dim();
    let n_mod = mus.len();
    let mut d_mu: Vec<Array2<f64>> = (0..n_mod).map(|_| Array2::zeros((b, k))).collect();
    let mut d_lv: Vec<Array2<f64>> = (0..n_mod).map(|_| Array2::zeros((b, k))).collect();
    for r in 0..b {
        for j in 0..k {
            let gm = d_fused_mu[[r, j]];
            let gv = d_fused_var[[r, j]];
            let mu_star = fused_mu[[r, j]];
            let var_star = fused_var[[r, j]];
            match mode {
                PoeMode::PrecisionWeighted => {
                    // var* = 1/S, mu* = A/S with S = 1 + sum T_i, A = sum mu_i T_i.
                    for i in 0..n_mod {
                        let t = (-logvars[i][[r, j]]).exp();
                        let mu_i = mus[i][[r, j]];
                        d_mu[i][[r, j]] = gm * t * var_star;
                        let d_t = gm * (mu_i - mu_star) * var_star - gv * var_star * var_star;
                        d_lv[i][[r, j]] = -d_t * t;
                    }
                }
                PoeMode::PaperLiteral => {
                    // mu* = A/S, var* = P/S with S = 1 + sum v_i, A = sum mu_i v_i, P = prod v_i.
                    let s: f64 = 1.0 + (0..n_mod).map(|i| logvars[i][[r, j]].exp()).sum::<f64>();
                    for i in 0..n_mod {
                        let v = logvars[i][[r, j]].exp();
                        let mu_i = mus[i][[r, j]];
                        d_mu[i][[r, j]] = gm * v / s;
                        let others: f64 = (0..n_mod)
                            .filter(|&o| o != i)
                            .map(|o| logvars[o][[r, j]].exp())
                            .product();
                        let d_v = gm * (mu_i - mu_star) / s + gv * (others - var_star) / s;
                        d_lv[i][[r, j]] = d_v * v;
                    }
                }
            }
        }
    }
    (d_mu, d_lv)
}

/// Row-wise stable softmax.
pub(crate) fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}
