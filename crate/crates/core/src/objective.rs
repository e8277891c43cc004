//! Training objective: reconstruction ELBO, KL against the learnable domain
//! prior, the domain-deviation norm penalty and the neighborhood contrastive
//! term, together with their gradients.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::dataio::{normalize, Dataset, NormalizedView, DEFAULT_SCALE_FACTOR};
use crate::decoder::{decode_rates, log_likelihood};
use crate::encoder::{
    encode_batch, encode_batch_backward, encode_modality, fuse_batch, fuse_batch_backward, fuse_poe,
    integrate, sample_delta, softmax_rows, to_theta, TopicState,
};
use crate::error::{Error, Result};
use crate::params::{ModelHyper, ModelParams, PoeMode};

/// Per-batch loss terms. `total = nll + kl + beta_penalty + ncl`.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    /// Negative reconstruction log-likelihood, averaged over cells.
    pub nll: f64,
    /// KL to the domain prior, averaged over cells.
    pub kl: f64,
    pub beta_penalty: f64,
    pub ncl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<(&'static str, f64)> {
        [
            ("nll", self.nll),
            ("kl", self.kl),
            ("beta_penalty", self.beta_penalty),
            ("ncl", self.ncl),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over dimensions.
pub fn kl_gaussian(
    mu_q: ArrayView1<f64>,
    var_q: ArrayView1<f64>,
    mu_p: ArrayView1<f64>,
    var_p: ArrayView1<f64>,
) -> Result<f64> {
    let k = mu_q.len();
    if var_q.len() != k || mu_p.len() != k || var_p.len() != k {
        return Err(Error::Argument("KL operands have different lengths".into()));
    }
    if var_q.iter().chain(var_p.iter()).any(|&v| !(v > 0.0)) {
        return Err(Error::Argument("KL requires strictly positive variances".into()));
    }
    Ok((0..k)
        .map(|j| kl_term(mu_q[j], var_q[j], mu_p[j], var_p[j].ln(), var_p[j]))
        .sum())
}

#[inline]
fn kl_term(mu_q: f64, var_q: f64, mu_p: f64, logvar_p: f64, var_p: f64) -> f64 {
    let diff = mu_q - mu_p;
    0.5 * (logvar_p - var_q.ln()) + (var_q + diff * diff) / (2.0 * var_p) - 0.5
}

/// Exact k-nearest neighbours of every cell within one (domain, modality).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    pub domain_id: String,
    pub modality_id: String,
    /// `neighbors[n]` lists k cell indices, nearest first.
    pub neighbors: Vec<Vec<usize>>,
}

/// Euclidean kNN on the rows of `view`; ties go to the lower cell index.
pub fn build_neighbor_graph(view: &NormalizedView, k: usize) -> Result<NeighborGraph> {
    let x = &view.values;
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::Argument(format!(
            "k = {k} neighbours needs between 1 and {} (domain {} has {n} cells)",
            n.saturating_sub(1),
            view.domain_id
        )));
    }
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = x.row(i);
            let mut dist: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = xi
                        .iter()
                        .zip(x.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    (d, j)
                })
                .collect();
            dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            dist.truncate(k);
            dist.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(NeighborGraph {
        domain_id: view.domain_id.clone(),
        modality_id: view.modality_id.clone(),
        neighbors,
    })
}

/// Neighborhood contrastive loss of one batch, averaged over the batch.
///
/// `embeddings[i]` holds one row per batch cell (same order as `batch`) for
/// the i-th modality, and `graphs[i]` is that modality's neighbour graph over
/// all cells of the domain. Negatives are the other cells of the batch.
pub fn ncl_loss(embeddings: &[Array2<f64>], graphs: &[&NeighborGraph], batch: &[usize], kappa: f64) -> Result<f64> {
    if embeddings.len() != graphs.len() {
        return Err(Error::Argument("one neighbour graph per modality is required".into()));
    }
    let mut total = 0.0;
    for (u, g) in embeddings.iter().zip(graphs) {
        total += ncl_modality(u, &g.neighbors, batch, kappa, false)?.0;
    }
    Ok(total)
}

fn ncl_modality(
    u: &Array2<f64>,
    neighbors: &[Vec<usize>],
    batch: &[usize],
    kappa: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array2<f64>>)> {
    let b = batch.len();
    if u.nrows() != b {
        return Err(Error::Argument("embedding rows must match the batch".into()));
    }
    let mut slot = vec![usize::MAX; neighbors.len()];
    for (pos, &cell) in batch.iter().enumerate() {
        if cell >= neighbors.len() {
            return Err(Error::Argument(format!("batch cell {cell} out of range")));
        }
        slot[cell] = pos;
    }
    let norms: Array1<f64> = u.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(pos) = norms.iter().position(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::Argument(format!(
            "contrastive embedding of batch cell {} has zero or non-finite norm",
            batch[pos]
        )));
    }
    let unit = u / &norms.view().insert_axis(Axis(1));
    let sim = unit.dot(&unit.t()) / kappa;

    let mut loss = 0.0;
    let mut d_sim = want_grad.then(|| Array2::<f64>::zeros((b, b)));
    for n in 0..b {
        let positives: Vec<usize> = neighbors[batch[n]]
            .iter()
            .map(|&c| slot[c])
            .filter(|&p| p != usize::MAX && p != n)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let row = sim.row(n);
        let max = (0..b).filter(|&j| j != n).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + (0..b)
                .filter(|&j| j != n)
                .map(|j| (row[j] - max).exp())
                .sum::<f64>()
                .ln();
        for &i in &positives {
            loss += lse - row[i];
        }
        if let Some(ds) = d_sim.as_mut() {
            let weight = positives.len() as f64;
            for j in (0..b).filter(|&j| j != n) {
                ds[[n, j]] += weight * (row[j] - lse).exp();
            }
            for &i in &positives {
                ds[[n, i]] -= 1.0;
            }
        }
    }
    let inv_b = 1.0 / b as f64;
    loss *= inv_b;

    let grad = d_sim.map(|ds| {
        let d_cos = ds * (inv_b / kappa);
        let d_unit = d_cos.dot(&unit) + d_cos.t().dot(&unit);
        let mut d_u = Array2::zeros(u.raw_dim());
        for r in 0..b {
            let proj = d_unit.row(r).dot(&unit.row(r));
            let a = norms[r];
            for c in 0..u.ncols() {
                d_u[[r, c]] = (d_unit[[r, c]] - proj * unit[[r, c]]) / a;
            }
        }
        d_u
    });
    Ok((loss, grad))
}

/// One cell's observation of one modality.
#[derive(Debug, Clone, Copy)]
pub struct CellObservation<'a> {
    pub modality: usize,
    /// Encoder input (normalized features).
    pub normalized: ArrayView1<'a, f64>,
    pub counts: ArrayView1<'a, f64>,
}

/// Monte Carlo ELBO of one cell, composed from the per-cell building blocks.
///
/// `noise` has one standard-normal row of length K per sample; the
/// reconstruction term is averaged over samples and the returned topic state
/// comes from the first sample.
pub fn elbo_cell(
    observations: &[CellObservation<'_>],
    domain: usize,
    params: &ModelParams,
    poe_mode: PoeMode,
    noise: ArrayView2<f64>,
) -> Result<(f64, TopicState)> {
    if observations.is_empty() {
        return Err(Error::Argument("a cell needs at least one modality".into()));
    }
    if noise.nrows() == 0 {
        return Err(Error::Argument("at least one noise sample is required".into()));
    }
    let posteriors = observations
        .iter()
        .map(|o| encode_modality(o.normalized, &params.encoders[o.modality]))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_poe(&posteriors, poe_mode)?;
    let prior_var = params.prior_logvar[domain].mapv(f64::exp);
    let kl = kl_gaussian(
        fused.mu.view(),
        fused.var.view(),
        params.prior_mean[domain].view(),
        prior_var.view(),
    )?;
    let mut rec = 0.0;
    let mut first = None;
    for eps in noise.rows() {
        let delta = sample_delta(&fused, eps);
        let theta = to_theta(delta.view());
        for o in observations {
            let lambda = params.lambda_for(domain, o.modality).ok_or_else(|| {
                Error::Argument(format!(
                    "modality {} is not observed in domain {domain}",
                    o.modality
                ))
            })?;
            let rates = decode_rates(
                theta.view(),
                &params.alpha,
                &params.beta[domain],
                &params.rho[o.modality],
                lambda.view(),
            );
            rec += log_likelihood(o.counts, &rates);
        }
        if first.is_none() {
            let z = integrate(theta.view(), &params.alpha, &params.beta[domain]);
            first = Some(TopicState { delta, theta, z });
        }
    }
    rec /= noise.nrows() as f64;
    Ok((rec - kl, first.expect("noise has rows")))
}

/// How raw counts become encoder inputs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InputTransform {
    pub scale_factor: f64,
    pub log1p: bool,
}

impl Default for InputTransform {
    fn default() -> Self {
        Self {
            scale_factor: DEFAULT_SCALE_FACTOR,
            log1p: true,
        }
    }
}

/// One available modality of a domain, densified for training.
#[derive(Debug, Clone)]
pub struct ModalityData {
    pub modality: usize,
    pub inputs: Array2<f64>,
    pub counts: Array2<f64>,
    pub graph: Option<NeighborGraph>,
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub domain: usize,
    pub n_cells: usize,
    /// In the order of the schema's available modalities for the domain.
    pub modalities: Vec<ModalityData>,
}

/// Dense, model-ready view of a whole dataset.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub domains: Vec<DomainData>,
}

impl TrainingData {
    /// Normalizes every observed (domain, modality) and, when `knn_k` is
    /// given, builds the neighbour graphs on the normalized inputs.
    pub fn prepare(dataset: &Dataset, transform: InputTransform, knn_k: Option<usize>) -> Result<Self> {
        let domains = dataset
            .domains
            .iter()
            .enumerate()
            .map(|(d, block)| {
                let modalities = block
                    .modalities
                    .iter()
                    .map(|m| {
                        let view = normalize(block, &m.modality_id, transform.scale_factor, transform.log1p)?;
                        let graph = knn_k.map(|k| build_neighbor_graph(&view, k)).transpose()?;
                        Ok(ModalityData {
                            modality: dataset.modality_index(&m.modality_id).expect("validated"),
                            inputs: view.values,
                            counts: m.counts.to_dense(),
                            graph,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(DomainData {
                    domain: d,
                    n_cells: block.n_cells(),
                    modalities,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domains })
    }
}

/// Gradient of the loss, shaped like the parameters, plus which tensors the
/// batch actually reaches (in [`ModelParams::layout`] order).
#[derive(Debug, Clone)]
pub struct Gradient {
    pub values: ModelParams,
    pub active: Vec<bool>,
}

/// Tensors that receive gradient from a batch of `domain`.
pub fn active_tensors(params: &ModelParams, domain: usize) -> Vec<bool> {
    let s = &params.schema;
    let n_dom = s.domains.len();
    let n_mod = s.modalities.len();
    let n_lambda: usize = s.domains.iter().map(|d| d.modalities.len()).sum();
    let mut active = vec![false; 1 + 3 * n_dom + n_mod + n_lambda + 6 * n_mod];
    active[0] = true;
    active[1 + domain] = true;
    let lambda_base = 1 + n_dom + n_mod;
    let lambda_offset: usize = s.domains[..domain].iter().map(|d| d.modalities.len()).sum();
    for (slot, &m) in s.domains[domain].modalities.iter().enumerate() {
        active[1 + n_dom + m] = true;
        active[lambda_base + lambda_offset + slot] = true;
        let enc = lambda_base + n_lambda + 2 * n_dom + 6 * m;
        active[enc..enc + 6].iter_mut().for_each(|a| *a = true);
    }
    active[lambda_base + n_lambda + domain] = true;
    active[lambda_base + n_lambda + n_dom + domain] = true;
    active
}

/// Loss of one single-domain batch.
///
/// `noise` is `samples x batch x K` standard-normal draws.
pub fn total_loss(
    params: &ModelParams,
    hyper: &ModelHyper,
    data: &DomainData,
    batch: &[usize],
    noise: &Array3<f64>,
    ncl_enabled: bool,
) -> Result<LossBreakdown> {
    Ok(evaluate(params, hyper, data, batch, noise, ncl_enabled, false)?.0)
}

/// Loss and its gradient with respect to every parameter.
pub fn total_loss_and_grad(
    params: &ModelParams,
    hyper: &ModelHyper,
    data: &DomainData,
    batch: &[usize],
    noise: &Array3<f64>,
    ncl_enabled: bool,
) -> Result<(LossBreakdown, Gradient)> {
    let (loss, grad) = evaluate(params, hyper, data, batch, noise, ncl_enabled, true)?;
    Ok((loss, grad.expect("gradient requested")))
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row -= lse;
    }
    out
}

fn evaluate(
    params: &ModelParams,
    hyper: &ModelHyper,
    data: &DomainData,
    batch: &[usize],
    noise: &Array3<f64>,
    ncl_enabled: bool,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Gradient>)> {
    let d = data.domain;
    let b = batch.len();
    let k = params.n_topics();
    let (n_samples, nb, nk) = noise.dim();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if n_samples == 0 || nb != b || nk != k {
        return Err(Error::Argument(format!(
            "noise must be samples x {b} x {k}, got {n_samples} x {nb} x {nk}"
        )));
    }
    if let Some(&bad) = batch.iter().find(|&&c| c >= data.n_cells) {
        return Err(Error::Argument(format!("batch cell {bad} out of range")));
    }

    let encoded: Vec<_> = data
        .modalities
        .iter()
        .map(|md| {
            let x = md.inputs.select(Axis(0), batch);
            encode_batch(x.view(), &params.encoders[md.modality])
        })
        .collect();
    let mus: Vec<&Array2<f64>> = encoded.iter().map(|e| &e.mu).collect();
    let logvars: Vec<&Array2<f64>> = encoded.iter().map(|e| &e.logvar).collect();
    let (mu_f, var_f) = fuse_batch(&mus, &logvars, hyper.poe_mode);
    let sd_f = var_f.mapv(f64::sqrt);

    let prior_mean = &params.prior_mean[d];
    let prior_logvar = &params.prior_logvar[d];
    let prior_var = prior_logvar.mapv(f64::exp);
    let mut kl_sum = 0.0;
    for r in 0..b {
        for j in 0..k {
            kl_sum += kl_term(mu_f[[r, j]], var_f[[r, j]], prior_mean[j], prior_logvar[j], prior_var[j]);
        }
    }

    let counts: Vec<Array2<f64>> = data
        .modalities
        .iter()
        .map(|md| md.counts.select(Axis(0), batch))
        .collect();
    let totals: Vec<Array1<f64>> = counts.iter().map(|c| c.sum_axis(Axis(1))).collect();

    let omega = params.omega(d);
    let mut grad = want_grad.then(|| {
        let mut g = params.clone();
        g.fill_zero();
        g
    });
    let mut d_mu_f = Array2::<f64>::zeros((b, k));
    let mut d_var_f = Array2::<f64>::zeros((b, k));
    let sample_weight = 1.0 / (b * n_samples) as f64;
    let mut rec_sum = 0.0;

    for s in 0..n_samples {
        let eps = noise.index_axis(Axis(0), s);
        let delta = &mu_f + &(&sd_f * &eps);
        let theta = softmax_rows(&delta);
        let z = theta.dot(&omega);
        let mut d_z = Array2::<f64>::zeros(z.raw_dim());
        for (slot, md) in data.modalities.iter().enumerate() {
            let m = md.modality;
            let logits = z.dot(&params.rho[m]) + &params.lambda[d][slot];
            let log_rates = log_softmax_rows(&logits);
            rec_sum += Zip::from(&counts[slot])
                .and(&log_rates)
                .fold(0.0, |acc, &c, &lr| if c != 0.0 { acc + c * lr } else { acc })
                / n_samples as f64;
            if let Some(g) = grad.as_mut() {
                // d(-ll)/d logits = n r - x, scaled by 1/(B S).
                let mut d_logits = log_rates.mapv(f64::exp) * totals[slot].view().insert_axis(Axis(1));
                d_logits -= &counts[slot];
                d_logits *= sample_weight;
                g.rho[m] += &z.t().dot(&d_logits);
                g.lambda[d][slot] += &d_logits.sum_axis(Axis(0));
                d_z += &d_logits.dot(&params.rho[m].t());
            }
        }
        if let Some(g) = grad.as_mut() {
            let d_omega = theta.t().dot(&d_z);
            g.alpha += &d_omega;
            g.beta[d] += &d_omega;
            let d_theta = d_z.dot(&omega.t());
            let inner = (&theta * &d_theta).sum_axis(Axis(1));
            let d_delta = &theta * &(d_theta - &inner.insert_axis(Axis(1)));
            d_mu_f += &d_delta;
            Zip::from(&mut d_var_f)
                .and(&d_delta)
                .and(&eps)
                .and(&sd_f)
                .for_each(|dv, &dd, &e, &sd| *dv += dd * e / (2.0 * sd));
        }
    }

    let inv_b = 1.0 / b as f64;
    let beta_norm = params.beta[d].iter().map(|x| x * x).sum::<f64>().sqrt();
    let beta_penalty = hyper.lambda_beta * beta_norm;

    let mut ncl = 0.0;
    let mut d_mu_ncl: Vec<Option<Array2<f64>>> = vec![None; data.modalities.len()];
    if ncl_enabled {
        for (slot, md) in data.modalities.iter().enumerate() {
            let graph = md.graph.as_ref().ok_or_else(|| {
                Error::Argument("contrastive loss needs neighbour graphs".into())
            })?;
            let (loss, g) = ncl_modality(&encoded[slot].mu, &graph.neighbors, batch, hyper.kappa, want_grad)?;
            ncl += loss;
            d_mu_ncl[slot] = g;
        }
    }

    let nll = -rec_sum * inv_b;
    let kl = kl_sum * inv_b;
    let breakdown = LossBreakdown {
        nll,
        kl,
        beta_penalty,
        ncl,
        total: nll + kl + beta_penalty + ncl,
    };

    let Some(mut g) = grad else {
        return Ok((breakdown, None));
    };

    for r in 0..b {
        for j in 0..k {
            let diff = mu_f[[r, j]] - prior_mean[j];
            let pv = prior_var[j];
            let vq = var_f[[r, j]];
            d_mu_f[[r, j]] += inv_b * diff / pv;
            d_var_f[[r, j]] += inv_b * (0.5 / pv - 0.5 / vq);
            g.prior_mean[d][j] -= inv_b * diff / pv;
            g.prior_logvar[d][j] += inv_b * (0.5 - (vq + diff * diff) / (2.0 * pv));
        }
    }
    if beta_norm > 0.0 {
        g.beta[d].scaled_add(hyper.lambda_beta / beta_norm, &params.beta[d]);
    }

    let (d_mus, d_logvars) =
        fuse_batch_backward(&mus, &logvars, &mu_f, &var_f, &d_mu_f, &d_var_f, hyper.poe_mode);
    for (slot, md) in data.modalities.iter().enumerate() {
        let mut d_mu = d_mus[slot].clone();
        if let Some(extra) = &d_mu_ncl[slot] {
            d_mu += extra;
        }
        encode_batch_backward(
            &encoded[slot],
            &params.encoders[md.modality],
            &d_mu,
            &d_logvars[slot],
            &mut g.encoders[md.modality],
        );
    }

    let active = active_tensors(params, d);
    Ok((breakdown, Some(Gradient { values: g, active })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::fixtures::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Trapezoid quadrature of `q log(q/p)` for 1-D Gaussians.
    fn kl_quadrature(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
        let sq = vq.sqrt();
        let (lo, hi) = (mq - 14.0 * sq, mq + 14.0 * sq);
        let n = 200_000;
        let h = (hi - lo) / n as f64;
        let logpdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
        (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let lq = logpdf(x, mq, vq);
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * lq.exp() * (lq - logpdf(x, mp, vp))
            })
            .sum::<f64>()
            * h
    }

    fn kl1(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
        kl_gaussian(array![mq].view(), array![vq].view(), array![mp].view(), array![vp].view()).unwrap()
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl1(0.3, 2.0, 0.3, 2.0), 0.0);
        assert_abs_diff_eq!(kl1(1.0, 1.0, 0.0, 1.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(kl1(1.0, 1.0, 0.0, 1.0), kl_quadrature(1.0, 1.0, 0.0, 1.0), epsilon = 1e-8);
        let want = 0.5 * 0.5f64.ln() + 1.0 - 0.5;
        assert_abs_diff_eq!(kl1(0.0, 2.0, 0.0, 1.0), want, epsilon = 1e-15);
        assert_abs_diff_eq!(kl1(0.0, 2.0, 0.0, 1.0), 0.1534, epsilon = 1e-4);
        assert_abs_diff_eq!(kl1(0.0, 2.0, 0.0, 1.0), kl_quadrature(0.0, 2.0, 0.0, 1.0), epsilon = 1e-8);
    }

    #[test]
    fn kl_rejects_bad_variances() {
        assert!(kl_gaussian(array![0.0].view(), array![0.0].view(), array![0.0].view(), array![1.0].view()).is_err());
        assert!(kl_gaussian(array![0.0].view(), array![1.0].view(), array![0.0].view(), array![-1.0].view()).is_err());
    }

    fn view_of(rows: Vec<Vec<f64>>) -> NormalizedView {
        let n = rows.len();
        let v = rows[0].len();
        NormalizedView {
            domain_id: "d".into(),
            modality_id: "m".into(),
            values: Array2::from_shape_vec((n, v), rows.into_iter().flatten().collect()).unwrap(),
            scale_factor: 1.0,
            log1p_applied: false,
        }
    }

    #[test]
    fn knn_collinear_points() {
        let g = build_neighbor_graph(&view_of(vec![vec![0.0], vec![1.0], vec![3.0]]), 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
    }

    #[test]
    fn knn_duplicates_and_ties() {
        let g = build_neighbor_graph(&view_of(vec![vec![2.0], vec![2.0], vec![5.0], vec![5.0]]), 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![3], vec![2]]);
        // Cell 1 sits between 0 and 2 at equal distance: lower index wins.
        let g = build_neighbor_graph(&view_of(vec![vec![0.0], vec![1.0], vec![2.0]]), 1).unwrap();
        assert_eq!(g.neighbors[1], vec![0]);
    }

    #[test]
    fn knn_is_feature_permutation_invariant() {
        let rows = vec![
            vec![0.1, 3.0, 2.0],
            vec![1.0, 0.0, 2.5],
            vec![0.0, 2.0, 2.0],
            vec![4.0, 1.0, 0.0],
            vec![0.5, 2.5, 1.0],
        ];
        let permuted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        let a = build_neighbor_graph(&view_of(rows), 2).unwrap();
        let b = build_neighbor_graph(&view_of(permuted), 2).unwrap();
        assert_eq!(a.neighbors, b.neighbors);
        assert!(a.neighbors.iter().enumerate().all(|(i, nn)| !nn.contains(&i)));
    }

    #[test]
    fn knn_rejects_k_at_least_n() {
        assert!(build_neighbor_graph(&view_of(vec![vec![0.0], vec![1.0]]), 2).is_err());
    }

    fn graph(neighbors: Vec<Vec<usize>>) -> NeighborGraph {
        NeighborGraph {
            domain_id: "d".into(),
            modality_id: "m".into(),
            neighbors,
        }
    }

    #[test]
    fn ncl_identical_mutual_neighbours_is_zero() {
        let g = graph(vec![vec![1], vec![0]]);
        let u = array![[0.3, -1.2], [0.3, -1.2]];
        let loss = ncl_loss(&[u], &[&g], &[0, 1], 0.1).unwrap();
        assert_abs_diff_eq!(loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn ncl_high_temperature_limit() {
        let g = graph(vec![vec![1], vec![2], vec![0], vec![0]]);
        let u = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.2, 0.2]];
        let batch = [0, 1, 2, 3];
        let loss = ncl_loss(&[u], &[&g], &batch, 1e12).unwrap();
        // Every cell has one in-batch positive; each term tends to log(|B| - 1).
        assert_abs_diff_eq!(loss, 3.0f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn ncl_zero_embedding_is_rejected() {
        let g = graph(vec![vec![1], vec![0]]);
        let u = array![[0.0, 0.0], [1.0, 0.0]];
        assert!(ncl_loss(&[u], &[&g], &[0, 1], 0.1).is_err());
    }

    #[test]
    fn ncl_is_scale_invariant() {
        let g = graph(vec![vec![1, 2], vec![0, 3], vec![3, 0], vec![1, 2]]);
        let u = array![[1.0, 0.2, -0.3], [0.1, 0.9, 0.0], [-0.5, 0.4, 1.1], [0.3, 0.3, 0.3]];
        let a = ncl_loss(&[u.clone()], &[&g], &[0, 1, 2, 3], 0.5).unwrap();
        let b = ncl_loss(&[u * 7.5], &[&g], &[0, 1, 2, 3], 0.5).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn zero_parameters_elbo_composes_components() {
        let hyper = ModelHyper {
            n_topics: 3,
            embed_dim: 2,
            encoder_hidden: 4,
            ..ModelHyper::default()
        };
        let block = block("d", &["c"], vec![modality("GEX", &["c"], &["a", "b", "c", "e"], &[vec![3, 0, 1, 2]])]);
        let ds = Dataset::from_domains(vec![block]).unwrap();
        let params = ModelParams::zeros(&hyper, &ds.schema());
        let counts = array![3.0, 0.0, 1.0, 2.0];
        let inputs = array![0.5, 0.0, 0.2, 0.3];
        let obs = [CellObservation {
            modality: 0,
            normalized: inputs.view(),
            counts: counts.view(),
        }];
        let noise = Array2::zeros((1, 3));
        for mode in [PoeMode::PaperLiteral, PoeMode::PrecisionWeighted] {
            let (elbo, state) = elbo_cell(&obs, 0, &params, mode, noise.view()).unwrap();
            let kl = kl_gaussian(
                Array1::zeros(3).view(),
                Array1::from_elem(3, 0.5).view(),
                Array1::zeros(3).view(),
                Array1::ones(3).view(),
            )
            .unwrap();
            let rec = 6.0 * 0.25f64.ln();
            assert!(kl > 0.0);
            assert_abs_diff_eq!(elbo, rec - kl, epsilon = 1e-12);
            assert_eq!(state.theta, Array1::from_elem(3, 1.0 / 3.0));
        }
    }

    #[test]
    fn empty_document_elbo_is_minus_kl_and_counts_scale_linearly() {
        let hyper = ModelHyper {
            n_topics: 2,
            embed_dim: 2,
            encoder_hidden: 3,
            seed: 5,
            ..ModelHyper::default()
        };
        let block = block("d", &["c"], vec![modality("GEX", &["c"], &["a", "b", "c"], &[vec![1, 1, 1]])]);
        let ds = Dataset::from_domains(vec![block]).unwrap();
        let params = crate::params::init_params(&hyper, &ds.schema()).unwrap();
        let inputs = array![0.1, 0.4, 0.2];
        let noise = array![[0.3, -0.2]];
        let zero = Array1::zeros(3);
        let obs = [CellObservation {
            modality: 0,
            normalized: inputs.view(),
            counts: zero.view(),
        }];
        let (elbo0, _) = elbo_cell(&obs, 0, &params, PoeMode::PrecisionWeighted, noise.view()).unwrap();
        let post = encode_modality(inputs.view(), &params.encoders[0]).unwrap();
        let fused = fuse_poe(&[post], PoeMode::PrecisionWeighted).unwrap();
        let kl = kl_gaussian(fused.mu.view(), fused.var.view(), Array1::zeros(2).view(), Array1::ones(2).view()).unwrap();
        assert_abs_diff_eq!(elbo0, -kl, epsilon = 1e-12);

        let x = array![2.0, 0.0, 5.0];
        let x2 = &x * 2.0;
        let e1 = elbo_cell(&[CellObservation { counts: x.view(), ..obs[0] }], 0, &params, PoeMode::PrecisionWeighted, noise.view()).unwrap().0;
        let e2 = elbo_cell(&[CellObservation { counts: x2.view(), ..obs[0] }], 0, &params, PoeMode::PrecisionWeighted, noise.view()).unwrap().0;
        assert_abs_diff_eq!(e2 + kl, 2.0 * (e1 + kl), epsilon = 1e-10);
    }
}
