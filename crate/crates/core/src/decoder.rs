//! Topic-to-feature decoding, count likelihood and imputation.

use ndarray::{Array1, Array2, ArrayView1};

use crate::encoder::{encode_batch, fuse_batch, softmax_rows, to_theta};
use crate::error::{Error, Result};
use crate::objective::DomainData;
use crate::params::{ModelParams, PoeMode};

/// Expected per-feature read rates; a probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector(pub Array1<f64>);

impl RateVector {
    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `softmax(theta (alpha + beta_d) rho_m + lambda_dm)`.
pub fn decode_rates(
    theta: ArrayView1<f64>,
    alpha: &Array2<f64>,
    beta_d: &Array2<f64>,
    rho_m: &Array2<f64>,
    lambda_dm: ArrayView1<f64>,
) -> RateVector {
    let z = theta.dot(alpha) + theta.dot(beta_d);
    let logits = z.dot(rho_m) + lambda_dm;
    RateVector(to_theta(logits.view()))
}

/// Multinomial log-likelihood kernel `sum_v x_v log r_v`.
pub fn log_likelihood(counts: ArrayView1<f64>, rates: &RateVector) -> f64 {
    counts
        .iter()
        .zip(rates.0.iter())
        .filter(|(&x, _)| x != 0.0)
        .map(|(&x, &r)| x * r.ln())
        .sum()
}

/// `softmax(theta (alpha + beta_d) rho)` with no feature offset.
pub fn impute_rates(
    theta: ArrayView1<f64>,
    alpha: &Array2<f64>,
    beta_d: &Array2<f64>,
    rho: &Array2<f64>,
) -> RateVector {
    let z = theta.dot(alpha) + theta.dot(beta_d);
    RateVector(to_theta(z.dot(rho).view()))
}

fn check_imputable(params: &ModelParams, domain: usize, modality: usize) -> Result<()> {
    if domain >= params.schema.domains.len() || modality >= params.schema.modalities.len() {
        return Err(Error::Argument("domain or modality index out of range".into()));
    }
    if params.schema.domain_has(domain, modality) {
        return Err(Error::Argument(format!(
            "modality {} is observed in domain {}; decode it instead of imputing",
            params.schema.modalities[modality].id, params.schema.domains[domain].id
        )));
    }
    Ok(())
}

/// Imputes `modality` for a cell of `domain` that never measured it.
pub fn impute(params: &ModelParams, domain: usize, modality: usize, theta: ArrayView1<f64>) -> Result<RateVector> {
    check_imputable(params, domain, modality)?;
    Ok(impute_rates(theta, &params.alpha, &params.beta[domain], &params.rho[modality]))
}

/// Noise-free topic state of every cell in a domain, taking δ at the fused
/// posterior mean.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTopics {
    pub delta: Array2<f64>,
    pub theta: Array2<f64>,
    /// Integrated cell embedding `theta (alpha + beta_d)`.
    pub z: Array2<f64>,
}

pub fn infer_topics(params: &ModelParams, poe_mode: PoeMode, data: &DomainData) -> DomainTopics {
    let encoded: Vec<_> = data
        .modalities
        .iter()
        .map(|md| encode_batch(md.inputs.view(), &params.encoders[md.modality]))
        .collect();
    let mus: Vec<&Array2<f64>> = encoded.iter().map(|e| &e.mu).collect();
    let logvars: Vec<&Array2<f64>> = encoded.iter().map(|e| &e.logvar).collect();
    let (delta, _) = fuse_batch(&mus, &logvars, poe_mode);
    let theta = softmax_rows(&delta);
    let z = theta.dot(&params.omega(data.domain));
    DomainTopics { delta, theta, z }
}

/// Imputed rates for every row of `theta`, one cell per row.
pub fn impute_domain(params: &ModelParams, domain: usize, modality: usize, theta: &Array2<f64>) -> Result<Array2<f64>> {
    check_imputable(params, domain, modality)?;
    let logits = theta.dot(&params.omega(domain)).dot(&params.rho[modality]);
    Ok(softmax_rows(&logits))
}
