//! Deterministic stochastic-gradient training across domains.

use std::time::Instant;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::objective::{total_loss, total_loss_and_grad, DomainData, InputTransform, LossBreakdown, TrainingData};
use crate::params::{init_params, ModelHyper, ModelParams, PoeMode};
use crate::synthgen::{generate, SynthDomain, SynthModality, SynthSpec};
use crate::seeding::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Adam with per-tensor step counts; tensors a batch does not reach keep
    /// their moments and values.
    #[default]
    AdaptiveMoments,
    PlainSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub moment_decays: (f64, f64),
    pub epsilon: f64,
    pub ncl_enabled: bool,
    pub mc_samples: usize,
    /// Root of the shuffle and noise streams.
    pub seed: u64,
    /// Record every n-th step in the log.
    pub log_every: usize,
    /// Global gradient-norm cap; off when `None`.
    pub clip_norm: Option<f64>,
    pub transform: InputTransform,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::AdaptiveMoments,
            moment_decays: (0.9, 0.999),
            epsilon: 1e-8,
            ncl_enabled: true,
            mc_samples: 1,
            seed: 0,
            log_every: 1,
            clip_norm: None,
            transform: InputTransform::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.mc_samples == 0 || self.log_every == 0 {
            return Err(Error::Argument(
                "batch_size, mc_samples and log_every must be positive".into(),
            ));
        }
        if self.ncl_enabled && self.batch_size < 2 {
            return Err(Error::Argument(
                "the contrastive loss needs batch_size >= 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.moment_decays;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) || !(self.epsilon > 0.0) {
            return Err(Error::Argument("moment decays must lie in [0, 1) and epsilon be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Argument("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub domain: String,
    pub batch_size: usize,
    pub loss: LossBreakdown,
    /// Seconds since training started. Not persisted, so saved logs of
    /// identical runs compare equal byte for byte.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// Cell-weighted mean loss over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub n_batches: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochSummary),
}

impl TrainLog {
    /// Newline-delimited JSON: step records, each epoch closed by its summary.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let mut steps = self.steps.iter().peekable();
        for summary in &self.epochs {
            while let Some(s) = steps.next_if(|s| s.epoch <= summary.epoch) {
                out.push_str(&serde_json::to_string(&LogLine::Step(s)).expect("log serializes"));
                out.push('\n');
            }
            out.push_str(&serde_json::to_string(&LogLine::Epoch(summary)).expect("log serializes"));
            out.push('\n');
        }
        out
    }
}

/// First-moment / second-moment state, one entry per tensor.
#[derive(Debug, Clone)]
struct AdamState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: Vec<i32>,
}

impl AdamState {
    fn new(params: &ModelParams) -> Self {
        let tensors = params.tensors();
        Self {
            first: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            second: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            steps: vec![0; tensors.len()],
        }
    }
}

/// Applies one update to every tensor marked active.
fn apply_update(
    params: &mut ModelParams,
    grad: &ModelParams,
    active: &[bool],
    config: &TrainConfig,
    state: &mut Option<AdamState>,
) {
    let mut scale = 1.0;
    if let Some(cap) = config.clip_norm {
        let norm = grad
            .tensors()
            .iter()
            .zip(active)
            .filter(|(_, &a)| a)
            .flat_map(|(t, _)| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        if norm > cap {
            scale = cap / norm;
        }
    }
    let lr = config.learning_rate;
    let grads = grad.tensors();
    match config.optimizer {
        Optimizer::PlainSgd => {
            for ((p, g), &a) in params.tensors_mut().into_iter().zip(&grads).zip(active) {
                if a {
                    for (x, &gx) in p.iter_mut().zip(g.iter()) {
                        *x -= lr * scale * gx;
                    }
                }
            }
        }
        Optimizer::AdaptiveMoments => {
            let st = state.get_or_insert_with(|| AdamState::new(params));
            let (b1, b2) = config.moment_decays;
            for (i, (p, g)) in params.tensors_mut().into_iter().zip(&grads).enumerate() {
                if !active[i] {
                    continue;
                }
                st.steps[i] += 1;
                let c1 = 1.0 - b1.powi(st.steps[i]);
                let c2 = 1.0 - b2.powi(st.steps[i]);
                for (j, x) in p.iter_mut().enumerate() {
                    let gx = g[j] * scale;
                    let m = &mut st.first[i][j];
                    let v = &mut st.second[i][j];
                    *m = b1 * *m + (1.0 - b1) * gx;
                    *v = b2 * *v + (1.0 - b2) * gx * gx;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + config.epsilon);
                }
            }
        }
    }
}

/// Shuffled batches of one domain. With `merge_singleton`, a trailing batch
/// of one cell joins the batch before it.
fn domain_batches(n_cells: usize, batch_size: usize, merge_singleton: bool, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_cells).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if merge_singleton && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Standard-normal noise for one batch.
pub fn draw_noise(samples: usize, batch: usize, k: usize, rng: &mut Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn((samples, batch, k), || rng.sample(StandardNormal))
}

/// Trains from a fresh initialization. See [`train_from`].
pub fn train(dataset: &Dataset, hyper: &ModelHyper, config: &TrainConfig) -> Result<(ModelParams, TrainLog)> {
    let params = init_params(hyper, &dataset.schema())?;
    train_from(dataset, hyper, config, params, |_, _| Ok(()))
}

/// Trains `params` in place of a fresh initialization; `on_epoch` runs after
/// every epoch (1-based) with the current parameters.
pub fn train_from(
    dataset: &Dataset,
    hyper: &ModelHyper,
    config: &TrainConfig,
    mut params: ModelParams,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<(ModelParams, TrainLog)> {
    hyper.validate()?;
    config.validate()?;
    let knn = config.ncl_enabled.then_some(hyper.knn_k);
    let data = TrainingData::prepare(dataset, config.transform, knn)?;
    let mut shuffle_rng = stream_rng(config.seed, Stream::Shuffle);
    let mut noise_rng = stream_rng(config.seed, Stream::Noise);
    let mut adam = None;
    let mut log = TrainLog::default();
    let started = Instant::now();
    let k = params.n_topics();
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let per_domain: Vec<Vec<Vec<usize>>> = data
            .domains
            .iter()
            .map(|d| domain_batches(d.n_cells, config.batch_size, config.ncl_enabled, &mut shuffle_rng))
            .collect();
        let rounds = per_domain.iter().map(Vec::len).max().unwrap_or(0);
        let mut sum = LossBreakdown::default();
        let mut cells = 0usize;
        let mut n_batches = 0;
        for round in 0..rounds {
            for (dd, batches) in data.domains.iter().zip(&per_domain) {
                let Some(batch) = batches.get(round) else { continue };
                let noise = draw_noise(config.mc_samples, batch.len(), k, &mut noise_rng);
                let (loss, grad) = total_loss_and_grad(&params, hyper, dd, batch, &noise, config.ncl_enabled)?;
                let domain_id = &dataset.domains[dd.domain].domain_id;
                if let Some((term, value)) = loss.non_finite_term() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        domain: domain_id.clone(),
                        term,
                        value,
                    });
                }
                apply_update(&mut params, &grad.values, &grad.active, config, &mut adam);
                if !params.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        domain: domain_id.clone(),
                        term: "parameters",
                        value: f64::NAN,
                    });
                }
                let w = batch.len() as f64;
                sum.nll += w * loss.nll;
                sum.kl += w * loss.kl;
                sum.beta_penalty += w * loss.beta_penalty;
                sum.ncl += w * loss.ncl;
                sum.total += w * loss.total;
                cells += batch.len();
                n_batches += 1;
                step += 1;
                if step % config.log_every == 0 {
                    log.steps.push(StepRecord {
                        step,
                        epoch,
                        domain: domain_id.clone(),
                        batch_size: batch.len(),
                        loss,
                        wall_seconds: started.elapsed().as_secs_f64(),
                    });
                }
            }
        }
        let c = cells.max(1) as f64;
        let mean = LossBreakdown {
            nll: sum.nll / c,
            kl: sum.kl / c,
            beta_penalty: sum.beta_penalty / c,
            ncl: sum.ncl / c,
            total: sum.total / c,
        };
        log::info!("epoch {epoch}: total {:.4} (nll {:.4}, kl {:.4}, ncl {:.4})", mean.total, mean.nll, mean.kl, mean.ncl);
        log.epochs.push(EpochSummary { epoch, n_batches, mean });
        on_epoch(epoch, &params)?;
    }
    Ok((params, log))
}

/// Max elementwise relative error between the analytic gradient and central
/// finite differences (step 1e-5) of the loss on one fixed-noise batch.
pub fn gradcheck(
    params: &ModelParams,
    hyper: &ModelHyper,
    data: &DomainData,
    batch: &[usize],
    noise: &Array3<f64>,
    ncl_enabled: bool,
) -> Result<f64> {
    const STEP: f64 = 1e-5;
    let (_, grad) = total_loss_and_grad(params, hyper, data, batch, noise, ncl_enabled)?;
    let analytic: Vec<Vec<f64>> = grad.values.tensors().iter().map(|t| t.to_vec()).collect();
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (t, ga_t) in analytic.iter().enumerate() {
        for (j, &ga) in ga_t.iter().enumerate() {
            let orig = probe.tensors()[t][j];
            probe.tensors_mut()[t][j] = orig + STEP;
            let up = total_loss(&probe, hyper, data, batch, noise, ncl_enabled)?.total;
            probe.tensors_mut()[t][j] = orig - STEP;
            let down = total_loss(&probe, hyper, data, batch, noise, ncl_enabled)?.total;
            probe.tensors_mut()[t][j] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// A small synthetic problem for [`gradcheck`]: one domain with two
/// modalities, every cell in a single batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckSetup {
    pub n_topics: usize,
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    pub n_features: (usize, usize),
    pub n_cells: usize,
    pub reads: u64,
    pub knn_k: usize,
    pub lambda_beta: f64,
    /// Std of the Gaussian jitter added to initialized parameters, so that
    /// zero-initialized tensors are checked away from zero.
    pub jitter: f64,
    pub mc_samples: usize,
    pub ncl_enabled: bool,
    pub poe_mode: PoeMode,
    pub seed: u64,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            n_topics: 5,
            embed_dim: 4,
            encoder_hidden: 16,
            n_features: (20, 15),
            n_cells: 8,
            reads: 40,
            knn_k: 3,
            lambda_beta: 0.3,
            jitter: 0.3,
            mc_samples: 2,
            ncl_enabled: true,
            poe_mode: PoeMode::default(),
            seed: 0,
        }
    }
}

/// Builds the instance described by `setup` and returns the gradcheck error.
/// Inputs use a unit library scale; see the gradcheck test notes.
pub fn run_gradcheck(setup: &GradcheckSetup) -> Result<f64> {
    let spec = SynthSpec {
        name: "gradcheck".into(),
        n_topics: setup.n_topics,
        embed_dim: setup.embed_dim,
        modalities: vec![
            SynthModality { id: "GEX".into(), n_features: setup.n_features.0, reads: setup.reads },
            SynthModality { id: "ADT".into(), n_features: setup.n_features.1, reads: setup.reads },
        ],
        domains: vec![SynthDomain {
            id: "d1".into(),
            n_cells: setup.n_cells,
            available: vec!["GEX".into(), "ADT".into()],
        }],
        n_cell_types: 2.min(setup.n_topics),
        separation: 2.0,
        beta_scale: 0.1,
        seed: setup.seed,
    };
    let ds = generate(&spec)?.dataset;
    let hyper = ModelHyper {
        n_topics: setup.n_topics,
        embed_dim: setup.embed_dim,
        encoder_hidden: setup.encoder_hidden,
        lambda_beta: setup.lambda_beta,
        knn_k: setup.knn_k,
        poe_mode: setup.poe_mode,
        seed: setup.seed,
        ..ModelHyper::default()
    };
    let transform = InputTransform { scale_factor: 1.0, log1p: true };
    let knn = setup.ncl_enabled.then_some(setup.knn_k);
    let data = TrainingData::prepare(&ds, transform, knn)?;
    let mut params = init_params(&hyper, &ds.schema())?;
    let mut rng = stream_rng(setup.seed, Stream::Synth);
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += setup.jitter * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let noise = draw_noise(setup.mc_samples, setup.n_cells, setup.n_topics, &mut stream_rng(setup.seed, Stream::Noise));
    let batch: Vec<usize> = (0..setup.n_cells).collect();
    gradcheck(&params, &hyper, &data.domains[0], &batch, &noise, setup.ncl_enabled)
}
