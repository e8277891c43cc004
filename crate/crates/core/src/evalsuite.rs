//! Downstream scoring: clustering agreement, classification and imputation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, ModalityMatrix, TruthStore};
use crate::decoder::{impute_domain, infer_topics, DomainTopics};
use crate::error::{Error, Result};
use crate::objective::{InputTransform, TrainingData};
use crate::params::{ModelHyper, ModelParams};
use crate::seeding::{stream_rng, substream_rng, Stream};

pub const KMEANS_RESTARTS: usize = 20;
const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub wcss: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point, lower index on ties, and the total cost.
fn assign(points: ArrayView2<f64>, centroids: &Array2<f64>) -> (Vec<usize>, f64) {
    let mut wcss = 0.0;
    let labels = points
        .rows()
        .into_iter()
        .map(|p| {
            let (best, d) = centroids
                .rows()
                .into_iter()
                .enumerate()
                .map(|(c, m)| (c, sq_dist(p, m)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            wcss += d;
            best
        })
        .collect();
    (labels, wcss)
}

fn plus_plus_seeds(points: ArrayView2<f64>, k: usize, rng: &mut crate::seeding::Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd iterations from `centroids`; returns the fit and the cost after
/// every assignment step. An emptied cluster keeps its previous centroid.
pub(crate) fn lloyd(points: ArrayView2<f64>, mut centroids: Array2<f64>) -> (KMeansFit, Vec<f64>) {
    let k = centroids.nrows();
    let (mut labels, mut wcss) = assign(points, &centroids);
    let mut trace = vec![wcss];
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            sums.row_mut(l).scaled_add(1.0, &p);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                centroids.row_mut(c).assign(&mean);
            }
        }
        let (next, cost) = assign(points, &centroids);
        trace.push(cost);
        let changed = next != labels;
        labels = next;
        wcss = cost;
        if !changed {
            break;
        }
    }
    (KMeansFit { labels, centroids, wcss }, trace)
}

/// k-means++ seeded Lloyd, best of `restarts` by within-cluster sum of squares.
pub fn kmeans(points: ArrayView2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} clusters for {n} points")));
    }
    if restarts == 0 {
        return Err(Error::Argument("restarts must be positive".into()));
    }
    let fits: Vec<KMeansFit> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream_rng(seed, Stream::KMeans, r as u32);
            lloyd(points, plus_plus_seeds(points, k, &mut rng)).0
        })
        .collect();
    Ok(fits
        .into_iter()
        .reduce(|best, f| if f.wcss < best.wcss { f } else { best })
        .expect("restarts > 0"))
}

/// Dense integer codes for arbitrary labels, in order of first appearance.
pub fn encode_labels<T: Ord + Clone>(labels: &[T]) -> Vec<usize> {
    let mut codes = BTreeMap::new();
    let mut next = 0;
    labels
        .iter()
        .map(|l| {
            *codes.entry(l.clone()).or_insert_with(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

struct Contingency {
    n: f64,
    cells: BTreeMap<(usize, usize), f64>,
    rows: BTreeMap<usize, f64>,
    cols: BTreeMap<usize, f64>,
}

fn contingency(a: &[usize], b: &[usize]) -> Contingency {
    let mut c = Contingency {
        n: a.len() as f64,
        cells: BTreeMap::new(),
        rows: BTreeMap::new(),
        cols: BTreeMap::new(),
    };
    for (&x, &y) in a.iter().zip(b) {
        *c.cells.entry((x, y)).or_default() += 1.0;
        *c.rows.entry(x).or_default() += 1.0;
        *c.cols.entry(y).or_default() += 1.0;
    }
    c
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Identical trivial partitions score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Argument("ARI needs two labelings of equal length >= 2".into()));
    }
    let c = contingency(a, b);
    let index: f64 = c.cells.values().map(|&x| pairs(x)).sum();
    let sum_a: f64 = c.rows.values().map(|&x| pairs(x)).sum();
    let sum_b: f64 = c.cols.values().map(|&x| pairs(x)).sum();
    let expected = sum_a * sum_b / pairs(c.n);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &BTreeMap<usize, f64>, n: f64) -> f64 {
    -counts.values().map(|&c| (c / n) * (c / n).ln()).sum::<f64>()
}

/// Mutual information over the geometric mean of the entropies; 0 when
/// either labeling is constant.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Argument("NMI needs two non-empty labelings of equal length".into()));
    }
    let c = contingency(a, b);
    let (ha, hb) = (entropy(&c.rows, c.n), entropy(&c.cols, c.n));
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mi: f64 = c
        .cells
        .iter()
        .map(|(&(x, y), &nxy)| {
            let p = nxy / c.n;
            p * (nxy * c.n / (c.rows[&x] * c.cols[&y])).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Multinomial logistic regression fitted by full-batch gradient descent on
/// standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    mean: Array1<f64>,
    scale: Array1<f64>,
    weights: Array2<f64>,
    bias: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

impl LogisticModel {
    pub fn fit(x: ArrayView2<f64>, y: &[usize], n_classes: usize, config: LogisticConfig) -> Self {
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 0.0 { s } else { 1.0 });
        let xs = (&x - &mean) / &scale;
        let mut onehot = Array2::<f64>::zeros((x.nrows(), n_classes));
        for (i, &c) in y.iter().enumerate() {
            onehot[[i, c]] = 1.0;
        }
        let mut weights = Array2::<f64>::zeros((x.ncols(), n_classes));
        let mut bias = Array1::<f64>::zeros(n_classes);
        for _ in 0..config.iterations {
            let probs = crate::encoder::softmax_rows(&(xs.dot(&weights) + &bias));
            let err = (probs - &onehot) / n;
            let gw = xs.t().dot(&err) + &weights * config.l2;
            let gb = err.sum_axis(Axis(0));
            weights.scaled_add(-config.learning_rate, &gw);
            bias.scaled_add(-config.learning_rate, &gb);
        }
        Self { mean, scale, weights, bias }
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let xs = (&x - &self.mean) / &self.scale;
        crate::encoder::softmax_rows(&(xs.dot(&self.weights) + &self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScore {
    pub accuracy: f64,
    /// Mean hold-out cross-entropy.
    pub cross_entropy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Seeded stratified 80/20 split: per class, a fifth (at least one) of the
/// cells is held out.
pub fn stratified_split(labels: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Argument(format!(
                "class {class} has {} cell(s); stratified split needs at least 2",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_test = ((idx.len() as f64 * 0.2).round() as usize).clamp(1, idx.len() - 1);
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn classify_accuracy(embeddings: ArrayView2<f64>, labels: &[usize], split_seed: u64) -> Result<ClassifierScore> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Argument("one label per embedding row is required".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let (train, test) = stratified_split(labels, split_seed)?;
    let ytrain: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let model = LogisticModel::fit(
        embeddings.select(Axis(0), &train).view(),
        &ytrain,
        n_classes,
        LogisticConfig::default(),
    );
    let probs = model.predict_proba(embeddings.select(Axis(0), &test).view());
    let mut correct = 0;
    let mut ce = 0.0;
    for (row, &i) in probs.rows().into_iter().zip(&test) {
        let pred = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (c, &p)| if p > acc.1 { (c, p) } else { acc })
            .0;
        correct += usize::from(pred == labels[i]);
        ce -= row[labels[i]].max(1e-300).ln();
    }
    Ok(ClassifierScore {
        accuracy: correct as f64 / test.len() as f64,
        cross_entropy: ce / test.len() as f64,
        n_train: train.len(),
        n_test: test.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PearsonMode {
    #[default]
    PerCellMean,
    Flattened,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PearsonScore {
    pub value: f64,
    /// Cells left out because one of the two vectors was constant.
    pub skipped: usize,
}

/// `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Truth side of the imputation score: per-cell fractions with log1p. A cell
/// with no reads becomes a zero row.
pub fn transform_truth(truth: &ModalityMatrix) -> Array2<f64> {
    let counts = &truth.counts;
    let mut out = counts.to_dense();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let total = counts.row_total(r);
        if total > 0 {
            row.mapv_inplace(|x| (x / total as f64).ln_1p());
        }
    }
    out
}

/// Pearson agreement between imputed rates (rows aligned with the truth's
/// cells) and the transformed held-out counts.
pub fn imputation_pearson(imputed: &Array2<f64>, truth: &ModalityMatrix, mode: PearsonMode) -> Result<PearsonScore> {
    let target = transform_truth(truth);
    if imputed.dim() != target.dim() {
        return Err(Error::Argument(format!(
            "imputed shape {:?} does not match truth {:?}",
            imputed.dim(),
            target.dim()
        )));
    }
    match mode {
        PearsonMode::PerCellMean => {
            let scores: Vec<Option<f64>> = imputed
                .rows()
                .into_iter()
                .zip(target.rows())
                .map(|(a, b)| pearson(&a.to_vec(), &b.to_vec()))
                .collect();
            let kept: Vec<f64> = scores.iter().flatten().copied().collect();
            let skipped = scores.len() - kept.len();
            if kept.is_empty() {
                return Err(Error::Argument("every cell has a constant vector".into()));
            }
            Ok(PearsonScore {
                value: kept.iter().sum::<f64>() / kept.len() as f64,
                skipped,
            })
        }
        PearsonMode::Flattened => {
            let a: Vec<f64> = imputed.iter().copied().collect();
            let b: Vec<f64> = target.iter().copied().collect();
            let value = pearson(&a, &b).ok_or_else(|| Error::Argument("constant imputation or truth".into()))?;
            Ok(PearsonScore { value, skipped: 0 })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationScore {
    pub modality: String,
    pub per_cell_mean: PearsonScore,
    pub flattened: PearsonScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterScore {
    pub ari: f64,
    pub nmi: f64,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub domain: String,
    pub n_cells: usize,
    pub clustering: Option<ClusterScore>,
    pub classification: Option<ClassifierScore>,
    pub imputation: Vec<ImputationScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenario: String,
    pub domains: Vec<DomainReport>,
    /// k-means over the integrated embedding of all domains at once.
    pub pooled_clustering: Option<ClusterScore>,
    pub pooled_classification: Option<ClassifierScore>,
    pub mean_ari: Option<f64>,
    pub mean_nmi: Option<f64>,
    pub mean_accuracy: Option<f64>,
    pub mean_imputation_pearson: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Posterior-mean topic states of every domain.
pub fn infer_dataset(params: &ModelParams, hyper: &ModelHyper, dataset: &Dataset, transform: InputTransform) -> Result<Vec<DomainTopics>> {
    let data = TrainingData::prepare(dataset, transform, None)?;
    Ok(data
        .domains
        .par_iter()
        .map(|d| infer_topics(params, hyper.poe_mode, d))
        .collect())
}

fn cluster_score(z: ArrayView2<f64>, labels: &[usize], seed: u64) -> Result<ClusterScore> {
    let k = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
    let fit = kmeans(z, k, KMEANS_RESTARTS, seed)?;
    Ok(ClusterScore {
        ari: ari(&fit.labels, labels)?,
        nmi: nmi(&fit.labels, labels)?,
        k,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Scores a trained model on `dataset` (the masked view it was trained on)
/// and the held-out `truth`. Clustering and classification need labels;
/// domains without them are scored on imputation only.
pub fn evaluate_model(
    params: &ModelParams,
    hyper: &ModelHyper,
    dataset: &Dataset,
    truth: &TruthStore,
    scenario: &str,
    transform: InputTransform,
    seed: u64,
) -> Result<EvalReport> {
    let topics = infer_dataset(params, hyper, dataset, transform)?;
    let mut domains = Vec::new();
    for (d, block) in dataset.domains.iter().enumerate() {
        let codes = block.labels.as_ref().map(|l| encode_labels(l));
        let clustering = codes.as_ref().map(|c| cluster_score(topics[d].z.view(), c, seed)).transpose()?;
        let classification = match &codes {
            Some(c) => Some(classify_accuracy(topics[d].z.view(), c, seed)?),
            None => None,
        };
        let mut imputation = Vec::new();
        for held in truth.entries.iter().filter(|e| e.domain_id == block.domain_id) {
            let m = dataset
                .modality_index(&held.matrix.modality_id)
                .ok_or_else(|| Error::Argument(format!("unknown modality {}", held.matrix.modality_id)))?;
            if held.matrix.cell_ids != block.cell_ids {
                return Err(Error::Argument(format!(
                    "held-out {} cells do not match domain {}",
                    held.matrix.modality_id, block.domain_id
                )));
            }
            let imputed = impute_domain(params, d, m, &topics[d].theta)?;
            imputation.push(ImputationScore {
                modality: held.matrix.modality_id.clone(),
                per_cell_mean: imputation_pearson(&imputed, &held.matrix, PearsonMode::PerCellMean)?,
                flattened: imputation_pearson(&imputed, &held.matrix, PearsonMode::Flattened)?,
            });
        }
        domains.push(DomainReport {
            domain: block.domain_id.clone(),
            n_cells: block.n_cells(),
            clustering,
            classification,
            imputation,
        });
    }

    let labelled = dataset.domains.iter().all(|b| b.labels.is_some());
    let (pooled_clustering, pooled_classification) = if labelled {
        let z = ndarray::concatenate(Axis(0), &topics.iter().map(|t| t.z.view()).collect::<Vec<_>>())
            .expect("equal embedding widths");
        let all: Vec<String> = dataset.domains.iter().flat_map(|b| b.labels.clone().expect("labelled")).collect();
        let codes = encode_labels(&all);
        (Some(cluster_score(z.view(), &codes, seed)?), Some(classify_accuracy(z.view(), &codes, seed)?))
    } else {
        (None, None)
    };
    Ok(EvalReport {
        scenario: scenario.to_string(),
        mean_ari: mean(domains.iter().filter_map(|d| d.clustering.as_ref().map(|c| c.ari))),
        mean_nmi: mean(domains.iter().filter_map(|d| d.clustering.as_ref().map(|c| c.nmi))),
        mean_accuracy: mean(domains.iter().filter_map(|d| d.classification.map(|c| c.accuracy))),
        mean_imputation_pearson: mean(domains.iter().flat_map(|d| d.imputation.iter().map(|i| i.per_cell_mean.value))),
        domains,
        pooled_clustering,
        pooled_classification,
    })
}

/// Tab-separated `cell_id, domain, z0..` rows, for plotting elsewhere.
pub fn write_embedding_tsv(dataset: &Dataset, embeddings: &[Array2<f64>], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let width = embeddings.first().map_or(0, |z| z.ncols());
    let mut out = String::from("cell_id\tdomain");
    for j in 0..width {
        write!(out, "\tz{j}").expect("string write");
    }
    out.push('\n');
    for (block, z) in dataset.domains.iter().zip(embeddings) {
        for (cell, row) in block.cell_ids.iter().zip(z.rows()) {
            write!(out, "{cell}\t{}", block.domain_id).expect("string write");
            for x in row {
                write!(out, "\t{x}").expect("string write");
            }
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
