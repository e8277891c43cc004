//! Synthetic datasets drawn from the model's own generative process, with
//! planted cell types and known parameters.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    apply_scenario_mask, save_dataset, save_scenario, CountMatrix, Dataset, DomainBlock, MaskEntry, ModalityMatrix,
    ScenarioSpec, TruthStore,
};
use crate::decoder::{decode_rates, impute_rates};
use crate::encoder::softmax_rows;
use crate::error::{Error, Result};
use crate::params::{save_checkpoint, ModelHyper, ModelParams};
use crate::seeding::{stream_rng, Rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthModality {
    pub id: String,
    pub n_features: usize,
    /// Reads per cell.
    pub reads: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDomain {
    pub id: String,
    pub n_cells: usize,
    /// Modality ids this domain keeps after masking.
    pub available: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub n_topics: usize,
    pub embed_dim: usize,
    pub modalities: Vec<SynthModality>,
    pub domains: Vec<SynthDomain>,
    pub n_cell_types: usize,
    /// Offset of each type's mean on its block of topic coordinates.
    pub separation: f64,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_beta_scale() -> f64 {
    0.1
}

pub const PRESETS: [&str; 3] = ["citeseq", "multiome", "combine"];

fn modality(id: &str, n_features: usize) -> SynthModality {
    SynthModality {
        id: id.into(),
        n_features,
        reads: 500,
    }
}

fn domain(id: usize, n_cells: usize, available: &[&str]) -> SynthDomain {
    SynthDomain {
        id: id.to_string(),
        n_cells,
        available: available.iter().map(|s| s.to_string()).collect(),
    }
}

impl SynthSpec {
    fn base(name: &str, modalities: Vec<SynthModality>, domains: Vec<SynthDomain>, seed: u64) -> Self {
        Self {
            name: name.into(),
            n_topics: 10,
            // Wide enough that z = theta omega keeps theta's cluster geometry.
            embed_dim: 64,
            modalities,
            domains,
            n_cell_types: 4,
            separation: 2.0,
            beta_scale: 0.1,
            seed,
        }
    }

    /// Two modalities over four sites; site 3 keeps only ADT, site 4 only GEX.
    pub fn citeseq(seed: u64) -> Self {
        let both = ["GEX", "ADT"];
        Self::base(
            "citeseq",
            vec![modality("GEX", 60), modality("ADT", 30)],
            vec![
                domain(1, 200, &both),
                domain(2, 200, &both),
                domain(3, 200, &["ADT"]),
                domain(4, 200, &["GEX"]),
            ],
            seed,
        )
    }

    /// GEX and ATAC over four sites; site 3 keeps GEX, site 4 ATAC.
    pub fn multiome(seed: u64) -> Self {
        let both = ["GEX", "ATAC"];
        Self::base(
            "multiome",
            vec![modality("GEX", 60), modality("ATAC", 80)],
            vec![
                domain(1, 200, &both),
                domain(2, 200, &both),
                domain(3, 200, &["GEX"]),
                domain(4, 200, &["ATAC"]),
            ],
            seed,
        )
    }

    /// Both layouts side by side: eight sites, three modalities, sites 5-8
    /// single-modality.
    pub fn combine(seed: u64) -> Self {
        let n = 150;
        Self::base(
            "combine",
            vec![modality("GEX", 60), modality("ADT", 30), modality("ATAC", 80)],
            vec![
                domain(1, n, &["GEX", "ADT"]),
                domain(2, n, &["GEX", "ADT"]),
                domain(3, n, &["GEX", "ATAC"]),
                domain(4, n, &["GEX", "ATAC"]),
                domain(5, n, &["ADT"]),
                domain(6, n, &["GEX"]),
                domain(7, n, &["GEX"]),
                domain(8, n, &["ATAC"]),
            ],
            seed,
        )
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "citeseq" => Some(Self::citeseq(seed)),
            "multiome" => Some(Self::multiome(seed)),
            "combine" => Some(Self::combine(seed)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(format!("synthetic spec {}: {msg}", self.name)));
        if self.n_topics == 0 || self.embed_dim == 0 {
            return bad("n_topics and embed_dim must be positive".into());
        }
        if self.n_cell_types == 0 || self.n_cell_types > self.n_topics {
            return bad(format!(
                "n_cell_types = {} must lie in 1..={}",
                self.n_cell_types, self.n_topics
            ));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) || !(self.beta_scale >= 0.0) {
            return bad("separation and beta_scale must be non-negative".into());
        }
        if self.modalities.is_empty() || self.domains.is_empty() {
            return bad("needs at least one modality and one domain".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.n_features == 0 {
                return bad(format!("modality {} has no features", m.id));
            }
            if self.modalities[..i].iter().any(|o| o.id == m.id) {
                return bad(format!("duplicate modality {}", m.id));
            }
        }
        for (i, d) in self.domains.iter().enumerate() {
            if d.n_cells == 0 {
                return bad(format!("domain {} has no cells", d.id));
            }
            if self.domains[..i].iter().any(|o| o.id == d.id) {
                return bad(format!("duplicate domain {}", d.id));
            }
            if d.available.is_empty() {
                return bad(format!("domain {} keeps no modality", d.id));
            }
            if let Some(m) = d.available.iter().find(|m| !self.modalities.iter().any(|s| &s.id == *m)) {
                return bad(format!("domain {} lists unknown modality {m}", d.id));
            }
        }
        Ok(())
    }

    /// Masks that turn the complete dataset into the availability map.
    pub fn scenario(&self) -> ScenarioSpec {
        let masks = self
            .domains
            .iter()
            .flat_map(|d| {
                self.modalities
                    .iter()
                    .filter(|m| !d.available.contains(&m.id))
                    .map(|m| MaskEntry {
                        domain: d.id.clone(),
                        modality: m.id.clone(),
                    })
            })
            .collect();
        ScenarioSpec {
            name: self.name.clone(),
            masks,
        }
    }

    /// Shape of the true parameters (encoders are placeholders).
    pub fn hyper(&self) -> ModelHyper {
        ModelHyper {
            n_topics: self.n_topics,
            embed_dim: self.embed_dim,
            encoder_hidden: 1,
            seed: self.seed,
            ..ModelHyper::default()
        }
    }
}

/// Everything a synthetic draw produces.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub spec: SynthSpec,
    /// Dataset after the availability mask, with type labels.
    pub dataset: Dataset,
    /// Every modality of every domain before masking.
    pub complete: Dataset,
    pub truth: TruthStore,
    pub scenario: ScenarioSpec,
    /// Generating parameters over the complete schema; λ = 0.
    pub params: ModelParams,
    pub delta: Vec<Array2<f64>>,
    pub theta: Vec<Array2<f64>>,
    pub cell_types: Vec<Vec<usize>>,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Multinomial draw by successive conditional binomials.
fn multinomial(n: u64, probs: &[f64], rng: &mut Rng) -> Vec<u32> {
    let mut out = vec![0u32; probs.len()];
    let mut left = n;
    let mut mass = 1.0;
    for (v, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        if v + 1 == probs.len() {
            out[v] = left as u32;
            break;
        }
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let x = Binomial::new(left, q).expect("probability in [0, 1]").sample(rng);
        out[v] = x as u32;
        left -= x;
        mass -= p;
    }
    out
}

/// Type `t` has mean `separation` on every topic coordinate `k` with
/// `k mod n_types == t`, zero elsewhere.
pub fn type_mean(t: usize, n_types: usize, n_topics: usize, separation: f64) -> Array1<f64> {
    Array1::from_shape_fn(n_topics, |k| if k % n_types == t { separation } else { 0.0 })
}

pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let (k, l) = (spec.n_topics, spec.embed_dim);

    let mut domains = Vec::with_capacity(spec.domains.len());
    for d in &spec.domains {
        let cells: Vec<String> = (0..d.n_cells).map(|i| format!("d{}_c{i}", d.id)).collect();
        domains.push(DomainBlock {
            domain_id: d.id.clone(),
            cell_ids: cells.clone(),
            modalities: spec
                .modalities
                .iter()
                .map(|m| ModalityMatrix {
                    modality_id: m.id.clone(),
                    cell_ids: cells.clone(),
                    feature_ids: feature_ids(&m.id, m.n_features),
                    counts: CountMatrix::from_dense(&vec![vec![0; m.n_features]; d.n_cells]),
                })
                .collect(),
            labels: None,
        });
    }
    let skeleton = Dataset::from_domains(domains)?;
    let mut params = ModelParams::zeros(&spec.hyper(), &skeleton.schema());
    params.alpha = normal_matrix(k, l, 1.0, &mut rng);
    for b in &mut params.beta {
        *b = normal_matrix(k, l, spec.beta_scale, &mut rng);
    }
    for (r, m) in params.rho.iter_mut().zip(&spec.modalities) {
        *r = normal_matrix(l, m.n_features, 1.0, &mut rng);
    }

    let mut all_delta = Vec::new();
    let mut all_theta = Vec::new();
    let mut all_types = Vec::new();
    let mut blocks = skeleton.domains;
    for (di, (d, block)) in spec.domains.iter().zip(&mut blocks).enumerate() {
        let types: Vec<usize> = (0..d.n_cells).map(|_| rng.random_range(0..spec.n_cell_types)).collect();
        let mut delta = normal_matrix(d.n_cells, k, 1.0, &mut rng);
        for (mut row, &t) in delta.rows_mut().into_iter().zip(&types) {
            row += &type_mean(t, spec.n_cell_types, k, spec.separation);
        }
        let theta = softmax_rows(&delta);
        let omega = params.omega(di);
        let z = theta.dot(&omega);
        for (mi, m) in spec.modalities.iter().enumerate() {
            let rates = softmax_rows(&z.dot(&params.rho[mi]));
            let rows: Vec<Vec<u32>> = rates
                .rows()
                .into_iter()
                .map(|r| multinomial(m.reads, r.as_slice().expect("contiguous"), &mut rng))
                .collect();
            block.modalities[mi].counts = CountMatrix::from_dense(&rows);
        }
        block.labels = Some(types.iter().map(|t| format!("type{t}")).collect());
        all_delta.push(delta);
        all_theta.push(theta);
        all_types.push(types);
    }
    let complete = Dataset::new(blocks, skeleton.catalog)?;
    let scenario = spec.scenario();
    let (dataset, truth) = apply_scenario_mask(&complete, &scenario)?;
    Ok(SynthOutput {
        spec: spec.clone(),
        dataset,
        complete,
        truth,
        scenario,
        params,
        delta: all_delta,
        theta: all_theta,
        cell_types: all_types,
    })
}

fn feature_ids(modality: &str, n: usize) -> Vec<String> {
    (0..n).map(|v| format!("{}_{v}", modality.to_lowercase())).collect()
}

/// True rates of `modality` for every cell of `domain`.
pub fn true_rates(out: &SynthOutput, domain: usize, modality: usize) -> Array2<f64> {
    let p = &out.params;
    let lambda = p.lambda_for(domain, modality).expect("complete schema");
    let rows: Vec<Array1<f64>> = out.theta[domain]
        .rows()
        .into_iter()
        .map(|t| decode_rates(t, &p.alpha, &p.beta[domain], &p.rho[modality], lambda.view()).0)
        .collect();
    stack_rows(&rows, p.rho[modality].ncols())
}

fn stack_rows(rows: &[Array1<f64>], width: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), width));
    for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(rows) {
        dst.assign(src);
    }
    out
}

/// Best achievable imputation of a masked `(domain, modality)` pair: the
/// imputation rule evaluated at the generating parameters and true θ.
pub fn oracle_impute(out: &SynthOutput, domain: &str, modality: &str) -> Result<Array2<f64>> {
    if out.truth.get(domain, modality).is_none() {
        return Err(Error::Argument(format!(
            "modality {modality} is not masked in domain {domain}"
        )));
    }
    let d = out.complete.domain_index(domain).expect("masked domain exists");
    let m = out.complete.modality_index(modality).expect("masked modality exists");
    let p = &out.params;
    let rows: Vec<Array1<f64>> = out.theta[d]
        .rows()
        .into_iter()
        .map(|t| impute_rates(t, &p.alpha, &p.beta[d], &p.rho[m]).0)
        .collect();
    Ok(stack_rows(&rows, p.rho[m].ncols()))
}

/// Writes `data/`, `truth/`, `scenario.json`, `true_params.ckpt`,
/// `theta.tsv` and `spec.json` under `dir`.
pub fn save_synth(out: &SynthOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_dataset(&out.dataset, dir.join("data"))?;
    if !out.truth.is_empty() {
        save_dataset(&out.truth.to_dataset(&out.complete)?, dir.join("truth"))?;
    }
    save_scenario(&out.scenario, dir.join("scenario.json"))?;
    save_checkpoint(&out.params, &out.spec.hyper(), dir.join("true_params.ckpt"))?;

    let mut tsv = String::from("cell_id\tdomain\ttype");
    for j in 0..out.spec.n_topics {
        write!(tsv, "\ttheta{j}").expect("string write");
    }
    tsv.push('\n');
    for (d, block) in out.complete.domains.iter().enumerate() {
        for (n, cell) in block.cell_ids.iter().enumerate() {
            write!(tsv, "{cell}\t{}\t{}", block.domain_id, out.cell_types[d][n]).expect("string write");
            for x in out.theta[d].row(n) {
                write!(tsv, "\t{x}").expect("string write");
            }
            tsv.push('\n');
        }
    }
    let path = dir.join("theta.tsv");
    fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("spec.json");
    let json = serde_json::to_string_pretty(&out.spec).expect("spec serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n_cells: usize, reads: u64) -> SynthSpec {
        SynthSpec {
            name: "small".into(),
            n_topics: 5,
            embed_dim: 4,
            modalities: vec![
                SynthModality { id: "GEX".into(), n_features: 30, reads },
                SynthModality { id: "ADT".into(), n_features: 20, reads },
            ],
            domains: vec![
                domain(1, n_cells, &["GEX", "ADT"]),
                domain(2, n_cells, &["GEX"]),
            ],
            n_cell_types: 3,
            separation: 2.0,
            beta_scale: 0.1,
            seed: 4,
        }
    }

    #[test]
    fn totals_equal_reads() {
        let out = generate(&small(200, 500)).unwrap();
        for block in &out.complete.domains {
            for m in &block.modalities {
                assert!((0..200).all(|n| m.counts.row_total(n) == 500));
            }
        }
        assert_eq!(out.dataset.domains[1].modalities.len(), 1);
        assert!(out.truth.get("2", "ADT").is_some());
    }

    #[test]
    fn zero_reads_give_zero_counts() {
        let out = generate(&small(10, 0)).unwrap();
        assert!(out.complete.domains.iter().all(|b| b.modalities.iter().all(|m| m.counts.nnz() == 0)));
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = generate(&small(30, 100)).unwrap();
        let b = generate(&small(30, 100)).unwrap();
        assert_eq!(a.complete, b.complete);
        assert_eq!(a.params, b.params);
        let c = generate(&SynthSpec { seed: 5, ..small(30, 100) }).unwrap();
        assert_ne!(a.complete, c.complete);
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec { n_cell_types: 6, ..small(5, 10) }.validate().is_err());
        let mut s = small(5, 10);
        s.domains[1].available.clear();
        assert!(s.validate().is_err());
        for name in PRESETS {
            SynthSpec::preset(name, 0).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn presets_mirror_the_availability_maps() {
        let avail = |s: &SynthSpec| -> Vec<Vec<String>> { s.domains.iter().map(|d| d.available.clone()).collect() };
        let c = SynthSpec::citeseq(0);
        assert_eq!(avail(&c), [vec!["GEX", "ADT"], vec!["GEX", "ADT"], vec!["ADT"], vec!["GEX"]]);
        let comb = SynthSpec::combine(0);
        assert_eq!(comb.domains.len(), 8);
        assert_eq!(comb.modalities.len(), 3);
        assert!(comb.domains[4..].iter().all(|d| d.available.len() == 1));
        assert!(comb.domains[..4].iter().all(|d| d.available.len() == 2));
    }

    #[test]
    fn oracle_imputation_equals_decoding_when_lambda_is_zero() {
        let out = generate(&small(20, 50)).unwrap();
        let imputed = oracle_impute(&out, "2", "ADT").unwrap();
        assert_eq!(imputed, true_rates(&out, 1, 1));
        assert!(oracle_impute(&out, "1", "ADT").is_err());
    }

    #[test]
    fn uniform_theta_gives_identical_rows() {
        let mut out = generate(&small(6, 50)).unwrap();
        out.theta[1].fill(0.2);
        let imputed = oracle_impute(&out, "2", "ADT").unwrap();
        for row in imputed.rows() {
            assert_eq!(row, imputed.row(0));
        }
    }

    #[test]
    fn type_profiles_converge_to_true_rates() {
        let mut spec = small(2000, 500);
        spec.domains.truncate(1);
        let out = generate(&spec).unwrap();
        let counts = out.complete.domains[0].modalities[0].counts.to_dense() / 500.0;
        let rates = true_rates(&out, 0, 0);
        for t in 0..spec.n_cell_types {
            let idx: Vec<usize> = (0..2000).filter(|&n| out.cell_types[0][n] == t).collect();
            let emp = counts.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap();
            let exp = rates.select(Axis(0), &idx).mean_axis(Axis(0)).unwrap();
            let l1: f64 = (&emp - &exp).mapv(f64::abs).sum();
            assert!(l1 < 0.02, "type {t}: L1 {l1}");
        }
    }
}
