//! Multi-domain, multi-modality count datasets.
//!
//! A [`Dataset`] is a list of [`DomainBlock`]s. Each block measures some
//! subset of the modality catalog on all of its cells; a modality that a
//! domain lacks is absent entirely, never partially observed.

mod io;
mod normalize;
mod scenario;

pub use io::{
    load_dataset, save_dataset, Manifest, ManifestCatalogEntry, ManifestDomain, ManifestModality,
};
pub use normalize::{
    normalize, select_highly_variable, NormalizedView, DEFAULT_SCALE_FACTOR, HVG_MEAN_BINS,
};
pub use scenario::{
    apply_scenario_mask, HeldOut, load_scenario, merge_truth, save_scenario, MaskEntry, ScenarioSpec,
    TruthStore,
};

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Sparse non-negative integer matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<u32>,
}

impl CountMatrix {
    /// Builds from `(row, col, count)` triplets in any order. Zero counts are
    /// dropped; duplicate coordinates and out-of-range indices are rejected.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        mut triplets: Vec<(usize, usize, u32)>,
    ) -> Result<Self> {
        triplets.retain(|t| t.2 != 0);
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, v) in &triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Validation(format!(
                    "entry ({r}, {c}) outside a {n_rows}x{n_cols} matrix"
                )));
            }
            if prev == Some((r, c)) {
                return Err(Error::Validation(format!("duplicate entry ({r}, {c})")));
            }
            prev = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c as u32);
            values.push(v);
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from dense rows; every row must have the same length.
    pub fn from_dense(rows: &[Vec<u32>]) -> Self {
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for row in rows {
            assert_eq!(row.len(), n_cols, "ragged dense rows");
            for (c, &v) in row.iter().enumerate() {
                if v != 0 {
                    indices.push(c as u32);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Non-zero `(col, count)` pairs of `row`, in column order.
    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, u32)> + '_ {
        let span = self.indptr[row]..self.indptr[row + 1];
        self.indices[span.clone()]
            .iter()
            .zip(&self.values[span])
            .map(|(&c, &v)| (c as usize, v))
    }

    pub fn row_total(&self, row: usize) -> u64 {
        self.row(row).map(|(_, v)| u64::from(v)).sum()
    }

    pub fn row_dense(&self, row: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.n_cols];
        for (c, v) in self.row(row) {
            out[c] = f64::from(v);
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                out[[r, c]] = f64::from(v);
            }
        }
        out
    }

    /// All stored entries as `(row, col, count)` in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, u32)> + '_ {
        (0..self.n_rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            for (c, v) in self.row(r) {
                indices.push(c as u32);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        Self {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            indptr,
            indices,
            values,
        }
    }

    /// Keeps only the listed columns, renumbered in the given order.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let mut remap = vec![usize::MAX; self.n_cols];
        for (new, &old) in cols.iter().enumerate() {
            remap[old] = new;
        }
        let triplets = self
            .triplets()
            .filter(|&(_, c, _)| remap[c] != usize::MAX)
            .map(|(r, c, v)| (r, remap[c], v))
            .collect();
        Self::from_triplets(self.n_rows, cols.len(), triplets).expect("remapped entries are valid")
    }
}

/// Counts for one modality measured in one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityMatrix {
    pub modality_id: String,
    pub cell_ids: Vec<String>,
    pub feature_ids: Vec<String>,
    pub counts: CountMatrix,
}

impl ModalityMatrix {
    pub fn n_features(&self) -> usize {
        self.feature_ids.len()
    }

    fn validate(&self) -> Result<()> {
        if self.counts.n_rows() != self.cell_ids.len() {
            return Err(Error::Validation(format!(
                "modality {}: {} count rows for {} cells",
                self.modality_id,
                self.counts.n_rows(),
                self.cell_ids.len()
            )));
        }
        if self.counts.n_cols() != self.feature_ids.len() {
            return Err(Error::Validation(format!(
                "modality {}: {} count columns for {} features",
                self.modality_id,
                self.counts.n_cols(),
                self.feature_ids.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &self.feature_ids {
            if !seen.insert(f.as_str()) {
                return Err(Error::Validation(format!(
                    "modality {}: duplicate feature id {f}",
                    self.modality_id
                )));
            }
        }
        Ok(())
    }
}

/// One cohort: its cells and the modalities measured on all of them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBlock {
    pub domain_id: String,
    pub cell_ids: Vec<String>,
    /// Sorted by position in the owning dataset's modality catalog.
    pub modalities: Vec<ModalityMatrix>,
    pub labels: Option<Vec<String>>,
}

impl DomainBlock {
    pub fn n_cells(&self) -> usize {
        self.cell_ids.len()
    }

    pub fn modality(&self, id: &str) -> Option<&ModalityMatrix> {
        self.modalities.iter().find(|m| m.modality_id == id)
    }

    pub fn has_modality(&self, id: &str) -> bool {
        self.modality(id).is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Validation(format!(
                "domain {} has no modalities",
                self.domain_id
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.n_cells() {
                return Err(Error::Validation(format!(
                    "domain {}: {} labels for {} cells",
                    self.domain_id,
                    labels.len(),
                    self.n_cells()
                )));
            }
        }
        let mut seen = HashSet::new();
        for m in &self.modalities {
            if !seen.insert(m.modality_id.as_str()) {
                return Err(Error::Validation(format!(
                    "domain {}: modality {} listed twice",
                    self.domain_id, m.modality_id
                )));
            }
            m.validate()?;
            if m.cell_ids != self.cell_ids {
                return Err(Error::Validation(format!(
                    "domain {}: modality {} rows are not aligned with the domain's cells",
                    self.domain_id, m.modality_id
                )));
            }
        }
        Ok(())
    }
}

/// A catalog entry: one modality and its feature universe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityInfo {
    pub id: String,
    pub feature_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub domains: Vec<DomainBlock>,
    pub catalog: Vec<ModalityInfo>,
}

impl Dataset {
    /// Validates and assembles a dataset. Modalities inside each block are
    /// reordered to catalog order.
    pub fn new(mut domains: Vec<DomainBlock>, catalog: Vec<ModalityInfo>) -> Result<Self> {
        let position: HashMap<&str, usize> = catalog
            .iter()
            .enumerate()
            .map(|(i, m)| (m.id.as_str(), i))
            .collect();
        if position.len() != catalog.len() {
            return Err(Error::Validation("duplicate modality in catalog".into()));
        }
        let mut domain_ids = HashSet::new();
        let mut cell_ids = HashSet::new();
        for block in &mut domains {
            if !domain_ids.insert(block.domain_id.clone()) {
                return Err(Error::Validation(format!(
                    "duplicate domain id {}",
                    block.domain_id
                )));
            }
            block.validate()?;
            for m in &block.modalities {
                let Some(&idx) = position.get(m.modality_id.as_str()) else {
                    return Err(Error::Validation(format!(
                        "domain {}: modality {} missing from catalog",
                        block.domain_id, m.modality_id
                    )));
                };
                if catalog[idx].feature_ids != m.feature_ids {
                    return Err(Error::Validation(format!(
                        "domain {}: feature ids of modality {} differ from other domains",
                        block.domain_id, m.modality_id
                    )));
                }
            }
            block
                .modalities
                .sort_by_key(|m| position[m.modality_id.as_str()]);
            for c in &block.cell_ids {
                if !cell_ids.insert(c.clone()) {
                    return Err(Error::Validation(format!("duplicate cell id {c}")));
                }
            }
        }
        if domains.is_empty() {
            return Err(Error::Validation("dataset has no domains".into()));
        }
        Ok(Self { domains, catalog })
    }

    /// Builds the catalog from first appearance of each modality.
    pub fn from_domains(domains: Vec<DomainBlock>) -> Result<Self> {
        let mut catalog: Vec<ModalityInfo> = Vec::new();
        for block in &domains {
            for m in &block.modalities {
                if !catalog.iter().any(|c| c.id == m.modality_id) {
                    catalog.push(ModalityInfo {
                        id: m.modality_id.clone(),
                        feature_ids: m.feature_ids.clone(),
                    });
                }
            }
        }
        Self::new(domains, catalog)
    }

    pub fn n_modalities(&self) -> usize {
        self.catalog.len()
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.domain_id == id)
    }

    pub fn modality_index(&self, id: &str) -> Option<usize> {
        self.catalog.iter().position(|m| m.id == id)
    }

    pub fn total_cells(&self) -> usize {
        self.domains.iter().map(DomainBlock::n_cells).sum()
    }

    pub fn schema(&self) -> Schema {
        Schema {
            modalities: self
                .catalog
                .iter()
                .map(|m| ModalitySchema {
                    id: m.id.clone(),
                    n_features: m.feature_ids.len(),
                })
                .collect(),
            domains: self
                .domains
                .iter()
                .map(|d| DomainSchema {
                    id: d.domain_id.clone(),
                    modalities: d
                        .modalities
                        .iter()
                        .map(|m| self.modality_index(&m.modality_id).expect("validated"))
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Shape-only view of a dataset: what a model needs to size its tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub modalities: Vec<ModalitySchema>,
    pub domains: Vec<DomainSchema>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    pub id: String,
    pub n_features: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub id: String,
    /// Catalog indices of the available modalities, ascending.
    pub modalities: Vec<usize>,
}

impl Schema {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.domains.is_empty() {
            return Err(Error::Validation("empty schema".into()));
        }
        for d in &self.domains {
            if d.modalities.is_empty() {
                return Err(Error::Validation(format!("domain {} has no modalities", d.id)));
            }
            if d.modalities.iter().any(|&m| m >= self.modalities.len()) {
                return Err(Error::Validation(format!(
                    "domain {} references an unknown modality",
                    d.id
                )));
            }
        }
        Ok(())
    }

    pub fn domain_has(&self, domain: usize, modality: usize) -> bool {
        self.domains[domain].modalities.contains(&modality)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn csr_from_triplets_sorts_and_rejects_duplicates() {
        let m = CountMatrix::from_triplets(2, 3, vec![(1, 2, 5), (0, 1, 1), (0, 0, 0)]).unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.row_dense(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(m.row_total(1), 5);
        assert!(CountMatrix::from_triplets(2, 3, vec![(0, 1, 1), (0, 1, 2)]).is_err());
        assert!(CountMatrix::from_triplets(2, 3, vec![(2, 0, 1)]).is_err());
    }

    #[test]
    fn select_cols_renumbers() {
        let m = CountMatrix::from_dense(&[vec![1, 2, 3], vec![4, 0, 6]]);
        let s = m.select_cols(&[2, 0]);
        assert_eq!(s.row_dense(0), vec![3.0, 1.0]);
        assert_eq!(s.row_dense(1), vec![6.0, 4.0]);
    }

    #[test]
    fn dataset_rejects_feature_mismatch_across_domains() {
        let a = block("a", &["c1"], vec![modality("GEX", &["c1"], &["g1", "g2"], &[vec![1, 1]])]);
        let b = block("b", &["c2"], vec![modality("GEX", &["c2"], &["g1", "g3"], &[vec![1, 1]])]);
        let err = Dataset::from_domains(vec![a, b]).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn dataset_rejects_duplicate_cells_and_empty_domains() {
        let a = block("a", &["c1"], vec![modality("GEX", &["c1"], &["g1"], &[vec![1]])]);
        let b = block("b", &["c1"], vec![modality("GEX", &["c1"], &["g1"], &[vec![1]])]);
        assert!(matches!(
            Dataset::from_domains(vec![a.clone(), b]),
            Err(Error::Validation(_))
        ));
        let empty = block("e", &["c9"], vec![]);
        assert!(matches!(
            Dataset::from_domains(vec![a, empty]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn modalities_are_kept_in_catalog_order() {
        let a = block(
            "a",
            &["c1"],
            vec![
                modality("GEX", &["c1"], &["g"], &[vec![1]]),
                modality("ADT", &["c1"], &["p"], &[vec![1]]),
            ],
        );
        let b = block(
            "b",
            &["c2"],
            vec![
                modality("ADT", &["c2"], &["p"], &[vec![2]]),
                modality("GEX", &["c2"], &["g"], &[vec![2]]),
            ],
        );
        let ds = Dataset::from_domains(vec![a, b]).unwrap();
        let order: Vec<_> = ds.domains[1]
            .modalities
            .iter()
            .map(|m| m.modality_id.as_str())
            .collect();
        assert_eq!(order, ["GEX", "ADT"]);
        assert_eq!(ds.schema().domains[1].modalities, vec![0, 1]);
    }
}
