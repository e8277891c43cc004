//! Simulated missing-modality scenarios.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ModalityMatrix};
use crate::error::{Error, Result};

/// A named set of `(domain, modality)` pairs to hide.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub masks: Vec<MaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskEntry {
    pub domain: String,
    pub modality: String,
}

impl ScenarioSpec {
    pub fn none() -> Self {
        Self {
            name: "none".into(),
            masks: Vec::new(),
        }
    }
}

/// Modality matrices removed by a scenario, kept for scoring imputations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TruthStore {
    pub entries: Vec<HeldOut>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeldOut {
    pub domain_id: String,
    pub matrix: ModalityMatrix,
}

impl TruthStore {
    pub fn get(&self, domain: &str, modality: &str) -> Option<&ModalityMatrix> {
        self.entries
            .iter()
            .find(|e| e.domain_id == domain && e.matrix.modality_id == modality)
            .map(|e| &e.matrix)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Packs the held-out matrices as a dataset sharing `catalog`, so the
    /// regular manifest format can persist them.
    pub fn to_dataset(&self, reference: &Dataset) -> Result<Dataset> {
        let mut domains = Vec::new();
        for block in &reference.domains {
            let matrices: Vec<ModalityMatrix> = self
                .entries
                .iter()
                .filter(|e| e.domain_id == block.domain_id)
                .map(|e| e.matrix.clone())
                .collect();
            if !matrices.is_empty() {
                domains.push(super::DomainBlock {
                    domain_id: block.domain_id.clone(),
                    cell_ids: block.cell_ids.clone(),
                    modalities: matrices,
                    labels: block.labels.clone(),
                });
            }
        }
        if domains.is_empty() {
            return Err(Error::Argument("truth store is empty".into()));
        }
        Dataset::new(domains, reference.catalog.clone())
    }

    pub fn from_dataset(dataset: &Dataset) -> Self {
        let entries = dataset
            .domains
            .iter()
            .flat_map(|b| {
                b.modalities.iter().map(|m| HeldOut {
                    domain_id: b.domain_id.clone(),
                    matrix: m.clone(),
                })
            })
            .collect();
        Self { entries }
    }
}

/// Removes every masked modality from its domain and returns the removed
/// matrices. Unmasked data is untouched.
pub fn apply_scenario_mask(dataset: &Dataset, scenario: &ScenarioSpec) -> Result<(Dataset, TruthStore)> {
    let mut masked = dataset.clone();
    let mut truth = TruthStore::default();
    for entry in &scenario.masks {
        let d = dataset.domain_index(&entry.domain).ok_or_else(|| {
            Error::Scenario(format!(
                "{}: unknown domain {}",
                scenario.name, entry.domain
            ))
        })?;
        let block = &mut masked.domains[d];
        let pos = block
            .modalities
            .iter()
            .position(|m| m.modality_id == entry.modality)
            .ok_or_else(|| {
                Error::Scenario(format!(
                    "{}: domain {} does not measure {}",
                    scenario.name, entry.domain, entry.modality
                ))
            })?;
        let matrix = block.modalities.remove(pos);
        if block.modalities.is_empty() {
            return Err(Error::Scenario(format!(
                "{}: masking would leave domain {} with no modalities",
                scenario.name, entry.domain
            )));
        }
        truth.entries.push(HeldOut {
            domain_id: entry.domain.clone(),
            matrix,
        });
    }
    Ok((masked, truth))
}

/// Inverse of [`apply_scenario_mask`].
pub fn merge_truth(masked: &Dataset, truth: &TruthStore) -> Result<Dataset> {
    let mut domains = masked.domains.clone();
    for e in &truth.entries {
        let block = domains
            .iter_mut()
            .find(|b| b.domain_id == e.domain_id)
            .ok_or_else(|| Error::Argument(format!("unknown domain {}", e.domain_id)))?;
        block.modalities.push(e.matrix.clone());
    }
    Dataset::new(domains, masked.catalog.clone())
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<ScenarioSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn save_scenario(scenario: &ScenarioSpec, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(scenario).expect("scenario serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}
