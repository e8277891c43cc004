//! On-disk dataset layout.
//!
//! A JSON manifest names, per domain, a tab-separated cell table and one
//! coordinate-format count file per modality:
//!
//! ```text
//! N_ROWS N_COLS NNZ
//! row col count      (0-indexed, one triplet per line)
//! ```
//!
//! Feature ids live in plain text files, one id per line.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CountMatrix, Dataset, DomainBlock, ModalityInfo, ModalityMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domains: Vec<ManifestDomain>,
    /// Optional explicit catalog; preserves modalities observed nowhere.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub catalog: Vec<ManifestCatalogEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestDomain {
    pub id: String,
    pub cells_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels_column: Option<String>,
    pub modalities: Vec<ManifestModality>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModality {
    pub id: String,
    pub matrix_file: String,
    pub features_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestCatalogEntry {
    pub id: String,
    pub features_file: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads and validates the dataset described by `manifest_path`.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let text = read_text(manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut domains = Vec::with_capacity(manifest.domains.len());
    for d in &manifest.domains {
        let cells_path = base.join(&d.cells_file);
        let (cell_ids, labels) = read_cells(&cells_path, d.labels_column.as_deref())?;
        let mut modalities = Vec::with_capacity(d.modalities.len());
        for m in &d.modalities {
            let feature_ids = read_features(&base.join(&m.features_file))?;
            let counts = read_matrix(&base.join(&m.matrix_file))?;
            modalities.push(ModalityMatrix {
                modality_id: m.id.clone(),
                cell_ids: cell_ids.clone(),
                feature_ids,
                counts,
            });
        }
        domains.push(DomainBlock {
            domain_id: d.id.clone(),
            cell_ids,
            modalities,
            labels,
        });
    }

    if manifest.catalog.is_empty() {
        Dataset::from_domains(domains)
    } else {
        let catalog = manifest
            .catalog
            .iter()
            .map(|c| {
                Ok(ModalityInfo {
                    id: c.id.clone(),
                    feature_ids: read_features(&base.join(&c.features_file))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(domains, catalog)
    }
}

/// Writes `dataset` under `dir` and returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut catalog = Vec::with_capacity(dataset.catalog.len());
    for (j, m) in dataset.catalog.iter().enumerate() {
        let name = format!("m{j}_features.txt");
        write_features(&dir.join(&name), &m.feature_ids)?;
        catalog.push(ManifestCatalogEntry {
            id: m.id.clone(),
            features_file: name,
        });
    }

    let mut domains = Vec::with_capacity(dataset.domains.len());
    for (i, block) in dataset.domains.iter().enumerate() {
        let cells_file = format!("d{i}_cells.tsv");
        write_cells(&dir.join(&cells_file), &block.cell_ids, block.labels.as_deref())?;
        let mut modalities = Vec::new();
        for m in &block.modalities {
            let j = dataset.modality_index(&m.modality_id).expect("validated");
            let matrix_file = format!("d{i}_m{j}.mtx");
            write_matrix(&dir.join(&matrix_file), &m.counts)?;
            modalities.push(ManifestModality {
                id: m.modality_id.clone(),
                matrix_file,
                features_file: catalog[j].features_file.clone(),
            });
        }
        domains.push(ManifestDomain {
            id: block.domain_id.clone(),
            cells_file,
            labels_column: block.labels.as_ref().map(|_| "label".to_string()),
            modalities,
        });
    }

    let manifest = Manifest { domains, catalog };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&path, &json)?;
    Ok(path)
}

fn read_cells(path: &Path, labels_column: Option<&str>) -> Result<(Vec<String>, Option<Vec<String>>)> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty cell table"))?
        .split('\t')
        .collect();
    let label_idx = match labels_column {
        Some(col) => Some(
            header
                .iter()
                .position(|h| *h == col)
                .ok_or_else(|| Error::parse(path, format!("no column named {col}")))?,
        ),
        None => None,
    };
    let mut cells = Vec::new();
    let mut labels = label_idx.map(|_| Vec::new());
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        cells.push(fields[0].to_string());
        if let (Some(idx), Some(labels)) = (label_idx, labels.as_mut()) {
            let label = fields.get(idx).ok_or_else(|| {
                Error::parse(path, format!("line {}: missing label column", lineno + 2))
            })?;
            labels.push((*label).to_string());
        }
    }
    Ok((cells, labels))
}

fn write_cells(path: &Path, cells: &[String], labels: Option<&[String]>) -> Result<()> {
    let mut out = String::from("cell_id");
    if labels.is_some() {
        out.push_str("\tlabel");
    }
    out.push('\n');
    for (i, c) in cells.iter().enumerate() {
        out.push_str(c);
        if let Some(labels) = labels {
            out.push('\t');
            out.push_str(&labels[i]);
        }
        out.push('\n');
    }
    write_text(path, &out)
}

fn read_features(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn write_features(path: &Path, features: &[String]) -> Result<()> {
    let mut out = features.join("\n");
    out.push('\n');
    write_text(path, &out)
}

/// Parses a coordinate-format count file.
pub(crate) fn read_matrix(path: &Path) -> Result<CountMatrix> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, "empty matrix file"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::parse(path, format!("bad header: {e}")))?;
    let [n_rows, n_cols, nnz] = dims[..] else {
        return Err(Error::parse(path, "header must be `rows cols nnz`"));
    };
    let mut triplets = Vec::with_capacity(nnz);
    for (lineno, line) in lines {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::parse(path, format!("line {}: expected `row col count`", lineno + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let r: usize = fields[0].parse().map_err(|_| bad())?;
        let c: usize = fields[1].parse().map_err(|_| bad())?;
        let v: i64 = fields[2].parse().map_err(|_| bad())?;
        if v < 0 {
            return Err(Error::Validation(format!(
                "{}: negative count {v} at ({r}, {c})",
                path.display()
            )));
        }
        let v = u32::try_from(v).map_err(|_| bad())?;
        triplets.push((r, c, v));
    }
    if triplets.len() != nnz {
        return Err(Error::parse(
            path,
            format!("header declares {nnz} entries, found {}", triplets.len()),
        ));
    }
    CountMatrix::from_triplets(n_rows, n_cols, triplets)
}

pub(crate) fn write_matrix(path: &Path, counts: &CountMatrix) -> Result<()> {
    use std::fmt::Write;
    let mut out = format!("{} {} {}\n", counts.n_rows(), counts.n_cols(), counts.nnz());
    for (r, c, v) in counts.triplets() {
        writeln!(out, "{r} {c} {v}").expect("write to string");
    }
    write_text(path, &out)
}
