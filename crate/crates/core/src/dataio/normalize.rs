//! Library-size normalization and highly-variable feature selection.

use ndarray::Array2;

use super::DomainBlock;
use crate::error::{Error, Result};

pub const DEFAULT_SCALE_FACTOR: f64 = 1e4;

/// Number of equal-width mean bins used to z-score dispersions.
pub const HVG_MEAN_BINS: usize = 20;

/// Per-cell normalized values of one modality in one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedView {
    pub domain_id: String,
    pub modality_id: String,
    /// Rows are cells, columns features.
    pub values: Array2<f64>,
    pub scale_factor: f64,
    pub log1p_applied: bool,
}

/// `scale_factor * count / total`, optionally passed through `log1p`.
///
/// Fails if any cell has zero total count in the modality.
pub fn normalize(
    block: &DomainBlock,
    modality: &str,
    scale_factor: f64,
    apply_log1p: bool,
) -> Result<NormalizedView> {
    if !(scale_factor > 0.0 && scale_factor.is_finite()) {
        return Err(Error::Argument(format!(
            "scale factor must be positive, got {scale_factor}"
        )));
    }
    let matrix = block.modality(modality).ok_or_else(|| {
        Error::Argument(format!(
            "modality {modality} is not measured in domain {}",
            block.domain_id
        ))
    })?;
    let counts = &matrix.counts;
    let mut values = Array2::zeros((counts.n_rows(), counts.n_cols()));
    for r in 0..counts.n_rows() {
        let total = counts.row_total(r);
        if total == 0 {
            return Err(Error::Validation(format!(
                "cell {} has zero total count in modality {modality}",
                matrix.cell_ids[r]
            )));
        }
        let total = total as f64;
        for (c, v) in counts.row(r) {
            let x = scale_factor * f64::from(v) / total;
            values[[r, c]] = if apply_log1p { x.ln_1p() } else { x };
        }
    }
    Ok(NormalizedView {
        domain_id: block.domain_id.clone(),
        modality_id: modality.to_string(),
        values,
        scale_factor,
        log1p_applied: apply_log1p,
    })
}

/// Indices (ascending) of the `n_keep` most dispersed features of `modality`,
/// pooled over `blocks`.
///
/// Dispersion is variance over mean of library-size-normalized counts. Features
/// are binned by mean into [`HVG_MEAN_BINS`] equal-width bins and dispersions
/// are z-scored within each bin. Features with zero mean or zero dispersion
/// rank below all others; ties go to the lower index.
pub fn select_highly_variable(
    blocks: &[&DomainBlock],
    modality: &str,
    n_keep: usize,
) -> Result<Vec<usize>> {
    if n_keep == 0 {
        return Err(Error::Argument("n_keep must be positive".into()));
    }
    let views = blocks
        .iter()
        .map(|b| normalize(b, modality, DEFAULT_SCALE_FACTOR, false))
        .collect::<Result<Vec<_>>>()?;
    let n_features = views
        .first()
        .map(|v| v.values.ncols())
        .ok_or_else(|| Error::Argument("no domains measure the modality".into()))?;
    if n_keep > n_features {
        return Err(Error::Argument(format!(
            "n_keep = {n_keep} exceeds the {n_features} available features"
        )));
    }

    let n_cells: usize = views.iter().map(|v| v.values.nrows()).sum();
    let mut sum = vec![0.0; n_features];
    let mut sum_sq = vec![0.0; n_features];
    for view in &views {
        for row in view.values.rows() {
            for (j, &x) in row.iter().enumerate() {
                sum[j] += x;
                sum_sq[j] += x * x;
            }
        }
    }
    let n = n_cells as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let dispersion: Vec<f64> = (0..n_features)
        .map(|j| {
            if n_cells < 2 || mean[j] <= 0.0 {
                return 0.0;
            }
            let var = ((sum_sq[j] - n * mean[j] * mean[j]) / (n - 1.0)).max(0.0);
            var / mean[j]
        })
        .collect();
    // Variance from two-pass sums carries rounding noise for constant columns.
    let informative: Vec<bool> = dispersion.iter().map(|&d| d > 1e-12).collect();

    let (lo, hi) = mean.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &m| {
        (lo.min(m), hi.max(m))
    });
    // Means equal up to rounding share one bin.
    let spread = hi - lo > 1e-12 * hi.abs();
    let bin_of = |m: f64| -> usize {
        if spread {
            (((m - lo) / (hi - lo)) * HVG_MEAN_BINS as f64).floor() as usize
        } else {
            0
        }
        .min(HVG_MEAN_BINS - 1)
    };
    let bins: Vec<usize> = mean.iter().map(|&m| bin_of(m)).collect();

    let mut z = vec![0.0; n_features];
    for b in 0..HVG_MEAN_BINS {
        let members: Vec<usize> = (0..n_features)
            .filter(|&j| bins[j] == b && informative[j])
            .collect();
        if members.len() < 2 {
            continue;
        }
        let k = members.len() as f64;
        let mu = members.iter().map(|&j| dispersion[j]).sum::<f64>() / k;
        let var = members
            .iter()
            .map(|&j| (dispersion[j] - mu).powi(2))
            .sum::<f64>()
            / (k - 1.0);
        let sd = var.sqrt();
        if sd > 0.0 {
            for &j in &members {
                z[j] = (dispersion[j] - mu) / sd;
            }
        }
    }

    let mut order: Vec<usize> = (0..n_features).collect();
    order.sort_by(|&a, &b| {
        informative[b]
            .cmp(&informative[a])
            .then(z[b].total_cmp(&z[a]))
            .then(a.cmp(&b))
    });
    let mut keep = order[..n_keep].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::fixtures::*;
    use approx::assert_abs_diff_eq;

    fn single(rows: &[Vec<u32>]) -> DomainBlock {
        let cells: Vec<String> = (0..rows.len()).map(|i| format!("c{i}")).collect();
        let cells: Vec<&str> = cells.iter().map(String::as_str).collect();
        let feats: Vec<String> = (0..rows[0].len()).map(|i| format!("f{i}")).collect();
        let feats: Vec<&str> = feats.iter().map(String::as_str).collect();
        block("d", &cells, vec![modality("GEX", &cells, &feats, rows)])
    }

    #[test]
    fn normalize_divides_by_total() {
        let b = single(&[vec![1, 1, 2]]);
        let v = normalize(&b, "GEX", 1.0, false).unwrap();
        assert_eq!(v.values.row(0).to_vec(), vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn normalize_with_log1p() {
        let b = single(&[vec![1, 1, 2]]);
        let v = normalize(&b, "GEX", 1.0, true).unwrap();
        let expected = [1.25f64.ln(), 1.25f64.ln(), 1.5f64.ln()];
        for (got, want) in v.values.row(0).iter().zip(expected) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(v.values[[0, 0]], 0.2231, epsilon = 1e-4);
        assert_abs_diff_eq!(v.values[[0, 2]], 0.4055, epsilon = 1e-4);
    }

    #[test]
    fn zero_total_cell_is_named_in_the_error() {
        let b = single(&[vec![1, 0, 0], vec![0, 0, 0]]);
        let err = normalize(&b, "GEX", 1.0, true).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn normalize_requires_measured_modality() {
        let b = single(&[vec![1]]);
        assert!(matches!(normalize(&b, "ADT", 1.0, true), Err(Error::Argument(_))));
    }

    #[test]
    fn constant_feature_loses_to_varying_feature() {
        // f0 is always half the library; f1 and f2 vary symmetrically.
        let b = single(&[vec![2, 1, 1], vec![2, 0, 2], vec![2, 2, 0]]);
        assert_eq!(select_highly_variable(&[&b], "GEX", 1).unwrap(), vec![1]);
    }

    #[test]
    fn keeping_everything_is_identity() {
        let b = single(&[vec![2, 1, 1, 7], vec![2, 0, 2, 1]]);
        assert_eq!(
            select_highly_variable(&[&b], "GEX", 4).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(select_highly_variable(&[&b], "GEX", 0).is_err());
        assert!(select_highly_variable(&[&b], "GEX", 5).is_err());
    }

    /// Brute-force z-scored dispersion ranking on a 4-cell, 3-feature toy.
    #[test]
    fn top_two_match_scripted_dispersions() {
        let rows = vec![vec![2, 2, 2], vec![0, 3, 3], vec![4, 1, 1], vec![2, 2, 2]];
        let b = single(&rows);
        let fracs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let t: u32 = r.iter().sum();
                r.iter().map(|&x| 1e4 * x as f64 / t as f64).collect()
            })
            .collect();
        let stats: Vec<(f64, f64)> = (0..3)
            .map(|j| {
                let col: Vec<f64> = fracs.iter().map(|r| r[j]).collect();
                let m = col.iter().sum::<f64>() / 4.0;
                let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
                (m, v / m)
            })
            .collect();
        let lo = stats.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
        let hi = stats.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
        let bin = |m: f64| {
            if hi - lo > 1e-12 * hi {
                (((m - lo) / (hi - lo)) * 20.0).floor().min(19.0) as usize
            } else {
                0
            }
        };
        let mut z = [0.0; 3];
        for j in 0..3 {
            let peers: Vec<f64> = (0..3)
                .filter(|&i| bin(stats[i].0) == bin(stats[j].0))
                .map(|i| stats[i].1)
                .collect();
            if peers.len() > 1 {
                let mu = peers.iter().sum::<f64>() / peers.len() as f64;
                let sd = (peers.iter().map(|d| (d - mu).powi(2)).sum::<f64>()
                    / (peers.len() as f64 - 1.0))
                    .sqrt();
                z[j] = (stats[j].1 - mu) / sd;
            }
        }
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
        let mut want = order[..2].to_vec();
        want.sort();
        assert_eq!(select_highly_variable(&[&b], "GEX", 2).unwrap(), want);
    }

    #[test]
    fn z_scoring_within_a_shared_bin() {
        // Constant library size and equal column sums: every mean is 1/5, so
        // all features share one bin.
        let rows = vec![vec![2, 2, 2, 2, 2], vec![2, 3, 1, 4, 0], vec![2, 1, 3, 0, 4], vec![2, 2, 2, 2, 2]];
        let b = single(&rows);
        let fracs: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| {
                let t: u32 = r.iter().sum();
                r.iter().map(|&x| x as f64 / t as f64).collect()
            })
            .collect();
        let disp: Vec<f64> = (0..5)
            .map(|j| {
                let col: Vec<f64> = fracs.iter().map(|r| r[j]).collect();
                let m = col.iter().sum::<f64>() / 4.0;
                col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0 / m
            })
            .collect();
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by(|&a, &b| disp[b].partial_cmp(&disp[a]).unwrap().then(a.cmp(&b)));
        for keep in [2, 3] {
            let mut want = order[..keep].to_vec();
            want.sort();
            assert_eq!(select_highly_variable(&[&b], "GEX", keep).unwrap(), want);
        }
        assert_eq!(select_highly_variable(&[&b], "GEX", 3).unwrap(), vec![1, 3, 4]);
    }
}
