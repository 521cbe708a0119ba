//! Constraint sets and masks.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The feasible set for compressed weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    /// Each row keeps `round((1 - sparsity) · d_in)` weights.
    Unstructured { sparsity: f64 },
    /// Each aligned group of `m` contiguous input weights keeps exactly `n`.
    SemiStructured { n: usize, m: usize },
    /// Uniform grid per row, or per `group_size` contiguous inputs.
    Quantize {
        bits: u32,
        symmetric: bool,
        group_size: Option<usize>,
    },
}

pub const SUPPORTED_BITS: [u32; 4] = [2, 3, 4, 8];

impl SparsityPattern {
    pub fn unstructured(sparsity: f64) -> Self {
        SparsityPattern::Unstructured { sparsity }
    }

    pub fn nm(n: usize, m: usize) -> Self {
        SparsityPattern::SemiStructured { n, m }
    }

    pub fn quantize(bits: u32) -> Self {
        SparsityPattern::Quantize {
            bits,
            symmetric: true,
            group_size: None,
        }
    }

    pub fn is_pruning(&self) -> bool {
        !matches!(self, SparsityPattern::Quantize { .. })
    }

    /// Checks the pattern on its own.
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Unstructured { sparsity } => {
                if !(0.0..=1.0).contains(&sparsity) {
                    return Err(Error::invalid(format!(
                        "sparsity must lie in [0, 1], got {sparsity}"
                    )));
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                if !(0 < n && n < m) {
                    return Err(Error::invalid(format!(
                        "n:m pattern needs 0 < n < m, got {n}:{m}"
                    )));
                }
            }
            SparsityPattern::Quantize {
                bits, group_size, ..
            } => {
                if !SUPPORTED_BITS.contains(&bits) {
                    return Err(Error::invalid(format!(
                        "unsupported bit width {bits}; expected one of {SUPPORTED_BITS:?}"
                    )));
                }
                if group_size == Some(0) {
                    return Err(Error::invalid("group size must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Checks the pattern against a layer of input width `d_in`.
    pub fn validate_for(&self, d_in: usize) -> Result<()> {
        self.validate()?;
        match *self {
            SparsityPattern::SemiStructured { m, .. } if !d_in.is_multiple_of(m) => {
                Err(Error::invalid(format!(
                    "input width {d_in} is not a multiple of the group size {m}"
                )))
            }
            SparsityPattern::Quantize {
                group_size: Some(g),
                ..
            } if !d_in.is_multiple_of(g) => Err(Error::invalid(format!(
                "quantization group size {g} does not divide input width {d_in}"
            ))),
            _ => Ok(()),
        }
    }

    /// Weights each row keeps under an unstructured pattern.
    pub fn row_keep(sparsity: f64, d_in: usize) -> usize {
        ((1.0 - sparsity) * d_in as f64).round() as usize
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SparsityPattern::Unstructured { sparsity } => write!(f, "unstructured:{sparsity}"),
            SparsityPattern::SemiStructured { n, m } => write!(f, "{n}:{m}"),
            SparsityPattern::Quantize {
                bits,
                symmetric,
                group_size,
            } => {
                write!(f, "int{bits}")?;
                if !symmetric {
                    f.write_str("-asym")?;
                }
                if let Some(g) = group_size {
                    write!(f, "-g{g}")?;
                }
                Ok(())
            }
        }
    }
}

/// Keep/prune flags, row-major, aligned with a weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl Mask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            keep: vec![true; rows * cols],
        }
    }

    pub fn from_keep(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: keep.len(),
            });
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn kept(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [bool] {
        &mut self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|k| !**k).count()
    }

    pub fn sparsity(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    /// Counts rows (unstructured) or aligned groups (n:m) that meet the pattern exactly.
    pub fn audit(&self, pattern: &SparsityPattern) -> Option<MaskAudit> {
        match *pattern {
            SparsityPattern::Unstructured { sparsity } => {
                let target = SparsityPattern::row_keep(sparsity, self.cols);
                let counts: Vec<usize> = (0..self.rows)
                    .map(|r| self.row(r).iter().filter(|k| **k).count())
                    .collect();
                Some(MaskAudit::from_counts("row_nonzeros", target, &counts))
            }
            SparsityPattern::SemiStructured { n, m } => {
                let counts: Vec<usize> = self
                    .keep
                    .chunks(m)
                    .map(|g| g.iter().filter(|k| !**k).count())
                    .collect();
                Some(MaskAudit::from_counts("group_zeros", m - n, &counts))
            }
            SparsityPattern::Quantize { .. } => None,
        }
    }
}

/// Result of checking a mask against its pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    /// What is counted per unit: `row_nonzeros` or `group_zeros`.
    pub unit: String,
    pub target: usize,
    pub units: usize,
    pub units_on_target: usize,
    pub max_deviation: usize,
}

impl MaskAudit {
    fn from_counts(unit: &str, target: usize, counts: &[usize]) -> Self {
        Self {
            unit: unit.to_string(),
            target,
            units: counts.len(),
            units_on_target: counts.iter().filter(|&&c| c == target).count(),
            max_deviation: counts
                .iter()
                .map(|&c| c.abs_diff(target))
                .max()
                .unwrap_or(0),
        }
    }

    pub fn exact(&self) -> bool {
        self.units == self.units_on_target
    }
}

/// Pruning order: lower score first; on equal scores the higher column goes
/// first, so the lower index survives.
pub(crate) fn prune_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(b.0.cmp(&a.0))
}

/// Columns of the `k` lowest-scoring candidates.
pub(crate) fn lowest_k(mut candidates: Vec<(usize, f64)>, k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    candidates.sort_by(prune_order);
    candidates.truncate(k);
    candidates.into_iter().map(|(c, _)| c).collect()
}

/// Mask from per-entry scores: lowest scores are pruned per row or per group.
pub(crate) fn mask_from_scores(
    rows: usize,
    cols: usize,
    score: impl Fn(usize, usize) -> f64,
    pattern: &SparsityPattern,
) -> Mask {
    let mut mask = Mask::dense(rows, cols);
    for r in 0..rows {
        let keep = mask.row_mut(r);
        match *pattern {
            SparsityPattern::Unstructured { sparsity } => {
                let n_prune = cols - SparsityPattern::row_keep(sparsity, cols);
                let cand = (0..cols).map(|c| (c, score(r, c))).collect();
                for c in lowest_k(cand, n_prune) {
                    keep[c] = false;
                }
            }
            SparsityPattern::SemiStructured { n, m } => {
                for g in (0..cols).step_by(m) {
                    let cand = (g..g + m).map(|c| (c, score(r, c))).collect();
                    for c in lowest_k(cand, m - n) {
                        keep[c] = false;
                    }
                }
            }
            SparsityPattern::Quantize { .. } => {}
        }
    }
    mask
}
