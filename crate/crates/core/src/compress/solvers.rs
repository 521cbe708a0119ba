//! Per-matrix solvers for the layerwise objective `min ‖(W − Ŵ)X‖²_F`.
//!
//! Everything here sees the calibration data only through the Gram matrix
//! `H = X·Xᵀ`; the objective in that form is `Σ_rows (w − ŵ)ᵀ H (w − ŵ)`.

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, SymMatrix, DEFAULT_DAMP_FRACTION};
use crate::par::Exec;

use super::pattern::{lowest_k, mask_from_scores, Mask, SparsityPattern};

/// Default columns per OBS block.
pub const DEFAULT_BLOCK_SIZE: usize = 32;

/// Knobs shared by the Hessian-based solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObsOptions {
    pub block_size: usize,
    pub damp_fraction: f64,
    /// Rows are independent; `Parallel` solves them concurrently.
    pub exec: Exec,
}

impl Default for ObsOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            damp_fraction: DEFAULT_DAMP_FRACTION,
            exec: Exec::Sequential,
        }
    }
}

fn check_gram(weights: &Matrix, gram: &SymMatrix) -> Result<()> {
    if gram.dim() != weights.cols() {
        return Err(Error::DimensionMismatch {
            expected: weights.cols(),
            actual: gram.dim(),
        });
    }
    Ok(())
}

fn require_pruning(pattern: &SparsityPattern, d_in: usize) -> Result<()> {
    pattern.validate_for(d_in)?;
    if !pattern.is_pruning() {
        return Err(Error::invalid(format!(
            "{pattern} is not a pruning pattern"
        )));
    }
    Ok(())
}

fn apply_mask(weights: &Matrix, mask: &Mask) -> Matrix {
    let mut out = weights.clone();
    for (w, &k) in out.data_mut().iter_mut().zip(mask.as_slice()) {
        if !k {
            *w = 0.0;
        }
    }
    out
}

/// Trace-form reconstruction loss `Σ_rows (w − ŵ)ᵀ H (w − ŵ)`.
pub fn reconstruction_loss(
    original: &Matrix,
    compressed: &Matrix,
    gram: &SymMatrix,
) -> Result<f64> {
    check_gram(original, gram)?;
    if original.shape() != compressed.shape() {
        return Err(Error::invalid("original and compressed shapes differ"));
    }
    let mut total = 0.0;
    let mut diff = vec![0.0; original.cols()];
    for r in 0..original.rows() {
        for ((d, a), b) in diff.iter_mut().zip(original.row(r)).zip(compressed.row(r)) {
            *d = a - b;
        }
        total += gram.quad_form(&diff);
    }
    Ok(total)
}

/// Keeps the largest-magnitude weights per row (or per n:m group); kept
/// weights are unchanged.
pub fn prune_magnitude(weights: &Matrix, pattern: &SparsityPattern) -> Result<(Mask, Matrix)> {
    require_pruning(pattern, weights.cols())?;
    let mask = mask_from_scores(
        weights.rows(),
        weights.cols(),
        |r, c| weights.get(r, c).abs(),
        pattern,
    );
    let pruned = apply_mask(weights, &mask);
    Ok((mask, pruned))
}

/// WANDA: score `|W_ij| · ‖X_j‖₂` with `‖X_j‖₂ = √H_jj`; no weight update.
pub fn prune_wanda(
    weights: &Matrix,
    gram: &SymMatrix,
    pattern: &SparsityPattern,
) -> Result<(Mask, Matrix)> {
    check_gram(weights, gram)?;
    require_pruning(pattern, weights.cols())?;
    let norms: Vec<f64> = gram.diagonal().iter().map(|d| d.max(0.0).sqrt()).collect();
    let mask = mask_from_scores(
        weights.rows(),
        weights.cols(),
        |r, c| weights.get(r, c).abs() * norms[c],
        pattern,
    );
    let pruned = apply_mask(weights, &mask);
    Ok((mask, pruned))
}

/// Upper-triangular `U` with `UᵀU = (H + λI)⁻¹`.
///
/// Row `c` of `U`, scaled by `U_cc`, is row `c` of the inverse Hessian after
/// columns `0..c` have been eliminated, so `U_cc²` is the OBS denominator
/// and `U_c,c+1:` the compensation direction for column `c`.
pub fn inverse_hessian_factor(gram: &SymMatrix, damp_fraction: f64) -> Result<Matrix> {
    let h = gram.dampened(damp_fraction)?;
    let hinv = h.inverse()?;
    let l = hinv.cholesky()?;
    let n = gram.dim();
    let mut u = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            u.set(i, j, l.get(j, i));
        }
    }
    Ok(u)
}

/// Subtracts `err · U_c,c+1:` from the not-yet-processed columns.
#[inline]
fn propagate(w: &mut [f64], u: &Matrix, c: usize, err: f64) {
    let urow = &u.row(c)[c + 1..];
    for (wj, &ucj) in w[c + 1..].iter_mut().zip(urow) {
        *wj -= err * ucj;
    }
}

fn obs_prune_row(
    row: &[f64],
    u: &Matrix,
    pattern: &SparsityPattern,
    block_size: usize,
) -> (Vec<f64>, Vec<bool>) {
    let d = row.len();
    let mut w = row.to_vec();
    let mut keep = vec![true; d];
    let score = |w: &[f64], c: usize| {
        let dc = u.get(c, c);
        w[c] * w[c] / (dc * dc)
    };
    let n_prune = match *pattern {
        SparsityPattern::Unstructured { sparsity } => d - SparsityPattern::row_keep(sparsity, d),
        _ => 0,
    };
    let mut pruned = 0;

    for start in (0..d).step_by(block_size) {
        let end = (start + block_size).min(d);
        if let SparsityPattern::Unstructured { .. } = pattern {
            // Rank every unprocessed column by its current score and prune the
            // block columns that fall in the row's remaining budget.
            let remaining = n_prune - pruned;
            let cand = (start..d).map(|c| (c, score(&w, c))).collect();
            for c in lowest_k(cand, remaining) {
                if c < end {
                    keep[c] = false;
                    pruned += 1;
                }
            }
        }
        for c in start..end {
            if let SparsityPattern::SemiStructured { n, m } = *pattern {
                if c % m == 0 {
                    let cand = (c..c + m).map(|j| (j, score(&w, j))).collect();
                    for j in lowest_k(cand, m - n) {
                        keep[j] = false;
                    }
                }
            }
            if !keep[c] {
                let err = w[c] / u.get(c, c);
                w[c] = 0.0;
                propagate(&mut w, u, c, err);
            }
        }
    }
    (w, keep)
}

/// Blockwise OBS pruning.
///
/// Columns are processed left to right. At the start of each block, each row
/// picks which of the block's columns to prune by the score `w_c² / U_cc²`:
/// for unstructured patterns a block column is pruned if it ranks within the
/// row's remaining budget among all unprocessed columns; for n:m patterns
/// the choice is made per aligned group. Each pruned weight's error is
/// pushed onto the later columns of its row.
pub fn prune_obs(
    weights: &Matrix,
    gram: &SymMatrix,
    pattern: &SparsityPattern,
    opts: &ObsOptions,
) -> Result<(Mask, Matrix)> {
    check_gram(weights, gram)?;
    let d = weights.cols();
    require_pruning(pattern, d)?;
    if opts.block_size == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    if let SparsityPattern::SemiStructured { m, .. } = *pattern {
        if !opts.block_size.is_multiple_of(m) {
            return Err(Error::invalid(format!(
                "block size {} must be a multiple of the n:m group size {m}",
                opts.block_size
            )));
        }
    }
    let u = inverse_hessian_factor(gram, opts.damp_fraction)?;
    let rows = opts.exec.map_range(weights.rows(), |r| {
        obs_prune_row(weights.row(r), &u, pattern, opts.block_size)
    });
    let mut out = Matrix::zeros(weights.rows(), d);
    let mut keep = Vec::with_capacity(weights.rows() * d);
    for (r, (w, k)) in rows.into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(&w);
        keep.extend(k);
    }
    Ok((Mask::from_keep(weights.rows(), d, keep)?, out))
}

/// Full OBS removal of weight `q` from one row:
/// `δw = −(w_q / [H⁻¹]_qq) · H⁻¹[:, q]`, with `w_q` set to exactly zero.
pub fn obs_remove_weight(row: &[f64], hinv: &SymMatrix, q: usize) -> Result<Vec<f64>> {
    if row.len() != hinv.dim() {
        return Err(Error::DimensionMismatch {
            expected: hinv.dim(),
            actual: row.len(),
        });
    }
    if q >= row.len() {
        return Err(Error::invalid(format!("column {q} out of range")));
    }
    let ratio = row[q] / hinv.get(q, q);
    let mut out: Vec<f64> = row
        .iter()
        .zip(hinv.row(q))
        .map(|(w, h)| w - ratio * h)
        .collect();
    out[q] = 0.0;
    Ok(out)
}

/// Uniform quantization grid for one row or group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantGrid {
    pub scale: f64,
    pub zero: f64,
    pub qmin: f64,
    pub qmax: f64,
}

impl QuantGrid {
    /// Symmetric grid: `scale = max|w| / (2^(bits−1) − 1)`, levels `−qmax..=qmax`.
    pub fn symmetric(values: &[f64], bits: u32) -> Self {
        let qmax = ((1u64 << (bits - 1)) - 1) as f64;
        let amax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            scale: amax / qmax,
            zero: 0.0,
            qmin: -qmax,
            qmax,
        }
    }

    /// Min/max grid over `2^bits` levels, widened to include zero.
    pub fn asymmetric(values: &[f64], bits: u32) -> Self {
        let levels = ((1u64 << bits) - 1) as f64;
        let lo = values.iter().fold(0.0f64, |m, &v| m.min(v));
        let hi = values.iter().fold(0.0f64, |m, &v| m.max(v));
        let scale = (hi - lo) / levels;
        let zero = if scale > 0.0 {
            (-lo / scale).round()
        } else {
            0.0
        };
        Self {
            scale,
            zero,
            qmin: 0.0,
            qmax: levels,
        }
    }

    /// Nearest grid point.
    pub fn quantize(&self, w: f64) -> f64 {
        if self.scale == 0.0 {
            return 0.0;
        }
        let q = ((w / self.scale).round() + self.zero).clamp(self.qmin, self.qmax);
        (q - self.zero) * self.scale
    }

    /// True when `w` is exactly representable.
    pub fn contains(&self, w: f64) -> bool {
        self.quantize(w) == w
    }
}

/// Grids for every row, one per `group_size` inputs (or one per row).
pub fn quant_grids(weights: &Matrix, pattern: &SparsityPattern) -> Result<Vec<Vec<QuantGrid>>> {
    let SparsityPattern::Quantize {
        bits,
        symmetric,
        group_size,
    } = *pattern
    else {
        return Err(Error::invalid(format!(
            "{pattern} is not a quantization pattern"
        )));
    };
    pattern.validate_for(weights.cols())?;
    let g = group_size.unwrap_or(weights.cols()).max(1);
    Ok((0..weights.rows())
        .map(|r| {
            weights
                .row(r)
                .chunks(g)
                .map(|vals| {
                    if symmetric {
                        QuantGrid::symmetric(vals, bits)
                    } else {
                        QuantGrid::asymmetric(vals, bits)
                    }
                })
                .collect()
        })
        .collect())
}

fn group_width(pattern: &SparsityPattern, d: usize) -> usize {
    match *pattern {
        SparsityPattern::Quantize {
            group_size: Some(g),
            ..
        } => g,
        _ => d.max(1),
    }
}

/// Round-to-nearest on the same grids `quantize_obs` uses.
pub fn quantize_rtn(weights: &Matrix, pattern: &SparsityPattern) -> Result<Matrix> {
    let grids = quant_grids(weights, pattern)?;
    let g = group_width(pattern, weights.cols());
    let mut out = weights.clone();
    for (r, row_grids) in grids.iter().enumerate() {
        for (c, w) in out.row_mut(r).iter_mut().enumerate() {
            *w = row_grids[c / g].quantize(*w);
        }
    }
    Ok(out)
}

/// OBS quantization: columns are rounded left to right, and each rounding
/// error is compensated on the row's later columns through `U`.
///
/// Grids come from the original weights, so every output entry lies on its
/// group's grid.
pub fn quantize_obs(
    weights: &Matrix,
    gram: &SymMatrix,
    pattern: &SparsityPattern,
    opts: &ObsOptions,
) -> Result<Matrix> {
    check_gram(weights, gram)?;
    if opts.block_size == 0 {
        return Err(Error::invalid("block size must be at least 1"));
    }
    let grids = quant_grids(weights, pattern)?;
    let g = group_width(pattern, weights.cols());
    let u = inverse_hessian_factor(gram, opts.damp_fraction)?;
    let rows = opts.exec.map_range(weights.rows(), |r| {
        let mut w = weights.row(r).to_vec();
        for c in 0..w.len() {
            let q = grids[r][c / g].quantize(w[c]);
            let err = (w[c] - q) / u.get(c, c);
            w[c] = q;
            propagate(&mut w, &u, c, err);
        }
        w
    });
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for (r, w) in rows.into_iter().enumerate() {
        out.row_mut(r).copy_from_slice(&w);
    }
    Ok(out)
}

/// Least-squares refit on a fixed support: per row, the surviving weights
/// solve `H_SS ŵ_S = H_S,: w` and pruned weights are zero. Uses `gram` as
/// given; dampen it first if the support systems may be singular.
pub fn refit_fixed_mask(weights: &Matrix, gram: &SymMatrix, mask: &Mask) -> Result<Matrix> {
    check_gram(weights, gram)?;
    if (mask.rows(), mask.cols()) != weights.shape() {
        return Err(Error::invalid("mask shape does not match weights"));
    }
    let mut out = Matrix::zeros(weights.rows(), weights.cols());
    for r in 0..weights.rows() {
        let w = weights.row(r);
        let support: Vec<usize> = (0..w.len()).filter(|&c| mask.kept(r, c)).collect();
        if support.len() == w.len() {
            out.row_mut(r).copy_from_slice(w);
            continue;
        }
        if support.is_empty() {
            continue;
        }
        let rhs: Vec<f64> = support
            .iter()
            .map(|&s| gram.row(s).iter().zip(w).map(|(h, x)| h * x).sum())
            .collect();
        let chol = gram
            .submatrix(&support)
            .cholesky()
            .map_err(|e| Error::SingularSupport {
                row: r,
                reason: e.to_string(),
            })?;
        let solved = chol.solve(&rhs)?;
        let dst = out.row_mut(r);
        for (&s, v) in support.iter().zip(solved) {
            dst[s] = v;
        }
    }
    Ok(out)
}
