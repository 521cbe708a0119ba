//! Layerwise compression of a whole model.

mod pattern;
mod solvers;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationMode, CalibrationSet};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, PrunableLayerRef};
use crate::numkernel::{Matrix, SymMatrix};
use crate::par::Exec;

pub use pattern::{Mask, MaskAudit, SparsityPattern, SUPPORTED_BITS};
pub use solvers::{
    inverse_hessian_factor, obs_remove_weight, prune_magnitude, prune_obs, prune_wanda,
    quant_grids, quantize_obs, quantize_rtn, reconstruction_loss, refit_fixed_mask, ObsOptions,
    QuantGrid, DEFAULT_BLOCK_SIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Largest-|w| mask, or round-to-nearest for quantize patterns.
    Magnitude,
    Wanda,
    Obs,
    ObsQuant,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::Obs => "obs",
            Method::ObsQuant => "obs-quant",
        }
    }

    /// Rejects method/pattern pairs that have no meaning.
    pub fn check_pattern(self, pattern: &SparsityPattern) -> Result<()> {
        let ok = match self {
            Method::Magnitude => true,
            Method::Wanda | Method::Obs => pattern.is_pruning(),
            Method::ObsQuant => !pattern.is_pruning(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "method {} cannot produce pattern {pattern}",
                self.name()
            )))
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "magnitude" => Ok(Method::Magnitude),
            "wanda" => Ok(Method::Wanda),
            "obs" => Ok(Method::Obs),
            "obs-quant" => Ok(Method::ObsQuant),
            _ => Err(Error::invalid(format!(
                "unknown method {s:?}; expected magnitude, wanda, obs or obs-quant"
            ))),
        }
    }
}

/// Outcome of compressing one weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult {
    pub weights: Matrix,
    pub mask: Option<Mask>,
    pub loss: f64,
}

/// Compresses one matrix with the given method.
pub fn compress_matrix(
    weights: &Matrix,
    gram: &SymMatrix,
    method: Method,
    pattern: &SparsityPattern,
    opts: &ObsOptions,
) -> Result<LayerResult> {
    method.check_pattern(pattern)?;
    pattern.validate_for(weights.cols())?;
    let (mask, out) = match (method, pattern.is_pruning()) {
        (Method::Magnitude, true) => {
            let (m, w) = prune_magnitude(weights, pattern)?;
            (Some(m), w)
        }
        (Method::Magnitude, false) => (None, quantize_rtn(weights, pattern)?),
        (Method::Wanda, _) => {
            let (m, w) = prune_wanda(weights, gram, pattern)?;
            (Some(m), w)
        }
        (Method::Obs, _) => {
            let (m, w) = prune_obs(weights, gram, pattern, opts)?;
            (Some(m), w)
        }
        (Method::ObsQuant, _) => (None, quantize_obs(weights, gram, pattern, opts)?),
    };
    let loss = reconstruction_loss(weights, &out, gram)?;
    Ok(LayerResult {
        weights: out,
        mask,
        loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefReport {
    #[serde(rename = "ref")]
    pub layer_ref: PrunableLayerRef,
    /// Trace-form loss on the Gram that drove the solve (undampened).
    pub loss: f64,
    pub achieved_sparsity: f64,
    pub nonzeros: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_audit: Option<MaskAudit>,
    /// Grid scale range, for quantize patterns.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSummary>,
    /// Wall-clock solve time; absent from timing-free copies.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSummary {
    pub bits: u32,
    pub symmetric: bool,
    pub groups_per_row: usize,
    pub min_scale: f64,
    pub max_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub method: Method,
    pub pattern: SparsityPattern,
    pub calibration_mode: CalibrationMode,
    pub block_size: usize,
    pub damp_fraction: f64,
    pub n_prompt: usize,
    pub n_decode: usize,
    pub input_model_hash: String,
    pub output_model_hash: String,
    pub total_loss: f64,
    pub refs: Vec<RefReport>,
}

impl CompressionReport {
    /// Copy with wall-clock fields removed, for byte-stable artifacts.
    pub fn without_timings(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.refs {
            r.seconds = None;
        }
        out
    }
}

/// Everything `compress_model` needs besides the model and calibration.
#[derive(Debug, Clone)]
pub struct CompressionPlan {
    /// Selects the Gram: merged for `rac`/`off_policy`, prompt-only otherwise.
    pub mode: CalibrationMode,
    pub method: Method,
    pub pattern: SparsityPattern,
    pub refs: Vec<PrunableLayerRef>,
    pub obs: ObsOptions,
}

fn gram_for(
    calib: &CalibrationSet,
    mode: CalibrationMode,
    r: PrunableLayerRef,
) -> Result<SymMatrix> {
    let stats = calib.get(r)?;
    Ok(match mode {
        CalibrationMode::Rac | CalibrationMode::OffPolicy => stats.merged(),
        CalibrationMode::PromptOnly | CalibrationMode::Corpus => stats.gram_prompt.clone(),
    })
}

fn grid_summary(weights: &Matrix, pattern: &SparsityPattern) -> Result<Option<GridSummary>> {
    let SparsityPattern::Quantize {
        bits, symmetric, ..
    } = *pattern
    else {
        return Ok(None);
    };
    let grids = quant_grids(weights, pattern)?;
    let scales = grids.iter().flatten().map(|g| g.scale);
    Ok(Some(GridSummary {
        bits,
        symmetric,
        groups_per_row: grids.first().map_or(0, Vec::len),
        min_scale: scales.clone().fold(f64::INFINITY, f64::min),
        max_scale: scales.fold(0.0, f64::max),
    }))
}

/// Compresses every ref in `plan.refs` independently and stitches the
/// results into a copy of `model`.
///
/// Each ref reads only the original weights and its own Gram, so refs run
/// concurrently under `exec` with results merged in ref order.
pub fn compress_model(
    model: &ModelBundle,
    calib: &CalibrationSet,
    plan: &CompressionPlan,
    exec: Exec,
) -> Result<(ModelBundle, CompressionReport)> {
    plan.method.check_pattern(&plan.pattern)?;
    plan.pattern.validate()?;
    if matches!(plan.mode, CalibrationMode::Rac | CalibrationMode::OffPolicy)
        && calib.n_decode() == 0
    {
        return Err(Error::InvalidConfig(format!(
            "mode {} needs decode columns but the calibration set has none",
            plan.mode
        )));
    }
    let mut refs = plan.refs.clone();
    refs.sort();
    refs.dedup();
    for &r in &refs {
        model.weight(r)?;
        calib.get(r)?;
    }
    let input_hash = model.content_hash()?;

    let results = exec.map(&refs, |_, &r| -> Result<(Matrix, RefReport)> {
        let start = Instant::now();
        let weights = model.weight_matrix(r)?;
        let gram = gram_for(calib, plan.mode, r)?;
        let res = compress_matrix(&weights, &gram, plan.method, &plan.pattern, &plan.obs)?;
        let nonzeros = res.weights.data().iter().filter(|v| **v != 0.0).count();
        let report = RefReport {
            layer_ref: r,
            loss: res.loss,
            achieved_sparsity: 1.0 - nonzeros as f64 / res.weights.data().len().max(1) as f64,
            nonzeros,
            mask_audit: res.mask.as_ref().and_then(|m| m.audit(&plan.pattern)),
            grid: grid_summary(&weights, &plan.pattern)?,
            seconds: Some(start.elapsed().as_secs_f64()),
        };
        Ok((res.weights, report))
    });

    let mut out = model.clone();
    let mut reports = Vec::with_capacity(refs.len());
    for (r, res) in refs.iter().zip(results) {
        let (w, rep) = res?;
        out.set_weight(*r, &w)?;
        reports.push(rep);
    }
    let ann = &mut out.annotations;
    ann.insert("compress.method".into(), plan.method.name().into());
    ann.insert("compress.pattern".into(), plan.pattern.to_string());
    ann.insert("compress.calibration_mode".into(), plan.mode.name().into());
    ann.insert(
        "compress.block_size".into(),
        plan.obs.block_size.to_string(),
    );
    ann.insert(
        "compress.damp_fraction".into(),
        plan.obs.damp_fraction.to_string(),
    );
    ann.insert("compress.source_model_hash".into(), input_hash.clone());
    ann.insert(
        "compress.refs".into(),
        refs.iter()
            .map(|r| r.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );

    let report = CompressionReport {
        method: plan.method,
        pattern: plan.pattern,
        calibration_mode: plan.mode,
        block_size: plan.obs.block_size,
        damp_fraction: plan.obs.damp_fraction,
        n_prompt: calib.n_prompt(),
        n_decode: calib.n_decode(),
        input_model_hash: input_hash,
        output_model_hash: out.content_hash()?,
        total_loss: reports.iter().map(|r| r.loss).sum(),
        refs: reports,
    };
    Ok((out, report))
}

/// Annotations written by `compress_model`, keyed without the prefix.
pub fn compression_annotations(model: &ModelBundle) -> BTreeMap<String, String> {
    model
        .annotations
        .iter()
        .filter_map(|(k, v)| {
            k.strip_prefix("compress.")
                .map(|k| (k.to_string(), v.clone()))
        })
        .collect()
}
