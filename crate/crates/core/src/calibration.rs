//! Activation collection.
//!
//! For every requested weight the input columns are reduced on the fly to two
//! Gram matrices: one over prompt positions and one over generated (decode)
//! positions. The Gram of the concatenated calibration matrix `[X_P X_D]` is
//! their sum, so a single collection run serves prompt-only and
//! rollout-augmented compression alike.
//!
//! Prompts are independent work units. Each one is reduced into its own
//! partial statistics and partials are summed in prompt order, which keeps
//! results bit-identical for any thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{CaptureSite, ModelBundle, PrunableLayerRef, Sampler};
use crate::numkernel::SymMatrix;
use crate::par::Exec;

/// Prompts reduced per parallel batch; bounds peak memory of partial Grams.
const PROMPT_BATCH: usize = 16;

pub const CALIB_FORMAT: &str = "RACCAL";
pub const CALIB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Generic text stream, chunked and teacher-forced.
    Corpus,
    /// Prompt tokens only.
    PromptOnly,
    /// Prompt tokens plus the model's own rollouts.
    Rac,
    /// Prompt tokens plus rollouts generated by another model, teacher-forced
    /// through the target.
    OffPolicy,
}

impl CalibrationMode {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMode::Corpus => "corpus",
            CalibrationMode::PromptOnly => "prompt_only",
            CalibrationMode::Rac => "rac",
            CalibrationMode::OffPolicy => "off_policy",
        }
    }
}

impl fmt::Display for CalibrationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CalibrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "corpus" => Ok(CalibrationMode::Corpus),
            "prompt_only" => Ok(CalibrationMode::PromptOnly),
            "rac" => Ok(CalibrationMode::Rac),
            "off_policy" => Ok(CalibrationMode::OffPolicy),
            other => Err(Error::invalid(format!(
                "unknown calibration mode {other:?}"
            ))),
        }
    }
}

/// Who generates the decode tokens.
#[derive(Debug, Clone, Copy)]
pub enum TraceSource<'a> {
    /// The model being calibrated (on-policy).
    SelfTrace,
    /// A different model; its tokens are teacher-forced through the target.
    Other(&'a ModelBundle),
}

#[derive(Debug, Clone)]
pub struct CalibrationConfig<'a> {
    pub mode: CalibrationMode,
    /// Calibration prompts (prompt modes).
    pub prompts: Vec<Vec<u8>>,
    /// Raw byte stream (corpus mode).
    pub corpus: Vec<u8>,
    /// Decode budget per prompt.
    pub t_max: usize,
    pub sampler: Sampler,
    /// Rollout generator for off-policy mode.
    pub trace_model: Option<&'a ModelBundle>,
    /// Cap on total columns (prompt plus decode).
    pub token_budget: Option<usize>,
}

impl<'a> CalibrationConfig<'a> {
    pub fn prompt_only(prompts: Vec<Vec<u8>>) -> Self {
        Self {
            mode: CalibrationMode::PromptOnly,
            prompts,
            corpus: Vec::new(),
            t_max: 0,
            sampler: Sampler::Greedy,
            trace_model: None,
            token_budget: None,
        }
    }

    pub fn rac(prompts: Vec<Vec<u8>>, t_max: usize, sampler: Sampler) -> Self {
        Self {
            mode: CalibrationMode::Rac,
            t_max,
            sampler,
            ..Self::prompt_only(prompts)
        }
    }

    pub fn off_policy(
        prompts: Vec<Vec<u8>>,
        t_max: usize,
        sampler: Sampler,
        trace_model: &'a ModelBundle,
    ) -> Self {
        Self {
            mode: CalibrationMode::OffPolicy,
            trace_model: Some(trace_model),
            ..Self::rac(prompts, t_max, sampler)
        }
    }

    pub fn corpus(text: Vec<u8>, token_budget: usize) -> Self {
        Self {
            mode: CalibrationMode::Corpus,
            corpus: text,
            token_budget: Some(token_budget),
            ..Self::prompt_only(Vec::new())
        }
    }

    pub fn validate(&self, model: &ModelBundle) -> Result<()> {
        use CalibrationMode::*;
        match self.mode {
            Corpus => {
                if self.corpus.is_empty() {
                    return Err(Error::invalid(
                        "corpus calibration needs a nonempty text stream",
                    ));
                }
                return Ok(());
            }
            Rac | OffPolicy if self.t_max == 0 => {
                return Err(Error::invalid(format!(
                    "{} calibration requires t_max > 0",
                    self.mode
                )))
            }
            OffPolicy if self.trace_model.is_none() => {
                return Err(Error::invalid(
                    "off_policy calibration requires a trace model",
                ))
            }
            _ => {}
        }
        self.sampler.validate()?;
        let t_max = if self.mode == PromptOnly {
            0
        } else {
            self.t_max
        };
        validate_prompts(model, &self.prompts, t_max)?;
        if let Some(trace) = self.trace_model.filter(|_| self.mode == OffPolicy) {
            check_trace_model(model, trace, &self.prompts, t_max)?;
        }
        Ok(())
    }
}

fn validate_prompts(model: &ModelBundle, prompts: &[Vec<u8>], t_max: usize) -> Result<()> {
    if prompts.is_empty() {
        return Err(Error::invalid("calibration prompt list is empty"));
    }
    let limit = model.config.max_positions.saturating_sub(t_max);
    for (i, p) in prompts.iter().enumerate() {
        if p.is_empty() {
            return Err(Error::invalid(format!("prompt {i} is empty")));
        }
        if p.len() > limit {
            return Err(Error::invalid(format!(
                "prompt {i} has {} tokens; at most {limit} fit with t_max {t_max} in {} positions",
                p.len(),
                model.config.max_positions
            )));
        }
    }
    Ok(())
}

fn check_trace_model(
    target: &ModelBundle,
    trace: &ModelBundle,
    prompts: &[Vec<u8>],
    t_max: usize,
) -> Result<()> {
    if trace.config.vocab_size != target.config.vocab_size {
        return Err(Error::invalid(format!(
            "trace model vocabulary {} does not match target {}",
            trace.config.vocab_size, target.config.vocab_size
        )));
    }
    validate_prompts(trace, prompts, t_max)
}

/// Gram statistics for one weight.
#[derive(Debug, Clone, PartialEq)]
pub struct RefStats {
    pub gram_prompt: SymMatrix,
    pub gram_decode: SymMatrix,
    pub n_prompt: usize,
    pub n_decode: usize,
    /// Column sums, for the prompt/decode direction comparison.
    pub sum_prompt: Vec<f64>,
    pub sum_decode: Vec<f64>,
}

impl RefStats {
    pub fn dim(&self) -> usize {
        self.gram_prompt.dim()
    }

    /// Gram of `[X_P X_D]`.
    pub fn merged(&self) -> SymMatrix {
        let mut m = self.gram_prompt.clone();
        m.add_assign(&self.gram_decode)
            .expect("prompt and decode grams share a dimension");
        m
    }

    /// Cosine similarity between the mean prompt column and the mean decode
    /// column; `None` when either side has no columns.
    pub fn direction_cosine(&self) -> Option<f64> {
        if self.n_prompt == 0 || self.n_decode == 0 {
            return None;
        }
        let dot: f64 = self
            .sum_prompt
            .iter()
            .zip(&self.sum_decode)
            .map(|(a, b)| a * b)
            .sum();
        let na = self.sum_prompt.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = self.sum_decode.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        Some(dot / (na * nb))
    }
}

/// Where calibration statistics came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: CalibrationMode,
    pub model_hash: String,
    pub trace_model_hash: Option<String>,
    pub t_max: usize,
    pub sampler: Sampler,
    pub token_budget: Option<usize>,
    /// SHA-256 of each calibration prompt (or corpus chunk), in order.
    pub prompt_hashes: Vec<String>,
    pub warnings: Vec<String>,
}

/// Per-weight prompt/decode Gram matrices plus provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub provenance: Provenance,
    pub stats: BTreeMap<PrunableLayerRef, RefStats>,
}

impl CalibrationSet {
    pub fn refs(&self) -> Vec<PrunableLayerRef> {
        self.stats.keys().copied().collect()
    }

    pub fn get(&self, r: PrunableLayerRef) -> Result<&RefStats> {
        self.stats
            .get(&r)
            .ok_or_else(|| Error::UnknownRef(r.to_string()))
    }

    /// Total prompt columns (identical for every ref).
    pub fn n_prompt(&self) -> usize {
        self.stats.values().next().map_or(0, |s| s.n_prompt)
    }

    /// Total decode columns (identical for every ref).
    pub fn n_decode(&self) -> usize {
        self.stats.values().next().map_or(0, |s| s.n_decode)
    }

    /// Gram of the concatenated prompt and decode columns of `r`.
    pub fn merged_gram(&self, r: PrunableLayerRef) -> Result<SymMatrix> {
        Ok(self.get(r)?.merged())
    }
}

/// Partial statistics keyed by capture site. Slots that share an input
/// (Q/K/V) share one accumulator.
#[derive(Clone)]
struct SiteStats {
    sites: Vec<CaptureSite>,
    prompt: Vec<SymMatrix>,
    decode: Vec<SymMatrix>,
    sum_prompt: Vec<Vec<f64>>,
    sum_decode: Vec<Vec<f64>>,
    n_prompt: usize,
    n_decode: usize,
}

impl SiteStats {
    fn new(model: &ModelBundle, refs: &[PrunableLayerRef]) -> Self {
        let mut dims: BTreeMap<CaptureSite, usize> = BTreeMap::new();
        for r in refs {
            dims.insert(r.site(), model.config.slot_shape(r.slot).1);
        }
        let sites: Vec<CaptureSite> = dims.keys().copied().collect();
        let zeros = |d: &usize| SymMatrix::zeros(*d);
        Self {
            prompt: dims.values().map(zeros).collect(),
            decode: dims.values().map(zeros).collect(),
            sum_prompt: dims.values().map(|d| vec![0.0; *d]).collect(),
            sum_decode: dims.values().map(|d| vec![0.0; *d]).collect(),
            sites,
            n_prompt: 0,
            n_decode: 0,
        }
    }

    /// Accumulates `col` for `site` at `pos`. Positions before `boundary`
    /// are prompt columns; positions at or beyond `cap` are dropped.
    fn record(&mut self, site: CaptureSite, pos: usize, col: &[f64], boundary: usize, cap: usize) {
        if pos >= cap {
            return;
        }
        let Ok(i) = self.sites.binary_search(&site) else {
            return;
        };
        let (gram, sum) = if pos < boundary {
            (&mut self.prompt[i], &mut self.sum_prompt[i])
        } else {
            (&mut self.decode[i], &mut self.sum_decode[i])
        };
        gram.accumulate_gram(col)
            .expect("captured columns are finite and sized");
        sum.iter_mut().zip(col).for_each(|(s, c)| *s += c);
    }

    fn add(&mut self, other: &SiteStats) {
        for i in 0..self.sites.len() {
            self.prompt[i]
                .add_assign(&other.prompt[i])
                .expect("same layout");
            self.decode[i]
                .add_assign(&other.decode[i])
                .expect("same layout");
            for (a, b) in self.sum_prompt[i].iter_mut().zip(&other.sum_prompt[i]) {
                *a += b;
            }
            for (a, b) in self.sum_decode[i].iter_mut().zip(&other.sum_decode[i]) {
                *a += b;
            }
        }
        self.n_prompt += other.n_prompt;
        self.n_decode += other.n_decode;
    }

    fn columns(&self) -> usize {
        self.n_prompt + self.n_decode
    }

    fn into_ref_stats(self, refs: &[PrunableLayerRef]) -> BTreeMap<PrunableLayerRef, RefStats> {
        refs.iter()
            .map(|r| {
                let i = self
                    .sites
                    .binary_search(&r.site())
                    .expect("site registered");
                let stats = RefStats {
                    gram_prompt: self.prompt[i].clone(),
                    gram_decode: self.decode[i].clone(),
                    n_prompt: self.n_prompt,
                    n_decode: self.n_decode,
                    sum_prompt: self.sum_prompt[i].clone(),
                    sum_decode: self.sum_decode[i].clone(),
                };
                (*r, stats)
            })
            .collect()
    }
}

/// What to collect from one prompt.
#[derive(Clone, Copy)]
enum Phases<'a> {
    Prompt,
    Decode {
        t_max: usize,
        sampler: Sampler,
        source: TraceSource<'a>,
        keep_prompt: bool,
    },
}

fn collect_one(
    model: &ModelBundle,
    refs: &[PrunableLayerRef],
    prompt: &[u8],
    index: usize,
    phases: Phases<'_>,
    cap: Option<usize>,
) -> Result<SiteStats> {
    let mut acc = SiteStats::new(model, refs);
    let boundary = prompt.len();
    let cap_pos = cap.unwrap_or(usize::MAX);
    match phases {
        Phases::Prompt => {
            let tokens = &prompt[..prompt.len().min(cap_pos)];
            model.teacher_force_with(tokens, &mut |site, pos, col| {
                acc.record(site, pos, col, boundary, cap_pos)
            })?;
            acc.n_prompt = tokens.len();
        }
        Phases::Decode {
            t_max,
            sampler,
            source,
            keep_prompt,
        } => {
            let sampler = sampler.offset_seed(index as u64);
            let max_new = t_max.min(cap_pos.saturating_sub(prompt.len()));
            // Dropped prompt columns are routed past the cap.
            let lower = if keep_prompt { 0 } else { boundary };
            let mut sink = |site, pos: usize, col: &[f64]| {
                if pos >= lower {
                    acc.record(site, pos, col, boundary, cap_pos)
                }
            };
            let tokens = match source {
                TraceSource::SelfTrace => model.decode_with(prompt, max_new, sampler, &mut sink)?,
                TraceSource::Other(trace) => {
                    let tokens = trace.decode(prompt, max_new, sampler)?;
                    model.teacher_force_with(&tokens, &mut sink)?;
                    tokens
                }
            };
            if keep_prompt {
                acc.n_prompt = prompt.len().min(cap_pos);
            }
            acc.n_decode = tokens.len().min(cap_pos) - boundary.min(cap_pos);
        }
    }
    Ok(acc)
}

/// SHA-256 (hex) of one prompt, as recorded in provenance.
pub fn prompt_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_refs(model: &ModelBundle, refs: &[PrunableLayerRef]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::invalid("no layer refs selected for calibration"));
    }
    for r in refs {
        model.weight(*r)?;
    }
    Ok(())
}

/// Reduces `units` in prompt order, honoring an optional column budget.
fn collect_units(
    model: &ModelBundle,
    refs: &[PrunableLayerRef],
    units: &[Vec<u8>],
    phases: Phases<'_>,
    budget: Option<usize>,
    exec: Exec,
) -> Result<SiteStats> {
    let mut total = SiteStats::new(model, refs);
    for (b, batch) in units.chunks(PROMPT_BATCH).enumerate() {
        let offset = b * PROMPT_BATCH;
        let partials = exec.map(batch, |i, p| {
            collect_one(model, refs, p, offset + i, phases, None)
        });
        for (i, partial) in partials.into_iter().enumerate() {
            let partial = partial?;
            match budget {
                Some(budget) if total.columns() + partial.columns() > budget => {
                    let remaining = budget - total.columns();
                    let capped =
                        collect_one(model, refs, &batch[i], offset + i, phases, Some(remaining))?;
                    total.add(&capped);
                    return Ok(total);
                }
                _ => total.add(&partial),
            }
            if budget == Some(total.columns()) {
                return Ok(total);
            }
        }
    }
    Ok(total)
}

fn provenance(
    model: &ModelBundle,
    mode: CalibrationMode,
    units: &[Vec<u8>],
    t_max: usize,
    sampler: Sampler,
    token_budget: Option<usize>,
    trace: Option<&ModelBundle>,
) -> Result<Provenance> {
    Ok(Provenance {
        mode,
        model_hash: model.content_hash()?,
        trace_model_hash: trace.map(ModelBundle::content_hash).transpose()?,
        t_max,
        sampler,
        token_budget,
        prompt_hashes: units.iter().map(|u| prompt_hash(u)).collect(),
        warnings: Vec::new(),
    })
}

/// Prompt phase: Grams over every prompt position.
pub fn collect_prompt_phase(
    model: &ModelBundle,
    prompts: &[Vec<u8>],
    refs: &[PrunableLayerRef],
    exec: Exec,
) -> Result<CalibrationSet> {
    check_refs(model, refs)?;
    validate_prompts(model, prompts, 0)?;
    let stats = collect_units(model, refs, prompts, Phases::Prompt, None, exec)?;
    Ok(CalibrationSet {
        provenance: provenance(
            model,
            CalibrationMode::PromptOnly,
            prompts,
            0,
            Sampler::Greedy,
            None,
            None,
        )?,
        stats: stats.into_ref_stats(refs),
    })
}

/// Decode phase only: Grams over generated positions, prompt Grams left at zero.
pub fn collect_decode_phase(
    model: &ModelBundle,
    prompts: &[Vec<u8>],
    refs: &[PrunableLayerRef],
    t_max: usize,
    sampler: Sampler,
    source: TraceSource<'_>,
    exec: Exec,
) -> Result<CalibrationSet> {
    check_refs(model, refs)?;
    sampler.validate()?;
    validate_prompts(model, prompts, t_max)?;
    let (mode, trace) = match source {
        TraceSource::SelfTrace => (CalibrationMode::Rac, None),
        TraceSource::Other(t) => {
            check_trace_model(model, t, prompts, t_max)?;
            (CalibrationMode::OffPolicy, Some(t))
        }
    };
    let phases = Phases::Decode {
        t_max,
        sampler,
        source,
        keep_prompt: false,
    };
    let stats = collect_units(model, refs, prompts, phases, None, exec)?;
    Ok(CalibrationSet {
        provenance: provenance(model, mode, prompts, t_max, sampler, None, trace)?,
        stats: stats.into_ref_stats(refs),
    })
}

/// Chunks `text` into `max_positions`-sized sequences and teacher-forces
/// them until `token_budget` columns are consumed.
pub fn collect_corpus(
    model: &ModelBundle,
    text: &[u8],
    refs: &[PrunableLayerRef],
    token_budget: usize,
    exec: Exec,
) -> Result<CalibrationSet> {
    check_refs(model, refs)?;
    if text.is_empty() {
        return Err(Error::invalid("corpus text stream is empty"));
    }
    let used = token_budget.min(text.len());
    let chunks: Vec<Vec<u8>> = text[..used]
        .chunks(model.config.max_positions)
        .map(<[u8]>::to_vec)
        .collect();
    let stats = collect_units(model, refs, &chunks, Phases::Prompt, None, exec)?;
    let mut prov = provenance(
        model,
        CalibrationMode::Corpus,
        &chunks,
        0,
        Sampler::Greedy,
        Some(token_budget),
        None,
    )?;
    if text.len() < token_budget {
        prov.warnings.push(format!(
            "corpus has {} tokens, fewer than the budget of {token_budget}",
            text.len()
        ));
    }
    Ok(CalibrationSet {
        provenance: prov,
        stats: stats.into_ref_stats(refs),
    })
}

/// Runs the collection described by `config`.
///
/// `rac` and `off_policy` make one pass per prompt: prompt positions go to
/// the prompt Gram, generated positions to the decode Gram.
pub fn calibrate(
    model: &ModelBundle,
    config: &CalibrationConfig<'_>,
    refs: &[PrunableLayerRef],
    exec: Exec,
) -> Result<CalibrationSet> {
    check_refs(model, refs)?;
    config.validate(model)?;
    let (phases, trace) = match config.mode {
        CalibrationMode::Corpus => {
            let budget = config.token_budget.unwrap_or(config.corpus.len());
            return collect_corpus(model, &config.corpus, refs, budget, exec);
        }
        CalibrationMode::PromptOnly => (Phases::Prompt, None),
        CalibrationMode::Rac => (
            Phases::Decode {
                t_max: config.t_max,
                sampler: config.sampler,
                source: TraceSource::SelfTrace,
                keep_prompt: true,
            },
            None,
        ),
        CalibrationMode::OffPolicy => {
            let trace = config.trace_model.expect("validated");
            (
                Phases::Decode {
                    t_max: config.t_max,
                    sampler: config.sampler,
                    source: TraceSource::Other(trace),
                    keep_prompt: true,
                },
                Some(trace),
            )
        }
    };
    let stats = collect_units(
        model,
        refs,
        &config.prompts,
        phases,
        config.token_budget,
        exec,
    )?;
    let t_max = if config.mode == CalibrationMode::PromptOnly {
        0
    } else {
        config.t_max
    };
    let mut prov = provenance(
        model,
        config.mode,
        &config.prompts,
        t_max,
        config.sampler,
        config.token_budget,
        trace,
    )?;
    if let Some(budget) = config.token_budget {
        if stats.columns() < budget {
            prov.warnings.push(format!(
                "collected {} columns, fewer than the budget of {budget}",
                stats.columns()
            ));
        }
    }
    Ok(CalibrationSet {
        provenance: prov,
        stats: stats.into_ref_stats(refs),
    })
}

/// Reads a prompt file: UTF-8 text, one prompt per line, blank lines skipped.
pub fn read_prompts(path: impl AsRef<Path>) -> Result<Vec<Vec<u8>>> {
    let text = fs::read(path)?;
    parse_prompts(&text)
}

pub fn parse_prompts(text: &[u8]) -> Result<Vec<Vec<u8>>> {
    let text = std::str::from_utf8(text)
        .map_err(|e| Error::format("prompt file", format!("not UTF-8: {e}")))?;
    Ok(text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(|l| l.as_bytes().to_vec())
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct CalibManifest {
    format: String,
    version: u32,
    provenance: Provenance,
    n_prompt: usize,
    n_decode: usize,
    refs: Vec<RefEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RefEntry {
    #[serde(rename = "ref")]
    name: String,
    dim: usize,
    n_prompt: usize,
    n_decode: usize,
    /// Byte offset of this ref's section in the blob.
    offset: usize,
}

impl CalibrationSet {
    /// Serializes as one JSON manifest line, then a blob of little-endian
    /// `f64`. Per ref, in manifest order: `gram_prompt` (dim², row-major),
    /// `gram_decode` (dim²), `sum_prompt` (dim), `sum_decode` (dim).
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut refs = Vec::new();
        for (r, s) in &self.stats {
            refs.push(RefEntry {
                name: r.to_string(),
                dim: s.dim(),
                n_prompt: s.n_prompt,
                n_decode: s.n_decode,
                offset: blob.len(),
            });
            let parts = [
                s.gram_prompt.data(),
                s.gram_decode.data(),
                &s.sum_prompt,
                &s.sum_decode,
            ];
            for part in parts {
                for v in part {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = CalibManifest {
            format: CALIB_FORMAT.to_string(),
            version: CALIB_VERSION,
            provenance: self.provenance.clone(),
            n_prompt: self.n_prompt(),
            n_decode: self.n_decode(),
            refs,
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("calibration file", "missing manifest terminator"))?;
        let manifest: CalibManifest = serde_json::from_slice(&bytes[..split])?;
        if manifest.format != CALIB_FORMAT || manifest.version != CALIB_VERSION {
            return Err(Error::format(
                "calibration file",
                format!(
                    "unsupported format {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let blob = &bytes[split + 1..];
        let read = |offset: usize, count: usize| -> Result<Vec<f64>> {
            let raw = blob
                .get(offset..offset + count * 8)
                .ok_or_else(|| Error::format("calibration file", "truncated blob"))?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let mut stats = BTreeMap::new();
        let mut end = 0;
        for e in &manifest.refs {
            let r: PrunableLayerRef = e.name.parse()?;
            let d = e.dim;
            if e.offset != end {
                return Err(Error::format(
                    "calibration file",
                    format!("{}: bad offset", e.name),
                ));
            }
            let gp = read(e.offset, d * d)?;
            let gd = read(e.offset + 8 * d * d, d * d)?;
            let sp = read(e.offset + 16 * d * d, d)?;
            let sd = read(e.offset + 16 * d * d + 8 * d, d)?;
            end = e.offset + 16 * d * d + 16 * d;
            stats.insert(
                r,
                RefStats {
                    gram_prompt: SymMatrix::from_vec(d, gp)?,
                    gram_decode: SymMatrix::from_vec(d, gd)?,
                    n_prompt: e.n_prompt,
                    n_decode: e.n_decode,
                    sum_prompt: sp,
                    sum_decode: sd,
                },
            );
        }
        if end != blob.len() {
            return Err(Error::format(
                "calibration file",
                "trailing bytes after last ref",
            ));
        }
        Ok(Self {
            provenance: manifest.provenance,
            stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
