//! Decode-phase error analysis: per-token hidden-state error of compressed
//! models against the dense model, prompt-vs-RAC error ratios, and NLL.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{no_capture, ModelBundle, Sampler};
use crate::par::Exec;

/// Ratio denominators below this are reported as missing.
pub const RATIO_EPSILON: f64 = 1e-12;

/// One fixed evaluation sequence: prompt followed by the dense model's
/// greedy continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: usize,
    pub tokens: Vec<u8>,
    /// Prompt length; positions `>= boundary` are decode positions.
    pub boundary: usize,
}

impl Problem {
    pub fn phase(&self, t: usize) -> Phase {
        if t < self.boundary {
            Phase::Prompt
        } else {
            Phase::Decode
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prompt,
    Decode,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prompt => "prompt",
            Phase::Decode => "decode",
        }
    }
}

/// Dense greedy rollouts of `prompts`, `max_new` tokens each (fewer if the
/// stop byte is emitted).
pub fn rollout_problems(
    dense: &ModelBundle,
    prompts: &[Vec<u8>],
    max_new: usize,
    exec: Exec,
) -> Result<Vec<Problem>> {
    exec.map(prompts, |id, p| {
        Ok(Problem {
            id,
            tokens: dense.decode(p, max_new, Sampler::Greedy)?,
            boundary: p.len(),
        })
    })
    .into_iter()
    .collect()
}

fn check_compatible(a: &ModelBundle, b: &ModelBundle) -> Result<()> {
    if a.config != b.config {
        return Err(Error::InvalidConfig(
            "dense and compressed models have different architectures".into(),
        ));
    }
    Ok(())
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Last-block hidden states of `model` on `sequence`, one per position.
pub fn hidden_states(model: &ModelBundle, sequence: &[u8]) -> Result<Vec<Vec<f64>>> {
    model.teacher_force_with(sequence, &mut no_capture)
}

/// `e_t = ‖h_dense,t − h_comp,t‖₂` for every position of `sequence`, with
/// both models teacher-forced on the same tokens. `h` is the last block's
/// residual output before the final norm.
pub fn error_trace(
    dense: &ModelBundle,
    compressed: &ModelBundle,
    sequence: &[u8],
    boundary: usize,
) -> Result<Vec<f64>> {
    check_compatible(dense, compressed)?;
    if boundary > sequence.len() {
        return Err(Error::invalid(format!(
            "boundary {boundary} exceeds sequence length {}",
            sequence.len()
        )));
    }
    let hd = hidden_states(dense, sequence)?;
    errors_against(&hd, compressed, sequence)
}

fn errors_against(
    dense_hidden: &[Vec<f64>],
    compressed: &ModelBundle,
    sequence: &[u8],
) -> Result<Vec<f64>> {
    let hc = hidden_states(compressed, sequence)?;
    Ok(dense_hidden
        .iter()
        .zip(&hc)
        .map(|(a, b)| l2_distance(a, b))
        .collect())
}

/// `r_t = a_t / b_t` per problem and position; `None` where `b_t < ε`.
pub fn ratio_map(traces_a: &[Vec<f64>], traces_b: &[Vec<f64>]) -> Result<Vec<Vec<Option<f64>>>> {
    if traces_a.len() != traces_b.len() {
        return Err(Error::DimensionMismatch {
            expected: traces_a.len(),
            actual: traces_b.len(),
        });
    }
    traces_a
        .iter()
        .zip(traces_b)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(Error::DimensionMismatch {
                    expected: a.len(),
                    actual: b.len(),
                });
            }
            Ok(a.iter()
                .zip(b)
                .map(|(&x, &y)| (y >= RATIO_EPSILON).then(|| x / y))
                .collect())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    /// Mean `e_t` over all prompt positions of all problems.
    pub mean_prompt_error: Option<f64>,
    /// Mean `e_t` over all decode positions of all problems.
    pub mean_decode_error: Option<f64>,
    pub prompt_tokens: usize,
    pub decode_tokens: usize,
}

/// Pooled phase means; `traces[i]` pairs with `boundaries[i]`.
pub fn summarize_phase_errors(traces: &[Vec<f64>], boundaries: &[usize]) -> Result<PhaseSummary> {
    if traces.len() != boundaries.len() {
        return Err(Error::DimensionMismatch {
            expected: traces.len(),
            actual: boundaries.len(),
        });
    }
    let (mut sp, mut np, mut sd, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for (e, &b) in traces.iter().zip(boundaries) {
        let b = b.min(e.len());
        sp += e[..b].iter().sum::<f64>();
        np += b;
        sd += e[b..].iter().sum::<f64>();
        nd += e.len() - b;
    }
    let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    Ok(PhaseSummary {
        mean_prompt_error: mean(sp, np),
        mean_decode_error: mean(sd, nd),
        prompt_tokens: np,
        decode_tokens: nd,
    })
}

/// Errors of one labelled compressed model on every problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTraces {
    pub label: String,
    /// `errors[p][t]` for problem `p`.
    pub errors: Vec<Vec<f64>>,
    pub summary: PhaseSummary,
}

/// Full diagnostic output for a set of problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub problems: Vec<Problem>,
    pub methods: Vec<MethodTraces>,
    /// `e_first / e_second` when at least two models were compared.
    pub ratios: Option<Vec<Vec<Option<f64>>>>,
}

impl Diagnosis {
    /// Fraction of decode positions with a defined `r_t > 1`, and the
    /// number of decode positions with a defined ratio.
    pub fn decode_ratio_above_one(&self) -> Option<(f64, usize)> {
        let ratios = self.ratios.as_ref()?;
        let (mut above, mut n) = (0usize, 0usize);
        for (p, row) in self.problems.iter().zip(ratios) {
            for r in row[p.boundary.min(row.len())..].iter().flatten() {
                n += 1;
                above += usize::from(*r > 1.0);
            }
        }
        (n > 0).then(|| (above as f64 / n as f64, n))
    }

    /// `errors.csv`: problem, t, phase, method, e_t.
    pub fn write_errors_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["problem", "t", "phase", "method", "e_t"])?;
        for m in &self.methods {
            for (p, e) in self.problems.iter().zip(&m.errors) {
                for (t, v) in e.iter().enumerate() {
                    w.write_record([
                        p.id.to_string(),
                        t.to_string(),
                        p.phase(t).name().to_string(),
                        m.label.clone(),
                        v.to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// `ratios.csv`: problem, t, r_t (empty when missing).
    pub fn write_ratios_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["problem", "t", "r_t"])?;
        if let Some(ratios) = &self.ratios {
            for (p, row) in self.problems.iter().zip(ratios) {
                for (t, r) in row.iter().enumerate() {
                    let cell = r.map(|v| v.to_string()).unwrap_or_default();
                    w.write_record([p.id.to_string(), t.to_string(), cell])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Teacher-forces every problem through the dense model and each labelled
/// compressed model. Problems are evaluated independently under `exec` and
/// reported in problem order.
pub fn diagnose(
    dense: &ModelBundle,
    compressed: &[(String, &ModelBundle)],
    problems: Vec<Problem>,
    exec: Exec,
) -> Result<Diagnosis> {
    if compressed.is_empty() {
        return Err(Error::invalid("at least one compressed model is required"));
    }
    for (_, m) in compressed {
        check_compatible(dense, m)?;
    }
    let per_problem: Vec<Result<Vec<Vec<f64>>>> = exec.map(&problems, |_, p| {
        let hd = hidden_states(dense, &p.tokens)?;
        compressed
            .iter()
            .map(|(_, m)| errors_against(&hd, m, &p.tokens))
            .collect()
    });
    let mut by_method: Vec<Vec<Vec<f64>>> =
        vec![Vec::with_capacity(problems.len()); compressed.len()];
    for res in per_problem {
        for (k, e) in res?.into_iter().enumerate() {
            by_method[k].push(e);
        }
    }
    let boundaries: Vec<usize> = problems.iter().map(|p| p.boundary).collect();
    let methods = compressed
        .iter()
        .zip(by_method)
        .map(|((label, _), errors)| {
            Ok(MethodTraces {
                label: label.clone(),
                summary: summarize_phase_errors(&errors, &boundaries)?,
                errors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios = match methods.as_slice() {
        [a, b, ..] => Some(ratio_map(&a.errors, &b.errors)?),
        _ => None,
    };
    Ok(Diagnosis {
        problems,
        methods,
        ratios,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    pub mean_nll: f64,
    /// Number of predicted tokens averaged over.
    pub tokens: usize,
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits[target] - lse
}

/// Teacher-forced mean negative log-likelihood (nats per token).
///
/// The stream is cut into windows of `max_positions` bytes; each window of
/// length `L` scores its last `L − 1` bytes. Scoring stops after `budget`
/// predictions (the whole stream when `None`).
pub fn eval_nll(model: &ModelBundle, text: &[u8], budget: Option<usize>) -> Result<NllReport> {
    if text.len() < 2 {
        return Err(Error::invalid("evaluation stream needs at least two bytes"));
    }
    if budget == Some(0) {
        return Err(Error::invalid("evaluation budget must be positive"));
    }
    let window = model.config.max_positions;
    if window < 2 {
        return Err(Error::InvalidConfig(
            "max_positions must be at least 2 to score".into(),
        ));
    }
    let limit = budget.unwrap_or(usize::MAX);
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in text.chunks(window) {
        if count >= limit || chunk.len() < 2 {
            break;
        }
        let take = chunk.len().min((limit - count).saturating_add(1));
        let chunk = &chunk[..take];
        let hidden = model.teacher_force_with(&chunk[..take - 1], &mut no_capture)?;
        for (h, &next) in hidden.iter().zip(&chunk[1..]) {
            total -= log_softmax_at(&model.logits(h), next as usize);
            count += 1;
        }
    }
    Ok(NllReport {
        mean_nll: total / count as f64,
        tokens: count,
    })
}
