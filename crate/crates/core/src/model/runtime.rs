//! Single-position forward step with a KV cache.
//!
//! Teacher forcing and autoregressive decoding both go through
//! [`ModelBundle::step`], so the activations captured for a position do not
//! depend on which of the two produced the token sequence.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CapturePoint, ModelBundle, PrunableLayerRef, Tensor, STOP_BYTE};
use crate::error::{Error, Result};

/// A capture point in a specific block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CaptureSite {
    pub layer: usize,
    pub point: CapturePoint,
}

/// Capture callback that ignores everything.
pub fn no_capture(_: CaptureSite, _: usize, _: &[f64]) {}

/// Token history and per-layer key/value cache of one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState {
    tokens: Vec<u8>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl DecodeState {
    pub fn new(model: &ModelBundle) -> Self {
        let n = model.config.n_layers;
        Self {
            tokens: Vec::new(),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
        }
    }

    /// Index of the next position to be filled; equals the cache length.
    pub fn position(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[u8] {
        &self.tokens
    }
}

/// Next-token selection rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampler {
    /// Argmax; ties go to the lowest byte.
    Greedy,
    /// Softmax sampling at `tau` with a seeded generator.
    Temperature { tau: f64, seed: u64 },
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        if let Sampler::Temperature { tau, .. } = self {
            if !(tau.is_finite() && *tau > 0.0) {
                return Err(Error::invalid(format!(
                    "temperature must be positive, got {tau}"
                )));
            }
        }
        Ok(())
    }

    /// Same rule with its seed shifted by `offset` (per-prompt sub-seeds).
    pub fn offset_seed(self, offset: u64) -> Self {
        match self {
            Sampler::Greedy => Sampler::Greedy,
            Sampler::Temperature { tau, seed } => Sampler::Temperature {
                tau,
                seed: seed.wrapping_add(offset),
            },
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

struct TokenPicker {
    sampler: Sampler,
    rng: Option<ChaCha8Rng>,
}

impl TokenPicker {
    fn new(sampler: Sampler) -> Self {
        let rng = match sampler {
            Sampler::Greedy => None,
            Sampler::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self { sampler, rng }
    }

    fn pick(&mut self, logits: &[f64]) -> u8 {
        match (self.sampler, self.rng.as_mut()) {
            (Sampler::Temperature { tau, .. }, Some(rng)) => {
                let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
                let probs = softmax(&scaled);
                match WeightedIndex::new(&probs) {
                    Ok(dist) => dist.sample(rng) as u8,
                    Err(_) => argmax(logits) as u8,
                }
            }
            _ => argmax(logits) as u8,
        }
    }
}

pub(crate) fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(&gain.data)
        .zip(&bias.data)
        .map(|((&v, &g), &b)| (v - mean) * inv * g as f64 + b as f64)
        .collect()
}

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // √(2/π)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Output of a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherForced {
    /// Next-token logits at every position.
    pub logits: Vec<Vec<f64>>,
    /// Residual stream after the last block, before the final norm.
    pub hidden: Vec<Vec<f64>>,
    /// Input columns seen by each requested weight, in position order.
    pub captured: BTreeMap<PrunableLayerRef, Vec<Vec<f64>>>,
}

impl ModelBundle {
    /// Processes `token` at the next position of `state`.
    ///
    /// Returns the last-block residual (before the final norm). Every input
    /// column entering a prunable weight is passed to `capture` with the
    /// position it belongs to.
    pub fn step(
        &self,
        state: &mut DecodeState,
        token: u8,
        capture: &mut dyn FnMut(CaptureSite, usize, &[f64]),
    ) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let pos = state.position();
        if pos >= cfg.max_positions {
            return Err(Error::SequenceTooLong {
                len: pos + 1,
                max: cfg.max_positions,
            });
        }
        let d = cfg.d_model;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let eps = cfg.layernorm_epsilon;

        let mut x: Vec<f64> = self
            .token_embedding
            .row(token as usize)
            .iter()
            .zip(self.position_embedding.row(pos))
            .map(|(&e, &p)| e as f64 + p as f64)
            .collect();

        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut up = vec![0.0; cfg.d_mlp];
        for (li, layer) in self.layers.iter().enumerate() {
            let site = |point| CaptureSite { layer: li, point };

            let h = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias, eps);
            capture(site(CapturePoint::AttnIn), pos, &h);
            layer.attn_q.matvec(&h, &mut q);
            layer.attn_k.matvec(&h, &mut k);
            layer.attn_v.matvec(&h, &mut v);
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);

            let keys = &state.keys[li];
            let values = &state.values[li];
            let mut mix = vec![0.0; d];
            let mut scores = vec![0.0; pos + 1];
            for head in 0..cfg.n_heads {
                let lo = head * hd;
                let qh = &q[lo..lo + hd];
                for (t, s) in scores.iter_mut().enumerate() {
                    let kh = &keys[t * d + lo..t * d + lo + hd];
                    *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                let probs = softmax(&scores);
                let out = &mut mix[lo..lo + hd];
                for (t, p) in probs.iter().enumerate() {
                    let vh = &values[t * d + lo..t * d + lo + hd];
                    for (o, &vv) in out.iter_mut().zip(vh) {
                        *o += p * vv;
                    }
                }
            }
            capture(site(CapturePoint::AttnMix), pos, &mix);
            layer.attn_out.matvec(&mix, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }

            let h = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias, eps);
            capture(site(CapturePoint::MlpIn), pos, &h);
            layer.mlp_up.matvec(&h, &mut up);
            for u in up.iter_mut() {
                *u = gelu(*u);
            }
            capture(site(CapturePoint::MlpHidden), pos, &up);
            layer.mlp_down.matvec(&up, &mut proj);
            for (xi, pi) in x.iter_mut().zip(&proj) {
                *xi += pi;
            }
        }
        state.tokens.push(token);
        Ok(x)
    }

    /// Next-token logits from a last-block residual.
    pub fn logits(&self, hidden: &[f64]) -> Vec<f64> {
        let normed = layer_norm(
            hidden,
            &self.final_gain,
            &self.final_bias,
            self.config.layernorm_epsilon,
        );
        let mut out = vec![0.0; self.config.vocab_size];
        self.output_projection.matvec(&normed, &mut out);
        out
    }

    /// Runs `tokens` through the model, streaming captures to `capture`.
    /// Returns the last-block residual at every position.
    pub fn teacher_force_with(
        &self,
        tokens: &[u8],
        capture: &mut dyn FnMut(CaptureSite, usize, &[f64]),
    ) -> Result<Vec<Vec<f64>>> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        let mut state = DecodeState::new(self);
        tokens
            .iter()
            .map(|&t| self.step(&mut state, t, capture))
            .collect()
    }

    /// Teacher-forced pass returning logits, final hidden states and the
    /// input columns of every ref in `capture`.
    pub fn forward_teacher_forced(
        &self,
        tokens: &[u8],
        capture: &[PrunableLayerRef],
    ) -> Result<TeacherForced> {
        for r in capture {
            self.weight(*r)?;
        }
        let mut captured: BTreeMap<PrunableLayerRef, Vec<Vec<f64>>> =
            capture.iter().map(|r| (*r, Vec::new())).collect();
        let hidden = self.teacher_force_with(tokens, &mut |site, _, col| {
            for (r, cols) in captured.iter_mut() {
                if r.site() == site {
                    cols.push(col.to_vec());
                }
            }
        })?;
        let logits = hidden.iter().map(|h| self.logits(h)).collect();
        Ok(TeacherForced {
            logits,
            hidden,
            captured,
        })
    }

    /// Next-token probabilities after each position.
    pub fn next_token_probs(&self, tokens: &[u8]) -> Result<Vec<Vec<f64>>> {
        let hidden = self.teacher_force_with(tokens, &mut no_capture)?;
        Ok(hidden.iter().map(|h| softmax(&self.logits(h))).collect())
    }

    /// Autoregressive generation: `prompt` followed by up to `max_new` tokens,
    /// stopping after the stop byte is emitted.
    pub fn decode(&self, prompt: &[u8], max_new: usize, sampler: Sampler) -> Result<Vec<u8>> {
        self.decode_with(prompt, max_new, sampler, &mut no_capture)
    }

    /// [`ModelBundle::decode`] with activation capture at every processed
    /// position, prompt and generated alike. Each generated token is run
    /// through the model once so its columns are observed too.
    pub fn decode_with(
        &self,
        prompt: &[u8],
        max_new: usize,
        sampler: Sampler,
        capture: &mut dyn FnMut(CaptureSite, usize, &[f64]),
    ) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(Error::invalid("decode prompt must be nonempty"));
        }
        sampler.validate()?;
        let budget = prompt.len() + max_new;
        if budget > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: budget,
                max: self.config.max_positions,
            });
        }
        let mut picker = TokenPicker::new(sampler);
        let mut state = DecodeState::new(self);
        let mut hidden = Vec::new();
        for &t in prompt {
            hidden = self.step(&mut state, t, capture)?;
        }
        for _ in 0..max_new {
            let next = picker.pick(&self.logits(&hidden));
            hidden = self.step(&mut state, next, capture)?;
            if next == STOP_BYTE {
                break;
            }
        }
        Ok(state.tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Slot};

    fn model(seed: u64) -> ModelBundle {
        ModelBundle::generate(ModelConfig::new(16, 2, 2).with_max_positions(64), seed).unwrap()
    }

    #[test]
    fn one_token_one_column_per_ref() {
        let m = model(1);
        let refs = m.config.all_refs();
        let out = m.forward_teacher_forced(b"a", &refs).unwrap();
        assert_eq!(out.logits.len(), 1);
        for r in &refs {
            let cols = &out.captured[r];
            assert_eq!(cols.len(), 1);
            assert_eq!(cols[0].len(), m.config.slot_shape(r.slot).1);
        }
    }

    #[test]
    fn captured_mlp_up_column_reproduces_preactivation() {
        let m = model(2);
        let r = PrunableLayerRef::new(0, Slot::MlpUp);
        let down = PrunableLayerRef::new(0, Slot::MlpDown);
        let out = m.forward_teacher_forced(b"hello", &[r, down]).unwrap();
        let w = m.weight_matrix(r).unwrap();
        for (col, hidden) in out.captured[&r].iter().zip(&out.captured[&down]) {
            for row in 0..w.rows() {
                let pre: f64 = w.row(row).iter().zip(col).map(|(a, b)| a * b).sum();
                assert!((gelu(pre) - hidden[row]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn prefix_columns_ignore_suffix() {
        let m = model(3);
        let refs = m.config.all_refs();
        let a = m.forward_teacher_forced(b"shared-xyz", &refs).unwrap();
        let b = m.forward_teacher_forced(b"shared-123", &refs).unwrap();
        for r in &refs {
            assert_eq!(a.captured[r][..7], b.captured[r][..7]);
        }
        assert_eq!(a.logits[..7], b.logits[..7]);
        assert_ne!(a.logits[8], b.logits[8]);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = model(4);
        for p in m.next_token_probs(b"probability").unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overlength_rejected() {
        let m = model(5);
        let long = vec![b'a'; 65];
        assert!(matches!(
            m.forward_teacher_forced(&long, &[]),
            Err(Error::SequenceTooLong { len: 65, max: 64 })
        ));
        assert!(matches!(
            m.decode(b"abc", 62, Sampler::Greedy),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(m.decode(b"", 3, Sampler::Greedy).is_err());
    }

    #[test]
    fn greedy_is_deterministic_and_zero_budget_is_identity() {
        let m = model(6);
        let a = m.decode(b"prompt", 20, Sampler::Greedy).unwrap();
        let b = m.decode(b"prompt", 20, Sampler::Greedy).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"prompt"));
        assert_eq!(m.decode(b"prompt", 0, Sampler::Greedy).unwrap(), b"prompt");
    }

    #[test]
    fn temperature_sampling_is_seeded() {
        let m = model(7);
        let s = Sampler::Temperature { tau: 1.0, seed: 9 };
        let a = m.decode(b"xy", 30, s).unwrap();
        let b = m.decode(b"xy", 30, s).unwrap();
        assert_eq!(a, b);
        let c = m.decode(b"xy", 30, s.offset_seed(1)).unwrap();
        assert_ne!(a, c);
        assert!(m
            .decode(b"xy", 3, Sampler::Temperature { tau: 0.0, seed: 0 })
            .is_err());
    }

    #[test]
    fn decode_stops_after_stop_byte() {
        let mut m = model(8);
        // Make the stop byte dominate every step.
        let d = m.config.d_model;
        for c in 0..d {
            m.output_projection.data[c] = 0.0;
        }
        m.final_bias.data.iter_mut().for_each(|b| *b = 1.0);
        m.final_gain.data.iter_mut().for_each(|g| *g = 0.0);
        for (r, row) in m.output_projection.data.chunks_mut(d).enumerate() {
            row.iter_mut()
                .for_each(|w| *w = if r == 0 { 1.0 } else { 0.0 });
        }
        let out = m.decode(b"go", 10, Sampler::Greedy).unwrap();
        assert_eq!(out, vec![b'g', b'o', STOP_BYTE]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
    }
}
