//! Uncached whole-sequence forward pass.
//!
//! Recomputes every position from scratch with an explicit causal mask. It
//! shares no state handling with the KV-cached runtime and serves as the
//! oracle for it.

use super::runtime::{argmax, gelu, layer_norm, softmax};
use super::{ModelBundle, Tensor};
use crate::error::{Error, Result};

fn matmul_rows(w: &Tensor, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    xs.iter()
        .map(|x| {
            (0..w.rows)
                .map(|r| w.row(r).iter().zip(x).map(|(&a, &b)| a as f64 * b).sum())
                .collect()
        })
        .collect()
}

/// Last-block residual at every position of `tokens`.
pub fn reference_forward(model: &ModelBundle, tokens: &[u8]) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let n = tokens.len();
    if n > cfg.max_positions {
        return Err(Error::SequenceTooLong {
            len: n,
            max: cfg.max_positions,
        });
    }
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let eps = cfg.layernorm_epsilon;

    let mut xs: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            model
                .token_embedding
                .row(tok as usize)
                .iter()
                .zip(model.position_embedding.row(t))
                .map(|(&e, &p)| e as f64 + p as f64)
                .collect()
        })
        .collect();

    for layer in &model.layers {
        let hs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| layer_norm(x, &layer.ln1_gain, &layer.ln1_bias, eps))
            .collect();
        let qs = matmul_rows(&layer.attn_q, &hs);
        let ks = matmul_rows(&layer.attn_k, &hs);
        let vs = matmul_rows(&layer.attn_v, &hs);

        let mut mixes = vec![vec![0.0; cfg.d_model]; n];
        for head in 0..cfg.n_heads {
            let lo = head * hd;
            // Full n×n score matrix with masked entries at -inf.
            for i in 0..n {
                let row: Vec<f64> = (0..n)
                    .map(|j| {
                        if j > i {
                            f64::NEG_INFINITY
                        } else {
                            (lo..lo + hd).map(|c| qs[i][c] * ks[j][c]).sum::<f64>() * scale
                        }
                    })
                    .collect();
                let probs = softmax(&row);
                for c in lo..lo + hd {
                    mixes[i][c] = (0..n).map(|j| probs[j] * vs[j][c]).sum();
                }
            }
        }
        let outs = matmul_rows(&layer.attn_out, &mixes);
        for (x, o) in xs.iter_mut().zip(&outs) {
            x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }

        let hs: Vec<Vec<f64>> = xs
            .iter()
            .map(|x| layer_norm(x, &layer.ln2_gain, &layer.ln2_bias, eps))
            .collect();
        let ups: Vec<Vec<f64>> = matmul_rows(&layer.mlp_up, &hs)
            .into_iter()
            .map(|u| u.into_iter().map(gelu).collect())
            .collect();
        let downs = matmul_rows(&layer.mlp_down, &ups);
        for (x, o) in xs.iter_mut().zip(&downs) {
            x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
    }
    Ok(xs)
}

/// Greedy decoding that re-runs [`reference_forward`] over the whole
/// sequence at every step. Returns the tokens and the logits used at each step.
pub fn reference_decode_greedy(
    model: &ModelBundle,
    prompt: &[u8],
    max_new: usize,
) -> Result<(Vec<u8>, Vec<Vec<f64>>)> {
    let mut tokens = prompt.to_vec();
    let mut step_logits = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let hidden = reference_forward(model, &tokens)?;
        let logits = model.logits(hidden.last().expect("nonempty prompt"));
        let next = argmax(&logits) as u8;
        step_logits.push(logits);
        tokens.push(next);
        if next == super::STOP_BYTE {
            break;
        }
    }
    Ok((tokens, step_logits))
}
