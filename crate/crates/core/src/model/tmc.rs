//! TMC v1 model container.
//!
//! Layout: one line of compact JSON manifest terminated by `\n`, then a blob
//! of little-endian `f32` values with tensors concatenated in manifest order,
//! row-major. Offsets and lengths in the manifest are in bytes from the
//! start of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LayerWeights, ModelBundle, ModelConfig, Slot, Tensor};
use crate::error::{Error, Result};

pub const TMC_FORMAT: &str = "TMC";
pub const TMC_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    annotations: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

impl ModelBundle {
    fn encode(&self, annotations: &BTreeMap<String, String>) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        for (name, t) in self.named_tensors() {
            let shape = if name.ends_with("_gain") || name.ends_with("_bias") {
                vec![t.cols]
            } else {
                vec![t.rows, t.cols]
            };
            let offset = blob.len();
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            tensors.push(TensorEntry {
                name,
                shape,
                offset,
                length: blob.len() - offset,
            });
        }
        let manifest = Manifest {
            format: TMC_FORMAT.to_string(),
            version: TMC_VERSION,
            config: self.config.clone(),
            tensors,
            annotations: annotations.clone(),
        };
        let mut out = serde_json::to_vec(&manifest)?;
        out.push(b'\n');
        out.extend_from_slice(&blob);
        Ok(out)
    }

    /// Serializes to TMC v1 bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.encode(&self.annotations)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("TMC file", "missing manifest terminator"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..split])?;
        if manifest.format != TMC_FORMAT || manifest.version != TMC_VERSION {
            return Err(Error::format(
                "TMC file",
                format!(
                    "unsupported format {} v{}",
                    manifest.format, manifest.version
                ),
            ));
        }
        let config = manifest.config;
        config.validate()?;
        let blob = &bytes[split + 1..];

        let mut by_name: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut end = 0usize;
        for e in &manifest.tensors {
            let (rows, cols) = match e.shape.as_slice() {
                [c] => (1, *c),
                [r, c] => (*r, *c),
                _ => return Err(Error::format("TMC file", format!("{}: bad rank", e.name))),
            };
            if e.length != rows * cols * 4 || e.offset != end {
                return Err(Error::format(
                    "TMC file",
                    format!("{}: offset/length inconsistent with shape", e.name),
                ));
            }
            let raw = blob
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| Error::format("TMC file", format!("{}: truncated blob", e.name)))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("TMC tensor"));
            }
            end = e.offset + e.length;
            by_name.insert(e.name.clone(), Tensor { rows, cols, data });
        }
        if end != blob.len() {
            return Err(Error::format(
                "TMC file",
                "trailing bytes after last tensor",
            ));
        }

        let mut take = |name: String, rows: usize, cols: usize| -> Result<Tensor> {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::format("TMC file", format!("missing tensor {name}")))?;
            if (t.rows, t.cols) != (rows, cols) {
                return Err(Error::format(
                    "TMC file",
                    format!(
                        "{name}: shape {}x{} != expected {rows}x{cols}",
                        t.rows, t.cols
                    ),
                ));
            }
            Ok(t)
        };
        let (d, v) = (config.d_model, config.vocab_size);
        let token_embedding = take("token_embedding".into(), v, d)?;
        let position_embedding = take("position_embedding".into(), config.max_positions, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |n: &str| format!("layers.{i}.{n}");
            let slot = |s: Slot| config.slot_shape(s);
            let mut w = |s: Slot| {
                let (r, c) = slot(s);
                take(p(s.name()), r, c)
            };
            let attn_q = w(Slot::AttnQ)?;
            let attn_k = w(Slot::AttnK)?;
            let attn_v = w(Slot::AttnV)?;
            let attn_out = w(Slot::AttnOut)?;
            let mlp_up = w(Slot::MlpUp)?;
            let mlp_down = w(Slot::MlpDown)?;
            layers.push(LayerWeights {
                ln1_gain: take(p("ln1_gain"), 1, d)?,
                ln1_bias: take(p("ln1_bias"), 1, d)?,
                attn_q,
                attn_k,
                attn_v,
                attn_out,
                ln2_gain: take(p("ln2_gain"), 1, d)?,
                ln2_bias: take(p("ln2_bias"), 1, d)?,
                mlp_up,
                mlp_down,
            });
        }
        let bundle = ModelBundle {
            token_embedding,
            position_embedding,
            layers,
            final_gain: take("final_gain".into(), 1, d)?,
            final_bias: take("final_bias".into(), 1, d)?,
            output_projection: take("output_projection".into(), v, d)?,
            annotations: manifest.annotations,
            config,
        };
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::format(
                "TMC file",
                format!("unexpected tensor {extra}"),
            ));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 (hex) over config and weights, ignoring annotations.
    pub fn content_hash(&self) -> Result<String> {
        let bytes = self.encode(&BTreeMap::new())?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}
