//! Minimal byte-level decoder-only transformer.
//!
//! Pre-norm residual blocks with learned positional embeddings, multi-head
//! causal attention and a GELU MLP. Six linear slots per block are prunable;
//! embeddings and the output projection are left dense.

mod reference;
mod runtime;
mod tmc;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;

pub use reference::{reference_decode_greedy, reference_forward};
pub use runtime::{gelu, no_capture, CaptureSite, DecodeState, Sampler, TeacherForced};

/// Byte-level vocabulary.
pub const VOCAB_SIZE: usize = 256;
/// Generation halts after emitting this byte.
pub const STOP_BYTE: u8 = 0x00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_positions: usize,
    pub layernorm_epsilon: f64,
}

impl ModelConfig {
    /// A config with `d_mlp = 4·d_model`, 256 positions and the usual epsilon.
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model,
            n_layers,
            n_heads,
            d_mlp: 4 * d_model,
            max_positions: 256,
            layernorm_epsilon: 1e-5,
        }
    }

    pub fn with_d_mlp(mut self, d_mlp: usize) -> Self {
        self.d_mlp = d_mlp;
        self
    }

    pub fn with_max_positions(mut self, max_positions: usize) -> Self {
        self.max_positions = max_positions;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size != VOCAB_SIZE {
            return bad(format!(
                "vocab_size must be {VOCAB_SIZE}, got {}",
                self.vocab_size
            ));
        }
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("max_positions", self.max_positions),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !(self.layernorm_epsilon.is_finite() && self.layernorm_epsilon > 0.0) {
            return bad(format!(
                "layernorm_epsilon must be positive and finite, got {}",
                self.layernorm_epsilon
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// All prunable refs, layer-major, slots in declaration order.
    pub fn all_refs(&self) -> Vec<PrunableLayerRef> {
        (0..self.n_layers)
            .flat_map(|layer| {
                Slot::ALL
                    .iter()
                    .map(move |&slot| PrunableLayerRef { layer, slot })
            })
            .collect()
    }

    /// `(rows, cols)` of the weight behind `slot`; `cols` is the input width.
    pub fn slot_shape(&self, slot: Slot) -> (usize, usize) {
        let (d, h) = (self.d_model, self.d_mlp);
        match slot {
            Slot::AttnQ | Slot::AttnK | Slot::AttnV | Slot::AttnOut => (d, d),
            Slot::MlpUp => (h, d),
            Slot::MlpDown => (d, h),
        }
    }
}

/// Prunable linear slot within a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    AttnQ,
    AttnK,
    AttnV,
    AttnOut,
    MlpUp,
    MlpDown,
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::AttnQ,
        Slot::AttnK,
        Slot::AttnV,
        Slot::AttnOut,
        Slot::MlpUp,
        Slot::MlpDown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Slot::AttnQ => "attn_q",
            Slot::AttnK => "attn_k",
            Slot::AttnV => "attn_v",
            Slot::AttnOut => "attn_out",
            Slot::MlpUp => "mlp_up",
            Slot::MlpDown => "mlp_down",
        }
    }

    /// Where in the block the slot's input column is observed.
    pub fn capture_point(self) -> CapturePoint {
        match self {
            Slot::AttnQ | Slot::AttnK | Slot::AttnV => CapturePoint::AttnIn,
            Slot::AttnOut => CapturePoint::AttnMix,
            Slot::MlpUp => CapturePoint::MlpIn,
            Slot::MlpDown => CapturePoint::MlpHidden,
        }
    }
}

impl FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Slot::ALL
            .into_iter()
            .find(|slot| slot.name() == s)
            .ok_or_else(|| Error::UnknownRef(s.to_string()))
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Input vectors observed inside a block. Q/K/V share `AttnIn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CapturePoint {
    /// Normed residual entering Q, K, V.
    AttnIn,
    /// Concatenated head outputs entering the attention output projection.
    AttnMix,
    /// Normed residual entering the MLP up projection.
    MlpIn,
    /// GELU activations entering the MLP down projection.
    MlpHidden,
}

/// Identifies one prunable weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PrunableLayerRef {
    pub layer: usize,
    pub slot: Slot,
}

impl PrunableLayerRef {
    pub fn new(layer: usize, slot: Slot) -> Self {
        Self { layer, slot }
    }

    pub fn site(&self) -> CaptureSite {
        CaptureSite {
            layer: self.layer,
            point: self.slot.capture_point(),
        }
    }
}

impl fmt::Display for PrunableLayerRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.layer, self.slot)
    }
}

impl FromStr for PrunableLayerRef {
    type Err = Error;

    /// Parses `layers.<i>.<slot>`.
    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownRef(s.to_string());
        let rest = s.strip_prefix("layers.").ok_or_else(unknown)?;
        let (layer, slot) = rest.split_once('.').ok_or_else(unknown)?;
        Ok(Self {
            layer: layer.parse().map_err(|_| unknown())?,
            slot: slot.parse().map_err(|_| unknown())?,
        })
    }
}

impl From<PrunableLayerRef> for String {
    fn from(r: PrunableLayerRef) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for PrunableLayerRef {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Row-major `f32` tensor; vectors have `rows == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("tensor shape is consistent")
    }

    /// `out = self · x`, accumulated in `f64`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.row(r).iter().zip(x).map(|(&w, &v)| w as f64 * v).sum();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    pub attn_v: Tensor,
    pub attn_out: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub mlp_up: Tensor,
    pub mlp_down: Tensor,
}

impl LayerWeights {
    pub fn slot(&self, slot: Slot) -> &Tensor {
        match slot {
            Slot::AttnQ => &self.attn_q,
            Slot::AttnK => &self.attn_k,
            Slot::AttnV => &self.attn_v,
            Slot::AttnOut => &self.attn_out,
            Slot::MlpUp => &self.mlp_up,
            Slot::MlpDown => &self.mlp_down,
        }
    }

    fn slot_mut(&mut self, slot: Slot) -> &mut Tensor {
        match slot {
            Slot::AttnQ => &mut self.attn_q,
            Slot::AttnK => &mut self.attn_k,
            Slot::AttnV => &mut self.attn_v,
            Slot::AttnOut => &mut self.attn_out,
            Slot::MlpUp => &mut self.mlp_up,
            Slot::MlpDown => &mut self.mlp_down,
        }
    }
}

/// Weights plus architecture; immutable once built or loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    pub output_projection: Tensor,
    /// Free-form provenance (method, pattern, calibration); excluded from
    /// [`ModelBundle::content_hash`].
    pub annotations: BTreeMap<String, String>,
}

impl ModelBundle {
    /// Seeded random model; every projection and embedding entry is drawn
    /// from `N(0, 1) / √d_model`, norms start at gain 1, bias 0.
    pub fn generate(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| Tensor {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * scale) as f32
                })
                .collect(),
        };
        let d = config.d_model;
        let token_embedding = draw(config.vocab_size, d);
        let position_embedding = draw(config.max_positions, d);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let (up_r, up_c) = config.slot_shape(Slot::MlpUp);
            let (down_r, down_c) = config.slot_shape(Slot::MlpDown);
            layers.push(LayerWeights {
                ln1_gain: Tensor::filled(1, d, 1.0),
                ln1_bias: Tensor::filled(1, d, 0.0),
                attn_q: draw(d, d),
                attn_k: draw(d, d),
                attn_v: draw(d, d),
                attn_out: draw(d, d),
                ln2_gain: Tensor::filled(1, d, 1.0),
                ln2_bias: Tensor::filled(1, d, 0.0),
                mlp_up: draw(up_r, up_c),
                mlp_down: draw(down_r, down_c),
            });
        }
        let output_projection = draw(config.vocab_size, d);
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::filled(1, d, 1.0),
            final_bias: Tensor::filled(1, d, 0.0),
            output_projection,
            annotations: BTreeMap::new(),
            config,
        })
    }

    fn check_ref(&self, r: PrunableLayerRef) -> Result<()> {
        if r.layer >= self.config.n_layers {
            return Err(Error::UnknownRef(r.to_string()));
        }
        Ok(())
    }

    pub fn weight(&self, r: PrunableLayerRef) -> Result<&Tensor> {
        self.check_ref(r)?;
        Ok(self.layers[r.layer].slot(r.slot))
    }

    /// The referenced weight widened to `f64`.
    pub fn weight_matrix(&self, r: PrunableLayerRef) -> Result<Matrix> {
        Ok(self.weight(r)?.to_matrix())
    }

    /// Replaces one weight in place. Values are stored as `f32`.
    pub fn set_weight(&mut self, r: PrunableLayerRef, weights: &Matrix) -> Result<()> {
        self.check_ref(r)?;
        let (rows, cols) = self.config.slot_shape(r.slot);
        if weights.shape() != (rows, cols) {
            return Err(Error::invalid(format!(
                "{r}: expected shape {rows}x{cols}, got {}x{}",
                weights.rows(),
                weights.cols()
            )));
        }
        if weights.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("compressed weights"));
        }
        let t = self.layers[r.layer].slot_mut(r.slot);
        for (dst, &src) in t.data.iter_mut().zip(weights.data()) {
            *dst = src as f32;
        }
        Ok(())
    }

    /// Copy of this bundle with one weight replaced.
    pub fn apply_compressed(&self, r: PrunableLayerRef, weights: &Matrix) -> Result<ModelBundle> {
        let mut out = self.clone();
        out.set_weight(r, weights)?;
        Ok(out)
    }

    /// All tensors in container order, with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{i}.{n}");
            out.push((p("ln1_gain"), &l.ln1_gain));
            out.push((p("ln1_bias"), &l.ln1_bias));
            for slot in Slot::ALL {
                if slot == Slot::MlpUp {
                    out.push((p("ln2_gain"), &l.ln2_gain));
                    out.push((p("ln2_bias"), &l.ln2_bias));
                }
                out.push((p(slot.name()), l.slot(slot)));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out.push(("output_projection".to_string(), &self.output_projection));
        out
    }
}
