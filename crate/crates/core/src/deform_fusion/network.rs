//! The learnable pieces: affine layers, activations, the bounded offset
//! network, and the 2D-Learner — plus the float32 checkpoint format.
//!
//! Activation choices (fixed here, referenced by the gradient checks):
//! - offset-network hidden: softplus `ln(1 + e^x)`, evaluated directly;
//! - offset-network output: `max_offset * tanh(x)`, which bounds offsets to
//!   `|dx|, |dy| <= max_offset` for any weights;
//! - 2D-Learner: tanh by default, with an Identity variant for exact
//!   pass-through configurations.
//!
//! All are smooth, so central-difference gradient checks are clean away from
//! the sampler's lattice lines. Extreme learning rates can push the direct
//! softplus past the f64 range; the training loop reports that as divergence.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::FusionError;
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
}

impl Activation {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
            Activation::Softplus => (1.0 + x.exp()).ln(),
        }
    }

    pub fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Dense affine map `y = W x + b` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub rows: usize,
    pub cols: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AffineLayer {
            rows,
            cols,
            weight: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut layer = AffineLayer::zeros(n, n);
        for i in 0..n {
            layer.weight[i * n + i] = 1.0;
        }
        layer
    }

    /// Symmetric uniform init in +-1/sqrt(cols); `base` offsets the draw
    /// indices so several layers can share one stream.
    pub fn seeded(rows: usize, cols: usize, rng: &StreamRng, base: u64) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let mut layer = AffineLayer::zeros(rows, cols);
        for (i, w) in layer.weight.iter_mut().enumerate() {
            *w = rng.uniform_in_at(base + i as u64, -scale, scale);
        }
        for (i, b) in layer.bias.iter_mut().enumerate() {
            *b = rng.uniform_in_at(base + (rows * cols) as u64 + i as u64, -scale, scale);
        }
        layer
    }

    pub fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(x.len(), self.cols);
        for r in 0..self.rows {
            let row = &self.weight[r * self.cols..(r + 1) * self.cols];
            let mut acc = self.bias[r];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            out.push(acc);
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().all(|v| v.is_finite()) && self.bias.iter().all(|v| v.is_finite())
    }
}

/// Two affine layers with a softplus between them, mapping a point's local
/// image-feature context (feature at the reference pixel concatenated with
/// its 3x3 neighborhood mean, `2 * D` inputs) to a bounded pixel offset.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetNetwork {
    pub layer1: AffineLayer,
    pub layer2: AffineLayer,
    /// Offsets are `max_offset * tanh(logits / max_offset)`: near-identity in
    /// pixels for small logits, hard-bounded by `max_offset` always.
    pub max_offset: f64,
}

pub const OFFSET_HIDDEN_ACT: Activation = Activation::Softplus;

impl OffsetNetwork {
    pub fn zeros(feature_channels: u32, hidden: usize, max_offset: f64) -> Self {
        let input = 2 * feature_channels as usize;
        OffsetNetwork {
            layer1: AffineLayer::zeros(hidden, input),
            layer2: AffineLayer::zeros(2, hidden),
            max_offset,
        }
    }

    pub fn seeded(feature_channels: u32, hidden: usize, max_offset: f64, seed: u64) -> Self {
        let input = 2 * feature_channels as usize;
        let rng = StreamRng::new(seed, "offset-net-init");
        let l1 = AffineLayer::seeded(hidden, input, &rng, 0);
        let l2 = AffineLayer::seeded(2, hidden, &rng, (hidden * (input + 1)) as u64);
        OffsetNetwork {
            layer1: l1,
            layer2: l2,
            max_offset,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layer1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.rows
    }

    /// Saturate one logit into [-max_offset, max_offset].
    pub fn saturate(&self, logit: f64) -> f64 {
        if self.max_offset == 0.0 {
            0.0
        } else {
            self.max_offset * (logit / self.max_offset).tanh()
        }
    }

    /// d(saturate)/d(logit).
    pub fn saturate_grad(&self, logit: f64) -> f64 {
        if self.max_offset == 0.0 {
            0.0
        } else {
            let t = (logit / self.max_offset).tanh();
            1.0 - t * t
        }
    }

    /// Forward pass on one prepared input vector, recording pre-activations.
    /// Returns (hidden pre-act, hidden act, output logits, offset).
    pub fn forward_traced(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>, [f64; 2], (f64, f64)) {
        let mut h = Vec::with_capacity(self.hidden_dim());
        self.layer1.forward(input, &mut h);
        let a: Vec<f64> = h.iter().map(|&v| OFFSET_HIDDEN_ACT.eval(v)).collect();
        let mut o = Vec::with_capacity(2);
        self.layer2.forward(&a, &mut o);
        let logits = [o[0], o[1]];
        let offset = (self.saturate(logits[0]), self.saturate(logits[1]));
        (h, a, logits, offset)
    }

    pub fn is_finite(&self) -> bool {
        self.layer1.is_finite() && self.layer2.is_finite()
    }
}

/// One affine layer plus an elementwise nonlinearity, applied per point to
/// 3D features before concatenation with the sampled 2D features.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoDLearner {
    pub layer: AffineLayer,
    pub activation: Activation,
}

impl TwoDLearner {
    /// Exact pass-through: identity affine map, identity activation.
    pub fn identity(channels: u32) -> Self {
        TwoDLearner {
            layer: AffineLayer::identity(channels as usize),
            activation: Activation::Identity,
        }
    }

    pub fn zeros(channels: u32, activation: Activation) -> Self {
        TwoDLearner {
            layer: AffineLayer::zeros(channels as usize, channels as usize),
            activation,
        }
    }

    pub fn seeded(channels: u32, seed: u64, activation: Activation) -> Self {
        let rng = StreamRng::new(seed, "learner-init");
        TwoDLearner {
            layer: AffineLayer::seeded(channels as usize, channels as usize, &rng, 0),
            activation,
        }
    }

    pub fn channels(&self) -> u32 {
        self.layer.rows as u32
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OFFNET01";

/// Checkpoint layout (all integers and floats little-endian):
/// magic `OFFNET01`, u32 input_dim, u32 hidden_dim, u32 output_dim,
/// f32 max_offset, then layer-1 weights (hidden x input), layer-1 bias,
/// layer-2 weights (output x hidden), layer-2 bias as flat f32.
pub fn save_checkpoint(path: impl AsRef<Path>, net: &OffsetNetwork) -> Result<(), FusionError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&(net.hidden_dim() as u32).to_le_bytes());
    bytes.extend_from_slice(&2u32.to_le_bytes());
    bytes.extend_from_slice(&(net.max_offset as f32).to_le_bytes());
    for tensor in [
        &net.layer1.weight,
        &net.layer1.bias,
        &net.layer2.weight,
        &net.layer2.bias,
    ] {
        for v in tensor.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|source| FusionError::Io {
        path: path.to_owned(),
        source,
    })?;
    f.write_all(&bytes).map_err(|source| FusionError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<OffsetNetwork, FusionError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FusionError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<OffsetNetwork, FusionError> {
    let bad = |detail: &str| FusionError::Checkpoint(detail.to_string());
    if bytes.len() < 8 + 12 + 4 {
        return Err(bad("file shorter than header"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let input = u32_at(8) as usize;
    let hidden = u32_at(12) as usize;
    let output = u32_at(16) as usize;
    if output != 2 {
        return Err(bad("output dimension must be 2"));
    }
    if input == 0 || input % 2 != 0 || hidden == 0 {
        return Err(bad("invalid layer shapes"));
    }
    let max_offset = f32::from_le_bytes(bytes[20..24].try_into().unwrap()) as f64;
    if !max_offset.is_finite() || max_offset < 0.0 {
        return Err(bad("invalid max_offset"));
    }
    let n_floats = hidden * input + hidden + output * hidden + output;
    let expected = 24 + 4 * n_floats;
    if bytes.len() != expected {
        return Err(bad(&format!(
            "expected {expected} bytes for shapes {hidden}x{input} and {output}x{hidden}, got {}",
            bytes.len()
        )));
    }
    let mut floats = Vec::with_capacity(n_floats);
    for chunk in bytes[24..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        if !v.is_finite() {
            return Err(bad("non-finite weight"));
        }
        floats.push(v);
    }
    let mut cursor = 0usize;
    let mut take = |n: usize| {
        let slice = floats[cursor..cursor + n].to_vec();
        cursor += n;
        slice
    };
    let net = OffsetNetwork {
        layer1: AffineLayer {
            rows: hidden,
            cols: input,
            weight: take(hidden * input),
            bias: take(hidden),
        },
        layer2: AffineLayer {
            rows: output,
            cols: hidden,
            weight: take(output * hidden),
            bias: take(output),
        },
        max_offset,
    };
    Ok(net)
}
