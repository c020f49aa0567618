//! Deformable feature fusion: a learnable offset network over image features,
//! differentiable bilinear sampling at displaced projection coordinates, and
//! per-point 2D/3D feature fusion through a learned 2D-Learner — with analytic
//! gradients for every parameter and for the feature grid itself.

mod network;
mod pipeline;
mod sampler;

pub use network::{
    load_checkpoint, save_checkpoint, Activation, AffineLayer, OffsetNetwork, TwoDLearner,
};
pub use pipeline::{
    bilinear_sample, fuse, gradcheck, predict_offsets, sample_adaptive, train_toy,
    DeformableFusion, GradCheckReport, Gradients, TrainResult,
};
pub use sampler::sample_channels;

use thiserror::Error;

use crate::rng::StreamRng;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at step {step}: loss or parameters became non-finite")]
    DivergedLoss { step: usize },
    #[error("backward called without a recorded forward pass")]
    NoForwardState,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

/// A dense `H x W x D` feature map over the pixel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    height: u32,
    width: u32,
    channels: u32,
    /// Pyramid layer index this grid came from (metadata only).
    pub layer: u32,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        height: u32,
        width: u32,
        channels: u32,
        values: Vec<f64>,
    ) -> Result<Self, FusionError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FusionError::InvalidArgument(
                "grid dimensions must be positive".into(),
            ));
        }
        let expected = height as usize * width as usize * channels as usize;
        if values.len() != expected {
            return Err(FusionError::ShapeMismatch(format!(
                "grid of {height}x{width}x{channels} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(format!(
                "grid value at flat index {i}"
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            channels,
            layer: 0,
            values,
        })
    }

    pub fn zeros(height: u32, width: u32, channels: u32) -> Self {
        FeatureGrid {
            height,
            width,
            channels,
            layer: 0,
            values: vec![0.0; height as usize * width as usize * channels as usize],
        }
    }

    pub fn from_fn(
        height: u32,
        width: u32,
        channels: u32,
        mut f: impl FnMut(u32, u32, u32) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height as usize * width as usize * channels as usize);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(x, y, c));
                }
            }
        }
        FeatureGrid {
            height,
            width,
            channels,
            layer: 0,
            values,
        }
    }

    /// Smooth, non-constant seeded grid: a small sum of sinusoids per channel.
    /// Used wherever a test or demo needs spatial variation with bounded
    /// gradients.
    pub fn smooth_random(height: u32, width: u32, channels: u32, seed: u64) -> Self {
        let rng = StreamRng::new(seed, "smooth-grid");
        let waves = 6u64;
        let mut params = Vec::new();
        for c in 0..channels as u64 {
            for w in 0..waves {
                let base = 6 * (c * waves + w);
                // several incommensurate wavelengths of ~7-33 px: smooth over a few
                // pixels of displacement, and no near-periodic alias offsets
                // over a few pixels of displacement
                params.push((
                    rng.uniform_in_at(base, 0.3, 0.8),           // amplitude
                    rng.uniform_in_at(base + 1, 0.03, 0.15),     // freq x (cycles/px)
                    rng.uniform_in_at(base + 2, 0.03, 0.15),     // freq y
                    rng.uniform_in_at(base + 3, 0.0, std::f64::consts::TAU), // phase
                ));
            }
        }
        FeatureGrid::from_fn(height, width, channels, |x, y, c| {
            let mut v = 0.0;
            for w in 0..waves {
                let (amp, fx, fy, phase) = params[(c as u64 * waves + w) as usize];
                v += amp
                    * (std::f64::consts::TAU * (fx * x as f64 + fy * y as f64) + phase).sin();
            }
            v
        })
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn channels(&self) -> u32 {
        self.channels
    }

    pub fn get(&self, x: u32, y: u32, c: u32) -> f64 {
        self.values[self.index(x, y, c)]
    }

    pub fn set(&mut self, x: u32, y: u32, c: u32, v: f64) {
        let i = self.index(x, y, c);
        self.values[i] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn index(&self, x: u32, y: u32, c: u32) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize
    }
}

/// Per-point features with the continuous pixel coordinates they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFeatureSet {
    pub channels: u32,
    /// `(u, v)` per point; may be out of grid bounds (samplers clamp).
    pub coords: Vec<(f64, f64)>,
    /// `count x channels`, row-major.
    pub values: Vec<f64>,
}

impl PointFeatureSet {
    pub fn new(
        channels: u32,
        coords: Vec<(f64, f64)>,
        values: Vec<f64>,
    ) -> Result<Self, FusionError> {
        if values.len() != coords.len() * channels as usize {
            return Err(FusionError::ShapeMismatch(format!(
                "{} points with {channels} channels need {} values, got {}",
                coords.len(),
                coords.len() * channels as usize,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(format!(
                "point feature at flat index {i}"
            )));
        }
        Ok(PointFeatureSet {
            channels,
            coords,
            values,
        })
    }

    pub fn count(&self) -> usize {
        self.coords.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.channels as usize;
        &self.values[i * d..(i + 1) * d]
    }
}
