//! Model configuration, per-layer projection weights, and synthetic models.
//!
//! Weights follow the row-vector convention: a projection maps a `1 x d`
//! token through a `d x e` matrix. `e = h * d_k` is the concatenated head
//! width; square models have `e == d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_invertible, Matrix};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension (`d_model`).
    pub d: usize,
    /// Number of attention heads.
    pub h: usize,
    /// Per-head dimension.
    pub d_k: usize,
    /// Concatenated projection width, always `h * d_k`.
    pub e: usize,
    /// Number of layers.
    pub layers: usize,
    /// Maximum context length in tokens.
    pub max_context: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_ffn: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
}

impl ModelConfig {
    pub fn new(d: usize, h: usize, d_k: usize, layers: usize, max_context: usize) -> Result<Self> {
        let config = Self {
            d,
            h,
            d_k,
            e: h * d_k,
            layers,
            max_context,
            d_ffn: None,
            vocab: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.d_k == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig(
                "d, h, d_k and layers must all be at least 1".to_string(),
            ));
        }
        if self.e != self.h * self.d_k {
            return Err(Error::InvalidConfig(format!(
                "e = {} must equal h * d_k = {}",
                self.e,
                self.h * self.d_k
            )));
        }
        Ok(())
    }

    /// Aspect ratio `r = e / d` of the key/value projections.
    pub fn aspect_ratio(&self) -> f64 {
        self.e as f64 / self.d as f64
    }

    pub fn is_square(&self) -> bool {
        self.e == self.d
    }
}

/// Projection weights of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub b_q: Option<Vec<f64>>,
    pub b_k: Option<Vec<f64>>,
    pub b_v: Option<Vec<f64>>,
    pub b_o: Option<Vec<f64>>,
}

impl LayerWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let proj = (config.d, config.e);
        for (name, m, expected) in [
            ("Wq", &self.w_q, proj),
            ("Wk", &self.w_k, proj),
            ("Wv", &self.w_v, proj),
            ("Wo", &self.w_o, (config.e, config.d)),
        ] {
            if m.shape() != expected {
                return Err(Error::TensorShape {
                    tensor: name.to_string(),
                    expected,
                    found: m.shape(),
                });
            }
        }
        for (name, b, expected) in [
            ("bq", &self.b_q, config.e),
            ("bk", &self.b_k, config.e),
            ("bv", &self.b_v, config.e),
            ("bo", &self.b_o, config.d),
        ] {
            if let Some(b) = b {
                if b.len() != expected {
                    return Err(Error::TensorShape {
                        tensor: name.to_string(),
                        expected: (1, expected),
                        found: (1, b.len()),
                    });
                }
            }
        }
        Ok(())
    }

    /// Identity projections, handy in tests: every weight matrix is I and
    /// biases are absent. Requires a square config.
    pub fn identity(config: &ModelConfig) -> Self {
        assert!(config.is_square(), "identity weights need e == d");
        Self {
            w_q: Matrix::identity(config.d),
            w_k: Matrix::identity(config.d),
            w_v: Matrix::identity(config.d),
            w_o: Matrix::identity(config.d),
            b_q: None,
            b_k: None,
            b_v: None,
            b_o: None,
        }
    }

    pub fn has_any_bias(&self) -> bool {
        self.b_q.is_some() || self.b_k.is_some() || self.b_v.is_some() || self.b_o.is_some()
    }
}

/// A complete decoder-only model: config plus one [`LayerWeights`] per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    /// Seed the weights were sampled from, when synthetic.
    pub seed: Option<u64>,
}

/// Which matrix replaces which in a slim parameter file.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueMap {
    /// `V = K * W_KV`; the value projection is gone from the file.
    Kv(Matrix),
    /// `K = V * W_VK`; the key projection is gone from the file.
    Vk(Matrix),
}

impl ValueMap {
    pub fn matrix(&self) -> &Matrix {
        match self {
            ValueMap::Kv(m) | ValueMap::Vk(m) => m,
        }
    }
}

/// Offline product of the slim weight transform for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedWeights {
    pub map: ValueMap,
    /// `c* = b_v * W_O + b_o` when bias folding ran; replaces `b_o`.
    pub folded_output_bias: Option<Vec<f64>>,
    /// The query bias survives the transform untouched.
    pub query_bias: Option<Vec<f64>>,
}

/// One layer of a transformed (slim) model as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimLayer {
    pub w_q: Matrix,
    pub w_o: Matrix,
    /// The projection that still runs at inference time: `W_K` for the
    /// K-cache modes, `W_V` for the V-cache mode.
    pub kept: KeptProjection,
    pub transformed: TransformedWeights,
    /// Biases that survive only when folding was skipped.
    pub b_k: Option<Vec<f64>>,
    pub b_v: Option<Vec<f64>>,
    /// Original output bias when folding was skipped; the folded `c*`
    /// otherwise lives in [`TransformedWeights::folded_output_bias`].
    pub b_o: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeptProjection {
    Key(Matrix),
    Value(Matrix),
}

/// The three transform modes the tooling understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlimMode {
    /// Square `W_KV = W_K^{-1} W_V`; K-cache only.
    Kv,
    /// `W_VK = W_V^{-1} W_K`; V-cache only.
    Vk,
    /// Rectangular `W_KV = W_K^+ W_V` via the right inverse.
    RectKv,
}

impl SlimMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlimMode::Kv => "kv",
            SlimMode::Vk => "vk",
            SlimMode::RectKv => "rect-kv",
        }
    }
}

/// A transformed model: same config, slim layers, and the mode that made it.
#[derive(Debug, Clone, PartialEq)]
pub struct SlimModel {
    pub config: ModelConfig,
    pub mode: SlimMode,
    pub layers: Vec<SlimLayer>,
    pub seed: Option<u64>,
}

const MAX_RESAMPLE_ATTEMPTS: u32 = 8;

// tensor slot labels for the per-tensor rng streams
const SLOT_WQ: u64 = 0;
const SLOT_WK: u64 = 1;
const SLOT_WV: u64 = 2;
const SLOT_WO: u64 = 3;
const SLOT_BIAS_BASE: u64 = 4;

/// Sample a synthetic model with Gaussian(0, 1/sqrt(d)) entries.
///
/// Deterministic for a fixed `(config, seed)`. On the square path each
/// `W_K` is checked for invertibility and resampled from a fresh stream on
/// failure; with Gaussian entries a failure is already astronomically rare,
/// so the retry bound exists mostly to give the contingency a defined error.
pub fn generate_synthetic_model(config: &ModelConfig, seed: u64, with_bias: bool) -> Result<Model> {
    config.validate()?;
    let std_dev = 1.0 / (config.d as f64).sqrt();
    let mut layers = Vec::with_capacity(config.layers);
    for layer in 0..config.layers {
        let sample = |slot: u64, rows: usize, cols: usize, retry: u64| {
            let mut rng = SplitMix64::for_stream(seed, &[layer as u64, slot, retry]);
            Matrix::random_normal(rows, cols, std_dev, &mut rng)
        };
        let w_q = sample(SLOT_WQ, config.d, config.e, 0);
        let w_v = sample(SLOT_WV, config.d, config.e, 0);
        let w_o = sample(SLOT_WO, config.e, config.d, 0);

        let mut w_k = sample(SLOT_WK, config.d, config.e, 0);
        if config.is_square() {
            let mut attempt = 0;
            while !is_invertible(&w_k) {
                attempt += 1;
                if attempt > MAX_RESAMPLE_ATTEMPTS {
                    return Err(Error::SynthesisRetries {
                        layer,
                        attempts: MAX_RESAMPLE_ATTEMPTS,
                    });
                }
                w_k = sample(SLOT_WK, config.d, config.e, attempt as u64);
            }
        }

        let bias = |slot_offset: u64, len: usize| -> Option<Vec<f64>> {
            if !with_bias {
                return None;
            }
            let mut rng =
                SplitMix64::for_stream(seed, &[layer as u64, SLOT_BIAS_BASE + slot_offset, 0]);
            Some((0..len).map(|_| rng.next_normal_scaled(std_dev)).collect())
        };
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            b_q: bias(0, config.e),
            b_k: bias(1, config.e),
            b_v: bias(2, config.e),
            b_o: bias(3, config.d),
        });
    }
    Ok(Model {
        config: config.clone(),
        layers,
        seed: Some(seed),
    })
}
