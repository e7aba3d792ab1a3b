//! Offline weight transforms.
//!
//! The transforms here run once, before inference, and produce parameter
//! files in which the value (or key) projection has been replaced:
//!
//! * `W_KV = W_K^{-1} W_V` lets the decode kernels rebuild values from
//!   cached keys (square projections);
//! * `W_KV = W_K^+ W_V` does the same through the right inverse when the
//!   projections are wide (`e > d`), at the price of an `e x e` matrix;
//! * `W_VK = W_V^{-1} W_K` is the mirrored scheme that rebuilds keys from
//!   cached values.
//!
//! Bias handling is also offline: the value bias folds into the output
//! projection bias, and the key bias cancels inside the softmax, so both
//! can be removed without changing any output.

use crate::error::{Error, Result};
use crate::linalg::{
    allclose_default, condition_estimate, invert_square, max_abs_diff, right_inverse, Matrix,
};
use crate::model::{
    KeptProjection, LayerWeights, Model, SlimLayer, SlimMode, SlimModel, TransformedWeights,
    ValueMap,
};

/// Condition estimate above which a layer is flagged in transform reports.
pub const CONDITION_WARN_THRESHOLD: f64 = 1e8;

/// `W_KV = W_K^{-1} W_V` for square key projections.
pub fn compute_wkv(w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    let w_k_inv = invert_square(w_k)?;
    w_k_inv.matmul(w_v)
}

/// `W_KV = W_K^+ W_V` for wide projections (`e >= d`), shape `e x e`.
///
/// The result has `e/d` times more parameters than the `d x e` matrix it
/// replaces; callers report that growth alongside the transform.
pub fn compute_wkv_rect(w_k: &Matrix, w_v: &Matrix) -> Result<Matrix> {
    if w_k.shape() != w_v.shape() {
        return Err(Error::ShapeMismatch {
            op: "compute_wkv_rect",
            lhs: w_k.shape(),
            rhs: w_v.shape(),
        });
    }
    let pinv = right_inverse(w_k)?;
    pinv.matmul(w_v)
}

/// `W_VK = W_V^{-1} W_K`, the mirrored transform for a V-only cache.
pub fn compute_wvk(w_v: &Matrix, w_k: &Matrix) -> Result<Matrix> {
    let w_v_inv = invert_square(w_v)?;
    w_v_inv.matmul(w_k)
}

/// Fold the value bias into the output projection: `c* = b_v W_O + c_o`.
///
/// Valid because attention scores sum to one, so the shared value bias
/// passes through the weighted sum unscaled.
pub fn fold_value_bias(b_v: &[f64], w_o: &Matrix, c_o: Option<&[f64]>) -> Result<Vec<f64>> {
    if b_v.len() != w_o.rows() {
        return Err(Error::ShapeMismatch {
            op: "fold_value_bias",
            lhs: (1, b_v.len()),
            rhs: w_o.shape(),
        });
    }
    let folded = Matrix::from_vec(1, b_v.len(), b_v.to_vec())?.matmul(w_o)?;
    let mut out = folded.data().to_vec();
    if let Some(c_o) = c_o {
        if c_o.len() != out.len() {
            return Err(Error::ShapeMismatch {
                op: "fold_value_bias",
                lhs: (1, out.len()),
                rhs: (1, c_o.len()),
            });
        }
        for (o, c) in out.iter_mut().zip(c_o) {
            *o += c;
        }
    }
    Ok(out)
}

/// Remove the key bias; attention probabilities are unchanged because the
/// bias contributes the same constant to every score of a query.
///
/// Refuses when rotary encoding sits between the projections and the dot
/// product: the rotation acts per position, so the bias term would no
/// longer be constant across scores.
pub fn drop_key_bias(weights: &LayerWeights, rope_between: bool) -> Result<LayerWeights> {
    if rope_between {
        return Err(Error::RopeUnsupported {
            kernel: "drop_key_bias",
        });
    }
    let mut out = weights.clone();
    out.b_k = None;
    Ok(out)
}

/// Outcome of checking one layer's reconstruction `W_K W_KV ~= W_V`
/// (or `W_V W_VK ~= W_K` for the mirrored scheme).
#[derive(Debug, Clone)]
pub struct LayerCheck {
    pub layer: usize,
    pub pass: bool,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ReconstructionReport {
    pub layers: Vec<LayerCheck>,
}

impl ReconstructionReport {
    pub fn all_pass(&self) -> bool {
        self.layers.iter().all(|l| l.pass)
    }
}

/// Check every layer's reconstruction against the original weights.
pub fn verify_value_reconstruction(
    weights: &[LayerWeights],
    transformed: &[TransformedWeights],
) -> Result<ReconstructionReport> {
    if weights.len() != transformed.len() {
        return Err(Error::LayerCountMismatch {
            left: weights.len(),
            right: transformed.len(),
        });
    }
    let mut report = ReconstructionReport::default();
    for (layer, (w, t)) in weights.iter().zip(transformed).enumerate() {
        let (reconstructed, original) = match &t.map {
            ValueMap::Kv(w_kv) => (w.w_k.matmul(w_kv)?, &w.w_v),
            ValueMap::Vk(w_vk) => (w.w_v.matmul(w_vk)?, &w.w_k),
        };
        report.layers.push(LayerCheck {
            layer,
            pass: allclose_default(&reconstructed, original)?,
            max_abs_err: max_abs_diff(&reconstructed, original)?,
        });
    }
    Ok(report)
}

/// Cache compression factor `c = h_kv (d_K + d_V) / d_model`.
///
/// `c = 2` is the usual MHA case; grouped-query layouts can land anywhere
/// above or below.
pub fn compression_factor(h_kv: usize, d_key: usize, d_value: usize, d_model: usize) -> f64 {
    (h_kv * (d_key + d_value)) as f64 / d_model as f64
}

/// Per-layer notes produced while transforming a whole model.
#[derive(Debug, Clone)]
pub struct TransformNote {
    pub layer: usize,
    /// Pivot-spread estimate of the inverted matrix's condition.
    pub condition: f64,
    /// True when `condition` exceeds [`CONDITION_WARN_THRESHOLD`]; the
    /// transform still succeeds, but reconstruction accuracy may suffer.
    pub flagged: bool,
}

/// Transform a whole model into its slim counterpart.
///
/// With `fold_bias` set, the value bias folds into the output bias and the
/// key bias is dropped; otherwise any biases are carried through unchanged
/// and the decode kernels compensate for them exactly.
pub fn transform_model(
    model: &Model,
    mode: SlimMode,
    fold_bias: bool,
) -> Result<(SlimModel, Vec<TransformNote>)> {
    let config = &model.config;
    match mode {
        SlimMode::Kv | SlimMode::Vk if !config.is_square() => {
            return Err(Error::InvalidConfig(format!(
                "mode {} needs square projections, got d={} e={}; use rect-kv",
                mode.as_str(),
                config.d,
                config.e
            )));
        }
        SlimMode::RectKv if config.e < config.d => {
            return Err(Error::NotWide {
                rows: config.d,
                cols: config.e,
            });
        }
        _ => {}
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut notes = Vec::with_capacity(model.layers.len());
    for (i, raw) in model.layers.iter().enumerate() {
        let at_layer = |source: Error| Error::AtLayer {
            layer: i,
            source: Box::new(source),
        };
        let weights = if fold_bias {
            let mut folded = drop_key_bias(raw, false)?;
            if let Some(b_v) = &raw.b_v {
                folded.b_o = Some(fold_value_bias(b_v, &raw.w_o, raw.b_o.as_deref())?);
                folded.b_v = None;
            }
            folded
        } else {
            raw.clone()
        };

        let inverted = match mode {
            SlimMode::Kv | SlimMode::RectKv => &weights.w_k,
            SlimMode::Vk => &weights.w_v,
        };
        let condition = match mode {
            SlimMode::Kv | SlimMode::Vk => condition_estimate(inverted).map_err(at_layer)?,
            // condition of the gram matrix drives the right inverse
            SlimMode::RectKv => {
                condition_estimate(&inverted.matmul(&inverted.transposed())?).map_err(at_layer)?
            }
        };
        notes.push(TransformNote {
            layer: i,
            condition,
            flagged: condition > CONDITION_WARN_THRESHOLD,
        });

        let (kept, map) = match mode {
            SlimMode::Kv => (
                KeptProjection::Key(weights.w_k.clone()),
                ValueMap::Kv(compute_wkv(&weights.w_k, &weights.w_v).map_err(at_layer)?),
            ),
            SlimMode::RectKv => (
                KeptProjection::Key(weights.w_k.clone()),
                ValueMap::Kv(compute_wkv_rect(&weights.w_k, &weights.w_v).map_err(at_layer)?),
            ),
            SlimMode::Vk => (
                KeptProjection::Value(weights.w_v.clone()),
                ValueMap::Vk(compute_wvk(&weights.w_v, &weights.w_k).map_err(at_layer)?),
            ),
        };
        layers.push(SlimLayer {
            w_q: weights.w_q.clone(),
            w_o: weights.w_o.clone(),
            kept,
            transformed: TransformedWeights {
                map,
                folded_output_bias: if fold_bias { weights.b_o.clone() } else { None },
                query_bias: weights.b_q.clone(),
            },
            b_k: weights.b_k.clone(),
            b_v: weights.b_v.clone(),
            b_o: if fold_bias { None } else { weights.b_o.clone() },
        });
    }
    Ok((
        SlimModel {
            config: config.clone(),
            mode,
            layers,
            seed: model.seed,
        },
        notes,
    ))
}

/// The per-layer transform artifacts of a slim model, in layer order.
pub fn transformed_weights_of(model: &SlimModel) -> Vec<TransformedWeights> {
    model.layers.iter().map(|l| l.transformed.clone()).collect()
}
