//! Rotary position encoding and the K-cache strategies that support it.
//!
//! Encoding rotates adjacent element pairs of each head by a
//! position-dependent angle; decoding rotates back by the same angle, so a
//! cached key can always be returned to its raw form. That invertibility
//! is what keeps the K-cache schemes exact under rotary encoding:
//!
//! * **raw-key option** ([`slim_generate_rope_option1`]) stores raw keys
//!   and rotates them on every read; the raw rows double as the source for
//!   the value reconstruction.
//! * **encoded-key option** ([`slim_generate_rope_option2`]) stores
//!   encoded keys, scores directly against them, and un-rotates only the
//!   rows whose attention probability clears a threshold before the value
//!   reconstruction. With sparse attention most rows never need decoding.
//!
//! The rotation form is fixed (`y1 = x1 cos + x2 sin`,
//! `y2 = -x1 sin + x2 cos`, adjacent pairing); frequencies follow
//! `theta_j = 10000^(-2j/d_k)`. Encode and decode share one trig table.

use crate::attention::{AttnOutput, KCache, KVCache, KeyStorage, StepOps};
use crate::error::{Error, Result};
use crate::linalg::{softmax_row, Matrix, OpCounter};
use crate::model::LayerWeights;

/// Precomputed sines and cosines for every (position, frequency) pair.
#[derive(Debug, Clone)]
pub struct RopeTable {
    d_k: usize,
    max_positions: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    /// Build the table for heads of dimension `d_k` (must be even) and
    /// positions `0..max_positions`.
    pub fn new(d_k: usize, max_positions: usize) -> Result<Self> {
        if d_k == 0 || !d_k.is_multiple_of(2) {
            return Err(Error::OddHeadDim(d_k));
        }
        let half = d_k / 2;
        let mut cos = Vec::with_capacity(max_positions * half);
        let mut sin = Vec::with_capacity(max_positions * half);
        for pos in 0..max_positions {
            for j in 0..half {
                let theta = 10_000f64.powf(-2.0 * j as f64 / d_k as f64);
                let angle = pos as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        Ok(Self {
            d_k,
            max_positions,
            cos,
            sin,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_k
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn trig(&self, position: usize, j: usize) -> Result<(f64, f64)> {
        if position >= self.max_positions {
            return Err(Error::PositionOutOfRange {
                position,
                max: self.max_positions,
            });
        }
        let idx = position * (self.d_k / 2) + j;
        Ok((self.cos[idx], self.sin[idx]))
    }

    /// Rotate a concatenated-heads vector at the given position.
    pub fn encode(&self, v: &[f64], position: usize) -> Result<Vec<f64>> {
        self.apply(v, position, false)
    }

    /// Undo [`RopeTable::encode`] at the same position.
    pub fn decode(&self, v: &[f64], position: usize) -> Result<Vec<f64>> {
        self.apply(v, position, true)
    }

    fn apply(&self, v: &[f64], position: usize, inverse: bool) -> Result<Vec<f64>> {
        if !v.len().is_multiple_of(self.d_k) {
            return Err(Error::HeadWidthMismatch {
                len: v.len(),
                head_dim: self.d_k,
            });
        }
        let mut out = vec![0.0; v.len()];
        let half = self.d_k / 2;
        for head_start in (0..v.len()).step_by(self.d_k) {
            for j in 0..half {
                let (c, s) = self.trig(position, j)?;
                let x1 = v[head_start + 2 * j];
                let x2 = v[head_start + 2 * j + 1];
                let (y1, y2) = if inverse {
                    (x1 * c - x2 * s, x1 * s + x2 * c)
                } else {
                    (x1 * c + x2 * s, -x1 * s + x2 * c)
                };
                out[head_start + 2 * j] = y1;
                out[head_start + 2 * j + 1] = y2;
            }
        }
        Ok(out)
    }

    /// Encode every row of a matrix at positions `base..base + rows`.
    fn encode_rows(&self, m: &Matrix, base: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(0, m.cols());
        for i in 0..m.rows() {
            out.push_row(&self.encode(m.row(i), base + i)?)?;
        }
        Ok(out)
    }
}

/// Rotation work done by one kernel call, for instrumentation.
#[derive(Debug, Clone, Copy, Default)]
pub struct RopeActivity {
    /// Cached key rows that were rotary-encoded during the step.
    pub key_encodes: usize,
    /// Cached key rows that were rotary-decoded during the step.
    pub key_decodes: usize,
}

fn project(
    x: &Matrix,
    w: &Matrix,
    bias: Option<&Vec<f64>>,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    let out = x.matmul_counted(w, counter)?;
    match bias {
        Some(b) => out.add_row_bias(b),
        None => Ok(out),
    }
}

fn head_dim(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::HeadWidthMismatch {
            len: width,
            head_dim: heads,
        });
    }
    Ok(width / heads)
}

fn check_single_row(x: &Matrix, op: &'static str) -> Result<()> {
    if x.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape(),
            rhs: (1, x.cols()),
        });
    }
    Ok(())
}

fn append_cols(left: &Matrix, right: &Matrix) -> Matrix {
    if left.cols() == 0 {
        return right.clone();
    }
    Matrix::from_fn(left.rows(), left.cols() + right.cols(), |i, j| {
        if j < left.cols() {
            left.get(i, j)
        } else {
            right.get(i, j - left.cols())
        }
    })
}

/// Attention with encoded queries/keys and a separate value matrix; `q`,
/// `k_encoded`, and `v` all span the full concatenated width.
#[allow(clippy::too_many_arguments)]
fn attend_encoded(
    q_encoded: &Matrix,
    k_encoded: &Matrix,
    v: &Matrix,
    heads: usize,
    causal: bool,
    w_o: &Matrix,
    b_o: Option<&Vec<f64>>,
    ops: &mut StepOps,
) -> Result<(Matrix, Vec<Matrix>)> {
    let d_k = head_dim(q_encoded.cols(), heads)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = Matrix::zeros(q_encoded.rows(), 0);
    let mut all_probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q_i = q_encoded.col_slice(head * d_k, d_k);
        let k_i = k_encoded.col_slice(head * d_k, d_k);
        let v_i = v.col_slice(head * d_k, d_k);
        let mut scores = q_i.matmul_counted(&k_i.transposed(), &mut ops.mha)?;
        if causal {
            for i in 0..scores.rows() {
                for j in i + 1..scores.cols() {
                    scores.set(i, j, f64::NEG_INFINITY);
                }
            }
        }
        let mut probs = Matrix::zeros(0, scores.cols());
        for i in 0..scores.rows() {
            probs.push_row(&softmax_row(scores.row(i), scale)?)?;
        }
        let head_out = probs.matmul_counted(&v_i, &mut ops.mha)?;
        all_probs.push(probs);
        concat = append_cols(&concat, &head_out);
    }
    let y = project(&concat, w_o, b_o, &mut ops.projection)?;
    Ok((y, all_probs))
}

/// `V = (K_raw - b_k) W_KV + b_v` over whole matrices.
fn values_from_raw_keys(
    raw_keys: &Matrix,
    w_kv: &Matrix,
    b_k: Option<&Vec<f64>>,
    b_v: Option<&Vec<f64>>,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    let adjusted = match b_k {
        Some(b) => {
            let negated: Vec<f64> = b.iter().map(|x| -x).collect();
            raw_keys.add_row_bias(&negated)?
        }
        None => raw_keys.clone(),
    };
    let v = adjusted.matmul_counted(w_kv, counter)?;
    match b_v {
        Some(b) => v.add_row_bias(b),
        None => Ok(v),
    }
}

// ---------------------------------------------------------------------------
// rotary vanilla kernels (the oracle for the slim options)

/// Prompt phase of standard MHA with rotary encoding; the cache stores the
/// encoded keys, as an ordinary implementation would.
pub fn vanilla_prompt_rope(
    x: &Matrix,
    w: &LayerWeights,
    heads: usize,
    causal: bool,
    table: &RopeTable,
) -> Result<(AttnOutput, KVCache)> {
    let mut ops = StepOps::default();
    let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = project(x, &w.w_v, w.b_v.as_ref(), &mut ops.projection)?;
    let q_enc = table.encode_rows(&q, 0)?;
    let k_enc = table.encode_rows(&k, 0)?;
    let mut cache = KVCache::new(k.cols());
    for i in 0..k_enc.rows() {
        cache.push(k_enc.row(i), v.row(i))?;
    }
    let (y, probs) = attend_encoded(
        &q_enc,
        &k_enc,
        &v,
        heads,
        causal,
        &w.w_o,
        w.b_o.as_ref(),
        &mut ops,
    )?;
    Ok((AttnOutput { y, probs, ops }, cache))
}

/// One rotary generate step of standard MHA at the given position.
pub fn vanilla_generate_step_rope(
    x_n: &Matrix,
    w: &LayerWeights,
    heads: usize,
    cache: &mut KVCache,
    position: usize,
    table: &RopeTable,
) -> Result<AttnOutput> {
    check_single_row(x_n, "vanilla_generate_step_rope")?;
    if position != cache.len() {
        return Err(Error::PositionOutOfRange {
            position,
            max: cache.len(),
        });
    }
    let mut ops = StepOps::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = project(x_n, &w.w_v, w.b_v.as_ref(), &mut ops.projection)?;
    let q_enc = Matrix::from_vec(1, q.cols(), table.encode(q.row(0), position)?)?;
    let k_enc = table.encode(k.row(0), position)?;
    cache.push(&k_enc, v.row(0))?;
    let (y, probs) = attend_encoded(
        &q_enc,
        cache.keys(),
        cache.values(),
        heads,
        false,
        &w.w_o,
        w.b_o.as_ref(),
        &mut ops,
    )?;
    Ok(AttnOutput { y, probs, ops })
}

// ---------------------------------------------------------------------------
// rotary slim kernels

/// Prompt phase with a K-cache under rotary encoding. The cache's declared
/// storage decides whether raw or encoded keys are kept.
pub fn slim_prompt_rope(
    x: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    causal: bool,
    storage: KeyStorage,
    table: &RopeTable,
) -> Result<(AttnOutput, KCache)> {
    let mut ops = StepOps::default();
    let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k_raw = project(x, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = values_from_raw_keys(
        &k_raw,
        w_kv,
        w.b_k.as_ref(),
        w.b_v.as_ref(),
        &mut ops.projection,
    )?;
    let q_enc = table.encode_rows(&q, 0)?;
    let k_enc = table.encode_rows(&k_raw, 0)?;
    let mut cache = KCache::with_storage(k_raw.cols(), storage);
    let stored = match storage {
        KeyStorage::Raw => &k_raw,
        KeyStorage::RopeEncoded => &k_enc,
    };
    for i in 0..stored.rows() {
        cache.push(stored.row(i))?;
    }
    let (y, probs) = attend_encoded(
        &q_enc,
        &k_enc,
        &v,
        heads,
        causal,
        &w.w_o,
        w.b_o.as_ref(),
        &mut ops,
    )?;
    Ok((AttnOutput { y, probs, ops }, cache))
}

/// Rotary generate step over a cache of **raw** keys.
///
/// Every cached key is re-encoded at its position for the score pass (the
/// cost this option accepts), while the raw rows feed the value
/// reconstruction directly.
pub fn slim_generate_rope_option1(
    x_n: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    cache: &mut KCache,
    position: usize,
    table: &RopeTable,
) -> Result<(AttnOutput, RopeActivity)> {
    check_single_row(x_n, "slim_generate_rope_option1")?;
    cache.expect_storage(KeyStorage::Raw)?;
    if position != cache.len() {
        return Err(Error::PositionOutOfRange {
            position,
            max: cache.len(),
        });
    }
    let mut ops = StepOps::default();
    let mut activity = RopeActivity::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k_raw = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    cache.push(k_raw.row(0))?;
    let q_enc = Matrix::from_vec(1, q.cols(), table.encode(q.row(0), position)?)?;
    // rotate the whole cache for scoring: n encodes per step
    let k_enc = table.encode_rows(cache.keys(), 0)?;
    activity.key_encodes = k_enc.rows();
    let v = values_from_raw_keys(
        cache.keys(),
        w_kv,
        w.b_k.as_ref(),
        w.b_v.as_ref(),
        &mut ops.projection,
    )?;
    let (y, probs) = attend_encoded(
        &q_enc,
        &k_enc,
        &v,
        heads,
        false,
        &w.w_o,
        w.b_o.as_ref(),
        &mut ops,
    )?;
    Ok((AttnOutput { y, probs, ops }, activity))
}

/// Rotary generate step over a cache of **encoded** keys.
///
/// Scores run directly against the stored keys. For the value
/// reconstruction, only rows whose maximum head probability exceeds
/// `threshold` are rotary-decoded back to raw form; the rest are skipped,
/// which is exact at `threshold = 0` and a truncation otherwise (the same
/// semantics as [`crate::attention::sparse_weighted_sum`]).
#[allow(clippy::too_many_arguments)]
pub fn slim_generate_rope_option2(
    x_n: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    cache: &mut KCache,
    position: usize,
    threshold: f64,
    table: &RopeTable,
) -> Result<(AttnOutput, RopeActivity)> {
    check_single_row(x_n, "slim_generate_rope_option2")?;
    cache.expect_storage(KeyStorage::RopeEncoded)?;
    if position != cache.len() {
        return Err(Error::PositionOutOfRange {
            position,
            max: cache.len(),
        });
    }
    if threshold < 0.0 {
        return Err(Error::InvalidConfig(
            "sparsity threshold must be non-negative".to_string(),
        ));
    }
    let mut ops = StepOps::default();
    let mut activity = RopeActivity::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k_raw = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    cache.push(&table.encode(k_raw.row(0), position)?)?;
    let q_enc = Matrix::from_vec(1, q.cols(), table.encode(q.row(0), position)?)?;
    let keys_enc = cache.keys();
    let n = keys_enc.rows();
    let d_k = head_dim(q.cols(), heads)?;
    let scale = 1.0 / (d_k as f64).sqrt();

    // score pass per head, straight off the encoded cache
    let mut head_probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q_i = q_enc.col_slice(head * d_k, d_k);
        let k_i = keys_enc.col_slice(head * d_k, d_k);
        let scores = q_i.matmul_counted(&k_i.transposed(), &mut ops.mha)?;
        head_probs.push(softmax_row(scores.row(0), scale)?);
    }

    // decode only the rows some head still cares about
    let mut decoded_rows: Vec<Option<Vec<f64>>> = vec![None; n];
    for (j, slot) in decoded_rows.iter_mut().enumerate() {
        let survives = head_probs.iter().any(|p| p[j] > threshold);
        if survives {
            *slot = Some(table.decode(keys_enc.row(j), j)?);
            activity.key_decodes += 1;
        }
    }

    // sparse weighted sum of raw keys per head, then through W_KV_i
    let mut concat = Matrix::zeros(1, 0);
    let mut all_probs = Vec::with_capacity(heads);
    for (head, probs) in head_probs.iter().enumerate() {
        let mut summed = vec![0.0; keys_enc.cols()];
        let mut prob_mass = 0.0;
        let mut survivors = 0u64;
        for (j, &p) in probs.iter().enumerate() {
            if p <= threshold {
                continue;
            }
            let raw = decoded_rows[j].as_ref().expect("surviving row was decoded");
            for (o, r) in summed.iter_mut().zip(raw) {
                *o += p * r;
            }
            prob_mass += p;
            survivors += 1;
        }
        ops.mha.muls += survivors * keys_enc.cols() as u64;
        ops.mha.adds += survivors.saturating_sub(1) * keys_enc.cols() as u64;
        // dropped rows also drop their share of the bias terms
        if let Some(b_k) = &w.b_k {
            for (o, b) in summed.iter_mut().zip(b_k) {
                *o -= prob_mass * b;
            }
        }
        let summed = Matrix::from_vec(1, keys_enc.cols(), summed)?;
        let mut head_out =
            summed.matmul_counted(&w_kv.col_slice(head * d_k, d_k), &mut ops.projection)?;
        if let Some(b_v) = &w.b_v {
            let scaled: Vec<f64> = b_v[head * d_k..(head + 1) * d_k]
                .iter()
                .map(|b| b * prob_mass)
                .collect();
            head_out = head_out.add_row_bias(&scaled)?;
        }
        all_probs.push(Matrix::from_vec(1, n, probs.clone())?);
        concat = append_cols(&concat, &head_out);
    }
    let y = project(&concat, &w.w_o, w.b_o.as_ref(), &mut ops.projection)?;
    Ok((
        AttnOutput {
            y,
            probs: all_probs,
            ops,
        },
        activity,
    ))
}
