//! Attention kernels for the prompt and generate phases.
//!
//! All variants compute the same function; they differ in what they cache
//! and in how the weighted value sum is associated:
//!
//! * [`vanilla_prompt`] / [`vanilla_generate_step`] — the standard scheme
//!   with a full KV-cache;
//! * [`slim_prompt`] / [`slim_generate_unoptimized`] — K-cache only,
//!   values rebuilt as `V = K W_KV` before the weighted sum;
//! * [`slim_generate_optimized`] — K-cache only, per head computes
//!   `(softmax(..) K) W_KV_i`, which moves the large product off the
//!   sequence-length axis;
//! * [`xcache_generate_step`] — caches pre-projection activations, for
//!   wide (`e > d`) projections; keys and values are both recomputed;
//! * [`vcache_generate_step`] — the mirrored scheme, V-cache only with
//!   keys rebuilt as `K = V W_VK`.
//!
//! Kernels handle one layer and one sequence. Heads run in a fixed order
//! and every sum accumulates in ascending index order, so results are
//! reproducible bit for bit. Projection biases are supported everywhere:
//! the slim paths subtract the key bias before the value reconstruction,
//! which keeps them exact without requiring the offline bias folding.

use crate::error::{Error, Result};
use crate::linalg::{softmax_row, Matrix, OpCounter};
use crate::model::LayerWeights;

// ---------------------------------------------------------------------------
// caches

/// Standard cache: one K row and one V row per token.
#[derive(Debug, Clone)]
pub struct KVCache {
    k: Matrix,
    v: Matrix,
}

impl KVCache {
    pub fn new(width: usize) -> Self {
        Self {
            k: Matrix::zeros(0, width),
            v: Matrix::zeros(0, width),
        }
    }

    pub fn push(&mut self, k_row: &[f64], v_row: &[f64]) -> Result<()> {
        self.k.push_row(k_row)?;
        self.v.push_row(v_row)
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Matrix {
        &self.k
    }

    pub fn values(&self) -> &Matrix {
        &self.v
    }

    /// Number of stored scalars (multiply by the element size for bytes).
    pub fn stored_values(&self) -> usize {
        self.k.rows() * self.k.cols() + self.v.rows() * self.v.cols()
    }
}

/// Whether a K-cache holds raw keys or rotary-encoded keys. The two must
/// never mix within one cache.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyStorage {
    Raw,
    RopeEncoded,
}

impl KeyStorage {
    pub fn as_str(self) -> &'static str {
        match self {
            KeyStorage::Raw => "raw",
            KeyStorage::RopeEncoded => "rope-encoded",
        }
    }
}

/// Key-only cache; half the footprint of [`KVCache`].
#[derive(Debug, Clone)]
pub struct KCache {
    k: Matrix,
    storage: KeyStorage,
}

impl KCache {
    pub fn new(width: usize) -> Self {
        Self::with_storage(width, KeyStorage::Raw)
    }

    pub fn with_storage(width: usize, storage: KeyStorage) -> Self {
        Self {
            k: Matrix::zeros(0, width),
            storage,
        }
    }

    pub fn push(&mut self, k_row: &[f64]) -> Result<()> {
        self.k.push_row(k_row)
    }

    pub fn len(&self) -> usize {
        self.k.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Matrix {
        &self.k
    }

    pub fn storage(&self) -> KeyStorage {
        self.storage
    }

    pub fn stored_values(&self) -> usize {
        self.k.rows() * self.k.cols()
    }

    pub(crate) fn expect_storage(&self, expected: KeyStorage) -> Result<()> {
        if self.storage != expected {
            return Err(Error::CacheModeMismatch {
                expected: expected.as_str(),
                found: self.storage.as_str(),
            });
        }
        Ok(())
    }
}

/// Pre-projection activation cache, width `d` rather than `e`.
#[derive(Debug, Clone)]
pub struct XCache {
    x: Matrix,
}

impl XCache {
    pub fn new(width: usize) -> Self {
        Self {
            x: Matrix::zeros(0, width),
        }
    }

    pub fn push(&mut self, x_row: &[f64]) -> Result<()> {
        self.x.push_row(x_row)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn activations(&self) -> &Matrix {
        &self.x
    }

    pub fn stored_values(&self) -> usize {
        self.x.rows() * self.x.cols()
    }
}

/// Value-only cache for the mirrored scheme.
#[derive(Debug, Clone)]
pub struct VCache {
    v: Matrix,
}

impl VCache {
    pub fn new(width: usize) -> Self {
        Self {
            v: Matrix::zeros(0, width),
        }
    }

    pub fn push(&mut self, v_row: &[f64]) -> Result<()> {
        self.v.push_row(v_row)
    }

    pub fn len(&self) -> usize {
        self.v.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Matrix {
        &self.v
    }

    pub fn stored_values(&self) -> usize {
        self.v.rows() * self.v.cols()
    }
}

// ---------------------------------------------------------------------------
// outputs and counters

/// Operation counts of one kernel invocation, split the way the complexity
/// tables split them: projections (weight-matrix products, including the
/// `W_KV` product) versus MHA (softmax arguments and weighted sums).
/// `fused_query_key` holds the per-token `x W_Q_i W_K_i^T` term that only
/// the X-cache path has. Bias additions and the softmax itself are not
/// counted, matching the usual accounting.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOps {
    pub projection: OpCounter,
    pub mha: OpCounter,
    pub fused_query_key: OpCounter,
}

impl StepOps {
    pub fn total_ops(&self) -> u64 {
        self.projection.ops() + self.mha.ops() + self.fused_query_key.ops()
    }
}

/// Result of one kernel invocation.
#[derive(Debug, Clone)]
pub struct AttnOutput {
    /// `n x d` for prompt kernels, `1 x d` for generate kernels.
    pub y: Matrix,
    /// Attention probabilities per head, for inspection; each row sums to 1.
    pub probs: Vec<Matrix>,
    pub ops: StepOps,
}

// ---------------------------------------------------------------------------
// shared pieces

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

fn softmax_rows(scores: &Matrix, scale: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(0, scores.cols());
    for i in 0..scores.rows() {
        out.push_row(&softmax_row(scores.row(i), scale)?)?;
    }
    Ok(out)
}

fn mask_causal(scores: &mut Matrix) {
    for i in 0..scores.rows() {
        for j in i + 1..scores.cols() {
            scores.set(i, j, f64::NEG_INFINITY);
        }
    }
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

/// Scores, softmax, and weighted value sum for all heads, followed by the
/// output projection. Shared by the vanilla and unoptimized slim paths;
/// `q` may hold one row (generate) or `n` rows (prompt).
#[allow(clippy::too_many_arguments)]
fn multi_head_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    causal: bool,
    w_o: &Matrix,
    b_o: Option<&Vec<f64>>,
    ops: &mut StepOps,
) -> Result<(Matrix, Vec<Matrix>)> {
    let d_k = head_dim(q.cols(), heads)?;
    if causal && q.rows() != k.rows() {
        return Err(Error::ShapeMismatch {
            op: "causal mask needs aligned query/key rows",
            lhs: q.shape(),
            rhs: k.shape(),
        });
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut all_probs = Vec::with_capacity(heads);
    let mut concat = Matrix::zeros(q.rows(), 0);
    for head in 0..heads {
        let q_i = q.col_slice(head * d_k, d_k);
        let k_i = k.col_slice(head * d_k, d_k);
        let v_i = v.col_slice(head * d_k, d_k);
        let mut scores = q_i.matmul_counted(&k_i.transposed(), &mut ops.mha)?;
        if causal {
            mask_causal(&mut scores);
        }
        let probs = softmax_rows(&scores, scale)?;
        let head_out = probs.matmul_counted(&v_i, &mut ops.mha)?;
        all_probs.push(probs);
        concat = append_cols(&concat, &head_out);
    }
    let y = project(&concat, w_o, b_o, &mut ops.projection)?;
    Ok((y, all_probs))
}

/// `V = (K - b_k) W_KV + b_v`, the value reconstruction shared by the
/// K-cache kernels. Without biases this is just `K W_KV`.
fn reconstruct_values(
    keys: &Matrix,
    w_kv: &Matrix,
    b_k: Option<&Vec<f64>>,
    b_v: Option<&Vec<f64>>,
    counter: &mut OpCounter,
) -> Result<Matrix> {
    let adjusted = match b_k {
        Some(b) => {
            let negated: Vec<f64> = b.iter().map(|x| -x).collect();
            keys.add_row_bias(&negated)?
        }
        None => keys.clone(),
    };
    let v = adjusted.matmul_counted(w_kv, counter)?;
    match b_v {
        Some(b) => v.add_row_bias(b),
        None => Ok(v),
    }
}

// ---------------------------------------------------------------------------
// vanilla kernels

/// Prompt phase of standard MHA: processes all `n` tokens at once and fills
/// the KV-cache.
pub fn vanilla_prompt(
    x: &Matrix,
    w: &LayerWeights,
    heads: usize,
    causal: bool,
) -> Result<(AttnOutput, KVCache)> {
    let mut ops = StepOps::default();
    let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = project(x, &w.w_v, w.b_v.as_ref(), &mut ops.projection)?;
    let mut cache = KVCache::new(k.cols());
    for i in 0..k.rows() {
        cache.push(k.row(i), v.row(i))?;
    }
    let (y, probs) =
        multi_head_attention(&q, &k, &v, heads, causal, &w.w_o, w.b_o.as_ref(), &mut ops)?;
    Ok((AttnOutput { y, probs, ops }, cache))
}

/// One generate step of standard MHA: appends the new K/V rows and attends
/// over the whole cache.
pub fn vanilla_generate_step(
    x_n: &Matrix,
    w: &LayerWeights,
    heads: usize,
    cache: &mut KVCache,
) -> Result<AttnOutput> {
    check_single_row(x_n, "vanilla_generate_step")?;
    let mut ops = StepOps::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = project(x_n, &w.w_v, w.b_v.as_ref(), &mut ops.projection)?;
    cache.push(k.row(0), v.row(0))?;
    let (y, probs) = multi_head_attention(
        &q,
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
// slim kernels (K-cache)

/// Prompt phase with a K-cache only. Values are rebuilt from the keys, so
/// the output is identical to [`vanilla_prompt`] while the cache stores
/// half as much.
pub fn slim_prompt(
    x: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    causal: bool,
) -> Result<(AttnOutput, KCache)> {
    let mut ops = StepOps::default();
    let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    let v = reconstruct_values(
        &k,
        w_kv,
        w.b_k.as_ref(),
        w.b_v.as_ref(),
        &mut ops.projection,
    )?;
    let mut cache = KCache::new(k.cols());
    for i in 0..k.rows() {
        cache.push(k.row(i))?;
    }
    let (y, probs) =
        multi_head_attention(&q, &k, &v, heads, causal, &w.w_o, w.b_o.as_ref(), &mut ops)?;
    Ok((AttnOutput { y, probs, ops }, cache))
}

/// Generate step that first materializes `V = K W_KV` for the whole cache
/// and then proceeds exactly like the vanilla step.
pub fn slim_generate_unoptimized(
    x_n: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    cache: &mut KCache,
) -> Result<AttnOutput> {
    check_single_row(x_n, "slim_generate_unoptimized")?;
    cache.expect_storage(KeyStorage::Raw)?;
    let mut ops = StepOps::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    cache.push(k.row(0))?;
    let v = reconstruct_values(
        cache.keys(),
        w_kv,
        w.b_k.as_ref(),
        w.b_v.as_ref(),
        &mut ops.projection,
    )?;
    let (y, probs) = multi_head_attention(
        &q,
        cache.keys(),
        &v,
        heads,
        false,
        &w.w_o,
        w.b_o.as_ref(),
        &mut ops,
    )?;
    Ok(AttnOutput { y, probs, ops })
}

/// Generate step using the associativity of the weighted sum: per head,
/// `softmax(..) K` first (a sequence-length product over the full cache
/// width), then one small product with `W_KV_i`.
pub fn slim_generate_optimized(
    x_n: &Matrix,
    w: &LayerWeights,
    w_kv: &Matrix,
    heads: usize,
    cache: &mut KCache,
) -> Result<AttnOutput> {
    check_single_row(x_n, "slim_generate_optimized")?;
    cache.expect_storage(KeyStorage::Raw)?;
    let mut ops = StepOps::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let k = project(x_n, &w.w_k, w.b_k.as_ref(), &mut ops.projection)?;
    cache.push(k.row(0))?;
    let keys = cache.keys();
    let d_k = head_dim(q.cols(), heads)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = Matrix::zeros(1, 0);
    let mut all_probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let q_i = q.col_slice(head * d_k, d_k);
        let k_i = keys.col_slice(head * d_k, d_k);
        let scores = q_i.matmul_counted(&k_i.transposed(), &mut ops.mha)?;
        let probs = Matrix::from_vec(1, keys.rows(), softmax_row(scores.row(0), scale)?)?;
        // weighted sum over the full-width keys, then through W_KV_i
        let mut summed = probs.matmul_counted(keys, &mut ops.mha)?;
        if let Some(b_k) = &w.b_k {
            let negated: Vec<f64> = b_k.iter().map(|x| -x).collect();
            summed = summed.add_row_bias(&negated)?;
        }
        let mut head_out =
            summed.matmul_counted(&w_kv.col_slice(head * d_k, d_k), &mut ops.projection)?;
        if let Some(b_v) = &w.b_v {
            head_out = head_out.add_row_bias(&b_v[head * d_k..(head + 1) * d_k])?;
        }
        all_probs.push(probs);
        concat = append_cols(&concat, &head_out);
    }
    let y = project(&concat, &w.w_o, w.b_o.as_ref(), &mut ops.projection)?;
    Ok(AttnOutput {
        y,
        probs: all_probs,
        ops,
    })
}

// ---------------------------------------------------------------------------
// X-cache kernel

/// Generate step over a cache of pre-projection activations.
///
/// Per head the score row is `(x_n W_Q_i + b) W_K_i^T X^T`: the bracketed
/// term is computed once per token, independent of the sequence length.
/// Values are likewise rebuilt as `(softmax(..) X) W_V_i`. Works for any
/// `e >= d` and needs no matrix inversion, but supports no rotary encoding
/// (the per-position rotation would sit between the two fused factors).
pub fn xcache_generate_step(
    x_n: &Matrix,
    w: &LayerWeights,
    heads: usize,
    cache: &mut XCache,
) -> Result<AttnOutput> {
    check_single_row(x_n, "xcache_generate_step")?;
    let mut ops = StepOps::default();
    cache.push(x_n.row(0))?;
    let x_all = cache.activations();
    let x_all_t = x_all.transposed();
    let e = w.w_q.cols();
    let d_k = head_dim(e, heads)?;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = Matrix::zeros(1, 0);
    let mut all_probs = Vec::with_capacity(heads);
    for head in 0..heads {
        let w_q_i = w.w_q.col_slice(head * d_k, d_k);
        let w_k_i = w.w_k.col_slice(head * d_k, d_k);
        let w_v_i = w.w_v.col_slice(head * d_k, d_k);
        let mut q_i = x_n.matmul_counted(&w_q_i, &mut ops.fused_query_key)?;
        if let Some(b_q) = &w.b_q {
            q_i = q_i.add_row_bias(&b_q[head * d_k..(head + 1) * d_k])?;
        }
        let fused = q_i.matmul_counted(&w_k_i.transposed(), &mut ops.fused_query_key)?;
        let mut scores = fused.matmul_counted(&x_all_t, &mut ops.mha)?;
        if let Some(b_k) = &w.b_k {
            // the key bias adds the same constant to every score of this query
            let constant: f64 = q_i
                .row(0)
                .iter()
                .zip(&b_k[head * d_k..(head + 1) * d_k])
                .map(|(a, b)| a * b)
                .sum();
            scores = scores.add_row_bias(&vec![constant; scores.cols()])?;
        }
        let probs = Matrix::from_vec(1, x_all.rows(), softmax_row(scores.row(0), scale)?)?;
        let summed = probs.matmul_counted(x_all, &mut ops.mha)?;
        let mut head_out = summed.matmul_counted(&w_v_i, &mut ops.projection)?;
        if let Some(b_v) = &w.b_v {
            head_out = head_out.add_row_bias(&b_v[head * d_k..(head + 1) * d_k])?;
        }
        all_probs.push(probs);
        concat = append_cols(&concat, &head_out);
    }
    let y = project(&concat, &w.w_o, w.b_o.as_ref(), &mut ops.projection)?;
    Ok(AttnOutput {
        y,
        probs: all_probs,
        ops,
    })
}

// ---------------------------------------------------------------------------
// V-cache kernel

/// Generate step over a value-only cache; keys are rebuilt as
/// `K = (V - b_v) W_VK + b_k`. No rotary support: the rotation would have
/// to be applied to keys that are never stored.
pub fn vcache_generate_step(
    x_n: &Matrix,
    w: &LayerWeights,
    w_vk: &Matrix,
    heads: usize,
    cache: &mut VCache,
) -> Result<AttnOutput> {
    check_single_row(x_n, "vcache_generate_step")?;
    let mut ops = StepOps::default();
    let q = project(x_n, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
    let v = project(x_n, &w.w_v, w.b_v.as_ref(), &mut ops.projection)?;
    cache.push(v.row(0))?;
    // mirror of the value reconstruction: keys from values
    let adjusted = match &w.b_v {
        Some(b) => {
            let negated: Vec<f64> = b.iter().map(|x| -x).collect();
            cache.values().add_row_bias(&negated)?
        }
        None => cache.values().clone(),
    };
    let mut keys = adjusted.matmul_counted(w_vk, &mut ops.projection)?;
    if let Some(b_k) = &w.b_k {
        keys = keys.add_row_bias(b_k)?;
    }
    let (y, probs) = multi_head_attention(
        &q,
        &keys,
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
// sparsity

/// Weighted sum of rows that skips entries whose probability is at or
/// below `threshold`.
///
/// Skipped rows are neither read nor accumulated, so with sparsity `S`
/// (fraction skipped) the accumulation cost drops by roughly `1/(1-S)`.
/// Surviving probabilities are deliberately not renormalized; the caller
/// sees the plain truncated sum. Returns the sum and the skipped count.
pub fn sparse_weighted_sum(
    probs: &[f64],
    rows: &Matrix,
    threshold: f64,
    counter: &mut OpCounter,
) -> Result<(Vec<f64>, usize)> {
    if probs.len() != rows.rows() {
        return Err(Error::ShapeMismatch {
            op: "sparse_weighted_sum",
            lhs: (1, probs.len()),
            rhs: rows.shape(),
        });
    }
    if threshold < 0.0 {
        return Err(Error::InvalidConfig(
            "sparsity threshold must be non-negative".to_string(),
        ));
    }
    let width = rows.cols();
    let mut out = vec![0.0; width];
    let mut survivors = 0u64;
    for (j, &p) in probs.iter().enumerate() {
        if p <= threshold {
            continue;
        }
        survivors += 1;
        for (o, r) in out.iter_mut().zip(rows.row(j)) {
            *o += p * r;
        }
    }
    counter.muls += survivors * width as u64;
    counter.adds += survivors.saturating_sub(1) * width as u64;
    Ok((out, probs.len() - survivors as usize))
}
