//! Toy encoder-decoder stack with interchangeable cache policies.
//!
//! The stack is the smallest architecture that exercises both self- and
//! cross-attention: pre-residual attention blocks and a two-matrix ReLU
//! FFN, no normalization. Inference runs in three phases — encoder prompt,
//! cross-projection, sequential decode — and the decode phase supports
//! four cache policies that all produce identical outputs:
//!
//! * **Baseline** — full KV-caches for self- and cross-attention.
//! * **Option 1** — V-caches eliminated on both paths; values come from
//!   `W_KV` at the cost of reading those matrices each token.
//! * **Option 2** — no cross cache at all: every token recomputes the
//!   cross keys and values from the resident encoder output (E-cache),
//!   reading the cross `W_K` and `W_V` instead. Works for any projection
//!   shape since nothing is inverted.
//! * **Hybrid** — layer 0 runs option 1 and its cross K-cache replaces
//!   the E-cache for the remaining layers, whose key/value weights are
//!   premultiplied by `W_K0^{-1}` offline. Saves one weight-matrix read
//!   per token versus option 2, which only matters for shallow stacks.
//!
//! Each decode session tracks the cache and weight values it actually
//! read, so the analytical cost model can be cross-checked against the
//! executed stack.

use crate::attention::{
    slim_generate_optimized, vanilla_generate_step, vanilla_prompt, KCache, KVCache, StepOps,
};
use crate::error::{Error, Result};
use crate::linalg::{softmax_row, Matrix, OpCounter};
use crate::model::{generate_synthetic_model, LayerWeights, ModelConfig};
use crate::rng::SplitMix64;
use crate::rope::{slim_generate_rope_option1, vanilla_generate_step_rope, RopeTable};
use crate::transform::compute_wkv;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncDecConfig {
    pub layers: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub h: usize,
    /// Unembedding width; counted in traffic reports when present (the toy
    /// stack itself carries no vocabulary head).
    pub vocab: Option<usize>,
}

impl EncDecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d == 0 || self.d_ffn == 0 || self.h == 0 {
            return Err(Error::InvalidConfig(
                "layers, d, d_ffn and h must all be at least 1".to_string(),
            ));
        }
        if !self.d.is_multiple_of(self.h) {
            return Err(Error::InvalidConfig(format!(
                "d = {} must be divisible by h = {}",
                self.d, self.h
            )));
        }
        Ok(())
    }
}

/// Two-matrix feed-forward block with ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Matrix,
    pub w2: Matrix,
}

impl Ffn {
    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut hidden = x.matmul(&self.w1)?;
        for i in 0..hidden.rows() {
            for j in 0..hidden.cols() {
                if hidden.get(i, j) < 0.0 {
                    hidden.set(i, j, 0.0);
                }
            }
        }
        hidden.matmul(&self.w2)
    }

    #[cfg(test)]
    fn zero(d: usize, d_ffn: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, d_ffn),
            w2: Matrix::zeros(d_ffn, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: LayerWeights,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: LayerWeights,
    pub cross_attn: LayerWeights,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncDecModel {
    pub config: EncDecConfig,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
}

/// Sample a synthetic encoder-decoder model; square projections, all key
/// projections invertible.
pub fn generate_synthetic_encdec(
    config: &EncDecConfig,
    seed: u64,
    with_bias: bool,
) -> Result<EncDecModel> {
    config.validate()?;
    let attn_config = ModelConfig::new(config.d, config.h, config.d / config.h, config.layers, 8)?;
    // independent streams per stack; reuses the per-layer invertibility check
    let enc_attn = generate_synthetic_model(&attn_config, seed ^ 0x656e63, with_bias)?;
    let dec_self = generate_synthetic_model(&attn_config, seed ^ 0x73656c66, with_bias)?;
    let dec_cross = generate_synthetic_model(&attn_config, seed ^ 0x63726f7373, with_bias)?;

    let ffn = |stack: u64, layer: usize| {
        let std1 = 1.0 / (config.d as f64).sqrt();
        let std2 = 1.0 / (config.d_ffn as f64).sqrt();
        let mut rng1 = SplitMix64::for_stream(seed, &[stack, layer as u64, 100]);
        let mut rng2 = SplitMix64::for_stream(seed, &[stack, layer as u64, 101]);
        Ffn {
            w1: Matrix::random_normal(config.d, config.d_ffn, std1, &mut rng1),
            w2: Matrix::random_normal(config.d_ffn, config.d, std2, &mut rng2),
        }
    };

    let encoder = enc_attn
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, attn)| EncoderLayer {
            attn,
            ffn: ffn(0, i),
        })
        .collect();
    let decoder = dec_self
        .layers
        .into_iter()
        .zip(dec_cross.layers)
        .enumerate()
        .map(|(i, (self_attn, cross_attn))| DecoderLayer {
            self_attn,
            cross_attn,
            ffn: ffn(1, i),
        })
        .collect();
    Ok(EncDecModel {
        config: config.clone(),
        encoder,
        decoder,
    })
}

/// Encoder output, shared by every decoder layer. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ECache {
    e: Matrix,
}

impl ECache {
    pub fn from_matrix(e: Matrix) -> Self {
        Self { e }
    }

    pub fn output(&self) -> &Matrix {
        &self.e
    }

    pub fn tokens(&self) -> usize {
        self.e.rows()
    }

    pub fn stored_values(&self) -> usize {
        self.e.rows() * self.e.cols()
    }
}

/// Prompt phase: run all input tokens through the encoder stack
/// (non-causal self-attention, then FFN, both with residuals).
pub fn run_encoder(input: &Matrix, model: &EncDecModel) -> Result<ECache> {
    if input.rows() == 0 {
        return Err(Error::EmptyInput("run_encoder"));
    }
    let mut x = input.clone();
    for layer in &model.encoder {
        let (attn, _) = vanilla_prompt(&x, &layer.attn, model.config.h, false)?;
        x = x.add(&attn.y)?;
        let ffn = layer.ffn.forward(&x)?;
        x = x.add(&ffn)?;
    }
    Ok(ECache::from_matrix(x))
}

/// Cross phase of the baseline policy: precompute `K = E W_K`, `V = E W_V`
/// for every decoder layer.
pub fn cross_phase_baseline(ecache: &ECache, model: &EncDecModel) -> Result<Vec<KVCache>> {
    let mut caches = Vec::with_capacity(model.decoder.len());
    for layer in &model.decoder {
        let mut counter = OpCounter::new();
        let k = project(
            ecache.output(),
            &layer.cross_attn.w_k,
            layer.cross_attn.b_k.as_ref(),
            &mut counter,
        )?;
        let v = project(
            ecache.output(),
            &layer.cross_attn.w_v,
            layer.cross_attn.b_v.as_ref(),
            &mut counter,
        )?;
        let mut cache = KVCache::new(k.cols());
        for i in 0..k.rows() {
            cache.push(k.row(i), v.row(i))?;
        }
        caches.push(cache);
    }
    Ok(caches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Baseline,
    Option1,
    Option2,
    Hybrid,
}

impl CachePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            CachePolicy::Baseline => "baseline",
            CachePolicy::Option1 => "option1",
            CachePolicy::Option2 => "option2",
            CachePolicy::Hybrid => "hybrid",
        }
    }
}

/// Positional encoding for decoder self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalMode {
    None,
    Rope { max_positions: usize },
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

/// Memory traffic of the most recent decode step, in values read.
#[derive(Debug, Clone, Copy, Default)]
struct StepTraffic {
    cache_values: u64,
    weight_values: u64,
}

/// One decoding session: per-layer caches for the chosen policy plus
/// instrumentation of what each step read.
pub struct DecodeSession<'m> {
    model: &'m EncDecModel,
    policy: CachePolicy,
    rope: Option<RopeTable>,
    self_kv: Vec<KVCache>,
    self_k: Vec<KCache>,
    self_wkv: Vec<Matrix>,
    cross_kv: Vec<KVCache>,
    cross_k: Vec<KCache>,
    cross_wkv: Vec<Matrix>,
    /// Option 2: the resident encoder output and its transpose.
    ecache: Option<(Matrix, Matrix)>,
    /// Hybrid: layer-0 cross keys (resident like an E-cache) and transpose.
    k0: Option<(Matrix, Matrix)>,
    /// Hybrid, layers >= 1: `W_K0^{-1} W_K_i` and `W_K0^{-1} W_V_i`.
    hybrid_wk: Vec<Matrix>,
    hybrid_wv: Vec<Matrix>,
    steps: usize,
    last: StepTraffic,
}

impl<'m> DecodeSession<'m> {
    /// Build the session state for a policy, running whatever cross phase
    /// the policy requires. Rotary self-attention is available for the
    /// policies that keep per-position keys; option 2 and hybrid rebuild
    /// keys from position-free sources and must refuse it.
    pub fn new(
        model: &'m EncDecModel,
        ecache: &ECache,
        policy: CachePolicy,
        positional: PositionalMode,
    ) -> Result<Self> {
        let config = &model.config;
        let d = config.d;
        let rope = match positional {
            PositionalMode::None => None,
            PositionalMode::Rope { max_positions } => {
                if matches!(policy, CachePolicy::Option2 | CachePolicy::Hybrid) {
                    return Err(Error::RopeUnsupported {
                        kernel: policy.as_str(),
                    });
                }
                Some(RopeTable::new(d / config.h, max_positions)?)
            }
        };
        let mut session = DecodeSession {
            model,
            policy,
            rope,
            self_kv: Vec::new(),
            self_k: Vec::new(),
            self_wkv: Vec::new(),
            cross_kv: Vec::new(),
            cross_k: Vec::new(),
            cross_wkv: Vec::new(),
            ecache: None,
            k0: None,
            hybrid_wk: Vec::new(),
            hybrid_wv: Vec::new(),
            steps: 0,
            last: StepTraffic::default(),
        };

        // self-attention caches
        for layer in &model.decoder {
            match policy {
                CachePolicy::Baseline => session.self_kv.push(KVCache::new(d)),
                _ => {
                    session.self_k.push(KCache::new(d));
                    session
                        .self_wkv
                        .push(compute_wkv(&layer.self_attn.w_k, &layer.self_attn.w_v)?);
                }
            }
        }

        // cross-attention state
        match policy {
            CachePolicy::Baseline => {
                session.cross_kv = cross_phase_baseline(ecache, model)?;
            }
            CachePolicy::Option1 => {
                for layer in &model.decoder {
                    let mut counter = OpCounter::new();
                    let k = project(
                        ecache.output(),
                        &layer.cross_attn.w_k,
                        layer.cross_attn.b_k.as_ref(),
                        &mut counter,
                    )?;
                    let mut cache = KCache::new(d);
                    for i in 0..k.rows() {
                        cache.push(k.row(i))?;
                    }
                    session.cross_k.push(cache);
                    session
                        .cross_wkv
                        .push(compute_wkv(&layer.cross_attn.w_k, &layer.cross_attn.w_v)?);
                }
            }
            CachePolicy::Option2 => {
                let e = ecache.output().clone();
                let e_t = e.transposed();
                session.ecache = Some((e, e_t));
            }
            CachePolicy::Hybrid => {
                let first = &model.decoder[0].cross_attn;
                let mut counter = OpCounter::new();
                let k0 = project(
                    ecache.output(),
                    &first.w_k,
                    first.b_k.as_ref(),
                    &mut counter,
                )?;
                let k0_t = k0.transposed();
                session.k0 = Some((k0, k0_t));
                session.cross_wkv.push(compute_wkv(&first.w_k, &first.w_v)?);
                let w_k0_inv = crate::linalg::invert_square(&first.w_k)?;
                for layer in model.decoder.iter().skip(1) {
                    session
                        .hybrid_wk
                        .push(w_k0_inv.matmul(&layer.cross_attn.w_k)?);
                    session
                        .hybrid_wv
                        .push(w_k0_inv.matmul(&layer.cross_attn.w_v)?);
                }
            }
        }
        Ok(session)
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Total values currently held in this session's caches (resident
    /// matrices like the E-cache excluded, matching how they are read).
    pub fn cache_values(&self) -> usize {
        let self_values: usize = self
            .self_kv
            .iter()
            .map(KVCache::stored_values)
            .sum::<usize>()
            + self.self_k.iter().map(KCache::stored_values).sum::<usize>();
        let cross_values: usize = self
            .cross_kv
            .iter()
            .map(KVCache::stored_values)
            .sum::<usize>()
            + self
                .cross_k
                .iter()
                .map(KCache::stored_values)
                .sum::<usize>();
        self_values + cross_values
    }

    /// Cross-cache values only (zero for option 2 and hybrid).
    pub fn cross_cache_values(&self) -> usize {
        self.cross_kv
            .iter()
            .map(KVCache::stored_values)
            .sum::<usize>()
            + self
                .cross_k
                .iter()
                .map(KCache::stored_values)
                .sum::<usize>()
    }

    /// Run one decode step; `y_t` is the `1 x d` token embedding.
    pub fn decode_step(&mut self, y_t: &Matrix) -> Result<Matrix> {
        if y_t.rows() != 1 || y_t.cols() != self.model.config.d {
            return Err(Error::ShapeMismatch {
                op: "decode_step",
                lhs: y_t.shape(),
                rhs: (1, self.model.config.d),
            });
        }
        let h = self.model.config.h;
        let d = self.model.config.d;
        let d_ffn = self.model.config.d_ffn;
        let position = self.steps;
        let mut traffic = StepTraffic::default();
        let mut x = y_t.clone();
        for (l, layer) in self.model.decoder.iter().enumerate() {
            // self-attention
            let self_out = match self.policy {
                CachePolicy::Baseline => match &self.rope {
                    None => vanilla_generate_step(&x, &layer.self_attn, h, &mut self.self_kv[l])?,
                    Some(table) => vanilla_generate_step_rope(
                        &x,
                        &layer.self_attn,
                        h,
                        &mut self.self_kv[l],
                        position,
                        table,
                    )?,
                },
                _ => match &self.rope {
                    None => slim_generate_optimized(
                        &x,
                        &layer.self_attn,
                        &self.self_wkv[l],
                        h,
                        &mut self.self_k[l],
                    )?,
                    Some(table) => {
                        let (out, _) = slim_generate_rope_option1(
                            &x,
                            &layer.self_attn,
                            &self.self_wkv[l],
                            h,
                            &mut self.self_k[l],
                            position,
                            table,
                        )?;
                        out
                    }
                },
            };
            let rows_read = (position + 1) * d;
            traffic.cache_values += match self.policy {
                CachePolicy::Baseline => 2 * rows_read as u64,
                _ => rows_read as u64,
            };
            traffic.weight_values += (4 * d * d) as u64; // W_Q, W_K, W_O plus W_V or W_KV
            x = x.add(&self_out.y)?;

            // cross-attention
            let cross_out = self.cross_attend(l, &x, &mut traffic)?;
            x = x.add(&cross_out)?;

            // feed-forward
            let ffn = layer.ffn.forward(&x)?;
            traffic.weight_values += (2 * d * d_ffn) as u64;
            x = x.add(&ffn)?;
        }
        self.steps += 1;
        self.last = traffic;
        Ok(x)
    }

    fn cross_attend(&self, l: usize, x: &Matrix, traffic: &mut StepTraffic) -> Result<Matrix> {
        let h = self.model.config.h;
        let d = self.model.config.d;
        let w = &self.model.decoder[l].cross_attn;
        let mut ops = StepOps::default();
        match self.policy {
            CachePolicy::Baseline => {
                let cache = &self.cross_kv[l];
                traffic.cache_values += cache.stored_values() as u64;
                traffic.weight_values += (2 * d * d) as u64; // W_Q, W_O
                let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
                attend_over(&q, cache.keys(), cache.values(), h, &w.w_o, w.b_o.as_ref())
            }
            CachePolicy::Option1 => {
                let cache = &self.cross_k[l];
                traffic.cache_values += cache.stored_values() as u64;
                traffic.weight_values += (3 * d * d) as u64; // W_Q, W_O, W_KV
                let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
                attend_keys_only(
                    &q,
                    cache.keys(),
                    &self.cross_wkv[l],
                    w.b_k.as_ref(),
                    w.b_v.as_ref(),
                    h,
                    &w.w_o,
                    w.b_o.as_ref(),
                )
            }
            CachePolicy::Option2 => {
                // E-cache is resident; no cache reads counted
                traffic.weight_values += (4 * d * d) as u64; // W_Q, W_O, W_K, W_V
                let (e, e_t) = self.ecache.as_ref().expect("option2 keeps the E-cache");
                attend_from_source(
                    x,
                    e,
                    e_t,
                    &w.w_q,
                    w.b_q.as_ref(),
                    &w.w_k,
                    w.b_k.as_ref(),
                    None,
                    &w.w_v,
                    w.b_v.as_ref(),
                    h,
                    &w.w_o,
                    w.b_o.as_ref(),
                )
            }
            CachePolicy::Hybrid => {
                let (k0, k0_t) = self.k0.as_ref().expect("hybrid keeps the layer-0 keys");
                let first_cross = &self.model.decoder[0].cross_attn;
                if l == 0 {
                    // option 1 over the resident layer-0 K-cache
                    traffic.weight_values += (3 * d * d) as u64; // W_Q, W_O, W_KV
                    let q = project(x, &w.w_q, w.b_q.as_ref(), &mut ops.projection)?;
                    attend_keys_only(
                        &q,
                        k0,
                        &self.cross_wkv[0],
                        w.b_k.as_ref(),
                        w.b_v.as_ref(),
                        h,
                        &w.w_o,
                        w.b_o.as_ref(),
                    )
                } else {
                    // recompute K and V from the layer-0 keys with the
                    // premultiplied weights
                    traffic.weight_values += (4 * d * d) as u64; // W_Q, W_O, W_K', W_V'
                    attend_from_source(
                        x,
                        k0,
                        k0_t,
                        &w.w_q,
                        w.b_q.as_ref(),
                        &self.hybrid_wk[l - 1],
                        w.b_k.as_ref(),
                        first_cross.b_k.as_ref(),
                        &self.hybrid_wv[l - 1],
                        w.b_v.as_ref(),
                        h,
                        &w.w_o,
                        w.b_o.as_ref(),
                    )
                }
            }
        }
    }

    /// Memory traffic of the most recent step.
    pub fn traffic_report(&self, batch: u64) -> Result<TrafficReport> {
        if self.steps == 0 {
            return Err(Error::NoDecodeSteps);
        }
        let mut weight_values = self.last.weight_values as f64;
        if let Some(vocab) = self.model.config.vocab {
            // the unembedding read; the toy stack has no vocabulary head,
            // so this term is taken from the config
            weight_values += (self.model.config.d * vocab) as f64;
        }
        Ok(TrafficReport {
            steps: self.steps,
            batch,
            cache_values: self.last.cache_values as f64,
            weight_values,
        })
    }
}

/// Per-token memory reads of the most recent decode step.
#[derive(Debug, Clone, Copy)]
pub struct TrafficReport {
    pub steps: usize,
    pub batch: u64,
    /// Cache values read; never amortized across the batch.
    pub cache_values: f64,
    /// Weight values read, including the configured unembedding.
    pub weight_values: f64,
}

impl TrafficReport {
    pub fn reads_per_token(&self) -> f64 {
        self.cache_values + self.weight_values / self.batch as f64
    }
}

// ---------------------------------------------------------------------------
// cross-attention helpers (single query row, fixed source rows)

/// Plain attention of one query row over explicit K/V matrices.
fn attend_over(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
    w_o: &Matrix,
    b_o: Option<&Vec<f64>>,
) -> Result<Matrix> {
    let d_k = q.cols() / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = vec![0.0; q.cols()];
    for head in 0..heads {
        let q_i = q.col_slice(head * d_k, d_k);
        let k_i = k.col_slice(head * d_k, d_k);
        let v_i = v.col_slice(head * d_k, d_k);
        let scores = q_i.matmul(&k_i.transposed())?;
        let probs = Matrix::from_vec(1, k.rows(), softmax_row(scores.row(0), scale)?)?;
        let head_out = probs.matmul(&v_i)?;
        concat[head * d_k..(head + 1) * d_k].copy_from_slice(head_out.row(0));
    }
    let mut counter = OpCounter::new();
    project(
        &Matrix::from_vec(1, concat.len(), concat)?,
        w_o,
        b_o,
        &mut counter,
    )
}

/// Attention of one query row over a K-cache, values rebuilt per head as
/// `(softmax(..) K - b_k) W_KV_i + b_v_i`.
#[allow(clippy::too_many_arguments)]
fn attend_keys_only(
    q: &Matrix,
    keys: &Matrix,
    w_kv: &Matrix,
    b_k: Option<&Vec<f64>>,
    b_v: Option<&Vec<f64>>,
    heads: usize,
    w_o: &Matrix,
    b_o: Option<&Vec<f64>>,
) -> Result<Matrix> {
    let d_k = q.cols() / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = vec![0.0; q.cols()];
    for head in 0..heads {
        let q_i = q.col_slice(head * d_k, d_k);
        let k_i = keys.col_slice(head * d_k, d_k);
        let scores = q_i.matmul(&k_i.transposed())?;
        let probs = Matrix::from_vec(1, keys.rows(), softmax_row(scores.row(0), scale)?)?;
        let mut summed = probs.matmul(keys)?;
        if let Some(b) = b_k {
            let negated: Vec<f64> = b.iter().map(|x| -x).collect();
            summed = summed.add_row_bias(&negated)?;
        }
        let mut head_out = summed.matmul(&w_kv.col_slice(head * d_k, d_k))?;
        if let Some(b) = b_v {
            head_out = head_out.add_row_bias(&b[head * d_k..(head + 1) * d_k])?;
        }
        concat[head * d_k..(head + 1) * d_k].copy_from_slice(head_out.row(0));
    }
    let mut counter = OpCounter::new();
    project(
        &Matrix::from_vec(1, concat.len(), concat)?,
        w_o,
        b_o,
        &mut counter,
    )
}

/// Attention of one query row where keys *and* values are recomputed from
/// a resident source matrix (the E-cache, or the layer-0 keys for the
/// hybrid policy). `source_bias` is the bias baked into the source rows,
/// to subtract before reprojection.
#[allow(clippy::too_many_arguments)]
fn attend_from_source(
    x: &Matrix,
    source: &Matrix,
    source_t: &Matrix,
    w_q: &Matrix,
    b_q: Option<&Vec<f64>>,
    w_k: &Matrix,
    b_k: Option<&Vec<f64>>,
    source_bias: Option<&Vec<f64>>,
    w_v: &Matrix,
    b_v: Option<&Vec<f64>>,
    heads: usize,
    w_o: &Matrix,
    b_o: Option<&Vec<f64>>,
) -> Result<Matrix> {
    let d = x.cols();
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut concat = vec![0.0; d];
    for head in 0..heads {
        let w_q_i = w_q.col_slice(head * d_k, d_k);
        let w_k_i = w_k.col_slice(head * d_k, d_k);
        let w_v_i = w_v.col_slice(head * d_k, d_k);
        let mut q_i = x.matmul(&w_q_i)?;
        if let Some(b) = b_q {
            q_i = q_i.add_row_bias(&b[head * d_k..(head + 1) * d_k])?;
        }
        let fused = q_i.matmul(&w_k_i.transposed())?;
        let mut scores = fused.matmul(source_t)?;
        // constant score offsets: the key bias, and the source bias pushed
        // through the fused term; both are softmax-invariant but kept for
        // exact score parity
        let mut constant = 0.0;
        if let Some(b) = b_k {
            constant += q_i
                .row(0)
                .iter()
                .zip(&b[head * d_k..(head + 1) * d_k])
                .map(|(a, c)| a * c)
                .sum::<f64>();
        }
        if let Some(sb) = source_bias {
            constant -= fused
                .row(0)
                .iter()
                .zip(sb.iter())
                .map(|(a, c)| a * c)
                .sum::<f64>();
        }
        if constant != 0.0 {
            scores = scores.add_row_bias(&vec![constant; scores.cols()])?;
        }
        let probs = Matrix::from_vec(1, source.rows(), softmax_row(scores.row(0), scale)?)?;
        let mut summed = probs.matmul(source)?;
        if let Some(sb) = source_bias {
            let negated: Vec<f64> = sb.iter().map(|v| -v).collect();
            summed = summed.add_row_bias(&negated)?;
        }
        let mut head_out = summed.matmul(&w_v_i)?;
        if let Some(b) = b_v {
            head_out = head_out.add_row_bias(&b[head * d_k..(head + 1) * d_k])?;
        }
        concat[head * d_k..(head + 1) * d_k].copy_from_slice(head_out.row(0));
    }
    let mut counter = OpCounter::new();
    project(&Matrix::from_vec(1, d, concat)?, w_o, b_o, &mut counter)
}
