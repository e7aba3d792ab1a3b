//! Closed-form cost model: cache sizes, per-token complexity, arithmetic
//! intensity, chip rooflines, and the encoder-decoder accounting.
//!
//! Conventions: one byte per parameter and per activation (the FP8 serving
//! assumption), so "values read" and "bytes read" coincide; per-batch runs
//! amortize parameter reads but never cache reads, because every sequence
//! owns its cache. A program is memory bound on a chip when its arithmetic
//! intensity is strictly below the chip's.

use crate::error::{Error, Result};

/// One roofline point: operations, memory reads, and their ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub ops: u64,
    pub reads: u64,
    pub intensity: f64,
}

impl CostRow {
    pub fn new(ops: u64, reads: u64) -> Self {
        Self {
            ops,
            reads,
            intensity: ops as f64 / reads as f64,
        }
    }
}

/// Attention variants covered by the per-token complexity table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenerateVariant {
    Vanilla,
    SlimUnoptimized,
    SlimOptimized,
}

/// KV-cache size in activations: `2 d layers context_len`.
pub fn kv_cache_activations(d: u64, layers: u64, context_len: u64) -> u64 {
    2 * d * layers * context_len
}

/// Per-token, per-layer generate-phase cost for batch size 1 with square
/// projections: `(projection, mha)` rows.
pub fn generate_step_cost(variant: GenerateVariant, d: u64, h: u64, n: u64) -> (CostRow, CostRow) {
    match variant {
        GenerateVariant::Vanilla => (
            CostRow::new(8 * d * d, 4 * d * d),
            CostRow::new(4 * n * d, 2 * n * d),
        ),
        GenerateVariant::SlimUnoptimized => (
            CostRow::new((2 * n + 6) * d * d, 4 * d * d),
            CostRow::new(4 * n * d, n * d),
        ),
        GenerateVariant::SlimOptimized => (
            CostRow::new(8 * d * d, 4 * d * d),
            CostRow::new(2 * n * d * (h + 1), n * d),
        ),
    }
}

/// Peak arithmetic intensity of the optimized K-cache decode: `2h + 2`.
pub fn slim_peak_intensity(h: u64) -> f64 {
    (2 * h + 2) as f64
}

/// Generate-phase intensity of the projections and FFNs at batch size B.
pub fn batch_projection_intensity(batch: u64) -> f64 {
    (2 * batch) as f64
}

/// Generate-phase intensity of the per-sequence attention work; the cache
/// is not shared across the batch, so this does not scale with B.
pub fn batch_attention_intensity(_batch: u64) -> f64 {
    2.0
}

/// A chip's compute and bandwidth envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct HardwareSpec {
    pub name: String,
    pub tops_int8: f64,
    pub bandwidth_gbs: f64,
}

impl HardwareSpec {
    pub fn new(name: &str, tops_int8: f64, bandwidth_gbs: f64) -> Self {
        Self {
            name: name.to_string(),
            tops_int8,
            bandwidth_gbs,
        }
    }
}

/// Ops per byte the chip can sustain: `TOPS * 1e12 / (GB/s * 1e9)`.
pub fn chip_intensity(spec: &HardwareSpec) -> f64 {
    spec.tops_int8 * 1e12 / (spec.bandwidth_gbs * 1e9)
}

/// Chip intensity rounded for display (half away from zero).
pub fn chip_intensity_rounded(spec: &HardwareSpec) -> u64 {
    chip_intensity(spec).round() as u64
}

/// Reference chips used in the intensity table.
pub fn reference_chips() -> Vec<HardwareSpec> {
    vec![
        HardwareSpec::new("Apple A18", 35.0, 60.0),
        HardwareSpec::new("Apple M4 Max", 38.0, 410.0),
        HardwareSpec::new("Google TPU v4", 275.0, 1_200.0),
        HardwareSpec::new("Google TPU v5p", 918.0, 2_765.0),
        HardwareSpec::new("NVIDIA H200", 1_980.0, 4_800.0),
        HardwareSpec::new("NVIDIA B200", 4_500.0, 8_000.0),
    ]
}

/// Memory bound means program intensity strictly below the chip's.
pub fn is_memory_bound(program_intensity: f64, spec: &HardwareSpec) -> bool {
    program_intensity < chip_intensity(spec)
}

/// Token-generation speedup on a memory-bound system when the cache
/// shrinks from `cache_before` to `cache_after` bytes per sequence.
///
/// Per generated token, each of the `B` sequences reads its own cache
/// while the parameter reads are shared: the time ratio is
/// `(params/B + cache_before) / (params/B + cache_after)`. Multiplying
/// through by `B` shows this equals the whole-batch ratio
/// `(params + B*cache_before) / (params + B*cache_after)`, so both
/// accounting styles give the same speedup.
pub fn memory_bound_speedup(
    params_bytes: f64,
    cache_before: f64,
    cache_after: f64,
    batch: u64,
) -> f64 {
    let shared = params_bytes / batch as f64;
    (shared + cache_before) / (shared + cache_after)
}

// ---------------------------------------------------------------------------
// encoder-decoder accounting

/// Shape of one encoder-decoder model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncDecShape {
    pub layers: u64,
    pub d: u64,
    pub d_ffn: u64,
}

/// The five speech-to-text model sizes used for the reference table.
pub fn whisper_shapes() -> Vec<(&'static str, EncDecShape)> {
    vec![
        (
            "tiny",
            EncDecShape {
                layers: 4,
                d: 384,
                d_ffn: 1536,
            },
        ),
        (
            "base",
            EncDecShape {
                layers: 6,
                d: 512,
                d_ffn: 2048,
            },
        ),
        (
            "small",
            EncDecShape {
                layers: 12,
                d: 768,
                d_ffn: 3072,
            },
        ),
        (
            "medium",
            EncDecShape {
                layers: 24,
                d: 1024,
                d_ffn: 4096,
            },
        ),
        (
            "large",
            EncDecShape {
                layers: 32,
                d: 1280,
                d_ffn: 5120,
            },
        ),
    ]
}

pub const WHISPER_ENCODER_TOKENS: u64 = 1500;
pub const WHISPER_DECODER_CONTEXT: u64 = 448;
pub const WHISPER_VOCAB: u64 = 51_865;

/// Cache policy column of the encoder-decoder table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncDecPolicy {
    Baseline,
    Option1,
    Option2,
}

/// Full per-model accounting: cache sizes, generate-phase parameters,
/// per-token memory reads, and speedups versus the baseline policy.
#[derive(Debug, Clone)]
pub struct EncDecCosts {
    pub shape: EncDecShape,
    pub encoder_tokens: u64,
    pub decoder_context: u64,
    pub vocab: u64,
    pub batch: u64,
    /// `p * d` activations held resident after the prompt phase.
    pub ecache: u64,
    /// `2 p d l` activations.
    pub cross_kv_cache: u64,
    /// `2 n d l` activations at full decoder context.
    pub self_kv_cache: u64,
    pub baseline_cache: u64,
    pub option1_cache: u64,
    pub option2_cache: u64,
    /// Baseline cache over option-2 cache.
    pub option2_savings: f64,
    pub baseline_params: u64,
    pub option1_params: u64,
    pub option2_params: u64,
    pub baseline_reads: f64,
    pub option1_reads: f64,
    pub option2_reads: f64,
    pub option1_speedup: f64,
    pub option2_speedup: f64,
}

/// Compute the encoder-decoder cost table for one shape and batch size.
pub fn enc_dec_costs(
    shape: EncDecShape,
    encoder_tokens: u64,
    decoder_context: u64,
    vocab: u64,
    batch: u64,
) -> EncDecCosts {
    let EncDecShape {
        layers: l,
        d,
        d_ffn,
    } = shape;
    let ecache = encoder_tokens * d;
    let cross_kv_cache = 2 * encoder_tokens * d * l;
    let self_kv_cache = 2 * decoder_context * d * l;
    let baseline_cache = cross_kv_cache + self_kv_cache;
    let option1_cache = baseline_cache / 2;
    let option2_cache = self_kv_cache / 2;

    // generate-phase parameters: unembedding plus, per layer, the four
    // self-attention matrices, the cross Q/O pair, and the FFN
    let baseline_params = d * vocab + l * (6 * d * d + 2 * d * d_ffn);
    let option1_params = baseline_params + d * d * l; // + cross W_KV
    let option2_params = baseline_params + 2 * d * d * l; // + cross W_K and W_V

    let reads = |cache: u64, params: u64| cache as f64 + params as f64 / batch as f64;
    let baseline_reads = reads(baseline_cache, baseline_params);
    let option1_reads = reads(option1_cache, option1_params);
    let option2_reads = reads(option2_cache, option2_params);

    EncDecCosts {
        shape,
        encoder_tokens,
        decoder_context,
        vocab,
        batch,
        ecache,
        cross_kv_cache,
        self_kv_cache,
        baseline_cache,
        option1_cache,
        option2_cache,
        option2_savings: baseline_cache as f64 / option2_cache as f64,
        baseline_params,
        option1_params,
        option2_params,
        baseline_reads,
        option1_reads,
        option2_reads,
        option1_speedup: baseline_reads / option1_reads,
        option2_speedup: baseline_reads / option2_reads,
    }
}

/// Per-token memory reads for one policy, exposed for cross-checks against
/// the instrumented decoder. `self_rows` is the current self-cache length
/// (the table uses the full decoder context).
pub fn enc_dec_reads_at(
    shape: EncDecShape,
    policy: EncDecPolicy,
    encoder_tokens: u64,
    self_rows: u64,
    vocab: u64,
    batch: u64,
) -> f64 {
    let EncDecShape {
        layers: l,
        d,
        d_ffn,
    } = shape;
    let cache = match policy {
        EncDecPolicy::Baseline => l * (2 * encoder_tokens * d + 2 * self_rows * d),
        EncDecPolicy::Option1 => l * (encoder_tokens * d + self_rows * d),
        // the encoder cache is resident, so only the self keys are read
        EncDecPolicy::Option2 => l * (self_rows * d),
    };
    let params = match policy {
        EncDecPolicy::Baseline => d * vocab + l * (6 * d * d + 2 * d * d_ffn),
        EncDecPolicy::Option1 => d * vocab + l * (7 * d * d + 2 * d * d_ffn),
        EncDecPolicy::Option2 => d * vocab + l * (8 * d * d + 2 * d * d_ffn),
    };
    cache as f64 + params as f64 / batch as f64
}

// ---------------------------------------------------------------------------
// report emission

/// One row of a cost report; value is preformatted so emission is
/// byte-stable.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub metric: String,
    pub value: String,
    pub note: String,
}

impl ReportRow {
    pub fn new(model: &str, metric: &str, value: String, note: &str) -> Self {
        Self {
            model: model.to_string(),
            metric: metric.to_string(),
            value,
            note: note.to_string(),
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Render rows as CSV with the fixed column order `model,metric,value,note`.
pub fn to_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("model,metric,value,note\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&row.model),
            csv_field(&row.metric),
            csv_field(&row.value),
            csv_field(&row.note)
        ));
    }
    out
}

/// Render rows as an aligned markdown table.
pub fn to_markdown(rows: &[ReportRow]) -> String {
    let headers = ["model", "metric", "value", "note"];
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        widths[0] = widths[0].max(row.model.len());
        widths[1] = widths[1].max(row.metric.len());
        widths[2] = widths[2].max(row.value.len());
        widths[3] = widths[3].max(row.note.len());
    }
    let line = |cells: [&str; 4]| {
        format!(
            "| {:w0$} | {:w1$} | {:w2$} | {:w3$} |\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    let mut out = line(headers);
    let dashes: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
    out.push_str(&line([
        dashes[0].as_str(),
        dashes[1].as_str(),
        dashes[2].as_str(),
        dashes[3].as_str(),
    ]));
    for row in rows {
        out.push_str(&line([&row.model, &row.metric, &row.value, &row.note]));
    }
    out
}

fn millions(v: f64) -> String {
    format!("{:.1}", v / 1e6)
}

/// The chip intensity table as report rows.
pub fn chip_report() -> Vec<ReportRow> {
    reference_chips()
        .iter()
        .map(|chip| {
            ReportRow::new(
                &chip.name,
                "arithmetic_intensity_ops_per_byte",
                chip_intensity_rounded(chip).to_string(),
                &format!("{} TOPS / {} GB/s", chip.tops_int8, chip.bandwidth_gbs),
            )
        })
        .collect()
}

/// The encoder-decoder table (cache sizes, params, reads, speedups) for
/// all reference shapes at one batch size.
pub fn whisper_report(batch: u64) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for (name, shape) in whisper_shapes() {
        let costs = enc_dec_costs(
            shape,
            WHISPER_ENCODER_TOKENS,
            WHISPER_DECODER_CONTEXT,
            WHISPER_VOCAB,
            batch,
        );
        let push = |rows: &mut Vec<ReportRow>, metric: &str, value: String, note: &str| {
            rows.push(ReportRow::new(name, metric, value, note));
        };
        push(
            &mut rows,
            "ecache_m",
            millions(costs.ecache as f64),
            "1500 * d",
        );
        push(
            &mut rows,
            "cross_kv_cache_m",
            millions(costs.cross_kv_cache as f64),
            "2 * 1500 * d * l",
        );
        push(
            &mut rows,
            "self_kv_cache_m",
            millions(costs.self_kv_cache as f64),
            "2 * 448 * d * l",
        );
        push(
            &mut rows,
            "baseline_cache_m",
            millions(costs.baseline_cache as f64),
            "cross KV + self KV",
        );
        push(
            &mut rows,
            "option1_cache_m",
            millions(costs.option1_cache as f64),
            "half of baseline",
        );
        push(
            &mut rows,
            "option2_cache_m",
            millions(costs.option2_cache as f64),
            "no cross KV + half of self KV",
        );
        push(
            &mut rows,
            "option2_savings_x",
            format!("{:.1}", costs.option2_savings),
            "cache savings vs baseline",
        );
        push(
            &mut rows,
            "baseline_params_m",
            millions(costs.baseline_params as f64),
            "d*vocab + l*(6d^2 + 2d*d_ffn)",
        );
        push(
            &mut rows,
            "option1_params_m",
            millions(costs.option1_params as f64),
            "baseline + cross K (d^2*l)",
        );
        push(
            &mut rows,
            "option2_params_m",
            millions(costs.option2_params as f64),
            "baseline + cross KV (2d^2*l)",
        );
        let batch_note = format!("cache + params/{batch}");
        push(
            &mut rows,
            "baseline_reads_m",
            millions(costs.baseline_reads),
            &batch_note,
        );
        push(
            &mut rows,
            "option1_reads_m",
            millions(costs.option1_reads),
            &batch_note,
        );
        push(
            &mut rows,
            "option2_reads_m",
            millions(costs.option2_reads),
            &batch_note,
        );
        push(
            &mut rows,
            "option1_speedup_x",
            format!("{:.2}", costs.option1_speedup),
            "reads vs baseline",
        );
        push(
            &mut rows,
            "option2_speedup_x",
            format!("{:.2}", costs.option2_speedup),
            "reads vs baseline",
        );
    }
    rows
}

/// Human-scale rendering of an activation count: `6.0M`, `25.8B`.
pub fn humanize_count(count: u64) -> String {
    let v = count as f64;
    if v >= 1e9 {
        format!("{:.1}B", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.1}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{count}")
    }
}

/// Cache-size rows (`2 d layers ctx`) for a list of `(name, d, layers, ctx)`.
pub fn cache_table_report(models: &[(String, u64, u64, u64)]) -> Vec<ReportRow> {
    models
        .iter()
        .map(|(name, d, layers, ctx)| {
            let activations = kv_cache_activations(*d, *layers, *ctx);
            ReportRow::new(
                name,
                "kv_cache_activations",
                activations.to_string(),
                &format!(
                    "2 * {d} * {layers} * {ctx} = {}",
                    humanize_count(activations)
                ),
            )
        })
        .collect()
}

/// Builtin rows for the cache-size table spot checks.
pub fn reference_cache_models() -> Vec<(String, u64, u64, u64)> {
    vec![
        ("CodeLlama-7B".to_string(), 4096, 32, 16384),
        ("Phi-3-mini-128k".to_string(), 3072, 32, 131072),
        ("Evo-1-131k".to_string(), 4096, 32, 131072),
        (
            "Whisper-tiny".to_string(),
            384,
            4,
            WHISPER_ENCODER_TOKENS + WHISPER_DECODER_CONTEXT,
        ),
    ]
}

/// Parse `key=value,key=value` config strings for the cache table.
pub fn parse_cache_config(config: &str) -> Result<(String, u64, u64, u64)> {
    let mut d = None;
    let mut layers = None;
    let mut ctx = None;
    let mut name = "custom".to_string();
    for pair in config.split(',') {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("expected key=value, got {pair:?}")))?;
        match key.trim() {
            "d" => d = Some(parse_count(value)?),
            "layers" => layers = Some(parse_count(value)?),
            "ctx" | "context" => ctx = Some(parse_count(value)?),
            "name" => name = value.trim().to_string(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key {other:?} (expected d, layers, ctx, name)"
                )))
            }
        }
    }
    match (d, layers, ctx) {
        (Some(d), Some(layers), Some(ctx)) => Ok((name, d, layers, ctx)),
        _ => Err(Error::InvalidConfig(
            "config needs d=, layers=, and ctx=".to_string(),
        )),
    }
}

fn parse_count(value: &str) -> Result<u64> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("not a count: {value:?}")))
}
