//! Command-line front end: synthesize models, run the offline weight
//! transform, verify reconstructions, compare kernel variants, and emit
//! the analytical cost tables.
//!
//! Exit codes: 0 success, 1 verification or runtime failure, 2 usage
//! error. All commands are deterministic given their flags.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use slim_attention::attention::{
    slim_generate_optimized, slim_generate_unoptimized, slim_prompt, vanilla_generate_step,
    vanilla_prompt, vcache_generate_step, xcache_generate_step, KCache, KVCache, KeyStorage,
    VCache, XCache,
};
use slim_attention::cost;
use slim_attention::io::{load_model, load_slim_model, save_model, save_slim_model};
use slim_attention::linalg::{max_abs_diff, Matrix};
use slim_attention::model::{generate_synthetic_model, Model, ModelConfig, SlimMode};
use slim_attention::rng::SplitMix64;
use slim_attention::rope::{
    slim_generate_rope_option1, slim_generate_rope_option2, slim_prompt_rope,
    vanilla_generate_step_rope, vanilla_prompt_rope, RopeTable,
};
use slim_attention::transform::{
    compute_wkv, compute_wkv_rect, compute_wvk, transform_model, transformed_weights_of,
    verify_value_reconstruction, CONDITION_WARN_THRESHOLD,
};

#[derive(Parser)]
#[command(
    name = "slimattn",
    version,
    about = "Lossless KV-cache compression toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model and write it as manifest + blob
    Synth {
        /// Embedding dimension
        #[arg(long)]
        d: usize,
        /// Number of attention heads
        #[arg(long)]
        heads: usize,
        /// Per-head dimension (projection width becomes heads * dk)
        #[arg(long)]
        dk: usize,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Sample projection biases as well
        #[arg(long)]
        bias: bool,
        #[arg(long, default_value_t = 2048)]
        max_context: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace the value (or key) projection by its offline transform
    Transform {
        /// Input model directory
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Fold the value bias into the output bias and drop the key bias
        #[arg(long)]
        fold_bias: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check that the transformed weights reconstruct the originals
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        transformed: PathBuf,
    },
    /// Run several kernel variants on one model and compare outputs
    Equivalence {
        #[arg(long)]
        model: PathBuf,
        /// "all" or a comma list of vanilla, slim-unopt, slim-opt, xcache, vcache
        #[arg(long, default_value = "all")]
        variants: String,
        /// Prompt length and number of generate steps
        #[arg(long, default_value_t = 16)]
        tokens: usize,
        /// Seed for the random token stream
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Use rotary position encoding (slim variants run the raw-key and
        /// encoded-key rotary strategies)
        #[arg(long)]
        rope: bool,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Emit the analytical cost tables
    CostReport {
        #[arg(long, value_enum)]
        preset: PresetArg,
        /// For the "tables" preset: d=..,layers=..,ctx=..[,name=..]
        #[arg(long)]
        config: Option<String>,
        #[arg(long, default_value_t = 1)]
        batch: u64,
        #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
        format: FormatArg,
        /// Write to a file instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Kv,
    Vk,
    RectKv,
}

impl From<ModeArg> for SlimMode {
    fn from(mode: ModeArg) -> Self {
        match mode {
            ModeArg::Kv => SlimMode::Kv,
            ModeArg::Vk => SlimMode::Vk,
            ModeArg::RectKv => SlimMode::RectKv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum PresetArg {
    /// Encoder-decoder cache/params/reads/speedup table
    Whisper,
    /// KV-cache sizes for reference models or a custom config
    Tables,
    /// Arithmetic intensity of reference chips
    Chips,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum FormatArg {
    Csv,
    Md,
}

enum CliError {
    Usage(String),
    Failure(String),
}

impl From<slim_attention::Error> for CliError {
    fn from(e: slim_attention::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Failure(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            d,
            heads,
            dk,
            layers,
            seed,
            bias,
            max_context,
            out,
        } => cmd_synth(d, heads, dk, layers, seed, bias, max_context, out),
        Command::Transform {
            model,
            mode,
            fold_bias,
            out,
        } => cmd_transform(model, mode.into(), fold_bias, out),
        Command::Verify { model, transformed } => cmd_verify(model, transformed),
        Command::Equivalence {
            model,
            variants,
            tokens,
            seed,
            rope,
            tolerance,
        } => cmd_equivalence(model, &variants, tokens, seed, rope, tolerance),
        Command::CostReport {
            preset,
            config,
            batch,
            format,
            out,
        } => cmd_cost_report(preset, config, batch, format, out),
    }
}

// ---------------------------------------------------------------------------
// synth

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    d: usize,
    heads: usize,
    dk: usize,
    layers: usize,
    seed: u64,
    bias: bool,
    max_context: usize,
    out: PathBuf,
) -> Result<(), CliError> {
    let config = ModelConfig::new(d, heads, dk, layers, max_context)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let model = generate_synthetic_model(&config, seed, bias)?;
    let summary = save_model(&model, &out)?;
    println!(
        "model: d={} h={} d_k={} e={} layers={} seed={} bias={}",
        config.d, config.h, config.d_k, config.e, config.layers, seed, bias
    );
    println!(
        "wrote {} tensors ({} bytes) crc32 {:#010x} -> {}",
        summary.tensor_count,
        summary.blob_bytes,
        summary.crc32,
        summary.path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// transform

fn cmd_transform(
    model_path: PathBuf,
    mode: SlimMode,
    fold_bias: bool,
    out: PathBuf,
) -> Result<(), CliError> {
    let model = load_model(&model_path)?;
    let (slim, notes) = transform_model(&model, mode, fold_bias)?;
    let summary = save_slim_model(&slim, &out)?;
    for note in &notes {
        if note.flagged {
            println!(
                "layer {}: condition estimate {:.3e} WARNING above {:.0e}",
                note.layer, note.condition, CONDITION_WARN_THRESHOLD
            );
        } else {
            println!(
                "layer {}: condition estimate {:.3e}",
                note.layer, note.condition
            );
        }
    }
    if mode == SlimMode::RectKv {
        let ratio = slim.config.aspect_ratio();
        println!(
            "value map is {0}x{0} per layer: r = {1:.1} times more parameters than the {2}x{0} it replaces",
            slim.config.e, ratio, slim.config.d
        );
    }
    println!(
        "transformed {} layers in {} mode ({} tensors, crc32 {:#010x}) -> {}",
        slim.layers.len(),
        mode.as_str(),
        summary.tensor_count,
        summary.crc32,
        summary.path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// verify

fn cmd_verify(model_path: PathBuf, transformed_path: PathBuf) -> Result<(), CliError> {
    let model = load_model(&model_path)?;
    let slim = load_slim_model(&transformed_path)?;
    let report = verify_value_reconstruction(&model.layers, &transformed_weights_of(&slim))?;
    for layer in &report.layers {
        println!(
            "{} : {}",
            layer.layer,
            if layer.pass { "True" } else { "False" }
        );
    }
    if report.all_pass() {
        Ok(())
    } else {
        let failing: Vec<String> = report
            .layers
            .iter()
            .filter(|l| !l.pass)
            .map(|l| l.layer.to_string())
            .collect();
        Err(CliError::Failure(format!(
            "reconstruction check failed for layer(s) {}",
            failing.join(", ")
        )))
    }
}

// ---------------------------------------------------------------------------
// equivalence

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Variant {
    Vanilla,
    SlimUnopt,
    SlimOpt,
    XCache,
    VCache,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::SlimUnopt => "slim-unopt",
            Variant::SlimOpt => "slim-opt",
            Variant::XCache => "xcache",
            Variant::VCache => "vcache",
        }
    }

    fn parse(s: &str) -> Result<Self, CliError> {
        match s {
            "vanilla" => Ok(Variant::Vanilla),
            "slim-unopt" => Ok(Variant::SlimUnopt),
            "slim-opt" => Ok(Variant::SlimOpt),
            "xcache" => Ok(Variant::XCache),
            "vcache" => Ok(Variant::VCache),
            other => Err(CliError::Usage(format!(
                "unknown variant {other:?} (expected vanilla, slim-unopt, slim-opt, xcache, vcache)"
            ))),
        }
    }
}

/// Per-variant mutable state across the prompt and generate phases.
enum Runner {
    Vanilla(KVCache),
    SlimUnopt(KCache),
    SlimOpt(KCache),
    XCache(XCache),
    VCache(VCache),
    RopeVanilla(KVCache),
    RopeRawKeys(KCache),
    RopeEncodedKeys(KCache),
}

struct EquivalenceContext<'a> {
    model: &'a Model,
    layer: usize,
    w_kv: Option<Matrix>,
    w_vk: Option<Matrix>,
    table: Option<RopeTable>,
}

impl EquivalenceContext<'_> {
    fn weights(&self) -> &slim_attention::LayerWeights {
        &self.model.layers[self.layer]
    }

    fn heads(&self) -> usize {
        self.model.config.h
    }

    fn w_kv(&self) -> &Matrix {
        self.w_kv.as_ref().expect("variant selection ensured W_KV")
    }

    /// Prompt over `x` (batched where the variant has a prompt kernel,
    /// replayed token by token otherwise); returns the runner and the
    /// output row for the last prompt token.
    fn prompt(&self, variant: Variant, x: &Matrix) -> Result<(Runner, Matrix), CliError> {
        let w = self.weights();
        let h = self.heads();
        let d = self.model.config.d;
        let last = |y: &Matrix| Matrix::from_vec(1, d, y.row(y.rows() - 1).to_vec()).unwrap();
        match (&self.table, variant) {
            (None, Variant::Vanilla) => {
                let (out, cache) = vanilla_prompt(x, w, h, true)?;
                Ok((Runner::Vanilla(cache), last(&out.y)))
            }
            (None, Variant::SlimUnopt) => {
                let (out, cache) = slim_prompt(x, w, self.w_kv(), h, true)?;
                Ok((Runner::SlimUnopt(cache), last(&out.y)))
            }
            (None, Variant::SlimOpt) => {
                let (out, cache) = slim_prompt(x, w, self.w_kv(), h, true)?;
                Ok((Runner::SlimOpt(cache), last(&out.y)))
            }
            (None, Variant::XCache) => {
                let mut cache = XCache::new(d);
                let mut out = None;
                for i in 0..x.rows() {
                    let row = Matrix::from_vec(1, d, x.row(i).to_vec()).unwrap();
                    out = Some(xcache_generate_step(&row, w, h, &mut cache)?);
                }
                Ok((Runner::XCache(cache), out.expect("prompt not empty").y))
            }
            (None, Variant::VCache) => {
                let w_vk = self.w_vk.as_ref().expect("vcache selection ensured W_VK");
                let mut cache = VCache::new(self.model.config.e);
                let mut out = None;
                for i in 0..x.rows() {
                    let row = Matrix::from_vec(1, d, x.row(i).to_vec()).unwrap();
                    out = Some(vcache_generate_step(&row, w, w_vk, h, &mut cache)?);
                }
                Ok((Runner::VCache(cache), out.expect("prompt not empty").y))
            }
            (Some(table), Variant::Vanilla) => {
                let (out, cache) = vanilla_prompt_rope(x, w, h, true, table)?;
                Ok((Runner::RopeVanilla(cache), last(&out.y)))
            }
            (Some(table), Variant::SlimUnopt) => {
                let (out, cache) =
                    slim_prompt_rope(x, w, self.w_kv(), h, true, KeyStorage::Raw, table)?;
                Ok((Runner::RopeRawKeys(cache), last(&out.y)))
            }
            (Some(table), Variant::SlimOpt) => {
                let (out, cache) =
                    slim_prompt_rope(x, w, self.w_kv(), h, true, KeyStorage::RopeEncoded, table)?;
                Ok((Runner::RopeEncodedKeys(cache), last(&out.y)))
            }
            (Some(_), Variant::XCache | Variant::VCache) => unreachable!("rejected earlier"),
        }
    }

    fn step(&self, runner: &mut Runner, x: &Matrix, position: usize) -> Result<Matrix, CliError> {
        let w = self.weights();
        let h = self.heads();
        let y = match runner {
            Runner::Vanilla(cache) => vanilla_generate_step(x, w, h, cache)?.y,
            Runner::SlimUnopt(cache) => slim_generate_unoptimized(x, w, self.w_kv(), h, cache)?.y,
            Runner::SlimOpt(cache) => slim_generate_optimized(x, w, self.w_kv(), h, cache)?.y,
            Runner::XCache(cache) => xcache_generate_step(x, w, h, cache)?.y,
            Runner::VCache(cache) => {
                let w_vk = self.w_vk.as_ref().expect("vcache selection ensured W_VK");
                vcache_generate_step(x, w, w_vk, h, cache)?.y
            }
            Runner::RopeVanilla(cache) => {
                let table = self.table.as_ref().unwrap();
                vanilla_generate_step_rope(x, w, h, cache, position, table)?.y
            }
            Runner::RopeRawKeys(cache) => {
                let table = self.table.as_ref().unwrap();
                slim_generate_rope_option1(x, w, self.w_kv(), h, cache, position, table)?
                    .0
                    .y
            }
            Runner::RopeEncodedKeys(cache) => {
                let table = self.table.as_ref().unwrap();
                slim_generate_rope_option2(x, w, self.w_kv(), h, cache, position, 0.0, table)?
                    .0
                    .y
            }
        };
        Ok(y)
    }
}

fn select_variants(spec: &str, model: &Model, rope: bool) -> Result<Vec<Variant>, CliError> {
    let square = model.config.is_square();
    if spec.trim() == "all" {
        let mut variants = vec![Variant::Vanilla, Variant::SlimUnopt, Variant::SlimOpt];
        if !rope {
            variants.push(Variant::XCache);
            if square {
                variants.push(Variant::VCache);
            }
        }
        return Ok(variants);
    }
    let mut variants = Vec::new();
    for token in spec.split(',') {
        let variant = Variant::parse(token.trim())?;
        if rope && matches!(variant, Variant::XCache | Variant::VCache) {
            return Err(CliError::Usage(format!(
                "{} recomputes keys from position-free cached rows and cannot apply \
                 rotary encoding; drop --rope or the variant",
                variant.name()
            )));
        }
        if variant == Variant::VCache && !square {
            return Err(CliError::Usage(
                "vcache needs square projections (e == d)".to_string(),
            ));
        }
        if !variants.contains(&variant) {
            variants.push(variant);
        }
    }
    if variants.is_empty() {
        return Err(CliError::Usage("no variants selected".to_string()));
    }
    Ok(variants)
}

fn cmd_equivalence(
    model_path: PathBuf,
    variants_spec: &str,
    tokens: usize,
    seed: u64,
    rope: bool,
    tolerance: f64,
) -> Result<(), CliError> {
    if tokens == 0 {
        return Err(CliError::Usage("--tokens must be at least 1".to_string()));
    }
    let model = load_model(&model_path)?;
    let config = &model.config;
    let variants = select_variants(variants_spec, &model, rope)?;
    let needs_slim = variants
        .iter()
        .any(|v| matches!(v, Variant::SlimUnopt | Variant::SlimOpt));
    let table = if rope {
        Some(
            RopeTable::new(config.d_k, 2 * tokens + 8)
                .map_err(|e| CliError::Usage(e.to_string()))?,
        )
    } else {
        None
    };

    println!(
        "equivalence: d={} h={} e={} layers={} tokens={} rope={} variants={}",
        config.d,
        config.h,
        config.e,
        config.layers,
        tokens,
        rope,
        variants
            .iter()
            .map(|v| v.name())
            .collect::<Vec<_>>()
            .join(",")
    );

    let mut pair_diffs: Vec<(Variant, Variant, f64)> = Vec::new();
    for a in 0..variants.len() {
        for b in a + 1..variants.len() {
            pair_diffs.push((variants[a], variants[b], 0.0));
        }
    }

    for layer in 0..config.layers {
        let w = &model.layers[layer];
        let w_kv = if needs_slim {
            Some(if config.is_square() {
                compute_wkv(&w.w_k, &w.w_v)?
            } else {
                compute_wkv_rect(&w.w_k, &w.w_v)?
            })
        } else {
            None
        };
        let w_vk = if variants.contains(&Variant::VCache) {
            Some(compute_wvk(&w.w_v, &w.w_k)?)
        } else {
            None
        };
        let ctx = EquivalenceContext {
            model: &model,
            layer,
            w_kv,
            w_vk,
            table: table.clone(),
        };

        let mut rng = SplitMix64::for_stream(seed, &[layer as u64]);
        let prompt = Matrix::random_normal(tokens, config.d, 1.0, &mut rng);
        let mut runners = Vec::with_capacity(variants.len());
        let mut outputs = Vec::with_capacity(variants.len());
        for &variant in &variants {
            let (runner, last) = ctx.prompt(variant, &prompt)?;
            runners.push(runner);
            outputs.push(last);
        }
        record_diffs(&mut pair_diffs, &variants, &outputs)?;

        for step in 0..tokens {
            let x = Matrix::random_normal(1, config.d, 1.0, &mut rng);
            let position = tokens + step;
            let mut step_outputs = Vec::with_capacity(variants.len());
            for (runner, _) in runners.iter_mut().zip(&variants) {
                step_outputs.push(ctx.step(runner, &x, position)?);
            }
            record_diffs(&mut pair_diffs, &variants, &step_outputs)?;
        }
    }

    let mut worst: f64 = 0.0;
    for (a, b, diff) in &pair_diffs {
        println!(
            "  {:>10} vs {:<10} max|diff| = {:.3e}",
            a.name(),
            b.name(),
            diff
        );
        worst = worst.max(*diff);
    }
    if worst <= tolerance {
        println!("result: max {worst:.3e} <= tolerance {tolerance:.1e} -> PASS");
        Ok(())
    } else {
        println!("result: max {worst:.3e} > tolerance {tolerance:.1e} -> FAIL");
        Err(CliError::Failure(format!(
            "variant outputs diverged: {worst:.3e} exceeds {tolerance:.1e}"
        )))
    }
}

fn record_diffs(
    pair_diffs: &mut [(Variant, Variant, f64)],
    variants: &[Variant],
    outputs: &[Matrix],
) -> Result<(), CliError> {
    let index = |v: Variant| variants.iter().position(|x| *x == v).unwrap();
    for (a, b, diff) in pair_diffs.iter_mut() {
        let d = max_abs_diff(&outputs[index(*a)], &outputs[index(*b)])
            .map_err(|e| CliError::Failure(e.to_string()))?;
        *diff = diff.max(d);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// cost-report

fn cmd_cost_report(
    preset: PresetArg,
    config: Option<String>,
    batch: u64,
    format: FormatArg,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    if batch == 0 {
        return Err(CliError::Usage("--batch must be at least 1".to_string()));
    }
    let rows = match preset {
        PresetArg::Chips => cost::chip_report(),
        PresetArg::Whisper => cost::whisper_report(batch),
        PresetArg::Tables => {
            let models = match config {
                Some(config) => {
                    vec![cost::parse_cache_config(&config)
                        .map_err(|e| CliError::Usage(e.to_string()))?]
                }
                None => cost::reference_cache_models(),
            };
            cost::cache_table_report(&models)
        }
    };
    let text = match format {
        FormatArg::Csv => cost::to_csv(&rows),
        FormatArg::Md => cost::to_markdown(&rows),
    };
    match out {
        Some(path) => fs::write(&path, text)
            .map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))?,
        None => print!("{text}"),
    }
    Ok(())
}
