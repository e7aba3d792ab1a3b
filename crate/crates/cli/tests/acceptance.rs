//! Acceptance suite: one test per release criterion, each printing a
//! PASS line (visible with `--nocapture`). Tolerances are pinned in the
//! assertions; a failing criterion fails its test.

use std::process::Command;
use std::time::Instant;

use slim_attention::attention::{
    slim_generate_optimized, slim_generate_unoptimized, slim_prompt, sparse_weighted_sum,
    vanilla_generate_step, vanilla_prompt, vcache_generate_step, xcache_generate_step, KeyStorage,
    VCache, XCache,
};
use slim_attention::cost::{
    self, chip_intensity_rounded, enc_dec_costs, generate_step_cost, kv_cache_activations,
    memory_bound_speedup, reference_chips, whisper_shapes, GenerateVariant,
    WHISPER_DECODER_CONTEXT, WHISPER_ENCODER_TOKENS, WHISPER_VOCAB,
};
use slim_attention::encdec::{
    generate_synthetic_encdec, CachePolicy, DecodeSession, EncDecConfig, PositionalMode,
};
use slim_attention::linalg::{max_abs_diff, right_inverse, Matrix, OpCounter};
use slim_attention::model::{generate_synthetic_model, ModelConfig};
use slim_attention::rng::SplitMix64;
use slim_attention::rope::{
    slim_generate_rope_option1, slim_generate_rope_option2, slim_prompt_rope,
    vanilla_generate_step_rope, vanilla_prompt_rope, RopeTable,
};
use slim_attention::transform::{
    compute_wkv, compute_wvk, fold_value_bias, transform_model, transformed_weights_of,
    verify_value_reconstruction,
};

const EXACTNESS_TOL: f64 = 1e-9;

#[test]
fn acceptance_01_exactness_suite() {
    let start = Instant::now();
    let mut models = 0usize;
    let mut worst_plain: f64 = 0.0;
    let mut worst_rope: f64 = 0.0;
    for d in [16usize, 32, 64] {
        for h in [1usize, 2, 4, 8] {
            for seed in 0..18u64 {
                models += 1;
                let config = ModelConfig::new(d, h, d / h, 1, 256).unwrap();
                let model_seed = (d * 1000 + h * 100) as u64 + seed;
                let model = generate_synthetic_model(&config, model_seed, false).unwrap();
                let w = &model.layers[0];
                let w_kv = compute_wkv(&w.w_k, &w.w_v).unwrap();
                let w_vk = compute_wvk(&w.w_v, &w.w_k).unwrap();
                let mut rng = SplitMix64::new(model_seed ^ 0xabcdef);
                let total_tokens = 1 + (rng.next_u64() % 64) as usize; // n <= 64
                let prompt_len = (total_tokens / 2).max(1);
                let steps = total_tokens - prompt_len;
                let prompt = Matrix::random_normal(prompt_len, d, 1.0, &mut rng);

                // plain: vanilla vs unoptimized vs optimized vs v-cache
                let (vanilla_out, mut kv) = vanilla_prompt(&prompt, w, h, true).unwrap();
                let (slim_out, k_cache) = slim_prompt(&prompt, w, &w_kv, h, true).unwrap();
                worst_plain = worst_plain.max(max_abs_diff(&vanilla_out.y, &slim_out.y).unwrap());
                let mut k_unopt = k_cache.clone();
                let mut k_opt = k_cache;
                let mut v_cache = VCache::new(d);
                for i in 0..prompt_len {
                    let row = Matrix::from_vec(1, d, prompt.row(i).to_vec()).unwrap();
                    vcache_generate_step(&row, w, &w_vk, h, &mut v_cache).unwrap();
                }
                for _ in 0..steps {
                    let x = Matrix::random_normal(1, d, 1.0, &mut rng);
                    let vanilla = vanilla_generate_step(&x, w, h, &mut kv).unwrap();
                    let unopt = slim_generate_unoptimized(&x, w, &w_kv, h, &mut k_unopt).unwrap();
                    let opt = slim_generate_optimized(&x, w, &w_kv, h, &mut k_opt).unwrap();
                    let vc = vcache_generate_step(&x, w, &w_vk, h, &mut v_cache).unwrap();
                    for other in [&unopt.y, &opt.y, &vc.y] {
                        worst_plain = worst_plain.max(max_abs_diff(&vanilla.y, other).unwrap());
                    }
                }

                // rotary: vanilla vs raw-key option vs encoded-key option
                let table = RopeTable::new(d / h, 160).unwrap();
                let (rv_out, mut rkv) = vanilla_prompt_rope(&prompt, w, h, true, &table).unwrap();
                let (r1_out, mut raw_cache) =
                    slim_prompt_rope(&prompt, w, &w_kv, h, true, KeyStorage::Raw, &table).unwrap();
                let (r2_out, mut enc_cache) =
                    slim_prompt_rope(&prompt, w, &w_kv, h, true, KeyStorage::RopeEncoded, &table)
                        .unwrap();
                worst_rope = worst_rope.max(max_abs_diff(&rv_out.y, &r1_out.y).unwrap());
                worst_rope = worst_rope.max(max_abs_diff(&rv_out.y, &r2_out.y).unwrap());
                for step in 0..steps {
                    let position = prompt_len + step;
                    let x = Matrix::random_normal(1, d, 1.0, &mut rng);
                    let vanilla =
                        vanilla_generate_step_rope(&x, w, h, &mut rkv, position, &table).unwrap();
                    let (opt1, _) = slim_generate_rope_option1(
                        &x,
                        w,
                        &w_kv,
                        h,
                        &mut raw_cache,
                        position,
                        &table,
                    )
                    .unwrap();
                    let (opt2, _) = slim_generate_rope_option2(
                        &x,
                        w,
                        &w_kv,
                        h,
                        &mut enc_cache,
                        position,
                        0.0,
                        &table,
                    )
                    .unwrap();
                    worst_rope = worst_rope.max(max_abs_diff(&vanilla.y, &opt1.y).unwrap());
                    worst_rope = worst_rope.max(max_abs_diff(&vanilla.y, &opt2.y).unwrap());
                }
            }
        }
    }
    let elapsed = start.elapsed();
    assert!(models >= 200, "only {models} models");
    assert!(
        worst_plain < EXACTNESS_TOL,
        "plain variants diverged: {worst_plain}"
    );
    assert!(
        worst_rope < EXACTNESS_TOL,
        "rotary variants diverged: {worst_rope}"
    );
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:?}");
    println!(
        "acceptance 01 PASS: exactness on {models} models, plain {worst_plain:.2e}, \
         rotary {worst_rope:.2e}, {elapsed:.1?}"
    );
}

#[test]
fn acceptance_02_reconstruction_all_layers() {
    let start = Instant::now();
    let config = ModelConfig::new(128, 8, 16, 24, 256).unwrap();
    let model = generate_synthetic_model(&config, 20240312, false).unwrap();
    let (slim, _) = transform_model(&model, slim_attention::SlimMode::Kv, false).unwrap();
    let report =
        verify_value_reconstruction(&model.layers, &transformed_weights_of(&slim)).unwrap();
    assert_eq!(report.layers.len(), 24);
    for layer in &report.layers {
        assert!(layer.pass, "layer {} failed: {:?}", layer.layer, layer);
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("acceptance 02 PASS: 24/24 layers reconstruct, {elapsed:.1?}");
}

#[test]
fn acceptance_03_right_inverse_and_xcache() {
    // right inverse across aspect ratios 1, 2, 4, 16
    let d = 16;
    for ratio in [1usize, 2, 4, 16] {
        let e = d * ratio;
        let mut rng = SplitMix64::new(300 + ratio as u64);
        let w = Matrix::random_normal(d, e, 1.0, &mut rng);
        let pinv = right_inverse(&w).unwrap();
        let residual = max_abs_diff(&w.matmul(&pinv).unwrap(), &Matrix::identity(d)).unwrap();
        assert!(residual < 1e-9, "ratio {ratio}: residual {residual}");
    }

    // X-cache decoding against full recompute on an aspect-ratio-16 model
    let config = ModelConfig::new(16, 16, 16, 1, 64).unwrap(); // e = 256
    let model = generate_synthetic_model(&config, 316, true).unwrap();
    let w = &model.layers[0];
    let n = 12;
    let mut rng = SplitMix64::new(317);
    let tokens = Matrix::random_normal(n, 16, 1.0, &mut rng);
    let (full, _) = vanilla_prompt(&tokens, w, 16, true).unwrap();
    let mut cache = XCache::new(16);
    let mut last = None;
    for i in 0..n {
        let row = Matrix::from_vec(1, 16, tokens.row(i).to_vec()).unwrap();
        last = Some(xcache_generate_step(&row, w, 16, &mut cache).unwrap());
    }
    let expected = Matrix::from_vec(1, 16, full.y.row(n - 1).to_vec()).unwrap();
    let diff = max_abs_diff(&last.unwrap().y, &expected).unwrap();
    assert!(diff < 1e-9, "x-cache vs recompute: {diff}");
    println!("acceptance 03 PASS: right inverse at r in {{1,2,4,16}}, x-cache diff {diff:.2e}");
}

#[test]
fn acceptance_04_complexity_table_counters() {
    let mut combos = 0;
    for d in [16usize, 32, 64, 128] {
        for h in [1usize, 2, 4] {
            for n in [8usize, 31] {
                combos += 1;
                let config = ModelConfig::new(d, h, d / h, 1, 256).unwrap();
                let model = generate_synthetic_model(&config, (d + h + n) as u64, false).unwrap();
                let w = &model.layers[0];
                let w_kv = compute_wkv(&w.w_k, &w.w_v).unwrap();
                let mut rng = SplitMix64::new(400 + combos);
                let prompt = Matrix::random_normal(n - 1, d, 1.0, &mut rng);
                let (_, mut kv) = vanilla_prompt(&prompt, w, h, true).unwrap();
                let (_, k_cache) = slim_prompt(&prompt, w, &w_kv, h, true).unwrap();
                let mut k_unopt = k_cache.clone();
                let mut k_opt = k_cache;
                let x = Matrix::random_normal(1, d, 1.0, &mut rng);

                // instrumented counters: 2*muls equals each closed form
                // exactly; ops only misses one add per dot product
                let vanilla = vanilla_generate_step(&x, w, h, &mut kv).unwrap();
                assert_eq!(2 * vanilla.ops.projection.muls, (8 * d * d) as u64);
                assert_eq!(2 * vanilla.ops.mha.muls, (4 * n * d) as u64);
                assert!(vanilla.ops.projection.ops() <= (8 * d * d) as u64);
                assert!(vanilla.ops.mha.ops() <= (4 * n * d) as u64);

                let unopt = slim_generate_unoptimized(&x, w, &w_kv, h, &mut k_unopt).unwrap();
                assert_eq!(2 * unopt.ops.projection.muls, ((2 * n + 6) * d * d) as u64);
                assert_eq!(2 * unopt.ops.mha.muls, (4 * n * d) as u64);

                let opt = slim_generate_optimized(&x, w, &w_kv, h, &mut k_opt).unwrap();
                assert_eq!(2 * opt.ops.projection.muls, (8 * d * d) as u64);
                assert_eq!(2 * opt.ops.mha.muls, (2 * n * d * (h + 1)) as u64);

                // closed-form intensities are exact
                let (proj, mha) =
                    generate_step_cost(GenerateVariant::Vanilla, d as u64, h as u64, n as u64);
                assert_eq!(proj.intensity, 2.0);
                assert_eq!(mha.intensity, 2.0);
                let (proj, mha) = generate_step_cost(
                    GenerateVariant::SlimUnoptimized,
                    d as u64,
                    h as u64,
                    n as u64,
                );
                assert_eq!(proj.intensity, (n + 3) as f64 / 2.0);
                assert_eq!(mha.intensity, 4.0);
                let (proj, mha) = generate_step_cost(
                    GenerateVariant::SlimOptimized,
                    d as u64,
                    h as u64,
                    n as u64,
                );
                assert_eq!(proj.intensity, 2.0);
                assert_eq!(mha.intensity, (2 * h + 2) as f64);
            }
        }
    }
    assert!(combos >= 20, "only {combos} combos");
    println!("acceptance 04 PASS: counters match closed forms on {combos} (d,h,n) combos");
}

#[test]
fn acceptance_05_chip_intensities() {
    let expected = [583u64, 93, 229, 332, 413, 563];
    let chips = reference_chips();
    assert_eq!(chips.len(), expected.len());
    for (chip, want) in chips.iter().zip(expected) {
        let got = chip_intensity_rounded(chip);
        assert_eq!(got, want, "{}: {got} vs {want}", chip.name);
    }
    println!("acceptance 05 PASS: chip intensities 583/93/229/332/413/563");
}

#[test]
fn acceptance_06_cache_size_spot_checks() {
    let checks = [
        (4096u64, 32u64, 16384u64, 4.3, 1e9), // CodeLlama-7B
        (3072, 32, 131072, 25.8, 1e9),        // Phi-3-mini-128k
        (4096, 32, 131072, 34.4, 1e9),        // Evo-1-131k
        (384, 4, 1500 + 448, 6.0, 1e6),       // Whisper-tiny (encoder + decoder context)
    ];
    for (d, layers, ctx, want, unit) in checks {
        let got = kv_cache_activations(d, layers, ctx) as f64 / unit;
        assert!(
            (got - want).abs() <= 0.05,
            "{d}x{layers}x{ctx}: {got} vs {want}"
        );
    }
    println!("acceptance 06 PASS: cache sizes 4.3B / 25.8B / 34.4B / 6.0M");
}

struct WhisperRow {
    name: &'static str,
    ecache: f64,
    cross_kv: f64,
    self_kv: f64,
    baseline_cache: f64,
    option1_cache: f64,
    option2_cache: f64,
    savings: f64,
    params: [f64; 3],
    reads_b1: [f64; 3],
    speedups_b1: [f64; 2],
    reads_b64: [f64; 3],
    speedups_b64: [f64; 2],
}

const WHISPER_TABLE: [WhisperRow; 5] = [
    WhisperRow {
        name: "tiny",
        ecache: 0.6,
        cross_kv: 4.6,
        self_kv: 1.4,
        baseline_cache: 6.0,
        option1_cache: 3.0,
        option2_cache: 0.7,
        savings: 8.7,
        params: [28.2, 28.8, 29.4],
        reads_b1: [34.2, 31.8, 30.0],
        speedups_b1: [1.08, 1.14],
        reads_b64: [6.4, 3.4, 1.1],
        speedups_b64: [1.9, 5.6],
    },
    WhisperRow {
        name: "base",
        ecache: 0.8,
        cross_kv: 9.2,
        self_kv: 2.8,
        baseline_cache: 12.0,
        option1_cache: 6.0,
        option2_cache: 1.4,
        savings: 8.7,
        params: [48.6, 50.1, 51.7],
        reads_b1: [60.5, 56.1, 53.1],
        speedups_b1: [1.08, 1.14],
        reads_b64: [12.7, 6.8, 2.2],
        speedups_b64: [1.9, 5.8],
    },
    WhisperRow {
        name: "small",
        ecache: 1.2,
        cross_kv: 27.6,
        self_kv: 8.3,
        baseline_cache: 35.9,
        option1_cache: 18.0,
        option2_cache: 4.1,
        savings: 8.7,
        params: [138.9, 146.0, 153.1],
        reads_b1: [174.8, 164.0, 157.2],
        speedups_b1: [1.07, 1.11],
        reads_b64: [38.1, 20.2, 6.5],
        speedups_b64: [1.9, 5.8],
    },
    WhisperRow {
        name: "medium",
        ecache: 1.5,
        cross_kv: 73.7,
        self_kv: 22.0,
        baseline_cache: 95.7,
        option1_cache: 47.9,
        option2_cache: 11.0,
        savings: 8.7,
        params: [405.4, 430.6, 455.8],
        reads_b1: [501.2, 478.5, 466.8],
        speedups_b1: [1.05, 1.07],
        reads_b64: [102.1, 54.6, 18.1],
        speedups_b64: [1.9, 5.6],
    },
    WhisperRow {
        name: "large",
        ecache: 1.9,
        cross_kv: 122.9,
        self_kv: 36.7,
        baseline_cache: 159.6,
        option1_cache: 79.8,
        option2_cache: 18.4,
        savings: 8.7,
        params: [800.4, 852.8, 905.2],
        reads_b1: [960.0, 932.6, 923.6],
        speedups_b1: [1.03, 1.04],
        reads_b64: [172.1, 93.1, 32.5],
        speedups_b64: [1.8, 5.3],
    },
];

#[test]
fn acceptance_07_whisper_table() {
    let start = Instant::now();
    let m = 1e6;
    let close = |got: f64, want: f64, what: &str, model: &str| {
        assert!(
            (got - want).abs() <= 0.05,
            "{model} {what}: {got:.3} vs {want}"
        );
    };
    for ((name, shape), row) in whisper_shapes().iter().zip(&WHISPER_TABLE) {
        assert_eq!(*name, row.name);
        let b1 = enc_dec_costs(
            *shape,
            WHISPER_ENCODER_TOKENS,
            WHISPER_DECODER_CONTEXT,
            WHISPER_VOCAB,
            1,
        );
        close(b1.ecache as f64 / m, row.ecache, "ecache", name);
        close(b1.cross_kv_cache as f64 / m, row.cross_kv, "cross", name);
        close(b1.self_kv_cache as f64 / m, row.self_kv, "self", name);
        close(
            b1.baseline_cache as f64 / m,
            row.baseline_cache,
            "baseline cache",
            name,
        );
        close(
            b1.option1_cache as f64 / m,
            row.option1_cache,
            "option1 cache",
            name,
        );
        close(
            b1.option2_cache as f64 / m,
            row.option2_cache,
            "option2 cache",
            name,
        );
        close(b1.option2_savings, row.savings, "savings", name);
        close(
            b1.baseline_params as f64 / m,
            row.params[0],
            "baseline params",
            name,
        );
        close(
            b1.option1_params as f64 / m,
            row.params[1],
            "option1 params",
            name,
        );
        close(
            b1.option2_params as f64 / m,
            row.params[2],
            "option2 params",
            name,
        );
        close(
            b1.baseline_reads / m,
            row.reads_b1[0],
            "baseline reads b1",
            name,
        );
        close(
            b1.option1_reads / m,
            row.reads_b1[1],
            "option1 reads b1",
            name,
        );
        close(
            b1.option2_reads / m,
            row.reads_b1[2],
            "option2 reads b1",
            name,
        );
        close(
            b1.option1_speedup,
            row.speedups_b1[0],
            "option1 speedup b1",
            name,
        );
        close(
            b1.option2_speedup,
            row.speedups_b1[1],
            "option2 speedup b1",
            name,
        );

        let b64 = enc_dec_costs(
            *shape,
            WHISPER_ENCODER_TOKENS,
            WHISPER_DECODER_CONTEXT,
            WHISPER_VOCAB,
            64,
        );
        close(
            b64.baseline_reads / m,
            row.reads_b64[0],
            "baseline reads b64",
            name,
        );
        close(
            b64.option1_reads / m,
            row.reads_b64[1],
            "option1 reads b64",
            name,
        );
        close(
            b64.option2_reads / m,
            row.reads_b64[2],
            "option2 reads b64",
            name,
        );
        close(
            b64.option1_speedup,
            row.speedups_b64[0],
            "option1 speedup b64",
            name,
        );
        close(
            b64.option2_speedup,
            row.speedups_b64[1],
            "option2 speedup b64",
            name,
        );
    }
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 1.0, "took {elapsed:?}");
    println!("acceptance 07 PASS: all five encoder-decoder cost columns, {elapsed:.1?}");
}

#[test]
fn acceptance_08_headline_speedups() {
    let batch1 = memory_bound_speedup(3.8, 25.0, 12.5, 1);
    assert!((batch1 - 1.8).abs() <= 0.05, "batch 1: {batch1}");
    let batch16 = memory_bound_speedup(3.8, 25.0, 12.5, 16);
    assert!((batch16 - 2.0).abs() <= 0.05, "batch 16: {batch16}");
    println!("acceptance 08 PASS: cache-halving speedups {batch1:.2} (b=1), {batch16:.2} (b=16)");
}

#[test]
fn acceptance_09_encoder_decoder_policies() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (layers, d, h, seed) in [
        (2usize, 32usize, 4usize, 90u64),
        (3, 16, 2, 91),
        (4, 24, 3, 92),
    ] {
        let config = EncDecConfig {
            layers,
            d,
            d_ffn: 2 * d,
            h,
            vocab: Some(1000),
        };
        let model = generate_synthetic_encdec(&config, seed, false).unwrap();
        let mut rng = SplitMix64::new(seed + 1);
        let input = Matrix::random_normal(16, d, 1.0, &mut rng);
        let e = slim_attention::encdec::run_encoder(&input, &model).unwrap();
        let policies = [
            CachePolicy::Baseline,
            CachePolicy::Option1,
            CachePolicy::Option2,
            CachePolicy::Hybrid,
        ];
        let mut sessions: Vec<DecodeSession> = policies
            .iter()
            .map(|&p| DecodeSession::new(&model, &e, p, PositionalMode::None).unwrap())
            .collect();
        for _ in 0..16 {
            let token = Matrix::random_normal(1, d, 1.0, &mut rng);
            let outputs: Vec<Matrix> = sessions
                .iter_mut()
                .map(|s| s.decode_step(&token).unwrap())
                .collect();
            for other in &outputs[1..] {
                worst = worst.max(max_abs_diff(&outputs[0], other).unwrap());
            }
        }
        // option 2 keeps no cross cache at all
        assert_eq!(sessions[2].cross_cache_values(), 0);
        // hybrid reads one cross weight matrix on layer 0 and two on the
        // others: exactly one d*d matrix less than option 2 per token
        let hybrid_traffic = sessions[3].traffic_report(1).unwrap();
        let option2_traffic = sessions[2].traffic_report(1).unwrap();
        assert_eq!(
            option2_traffic.weight_values - hybrid_traffic.weight_values,
            (d * d) as f64
        );
        assert_eq!(sessions[3].cross_cache_values(), 0);
    }
    let elapsed = start.elapsed();
    assert!(worst < EXACTNESS_TOL, "policies diverged: {worst}");
    assert!(elapsed.as_secs_f64() < 20.0, "took {elapsed:?}");
    println!("acceptance 09 PASS: four policies agree ({worst:.2e}), {elapsed:.1?}");
}

#[test]
fn acceptance_10_appendix_invariants() {
    // rotary round trip
    let mut rng = SplitMix64::new(1001);
    for d_k in [2usize, 4, 64] {
        let table = RopeTable::new(d_k, 4096).unwrap();
        let v: Vec<f64> = (0..d_k).map(|_| rng.next_normal()).collect();
        for pos in (0..4096).step_by(61) {
            let round = table.decode(&table.encode(&v, pos).unwrap(), pos).unwrap();
            for (a, b) in round.iter().zip(&v) {
                assert!((a - b).abs() < 1e-12, "d_k {d_k} pos {pos}");
            }
        }
    }

    // bias folding leaves the forward pass unchanged
    let config = ModelConfig::new(32, 4, 8, 1, 64).unwrap();
    let model = generate_synthetic_model(&config, 1002, true).unwrap();
    let w = &model.layers[0];
    let mut folded = w.clone();
    folded.b_o = Some(fold_value_bias(w.b_v.as_ref().unwrap(), &w.w_o, w.b_o.as_deref()).unwrap());
    folded.b_v = None;
    folded.b_k = None;
    let x = Matrix::random_normal(9, 32, 1.0, &mut rng);
    let (original, _) = vanilla_prompt(&x, w, 4, true).unwrap();
    let (rewritten, _) = vanilla_prompt(&x, &folded, 4, true).unwrap();
    let bias_diff = max_abs_diff(&original.y, &rewritten.y).unwrap();
    assert!(
        bias_diff < 1e-10,
        "bias folding changed outputs: {bias_diff}"
    );

    // sparse weighted sum: exact at threshold 0, ~5x fewer ops at S = 0.8
    let n = 200;
    let width = 24;
    let rows = Matrix::random_normal(n, width, 1.0, &mut rng);
    let mut probs = vec![0.0; n];
    for j in (0..n).step_by(5) {
        probs[j] = 1.0 / (n / 5) as f64;
    }
    let dense = Matrix::from_vec(1, n, probs.clone())
        .unwrap()
        .matmul(&rows)
        .unwrap();
    let mut dense_counter = OpCounter::new();
    Matrix::from_vec(1, n, probs.clone())
        .unwrap()
        .matmul_counted(&rows, &mut dense_counter)
        .unwrap();
    let mut sparse_counter = OpCounter::new();
    let (sparse, skipped) = sparse_weighted_sum(&probs, &rows, 0.0, &mut sparse_counter).unwrap();
    assert_eq!(skipped, 4 * n / 5);
    for (a, b) in sparse.iter().zip(dense.row(0)) {
        assert!((a - b).abs() < 1e-15);
    }
    let ratio = dense_counter.ops() as f64 / sparse_counter.ops() as f64;
    assert!((ratio - 5.0).abs() <= 0.5, "op ratio {ratio}");
    println!(
        "acceptance 10 PASS: rotary round trip, bias folding {bias_diff:.2e}, \
         sparsity op ratio {ratio:.2}"
    );
}

#[test]
fn acceptance_11_cli_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_slimattn");
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    let slim = tmp.path().join("model-kv");
    let run = |args: &[&str]| {
        let out = Command::new(bin).args(args).output().expect("runs");
        assert!(
            out.status.success(),
            "slimattn {:?}: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        out.stdout
    };
    run(&[
        "synth",
        "--d",
        "64",
        "--heads",
        "4",
        "--dk",
        "16",
        "--layers",
        "2",
        "--seed",
        "7",
        "--out",
        model.to_str().unwrap(),
    ]);
    run(&[
        "transform",
        "--model",
        model.to_str().unwrap(),
        "--mode",
        "kv",
        "--out",
        slim.to_str().unwrap(),
    ]);
    run(&[
        "verify",
        "--model",
        model.to_str().unwrap(),
        "--transformed",
        slim.to_str().unwrap(),
    ]);
    run(&[
        "equivalence",
        "--model",
        model.to_str().unwrap(),
        "--variants",
        "all",
        "--tokens",
        "12",
    ]);

    // cost-report presets are byte-stable across runs
    let chips_a = run(&["cost-report", "--preset", "chips"]);
    let chips_b = run(&["cost-report", "--preset", "chips"]);
    assert_eq!(chips_a, chips_b);
    assert!(String::from_utf8_lossy(&chips_a).contains("413"));
    let whisper_a = run(&["cost-report", "--preset", "whisper", "--batch", "64"]);
    let whisper_b = run(&["cost-report", "--preset", "whisper", "--batch", "64"]);
    assert_eq!(whisper_a, whisper_b);
    let text = String::from_utf8_lossy(&whisper_a);
    assert!(text.contains("tiny,option2_savings_x,8.7"));
    println!("acceptance 11 PASS: synth/transform/verify/equivalence pipeline and stable reports");
}

#[test]
fn acceptance_cost_model_cross_check() {
    // the analytic Table-2 forms agree with the instrumented kernels on
    // the multiply count (the 2n-vs-2n-1 convention halves exactly)
    let d = 32;
    let h = 4;
    let n = 16;
    let config = ModelConfig::new(d, h, d / h, 1, 64).unwrap();
    let model = generate_synthetic_model(&config, 5005, false).unwrap();
    let w = &model.layers[0];
    let w_kv = compute_wkv(&w.w_k, &w.w_v).unwrap();
    let mut rng = SplitMix64::new(5006);
    let prompt = Matrix::random_normal(n - 1, d, 1.0, &mut rng);
    let (_, mut kv) = vanilla_prompt(&prompt, w, h, true).unwrap();
    let (_, mut k_opt) = slim_prompt(&prompt, w, &w_kv, h, true).unwrap();
    let x = Matrix::random_normal(1, d, 1.0, &mut rng);
    let vanilla = vanilla_generate_step(&x, w, h, &mut kv).unwrap();
    let opt = slim_generate_optimized(&x, w, &w_kv, h, &mut k_opt).unwrap();
    let (proj, mha) =
        cost::generate_step_cost(GenerateVariant::Vanilla, d as u64, h as u64, n as u64);
    assert_eq!(2 * vanilla.ops.projection.muls, proj.ops);
    assert_eq!(2 * vanilla.ops.mha.muls, mha.ops);
    let (proj, mha) =
        cost::generate_step_cost(GenerateVariant::SlimOptimized, d as u64, h as u64, n as u64);
    assert_eq!(2 * opt.ops.projection.muls, proj.ops);
    assert_eq!(2 * opt.ops.mha.muls, mha.ops);
}
