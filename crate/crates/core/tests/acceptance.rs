//! One PASS/FAIL line per acceptance criterion. Exits nonzero when a
//! criterion fails that is not listed in `KNOWN_UNATTAINABLE`.

mod common;

use std::fs;
use std::time::Instant;

use common::experiments::{multi_aspect_accuracy, orthogonality_after, small};
use common::*;
use lama_core::autodiff::{Tape, Tensor};
use lama_core::baseline::TeConfig;
use lama_core::bench::{bench_runtime, BenchConfig, BenchKind, Workload};
use lama_core::classifier::{cross_entropy, disagreement_embeddings, disagreement_positions, RegularizerKind};
use lama_core::model::{forward_batch, ContextMode, Encoder, ModelConfig};
use lama_core::params::{lama_param_count, te_param_count};
use lama_core::rng;
use lama_core::synthetic::keyword_dataset;
use lama_core::text::{Document, Split};
use lama_core::trainer::{train, TrainConfig};
use rand::Rng;

const RANK1_INSTANCES: u64 = 128;
const RANK1_TOL: f64 = 1e-6;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL_F64: f64 = 1e-5;
const GRAD_SEED: u64 = 4;
const D_ANN: usize = 512;
const GRID_HEADS: [usize; 6] = [2, 4, 8, 16, 32, 64];
const TARGET_DELTAS_M: [f64; 5] = [0.002, 0.004, 0.009, 0.016, 0.034];
const LE_SLOPE: (f64, f64) = (0.6, 1.4);
const TE_SLOPE: (f64, f64) = (1.6, 2.4);
const HEAD_DOUBLING_MAX: f64 = 2.5;
const ROW_SUM_TOL: f64 = 1e-5;
const PADDING_CONFIGS: u64 = 200;
const KEYWORD_TARGET: f64 = 0.95;
const LEARN_SEEDS: u64 = 5;
const REG_MIN_WINS: usize = 4;
const CONSTANT_TOL: f64 = 1e-6;

/// Criteria expected to fail: the rounding targets for the parameter deltas
/// are not reachable by any exactly linear per-head cost.
const KNOWN_UNATTAINABLE: [&str; 1] = ["3b"];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rank1() -> Outcome {
    let worst = (0..RANK1_INSTANCES).map(rank1_gap).fold(0.0, f64::max);
    outcome(worst < RANK1_TOL, format!("{RANK1_INSTANCES} instances, max |diff| {worst:.2e} (< {RANK1_TOL:e})"))
}

fn gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    for (encoder, context) in all_variants() {
        let params = toy_model(toy_config(encoder, context), GRAD_SEED);
        for reg in [RegularizerKind::None, RegularizerKind::Positions, RegularizerKind::Embeddings] {
            worst = worst.max(full_model_check(&params, reg, GRAD_STEP, GRAD_TOL_F64).max_rel_error());
        }
    }
    outcome(worst < GRAD_TOL_F64, format!("f64, 4 variants x 3 regularizers, max rel error {worst:.2e} (< {GRAD_TOL_F64:e})"))
}

fn body(m: usize) -> usize {
    let cfg = ModelConfig {
        vocab_size: 10_000,
        embed_dim: D_ANN,
        hidden: D_ANN / 2,
        heads: m,
        mlp_hidden: 512,
        classes: 5,
        encoder: Encoder::Bigru,
        context: ContextMode::DocMean,
    };
    lama_param_count(&cfg).body()
}

fn marginal() -> Outcome {
    let exact = (1..=128).all(|m| body(m + 1) - body(m) == 2 * D_ANN);
    outcome(exact, format!("body(m+1) - body(m) == {} for m in 1..=128", 2 * D_ANN))
}

fn table_rounding() -> Outcome {
    let deltas: Vec<f64> = GRID_HEADS
        .windows(2)
        .map(|w| ((body(w[1]) - body(w[0])) as f64 / 1e6 * 1000.0).round() / 1000.0)
        .collect();
    let ok = deltas.iter().zip(TARGET_DELTAS_M).all(|(a, b)| (a - b).abs() < 1e-9);
    outcome(ok, format!("rounded deltas {deltas:?} M vs targets {TARGET_DELTAS_M:?} M"))
}

fn te_constant() -> Outcome {
    let counts: Vec<usize> = GRID_HEADS
        .iter()
        .map(|&heads| te_param_count(&TeConfig { heads, ..TeConfig::default() }, 10_000, 5).unwrap().total)
        .collect();
    outcome(counts.windows(2).all(|w| w[0] == w[1]), format!("TE totals {counts:?}"))
}

fn scaling() -> Outcome {
    let le = bench_runtime(&BenchConfig::new(BenchKind::Le)).unwrap();
    let te = bench_runtime(&BenchConfig::new(BenchKind::Te)).unwrap();
    let cfg = BenchConfig::new(BenchKind::Le);
    let n = 512;
    let t = |m| Workload::new(BenchKind::Le, n, cfg.dim, m, cfg.seed).unwrap().time(cfg.trials, cfg.min_trial_seconds).unwrap().0;
    let ratio = t(2 * cfg.heads) / t(cfg.heads);
    let ok = (LE_SLOPE.0..LE_SLOPE.1).contains(&le.slope)
        && (TE_SLOPE.0..TE_SLOPE.1).contains(&te.slope)
        && ratio <= HEAD_DOUBLING_MAX;
    let mut detail = format!(
        "LE slope {:.3} in {LE_SLOPE:?}, TE slope {:.3} in {TE_SLOPE:?}, LE m {}->{} at n={n}: x{ratio:.2} (<= {HEAD_DOUBLING_MAX})",
        le.slope,
        te.slope,
        cfg.heads,
        2 * cfg.heads
    );
    for w in le.warnings.iter().chain(&te.warnings) {
        detail.push_str(&format!("; warning: {w}"));
    }
    outcome(ok, detail)
}

fn normalization() -> Outcome {
    let mut failures = Vec::new();
    let mut worst_sum: f64 = 0.0;
    for seed in 0..PADDING_CONFIGS {
        let mut g = rng::stream(seed, 40);
        let variants = all_variants();
        let (encoder, context) = variants[g.random_range(0..variants.len())];
        let hidden = g.random_range(1..6);
        let config = ModelConfig {
            vocab_size: 12,
            embed_dim: 2 * hidden,
            hidden,
            heads: g.random_range(1..8),
            mlp_hidden: g.random_range(1..6),
            classes: g.random_range(2..5),
            encoder,
            context,
        };
        let params = toy_model(config, seed);
        let len = g.random_range(1..12);
        let doc = Document {
            ids: (0..len).map(|_| g.random_range(1..12)).collect(),
            true_len: len,
            label: 0,
        };
        let padded = doc.padded_to(len + g.random_range(1..8));
        let run = |d: &Document| {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let graph = forward_batch::<f64, rng::Rng>(&tape, &config, &vars, &[d], None).unwrap();
            let att = &graph.docs[0].attention;
            let out = (tape.value(att.a).clone(), tape.value(att.s).clone(), tape.value(graph.logits).clone());
            out
        };
        let (a, s, logits) = run(&doc);
        let (pa, ps, plogits) = run(&padded);
        for i in 0..a.rows() {
            worst_sum = worst_sum.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
            let row = pa.row(i);
            if row[..len] != *a.row(i) || row[len..].iter().any(|&w| w != 0.0) {
                failures.push(seed);
            }
        }
        if ps != s || plogits != logits {
            failures.push(seed);
        }
    }
    let ok = worst_sum < ROW_SUM_TOL && failures.is_empty();
    outcome(ok, format!(
        "{PADDING_CONFIGS} configs, max |row sum - 1| {worst_sum:.1e} (< {ROW_SUM_TOL:e}), padding mismatches {}",
        failures.len()
    ))
}

fn learnability() -> Outcome {
    let tr = keyword_dataset(200, 1, Split::Train);
    let va = keyword_dataset(100, 1001, Split::Valid);
    let cfg = TrainConfig { max_epochs: 20, ..TrainConfig::default() };
    let kw = train(&cfg, &tr, &va).unwrap().history.best_valid_acc();
    let mean = |m| (1..=LEARN_SEEDS).map(|s| multi_aspect_accuracy(m, s)).sum::<f64>() / LEARN_SEEDS as f64;
    let (m1, m4) = (mean(1), mean(4));
    outcome(kw >= KEYWORD_TARGET && m4 >= m1, format!(
        "keyword valid acc {kw:.3} (>= {KEYWORD_TARGET}, defaults, 20 epochs); multi-aspect mean over {LEARN_SEEDS} seeds m=4 {m4:.3} vs m=1 {m1:.3}"
    ))
}

fn regularizer() -> Outcome {
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 1..=LEARN_SEEDS {
        let (with, _) = orthogonality_after(0.2, seed);
        let (without, _) = orthogonality_after(0.0, seed);
        if with < without {
            wins += 1;
        }
        pairs.push(format!("{with:.3}/{without:.3}"));
    }
    outcome(wins >= REG_MIN_WINS, format!(
        "lambda 0.2 vs 0 final ||AA^T-I||^2: {} ; {wins}/{LEARN_SEEDS} wins (>= {REG_MIN_WINS})",
        pairs.join(", ")
    ))
}

fn constants() -> Outcome {
    let mut worst: f64 = 0.0;
    for c in 2..=10 {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(1, c));
        let ce = tape.softmax_cross_entropy(logits, &[c - 1]).unwrap();
        worst = worst.max((tape.item(ce) - (c as f64).ln()).abs());
        worst = worst.max((cross_entropy(&vec![1.0 / c as f64; c], 0) - (c as f64).ln()).abs());
    }
    let tape = Tape::<f64>::new();
    let s = tape.constant(Tensor::from_fn(4, 6, |_, c| c as f64 - 2.5));
    let d_emb = tape.item(disagreement_embeddings(&tape, s).unwrap());
    let a = tape.constant(Tensor::from_fn(3, 5, |r, c| if r == c { 1.0 } else { 0.0 }));
    let d_pen = tape.item(disagreement_positions(&tape, a).unwrap());
    let ok = worst < CONSTANT_TOL && (d_emb + 1.0).abs() < CONSTANT_TOL && d_pen.abs() < CONSTANT_TOL;
    outcome(ok, format!("|CE - log C| max {worst:.1e}, D_emb(identical) {d_emb:.9}, D_penal(orthonormal) {d_pen:.1e}"))
}

fn determinism() -> Outcome {
    let tr = keyword_dataset(200, 3, Split::Train);
    let va = keyword_dataset(100, 1003, Split::Valid);
    let cfg = TrainConfig { max_epochs: 4, ..small(3, 11) };
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = train(&cfg, &tr, &va).unwrap();
        let path = dir.path().join(name);
        out.checkpoint.save(&path).unwrap();
        let files: Vec<Vec<u8>> = ["config.json", "vocab.txt", "weights.bin"]
            .iter()
            .map(|f| fs::read(path.join(f)).unwrap())
            .collect();
        let hist: Vec<(usize, u64, u64)> = out
            .history
            .epochs
            .iter()
            .map(|e| (e.epoch, e.train_loss.to_bits(), e.valid_acc.to_bits()))
            .collect();
        (files, hist, out.history.best_epoch)
    };
    let (a, b) = (run("a"), run("b"));
    outcome(a == b, format!("two runs, seed {}: checkpoint files and history (wall time excluded) identical: {}", cfg.seed, a == b))
}

fn main() {
    let criteria: Vec<(&str, &str, f64, fn() -> Outcome)> = vec![
        ("1", "rank-1 oracle equivalence", 10.0, rank1),
        ("2", "end-to-end gradient check", 60.0, gradients),
        ("3a", "per-head marginal parameter cost", 1.0, marginal),
        ("3b", "parameter deltas round to the target values", 1.0, table_rounding),
        ("3c", "baseline parameter count constant in heads", 1.0, te_constant),
        ("4", "complexity scaling", 300.0, scaling),
        ("5", "normalization and padding invariants", 30.0, normalization),
        ("6", "learnability", 300.0, learnability),
        ("7", "regularizer effect", 300.0, regularizer),
        ("8", "loss constants", 1.0, constants),
        ("9", "determinism", 300.0, determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, limit, run) in criteria {
        let start = Instant::now();
        let out = run();
        let secs = start.elapsed().as_secs_f64();
        let pass = out.pass && secs < limit;
        let known = KNOWN_UNATTAINABLE.contains(&id);
        println!(
            "{} [{id}] {name}: {} ({secs:.2}s, limit {limit}s){}",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            if !pass && known { " [known unattainable]" } else { "" }
        );
        if !pass && !known {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
