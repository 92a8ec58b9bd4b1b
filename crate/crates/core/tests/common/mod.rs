#![allow(dead_code)]

use lama_core::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
use lama_core::classifier::RegularizerKind;
use lama_core::model::{batch_objective, forward_batch, ContextMode, Encoder, ModelConfig, ModelParams, ModelVars};
use lama_core::rng;
use lama_core::text::Document;
use lama_core::LamaError;
use rand::Rng;

pub fn random(rows: usize, cols: usize, seed: u64, scale: f64) -> Tensor<f64> {
    let mut g = rng::stream(seed, 77);
    Tensor::from_fn(rows, cols, |_, _| g.random_range(-scale..scale))
}

pub fn toy_config(encoder: Encoder, context: ContextMode) -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        embed_dim: 8,
        hidden: 4,
        heads: 3,
        mlp_hidden: 5,
        classes: 3,
        encoder,
        context,
    }
}

/// Model whose weights are spread wider than the default init so every
/// parameter group carries a well-conditioned gradient.
pub fn toy_model(config: ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut g = rng::stream(seed, 5);
    let emb = Tensor::from_fn(config.vocab_size, config.embed_dim, |r, _| {
        if r == 0 { 0.0 } else { g.random_range(-0.8..0.8) }
    });
    let mut p = ModelParams::init(config, emb, &mut g).unwrap();
    for (i, t) in p.tensors_mut().into_iter().enumerate().skip(1) {
        let mut h = rng::stream(seed, 100 + i as u64);
        for x in t.data_mut() {
            *x += h.random_range(-0.3..0.3);
        }
    }
    p
}

/// A six-token document and a shorter, padded one.
pub fn toy_docs() -> Vec<Document> {
    vec![
        Document { ids: vec![2, 3, 4, 5, 6, 1], true_len: 6, label: 1 },
        Document { ids: vec![7, 2, 3, 0, 0], true_len: 3, label: 2 },
    ]
}

pub fn model_objective<'a>(
    tape: &Tape<'a, f64>,
    config: &ModelConfig,
    vars: &[Var],
    docs: &[Document],
    regularizer: RegularizerKind,
    lambda: f64,
) -> Result<Var, LamaError> {
    let mv = ModelVars::from_ordered(config, vars);
    let refs: Vec<&Document> = docs.iter().collect();
    let graph = forward_batch::<f64, rng::Rng>(tape, config, &mv, &refs, None)?;
    let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
    Ok(batch_objective(tape, &graph, &labels, regularizer, lambda)?.0)
}

pub fn full_model_check(
    params: &ModelParams<f64>,
    regularizer: RegularizerKind,
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    let tensors: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
    let config = params.config;
    let docs = toy_docs();
    grad_check(
        |t, v| model_objective(t, &config, v, &docs, regularizer, 0.2),
        &tensors,
        step,
        tolerance,
    )
    .unwrap()
}

pub fn all_variants() -> Vec<(Encoder, ContextMode)> {
    vec![
        (Encoder::Bigru, ContextMode::DocMean),
        (Encoder::Bigru, ContextMode::Learned),
        (Encoder::Le, ContextMode::DocMean),
        (Encoder::Le, ContextMode::Learned),
    ]
}

/// One randomized rank-1 equivalence instance (`T ≤ 32`, `h ≤ 16`, `m ≤ 8`):
/// the largest gap between a factorized head score and the dense bilinear
/// score with `W_i = p_i q_iᵀ`.
pub fn rank1_gap(seed: u64) -> f64 {
    use lama_core::attention::{lama_scores, single_head_scores};
    let mut g = rng::stream(seed, 31);
    let t = g.random_range(1..=32);
    let d_ann = 2 * g.random_range(1..=16);
    let m = g.random_range(1..=8);
    let u = random(t, d_ann, seed ^ 1, 1.0);
    let c = random(1, d_ann, seed ^ 2, 1.0);
    let p = random(d_ann, m, seed ^ 3, 1.0);
    let q = random(d_ann, m, seed ^ 4, 1.0);
    let tape = Tape::new();
    let (uv, cv, pv, qv) = (tape.leaf_ref(&u), tape.leaf_ref(&c), tape.leaf_ref(&p), tape.leaf_ref(&q));
    let f = lama_scores(&tape, uv, cv, pv, qv).unwrap();
    let f = tape.value(f).clone();
    let mask = vec![true; t];
    let mut gap: f64 = 0.0;
    for i in 0..m {
        let w = Tensor::from_fn(d_ann, d_ann, |r, k| p.get(r, i) * q.get(k, i));
        let wv = tape.constant(w);
        let (dense, _) = single_head_scores(&tape, uv, cv, wv, &mask).unwrap();
        let dense = tape.value(dense);
        for j in 0..t {
            gap = gap.max((dense.get(0, j) - f.get(i, j)).abs());
        }
    }
    gap
}

pub mod experiments {
    use lama_core::classifier::RegularizerKind;
    use lama_core::synthetic::{keyword_dataset, multi_aspect_dataset};
    use lama_core::text::Split;
    use lama_core::trainer::{encode_dataset, orthogonality, train, TrainConfig};

    /// Reduced widths for the statistical runs; optimizer settings stay at
    /// their defaults.
    pub fn small(heads: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            embed_dim: 32,
            hidden: 16,
            mlp_hidden: 64,
            heads,
            max_epochs: 20,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Best validation accuracy on the two-aspect task.
    pub fn multi_aspect_accuracy(heads: usize, seed: u64) -> f64 {
        let tr = multi_aspect_dataset(200, seed, Split::Train);
        let va = multi_aspect_dataset(100, seed + 1000, Split::Valid);
        train(&small(heads, seed), &tr, &va).unwrap().history.best_valid_acc()
    }

    /// `‖AAᵀ−I‖²_F` on validation documents after training with the positions
    /// regularizer at `lambda`, for the final and the best-validation weights.
    pub fn orthogonality_after(lambda: f64, seed: u64) -> (f64, f64) {
        let tr = keyword_dataset(200, seed, Split::Train);
        let va = keyword_dataset(100, seed + 1000, Split::Valid);
        let cfg = TrainConfig {
            lambda,
            regularizer: RegularizerKind::Positions,
            patience: 20,
            ..small(4, seed)
        };
        let out = train(&cfg, &tr, &va).unwrap();
        let ck = &out.checkpoint;
        let docs = encode_dataset(&va, &ck.vocab, cfg.max_len);
        let docs: Vec<_> = docs
            .into_iter()
            .map(|mut d| {
                d.label = ck.labels.id(va.labels.name(d.label).unwrap()).unwrap();
                d
            })
            .collect();
        (
            orthogonality(&out.last, &docs).unwrap(),
            orthogonality(&ck.params, &docs).unwrap(),
        )
    }
}
