mod common;

use common::*;
use lama_core::attention::*;
use lama_core::autodiff::{grad_check, Axis, Tape, Tensor};
use lama_core::classifier::disagreement_positions;
use lama_core::gru::{bigru_encode, BiGruParams};
use lama_core::model::{ContextMode, Encoder, ModelConfig};
use lama_core::params::lama_param_count;
use lama_core::rng;
use proptest::prelude::*;

#[test]
fn factorized_scores_match_dense_bilinear_oracle() {
    for seed in 0..150 {
        let gap = rank1_gap(seed);
        assert!(gap < 1e-6, "instance {seed}: gap {gap:e}");
    }
}

#[test]
fn sentence_embedding_matches_head_by_head_sum() {
    let tape = Tape::<f64>::new();
    let h = tape.constant(random(7, 6, 1, 1.0));
    let scores = tape.constant(random(4, 7, 2, 2.0));
    let mask = [true, true, true, true, true, false, false];
    let a = attention_matrix(&tape, scores, &mask).unwrap();
    let (s, flat) = sentence_embedding(&tape, a, h).unwrap();
    let (av, hv, sv) = (tape.value(a), tape.value(h), tape.value(s));
    for i in 0..4 {
        for j in 0..6 {
            let mut acc = 0.0;
            for t in 0..7 {
                if av.get(i, t) != 0.0 {
                    acc += av.get(i, t) * hv.get(t, j);
                }
            }
            assert_eq!(acc, sv.get(i, j));
        }
    }
    assert_eq!(tape.value(flat).data(), sv.data());
}

#[test]
fn attention_pipeline_passes_grad_check() {
    for seed in 0..20 {
        let (t, d, m) = (5, 6, 3);
        let params = vec![
            random(t, d, seed, 1.0),
            random(d, d, seed + 100, 0.5),
            random(1, d, seed + 200, 0.5),
            random(d, m, seed + 300, 1.0),
            random(d, m, seed + 400, 1.0),
            random(1, d, seed + 500, 1.0),
        ];
        let weights = random(1, m * d, seed + 600, 1.0);
        let mask = [true, true, true, true, false];
        let report = grad_check(
            |tape, v| {
                let vars = AttnVars { w_w: v[1], b_w: v[2], p: v[3], q: v[4], c: None };
                let out = attend(tape, v[0], v[5], &vars, &mask)?;
                let w = tape.constant(weights.clone());
                let lin = tape.sum(tape.hadamard(out.d_doc, w)?)?;
                let pen = disagreement_positions(tape, out.a)?;
                Ok::<_, lama_core::LamaError>(tape.add(lin, pen)?)
            },
            &params,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed}: {:.3e}", report.max_rel_error());
    }
}

#[test]
fn factor_parameters_cost_two_d_ann_per_head() {
    let mut g = rng::stream(1, 0);
    for m in 1..6 {
        let p = AttnParams::<f64>::init(10, m, false, &mut g);
        let cfg = ModelConfig {
            vocab_size: 3,
            embed_dim: 10,
            hidden: 5,
            heads: m,
            mlp_hidden: 2,
            classes: 2,
            encoder: Encoder::Bigru,
            context: ContextMode::DocMean,
        };
        assert_eq!(p.p.len() + p.q.len(), 2 * 10 * m);
        assert_eq!(lama_param_count(&cfg).component("factors"), p.p.len() + p.q.len());
    }
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(perm[r], c))
}

#[test]
fn encoder_variant_is_permutation_equivariant() {
    for seed in 0..10 {
        let mut g = rng::stream(seed, 3);
        for learned in [true, false] {
            let params = AttnParams::<f64>::init(6, 3, learned, &mut g);
            let x = random(7, 6, seed, 1.0);
            let perm = [3, 0, 6, 1, 5, 2, 4];
            let a = lama_encoder_forward(&x, 7, &params).unwrap();
            let b = lama_encoder_forward(&permute_rows(&x, &perm), 7, &params).unwrap();
            for i in 0..3 {
                for (t, &src) in perm.iter().enumerate() {
                    assert!((b.a.get(i, t) - a.a.get(i, src)).abs() < 1e-12);
                }
            }
            for (u, v) in a.s.data().iter().zip(b.s.data()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_variant_equals_attention_over_injected_annotations() {
    let mut g = rng::stream(2, 3);
    let params = AttnParams::<f64>::init(4, 2, true, &mut g);
    let x = random(5, 4, 9, 1.0);
    let le = lama_encoder_forward(&x, 5, &params).unwrap();
    let tape = Tape::new();
    let vars = params.register(&tape);
    let h = tape.leaf_ref(&x);
    let out = attend(&tape, h, vars.c.unwrap(), &vars, &[true; 5]).unwrap();
    assert_eq!(AttentionOutput::from_vars(&tape, &out), le);
}

/// Attention of a bi-GRU document with `pad` extra zero rows.
fn encoded(x: &Tensor<f64>, true_len: usize, pad: usize, heads: usize, seed: u64) -> AttentionOutput<f64> {
    let mut g = rng::stream(seed, 8);
    let d = x.cols();
    let gru = BiGruParams::<f64>::init(d, d / 2, &mut g);
    let attn = AttnParams::<f64>::init(d, heads, false, &mut g);
    let padded = Tensor::from_fn(x.rows() + pad, d, |r, c| if r < x.rows() { x.get(r, c) } else { 0.0 });
    let tape = Tape::new();
    let gv = BiGruVars { forward: gru.forward.register(&tape), backward: gru.backward.register(&tape) };
    let av = attn.register(&tape);
    let xv = tape.leaf_ref(&padded);
    let ann = bigru_encode(&tape, xv, &gv, true_len).unwrap();
    let ctx = context_doc_mean(&tape, xv, true_len, d).unwrap();
    let out = attend(&tape, ann.h, ctx, &av, &ann.mask).unwrap();
    AttentionOutput::from_vars(&tape, &out)
}

use lama_core::gru::BiGruVars;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_rows_are_distributions_and_padding_is_inert(
        heads in 1usize..8,
        half in 1usize..6,
        true_len in 1usize..12,
        extra in 0usize..5,
        pad in 1usize..6,
        seed in 0u64..1000,
    ) {
        let d = 2 * half;
        let x = random(true_len + extra, d, seed, 1.0);
        let base = encoded(&x, true_len, 0, heads, seed);
        for i in 0..heads {
            let row = base.a.row(i);
            let total: f64 = row[..true_len].iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
            prop_assert!(row[true_len..].iter().all(|&w| w == 0.0));
        }
        let padded = encoded(&x, true_len, pad, heads, seed);
        for i in 0..heads {
            prop_assert_eq!(&padded.a.row(i)[..true_len + extra], base.a.row(i));
            prop_assert!(padded.a.row(i)[true_len + extra..].iter().all(|&w| w == 0.0));
        }
        prop_assert_eq!(padded.s, base.s);
    }

    #[test]
    fn pre_softmax_scores_are_bounded(heads in 1usize..8, t in 1usize..10, seed in 0u64..1000) {
        let tape = Tape::<f64>::new();
        let f = tape.constant(random(heads, t, seed, 50.0));
        let n = tape.l2_normalize(tape.tanh(f).unwrap(), Axis::Rows, 1e-12).unwrap();
        prop_assert!(tape.value(n).data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
