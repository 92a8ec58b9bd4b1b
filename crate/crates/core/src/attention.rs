//! Low-rank factorized multi-head attention.
//!
//! Each head `i` scores word `t` with the bilinear form `cᵀ (p_i q_iᵀ) u_t`,
//! evaluated without ever forming the `d_ann × d_ann` matrix: the scores of all
//! heads for one word are `(P̃ᵀ c) ∘ (Q̃ᵀ u_t)`. Scores then pass through
//! `tanh`, an l2 normalization across heads for every word, and a softmax over
//! the words of each head.

use lama_autodiff::{Axis, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{LamaError, Result};

pub const L2_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.1;

/// Attention parameters over annotations of width `d_ann`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<F> {
    /// `d_ann × d_ann` word transform.
    pub w_w: Tensor<F>,
    /// `1 × d_ann`.
    pub b_w: Tensor<F>,
    /// `d_ann × m` context-side factors, one column per head.
    pub p: Tensor<F>,
    /// `d_ann × m` word-side factors, one column per head.
    pub q: Tensor<F>,
    /// Learned global context `1 × d_ann`; absent when derived per document.
    pub c: Option<Tensor<F>>,
}

pub(crate) fn gaussian<F: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<F> {
    let normal = Normal::new(0.0, std).expect("positive standard deviation");
    Tensor::from_fn(rows, cols, |_, _| F::of(normal.sample(rng)))
}

impl<F: Scalar> AttnParams<F> {
    /// Every tensor drawn from N(0, 0.1²).
    pub fn init<R: Rng + ?Sized>(d_ann: usize, heads: usize, learned_context: bool, rng: &mut R) -> Self {
        assert!(heads >= 1, "at least one attention head");
        let w_w = gaussian(d_ann, d_ann, INIT_STD, rng);
        let b_w = gaussian(1, d_ann, INIT_STD, rng);
        let p = gaussian(d_ann, heads, INIT_STD, rng);
        let q = gaussian(d_ann, heads, INIT_STD, rng);
        let c = learned_context.then(|| context_init_learned(d_ann, rng));
        Self { w_w, b_w, p, q, c }
    }

    pub fn heads(&self) -> usize {
        self.p.cols()
    }

    pub fn d_ann(&self) -> usize {
        self.w_w.rows()
    }

    pub fn register<'a>(&'a self, tape: &Tape<'a, F>) -> AttnVars {
        AttnVars {
            w_w: tape.leaf_ref(&self.w_w),
            b_w: tape.leaf_ref(&self.b_w),
            p: tape.leaf_ref(&self.p),
            q: tape.leaf_ref(&self.q),
            c: self.c.as_ref().map(|c| tape.leaf_ref(c)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_w: Var,
    pub b_w: Var,
    pub p: Var,
    pub q: Var,
    pub c: Option<Var>,
}

/// Trainable context vector drawn from N(0, 0.1²).
pub fn context_init_learned<F: Scalar, R: Rng + ?Sized>(d_ann: usize, rng: &mut R) -> Tensor<F> {
    gaussian(1, d_ann, INIT_STD, rng)
}

/// Mean of the first `true_len` embedding rows; gradients flow back into the
/// embeddings.
pub fn context_doc_mean<F: Scalar>(
    tape: &Tape<'_, F>,
    embedded: Var,
    true_len: usize,
    d_ann: usize,
) -> Result<Var> {
    let (t, d) = tape.shape(embedded);
    if d != d_ann {
        return Err(LamaError::Dimension(format!(
            "document-mean context needs embedding dim {d} to equal annotation dim {d_ann}"
        )));
    }
    if true_len == 0 || true_len > t {
        return Err(LamaError::Dimension(format!("true length {true_len} outside 1..={t}")));
    }
    let valid = if true_len < t {
        tape.slice(embedded, Axis::Rows, 0, true_len)?
    } else {
        embedded
    };
    Ok(tape.mean_axis(valid, Axis::Rows)?)
}

/// `U = tanh(H W_wᵀ + b_w)`, one row per word.
pub fn word_transform<F: Scalar>(tape: &Tape<'_, F>, h: Var, w_w: Var, b_w: Var) -> Result<Var> {
    let hw = tape.matmul_bt(h, w_w)?;
    Ok(tape.tanh(tape.add_row(hw, b_w)?)?)
}

/// Dense single-head bilinear scores `f_t = cᵀ W u_t` (`1 × T`) and their
/// masked softmax `α`.
pub fn single_head_scores<F: Scalar>(
    tape: &Tape<'_, F>,
    u: Var,
    c: Var,
    w_i: Var,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let cw = tape.matmul(c, w_i)?;
    let f = tape.matmul_bt(cw, u)?;
    let alpha = tape.masked_softmax(f, Axis::Cols, Some(mask))?;
    Ok((f, alpha))
}

/// Factorized scores `F` (`m × T`): column `t` is `(P̃ᵀ c) ∘ (Q̃ᵀ u_t)`.
pub fn lama_scores<F: Scalar>(tape: &Tape<'_, F>, u: Var, c: Var, p: Var, q: Var) -> Result<Var> {
    let (t, d_ann) = tape.shape(u);
    if tape.shape(p) != tape.shape(q) || tape.shape(p).0 != d_ann || tape.shape(c) != (1, d_ann) {
        return Err(LamaError::Dimension(format!(
            "lama_scores: U {:?}, c {:?}, P {:?}, Q {:?}",
            tape.shape(u),
            tape.shape(c),
            tape.shape(p),
            tape.shape(q)
        )));
    }
    let context = tape.matmul(c, p)?;
    let context = tape.broadcast_rows(context, t)?;
    let words = tape.matmul(u, q)?;
    let per_word = tape.hadamard(context, words)?;
    Ok(tape.transpose(per_word)?)
}

/// `A = softmax_rows(mask(l2_cols(tanh(F))))`: each word's head vector is
/// normalized, padded words get exactly zero weight.
pub fn attention_matrix<F: Scalar>(tape: &Tape<'_, F>, scores: Var, mask: &[bool]) -> Result<Var> {
    if mask.len() != tape.shape(scores).1 {
        return Err(LamaError::Dimension(format!(
            "mask of length {} for {} positions",
            mask.len(),
            tape.shape(scores).1
        )));
    }
    let squashed = tape.tanh(scores)?;
    let normalized = tape.l2_normalize(squashed, Axis::Rows, F::of(L2_EPS))?;
    Ok(tape.masked_softmax(normalized, Axis::Cols, Some(mask))?)
}

/// `S = A H` (`m × d_ann`) and its row-concatenation `d_doc` (`1 × m·d_ann`).
pub fn sentence_embedding<F: Scalar>(tape: &Tape<'_, F>, a: Var, h: Var) -> Result<(Var, Var)> {
    let s = tape.matmul(a, h)?;
    let (m, d) = tape.shape(s);
    let flat = tape.reshape(s, 1, m * d)?;
    Ok((s, flat))
}

/// Attention over a document's annotations.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub a: Var,
    pub s: Var,
    pub d_doc: Var,
}

/// Word transform, factorized scores, normalization and pooling over `h`.
pub fn attend<F: Scalar>(
    tape: &Tape<'_, F>,
    h: Var,
    context: Var,
    vars: &AttnVars,
    mask: &[bool],
) -> Result<AttentionVars> {
    let u = word_transform(tape, h, vars.w_w, vars.b_w)?;
    let scores = lama_scores(tape, u, context, vars.p, vars.q)?;
    let a = attention_matrix(tape, scores, mask)?;
    let (s, d_doc) = sentence_embedding(tape, a, h)?;
    Ok(AttentionVars { a, s, d_doc })
}

/// Materialized attention for one document.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput<F> {
    /// `m × T`.
    pub a: Tensor<F>,
    /// `m × d_ann`.
    pub s: Tensor<F>,
    /// `1 × m·d_ann`.
    pub d_doc: Tensor<F>,
}

impl<F: Scalar> AttentionOutput<F> {
    pub fn from_vars(tape: &Tape<'_, F>, v: &AttentionVars) -> Self {
        Self {
            a: tape.value(v.a).clone(),
            s: tape.value(v.s).clone(),
            d_doc: tape.value(v.d_doc).clone(),
        }
    }
}

/// Attention applied directly to word embeddings (no recurrent encoder):
/// `H` is the `T × d` embedding matrix and the first `true_len` rows are valid.
/// Without a learned context the document mean of the embeddings is used.
pub fn lama_encoder_forward<F: Scalar>(
    embedded: &Tensor<F>,
    true_len: usize,
    params: &AttnParams<F>,
) -> Result<AttentionOutput<F>> {
    let (t, d) = embedded.shape();
    if d != params.d_ann() {
        return Err(LamaError::Dimension(format!(
            "encoder input has {d} features, attention expects {}",
            params.d_ann()
        )));
    }
    let tape = Tape::new();
    let vars = params.register(&tape);
    let x = tape.leaf_ref(embedded);
    let context = match vars.c {
        Some(c) => c,
        None => context_doc_mean(&tape, x, true_len, d)?,
    };
    let mask: Vec<bool> = (0..t).map(|i| i < true_len).collect();
    let out = attend(&tape, x, context, &vars, &mask)?;
    Ok(AttentionOutput::from_vars(&tape, &out))
}
