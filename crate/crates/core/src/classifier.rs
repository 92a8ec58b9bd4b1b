//! MLP classifier, cross-entropy and the head-disagreement regularizers.

use lama_autodiff::{Axis, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamaError, Result};

pub const DEFAULT_MLP_HIDDEN: usize = 512;
pub const DEFAULT_DROPOUT: f64 = 0.4;
pub const DEFAULT_LAMBDA: f64 = 0.2;
pub const COSINE_EPS: f64 = 1e-12;
pub const PROB_FLOOR: f64 = 1e-12;

/// `W₁` is `hidden × d_doc`, `W_c` is `C × hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<F> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub wc: Tensor<F>,
    pub bc: Tensor<F>,
}

fn glorot<F: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor<F> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| F::of(rng.random_range(-bound..bound)))
}

impl<F: Scalar> ClassifierParams<F> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(d_doc: usize, hidden: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w1: glorot(hidden, d_doc, rng),
            b1: Tensor::zeros(1, hidden),
            wc: glorot(classes, hidden, rng),
            bc: Tensor::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.wc.rows()
    }

    pub fn register<'a>(&'a self, tape: &Tape<'a, F>) -> ClassifierVars {
        ClassifierVars {
            w1: tape.leaf_ref(&self.w1),
            b1: tape.leaf_ref(&self.b1),
            wc: tape.leaf_ref(&self.wc),
            bc: tape.leaf_ref(&self.bc),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub w1: Var,
    pub b1: Var,
    pub wc: Var,
    pub bc: Var,
}

/// Dropout applied to the hidden layer in train mode.
pub struct TrainMode<'r, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'r mut R,
}

/// Logits `W_c · dropout(tanh(W₁ d + b₁)) + b_c` for every row of `d_doc`.
pub fn classify_logits<F: Scalar, R: Rng + ?Sized>(
    tape: &Tape<'_, F>,
    d_doc: Var,
    vars: &ClassifierVars,
    train: Option<TrainMode<'_, R>>,
) -> Result<Var> {
    let (_, width) = tape.shape(d_doc);
    let (_, expected) = tape.shape(vars.w1);
    if width != expected {
        return Err(LamaError::Dimension(format!(
            "document representation has {width} features, classifier expects {expected}"
        )));
    }
    let pre = tape.add_row(tape.matmul_bt(d_doc, vars.w1)?, vars.b1)?;
    let mut hidden = tape.tanh(pre)?;
    if let Some(mode) = train {
        hidden = tape.dropout(hidden, mode.rate, mode.rng)?;
    }
    Ok(tape.add_row(tape.matmul_bt(hidden, vars.wc)?, vars.bc)?)
}

/// Class probabilities `ŷ = softmax(logits)` row-wise.
pub fn classify<F: Scalar, R: Rng + ?Sized>(
    tape: &Tape<'_, F>,
    d_doc: Var,
    vars: &ClassifierVars,
    train: Option<TrainMode<'_, R>>,
) -> Result<Var> {
    let logits = classify_logits(tape, d_doc, vars, train)?;
    Ok(tape.softmax(logits, Axis::Cols)?)
}

/// `−Σ_c y_c log ŷ_c` for a one-hot target, probabilities floored at 1e-12.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// `D_penal = −‖A Aᵀ − I‖²_F`.
pub fn disagreement_positions<F: Scalar>(tape: &Tape<'_, F>, a: Var) -> Result<Var> {
    let m = tape.shape(a).0;
    let gram = tape.matmul_bt(a, a)?;
    let eye = tape.constant(Tensor::identity(m));
    let diff = tape.sub(gram, eye)?;
    let norm = tape.frobenius_sq(diff)?;
    Ok(tape.scale(norm, -F::one())?)
}

/// `D_emb = −(1/m²) Σ_i Σ_j cos(s_i, s_j)`, diagonal included.
pub fn disagreement_embeddings<F: Scalar>(tape: &Tape<'_, F>, s: Var) -> Result<Var> {
    let m = tape.shape(s).0;
    let cos = tape.cosine_similarity(s, s, F::of(COSINE_EPS))?;
    let total = tape.sum(cos)?;
    Ok(tape.scale(total, F::of(-1.0 / (m * m) as f64))?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    None,
    #[default]
    Positions,
    Embeddings,
}

impl std::str::FromStr for RegularizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "positions" => Ok(Self::Positions),
            "embeddings" => Ok(Self::Embeddings),
            other => Err(format!("unknown regularizer `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub regularizer: RegularizerKind,
    pub lambda: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            regularizer: RegularizerKind::Positions,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

/// Disagreement term for one document, or `None` when disabled.
pub fn disagreement<F: Scalar>(
    tape: &Tape<'_, F>,
    kind: RegularizerKind,
    a: Var,
    s: Var,
) -> Result<Option<Var>> {
    Ok(match kind {
        RegularizerKind::None => None,
        RegularizerKind::Positions => Some(disagreement_positions(tape, a)?),
        RegularizerKind::Embeddings => Some(disagreement_embeddings(tape, s)?),
    })
}

/// `J = L − λ D`.
pub fn total_objective<F: Scalar>(
    tape: &Tape<'_, F>,
    loss: Var,
    disagreement: Option<Var>,
    lambda: f64,
) -> Result<Var> {
    if lambda < 0.0 {
        return Err(LamaError::Config(format!("lambda must be non-negative, got {lambda}")));
    }
    match disagreement {
        Some(d) if lambda != 0.0 => {
            let weighted = tape.scale(d, F::of(lambda))?;
            Ok(tape.sub(loss, weighted)?)
        }
        _ => Ok(loss),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn scalar(tape: &Tape<'_, f64>, v: Var) -> f64 {
        tape.item(v)
    }

    #[test]
    fn symmetric_weights_give_uniform_probabilities() {
        let mut g = rng::stream(1, 0);
        let mut p = ClassifierParams::<f64>::init(6, 4, 2, &mut g);
        let row = p.wc.row(0).to_vec();
        p.wc.row_mut(1).copy_from_slice(&row);
        let tape = Tape::new();
        let v = p.register(&tape);
        let d = tape.constant(Tensor::full(1, 6, 0.3));
        let probs = classify::<f64, rng::Rng>(&tape, d, &v, None).unwrap();
        assert_eq!(tape.value(probs).data(), &[0.5, 0.5]);
    }

    #[test]
    fn eval_is_deterministic_and_zero_rate_matches_eval() {
        let mut g = rng::stream(2, 0);
        let p = ClassifierParams::<f64>::init(5, 7, 3, &mut g);
        let tape = Tape::new();
        let v = p.register(&tape);
        let d = tape.constant(Tensor::from_fn(1, 5, |_, c| c as f64 * 0.1 - 0.2));
        let a = classify::<f64, rng::Rng>(&tape, d, &v, None).unwrap();
        let b = classify::<f64, rng::Rng>(&tape, d, &v, None).unwrap();
        assert_eq!(*tape.value(a), *tape.value(b));
        let mut drng = rng::stream(3, 0);
        let c = classify(&tape, d, &v, Some(TrainMode { rate: 0.0, rng: &mut drng })).unwrap();
        assert_eq!(*tape.value(a), *tape.value(c));
    }

    #[test]
    fn probabilities_invariant_to_logit_shift() {
        let tape = Tape::<f64>::new();
        let z = Tensor::from_f64(1, 3, &[0.2, -1.0, 2.5]).unwrap();
        let a = tape.softmax(tape.constant(z.clone()), Axis::Cols).unwrap();
        let b = tape.softmax(tape.constant(z.map(|x| x + 7.0)), Axis::Cols).unwrap();
        for (x, y) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], 1), 0.0);
        assert!((cross_entropy(&[0.25; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0, 0.0], 1).is_finite());
        assert!(cross_entropy(&[0.3, 0.7], 0) >= 0.0);
    }

    #[test]
    fn disagreement_positions_examples() {
        let tape = Tape::<f64>::new();
        let ortho = tape.constant(Tensor::from_f64(2, 3, &[1., 0., 0., 0., 0., 1.]).unwrap());
        assert_eq!(scalar(&tape, disagreement_positions(&tape, ortho).unwrap()), 0.0);
        let same = tape.constant(Tensor::from_f64(2, 3, &[0., 1., 0., 0., 1., 0.]).unwrap());
        assert_eq!(scalar(&tape, disagreement_positions(&tape, same).unwrap()), -2.0);
    }

    #[test]
    fn disagreement_embeddings_examples() {
        let tape = Tape::<f64>::new();
        let same = tape.constant(Tensor::from_f64(3, 2, &[1., 2., 1., 2., 1., 2.]).unwrap());
        let d = scalar(&tape, disagreement_embeddings(&tape, same).unwrap());
        assert!((d + 1.0).abs() < 1e-12);
        let ortho = tape.constant(Tensor::from_f64(2, 2, &[3., 0., 0., -2.]).unwrap());
        let d = scalar(&tape, disagreement_embeddings(&tape, ortho).unwrap());
        assert!((d + 0.5).abs() < 1e-12);
    }

    #[test]
    fn objective_arithmetic() {
        let tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::scalar(1.0));
        let d = tape.constant(Tensor::scalar(-2.0));
        let j = total_objective(&tape, l, Some(d), 0.2).unwrap();
        assert!((scalar(&tape, j) - 1.4).abs() < 1e-12);
        let j0 = total_objective(&tape, l, Some(d), 0.0).unwrap();
        assert_eq!(scalar(&tape, j0), 1.0);
        let jn = total_objective(&tape, l, None, 0.2).unwrap();
        assert_eq!(scalar(&tape, jn), 1.0);
        assert!(total_objective(&tape, l, Some(d), -1.0).is_err());
    }
}
