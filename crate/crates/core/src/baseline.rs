//! Forward-only multi-head scaled dot-product self-attention, the Transformer
//! encoder's attention sublayer. Used for runtime comparison and counting.

use lama_autodiff::{Scalar, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LamaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub layers: usize,
}

impl Default for TeConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            max_positions: crate::text::DEFAULT_MAX_LEN,
            layers: 1,
        }
    }
}

impl TeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers == 0 {
            return Err(LamaError::Config("d_model, heads and layers must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(LamaError::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Projection weights; every `W` is `d_model × d_model` applied as `X Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct SdpaParams<F> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
}

impl<F: Scalar> SdpaParams<F> {
    /// Uniform(±1/√d_model) weights and biases.
    pub fn init<R: Rng + ?Sized>(d_model: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut u = |r: usize, c: usize| {
            Tensor::from_fn(r, c, |_, _| F::of(rng.random_range(-bound..bound)))
        };
        Self {
            wq: u(d_model, d_model),
            bq: u(1, d_model),
            wk: u(d_model, d_model),
            bk: u(1, d_model),
            wv: u(d_model, d_model),
            bv: u(1, d_model),
            wo: u(d_model, d_model),
            bo: u(1, d_model),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }
}

fn affine<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let mut y = x.matmul_bt(w)?;
    let cols = y.cols();
    for r in 0..y.rows() {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b.data()) {
            *v = *v + *bias;
        }
    }
    debug_assert_eq!(cols, b.cols());
    Ok(y)
}

pub struct SdpaOutput<F> {
    /// `T × d_model`.
    pub output: Tensor<F>,
    /// One `T × T` row-stochastic matrix per head.
    pub weights: Vec<Tensor<F>>,
}

/// `softmax(Q_i K_iᵀ / √d_k) V_i` for each head, concatenated and projected.
pub fn sdpa_forward<F: Scalar>(x: &Tensor<F>, params: &SdpaParams<F>, heads: usize) -> Result<SdpaOutput<F>> {
    let d_model = params.d_model();
    TeConfig {
        d_model,
        heads,
        ..TeConfig::default()
    }
    .validate()?;
    if x.cols() != d_model {
        return Err(LamaError::Dimension(format!(
            "input has {} features, layer expects {d_model}",
            x.cols()
        )));
    }
    let t = x.rows();
    let dk = d_model / heads;
    let q = affine(x, &params.wq, &params.bq)?;
    let k = affine(x, &params.wk, &params.bk)?;
    let v = affine(x, &params.wv, &params.bv)?;
    let scale = F::of(1.0 / (dk as f64).sqrt());
    let mut concat = Tensor::zeros(t, d_model);
    let mut weights = Vec::with_capacity(heads);
    let head = |m: &Tensor<F>, i: usize| Tensor::from_fn(t, dk, |r, c| m.get(r, i * dk + c));
    for i in 0..heads {
        let (qi, ki, vi) = (head(&q, i), head(&k, i), head(&v, i));
        let mut s = qi.matmul_bt(&ki)?;
        for r in 0..t {
            let row = s.row_mut(r);
            let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b * scale));
            let mut total = F::zero();
            for x in row.iter_mut() {
                *x = (*x * scale - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        let out = s.matmul(&vi)?;
        for r in 0..t {
            concat.row_mut(r)[i * dk..(i + 1) * dk].copy_from_slice(out.row(r));
        }
        weights.push(s);
    }
    Ok(SdpaOutput {
        output: affine(&concat, &params.wo, &params.bo)?,
        weights,
    })
}
