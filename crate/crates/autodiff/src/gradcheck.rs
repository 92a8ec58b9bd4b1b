//! Central finite-difference gradient checking.

use crate::error::AutodiffError;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares backward gradients of `builder` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one entry at a time.
///
/// `builder` receives a fresh tape with one leaf per entry of `params` (same
/// order) and must return a `1 × 1` root. It must be deterministic.
pub fn grad_check<F, B, E>(
    builder: B,
    params: &[Tensor<F>],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, E>
where
    F: Scalar,
    B: Fn(&Tape<'_, F>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let evaluate = |values: &[Tensor<F>]| -> Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf_ref(v)).collect();
        let root = builder(&tape, &vars)?;
        Ok(tape.item(root).as_f64())
    };

    let analytic: Vec<Tensor<F>> = {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|v| tape.leaf_ref(v)).collect();
        let root = builder(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()))
            })
            .collect()
    };

    let mut work: Vec<Tensor<F>> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (index, grad) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..grad.len() {
            let original = work[index].data()[k];
            work[index].data_mut()[k] = F::of(original.as_f64() + step);
            let plus = evaluate(&work)?;
            work[index].data_mut()[k] = F::of(original.as_f64() - step);
            let minus = evaluate(&work)?;
            work[index].data_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[k].as_f64();
            max_rel = max_rel.max(relative_error(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        checks.push(ParamCheck {
            index,
            max_rel_error: max_rel,
            max_abs_error: max_abs,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance,
    })
}
