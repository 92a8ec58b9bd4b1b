//! GRU cell and bidirectional encoder.
//!
//! Row-vector convention: a state is `1 × h` and an input is `1 × d`, so the
//! gate pre-activation `W x + U h + b` is computed as `x Wᵀ + h Uᵀ + b`.

use lama_autodiff::{Axis, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{LamaError, Result};

/// Gate weights of one GRU direction. `W_*` are `h × d`, `U_*` are `h × h`,
/// biases are `1 × h`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams<F> {
    pub w_z: Tensor<F>,
    pub u_z: Tensor<F>,
    pub b_z: Tensor<F>,
    pub w_r: Tensor<F>,
    pub u_r: Tensor<F>,
    pub b_r: Tensor<F>,
    pub w_h: Tensor<F>,
    pub u_h: Tensor<F>,
    pub b_h: Tensor<F>,
}

pub(crate) const GRU_TENSORS: [&str; 9] =
    ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];

impl<F: Scalar> GruParams<F> {
    /// Uniform(−1/√h, 1/√h) for every tensor.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut u = |r: usize, c: usize| {
            Tensor::from_fn(r, c, |_, _| F::of(rng.random_range(-bound..bound)))
        };
        Self {
            w_z: u(hidden, input_dim),
            u_z: u(hidden, hidden),
            b_z: u(1, hidden),
            w_r: u(hidden, input_dim),
            u_r: u(hidden, hidden),
            b_r: u(1, hidden),
            w_h: u(hidden, input_dim),
            u_h: u(hidden, hidden),
            b_h: u(1, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_z.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_z.rows()
    }

    pub(crate) fn tensors(&self) -> [&Tensor<F>; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h,
            &self.u_h, &self.b_h,
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [&mut Tensor<F>; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }

    /// From nine tensors in [`GRU_TENSORS`] order.
    pub(crate) fn from_vec(t: Vec<Tensor<F>>) -> Self {
        let [w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h]: [Tensor<F>; 9] =
            t.try_into().unwrap_or_else(|_| panic!("a GRU direction has nine tensors"));
        Self { w_z, u_z, b_z, w_r, u_r, b_r, w_h, u_h, b_h }
    }

    pub fn register<'a>(&'a self, tape: &Tape<'a, F>) -> GruVars {
        let v: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf_ref(t)).collect();
        GruVars::from_slice(&v)
    }
}

/// Tape handles for one direction's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

impl GruVars {
    /// From nine handles in [`GRU_TENSORS`] order.
    pub fn from_slice(v: &[Var]) -> Self {
        assert_eq!(v.len(), 9, "a GRU direction has nine tensors");
        Self {
            w_z: v[0],
            u_z: v[1],
            b_z: v[2],
            w_r: v[3],
            u_r: v[4],
            b_r: v[5],
            w_h: v[6],
            u_h: v[7],
            b_h: v[8],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiGruParams<F> {
    pub forward: GruParams<F>,
    pub backward: GruParams<F>,
}

impl<F: Scalar> BiGruParams<F> {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let forward = GruParams::init(input_dim, hidden, rng);
        let backward = GruParams::init(input_dim, hidden, rng);
        Self { forward, backward }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiGruVars {
    pub forward: GruVars,
    pub backward: GruVars,
}

/// Input projections `X Wᵀ + b` for the three gates, one row per position.
struct Projected {
    z: Var,
    r: Var,
    h: Var,
}

fn project<F: Scalar>(tape: &Tape<'_, F>, x: Var, p: &GruVars) -> Result<Projected> {
    let lin = |w: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul_bt(x, w)?;
        Ok(tape.add_row(xw, b)?)
    };
    Ok(Projected {
        z: lin(p.w_z, p.b_z)?,
        r: lin(p.w_r, p.b_r)?,
        h: lin(p.w_h, p.b_h)?,
    })
}

/// One recurrence given the projected inputs of the current position:
/// `z = σ(xz + h Uzᵀ)`, `r = σ(xr + h Urᵀ)`, `h̃ = tanh(xh + r ∘ (h Uhᵀ))`,
/// `h' = (1 − z) ∘ h + z ∘ h̃`. The candidate bias sits in `xh`, outside the
/// reset product.
fn recur<F: Scalar>(
    tape: &Tape<'_, F>,
    xz: Var,
    xr: Var,
    xh: Var,
    h_prev: Var,
    p: &GruVars,
) -> Result<Var> {
    let hz = tape.matmul_bt(h_prev, p.u_z)?;
    let z = tape.sigmoid(tape.add(xz, hz)?)?;
    let hr = tape.matmul_bt(h_prev, p.u_r)?;
    let r = tape.sigmoid(tape.add(xr, hr)?)?;
    let hh = tape.matmul_bt(h_prev, p.u_h)?;
    let gated = tape.hadamard(r, hh)?;
    let cand = tape.tanh(tape.add(xh, gated)?)?;
    let ones = tape.constant(Tensor::ones(1, tape.shape(z).1));
    let keep = tape.hadamard(tape.sub(ones, z)?, h_prev)?;
    let update = tape.hadamard(z, cand)?;
    Ok(tape.add(keep, update)?)
}

fn check_dims<F: Scalar>(tape: &Tape<'_, F>, x: Var, p: &GruVars) -> Result<(usize, usize)> {
    let (_, d) = tape.shape(x);
    let (h, pd) = tape.shape(p.w_z);
    if d != pd {
        return Err(LamaError::Dimension(format!(
            "GRU input has {d} features, weights expect {pd}"
        )));
    }
    Ok((d, h))
}

/// Single GRU transition for a `1 × d` input and `1 × h` previous state.
pub fn gru_step<F: Scalar>(tape: &Tape<'_, F>, x_t: Var, h_prev: Var, p: &GruVars) -> Result<Var> {
    let (_, h) = check_dims(tape, x_t, p)?;
    if tape.shape(x_t).0 != 1 || tape.shape(h_prev) != (1, h) {
        return Err(LamaError::Dimension(format!(
            "gru_step expects 1×d input and 1×{h} state, got {:?} and {:?}",
            tape.shape(x_t),
            tape.shape(h_prev)
        )));
    }
    let proj = project(tape, x_t, p)?;
    recur(tape, proj.z, proj.r, proj.h, h_prev, p)
}

/// Runs one direction over rows `order` of the projected input.
fn run_direction<F: Scalar>(
    tape: &Tape<'_, F>,
    proj: &Projected,
    order: impl Iterator<Item = usize>,
    hidden: usize,
    p: &GruVars,
) -> Result<Vec<(usize, Var)>> {
    let mut state = tape.constant(Tensor::zeros(1, hidden));
    let mut out = Vec::new();
    for t in order {
        let xz = tape.slice(proj.z, Axis::Rows, t, 1)?;
        let xr = tape.slice(proj.r, Axis::Rows, t, 1)?;
        let xh = tape.slice(proj.h, Axis::Rows, t, 1)?;
        state = recur(tape, xz, xr, xh, state, p)?;
        out.push((t, state));
    }
    Ok(out)
}

/// Word annotations `H` (`T × 2h`) and the validity mask over positions.
#[derive(Clone, Debug)]
pub struct Annotations {
    pub h: Var,
    pub mask: Vec<bool>,
}

/// Bidirectional encoding of `x` (`T × d`): the forward pass covers positions
/// `0..true_len`, the backward pass `true_len-1..=0`, both from zero states.
/// Row `t` of `H` is `[→h_t ; ←h_t]`; rows at or past `true_len` are zero.
pub fn bigru_encode<F: Scalar>(
    tape: &Tape<'_, F>,
    x: Var,
    params: &BiGruVars,
    true_len: usize,
) -> Result<Annotations> {
    let (total, _) = tape.shape(x);
    if true_len == 0 || true_len > total {
        return Err(LamaError::Dimension(format!(
            "true length {true_len} outside 1..={total}"
        )));
    }
    let (_, hidden) = check_dims(tape, x, &params.forward)?;
    check_dims(tape, x, &params.backward)?;
    let valid = if true_len < total {
        tape.slice(x, Axis::Rows, 0, true_len)?
    } else {
        x
    };
    let fwd_proj = project(tape, valid, &params.forward)?;
    let bwd_proj = project(tape, valid, &params.backward)?;
    let fwd = run_direction(tape, &fwd_proj, 0..true_len, hidden, &params.forward)?;
    let mut bwd = run_direction(tape, &bwd_proj, (0..true_len).rev(), hidden, &params.backward)?;
    bwd.reverse();

    let mut rows = Vec::with_capacity(true_len + 1);
    for ((t, f), (tb, b)) in fwd.into_iter().zip(bwd) {
        debug_assert_eq!(t, tb);
        rows.push(tape.concat(&[f, b], Axis::Cols)?);
    }
    if true_len < total {
        rows.push(tape.constant(Tensor::zeros(total - true_len, 2 * hidden)));
    }
    let h = tape.concat(&rows, Axis::Rows)?;
    Ok(Annotations {
        h,
        mask: (0..total).map(|t| t < true_len).collect(),
    })
}
