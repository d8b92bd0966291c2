//! Dense real-matrix kernel shared by every model in the crate.
//!
//! Matrices here are tiny (a few dozen states at most), so everything is dense
//! and linear systems are solved by LU with partial pivoting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest row-sum excess tolerated on a sub-stochastic matrix.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Entries in `[-NEG_CLAMP, 0)` are treated as round-off and clamped to zero.
pub const NEG_CLAMP: f64 = 1e-12;
/// Decay threshold used by the termination check.
pub const DECAY_TOL: f64 = 1e-12;
/// Condition estimates above this are reported as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Number of squarings used by [`terminates`]; covers chains of length `2^60`.
const MAX_SQUARINGS: usize = 60;

fn ensure_square(a: &Matrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    Ok(())
}

/// `A^n` by repeated squaring; `A^0` is the identity.
pub fn mat_power(a: &Matrix, n: u32) -> Result<Matrix> {
    ensure_square(a)?;
    let mut result = Matrix::identity(a.nrows(), a.ncols());
    let mut base = a.clone();
    let mut exp = n;
    while exp > 0 {
        if exp & 1 == 1 {
            result = &result * &base;
        }
        exp >>= 1;
        if exp > 0 {
            base = &base * &base;
        }
    }
    Ok(result)
}

/// Solves `m w = v` with a condition check.
pub fn solve(m: &Matrix, v: &Vector) -> Result<Vector> {
    ensure_square(m)?;
    if v.len() != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "system of order {} with right-hand side of length {}",
            m.nrows(),
            v.len()
        )));
    }
    let inv = inverse(m)?;
    let w = &inv * v;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::Singular {
            condition: f64::INFINITY,
        });
    }
    Ok(w)
}

/// Inverse with an infinity-norm condition estimate.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    ensure_square(m)?;
    let lu = m.clone().lu();
    let inv = lu.try_inverse().ok_or(Error::Singular {
        condition: f64::INFINITY,
    })?;
    let condition = inf_norm(m) * inf_norm(&inv);
    if !condition.is_finite() || condition > MAX_CONDITION {
        return Err(Error::Singular { condition });
    }
    Ok(inv)
}

/// Computes `(I - xA)^{-1} v`.
///
/// The Neumann series of `xA` must converge: `|x| |A|` has to pass the
/// termination check, otherwise the solve is refused.
pub fn resolvent_apply(a: &Matrix, x: f64, v: &Vector) -> Result<Vector> {
    ensure_square(a)?;
    let scaled = a.map(|e| (x * e).abs());
    if !terminates(&scaled) {
        return Err(Error::NotTerminating(format!(
            "resolvent at x = {x} has spectral radius >= 1"
        )));
    }
    let m = Matrix::identity(a.nrows(), a.ncols()) - a * x;
    solve(&m, v)
}

/// Kronecker product with row-major block order.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Entrywise product of two column vectors.
pub fn hadamard(u: &Vector, v: &Vector) -> Result<Vector> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "hadamard of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    Ok(u.component_mul(v))
}

/// Block-diagonal assembly; blocks need not be square.
pub fn block_diag(blocks: &[&Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

pub fn inf_norm(a: &Matrix) -> f64 {
    a.row_iter()
        .map(|row| row.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `1 - A 1`.
pub fn exit_vector(a: &Matrix) -> Vector {
    Vector::from_iterator(a.nrows(), a.row_iter().map(|row| 1.0 - row.sum()))
}

/// Termination proxy: some power `A^T` with `T <= 2^60` satisfies
/// `||A^T 1||_inf < 1e-12`. Powers are taken by squaring, so slowly mixing
/// chains are handled in a few dozen products.
pub fn terminates(a: &Matrix) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    if a.iter().any(|x| !x.is_finite()) {
        return false;
    }
    let ones = Vector::from_element(a.nrows(), 1.0);
    let mut power = a.map(f64::abs);
    for _ in 0..=MAX_SQUARINGS {
        let reach = &power * &ones;
        let norm = reach.amax();
        if !norm.is_finite() {
            return false;
        }
        if norm < DECAY_TOL {
            return true;
        }
        power = &power * &power;
    }
    false
}

/// Outcome of [`validate_substochastic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubstochasticReport {
    pub entries_in_range: bool,
    pub row_sums_ok: bool,
    pub terminates: bool,
    /// `None` unless a strict exit was requested.
    pub has_exit: Option<bool>,
}

impl SubstochasticReport {
    pub fn is_valid(&self) -> bool {
        self.entries_in_range && self.row_sums_ok && self.terminates && self.has_exit != Some(false)
    }

    pub(crate) fn describe(&self) -> String {
        let mut problems = Vec::new();
        if !self.entries_in_range {
            problems.push("entries outside [0, 1]");
        }
        if !self.row_sums_ok {
            problems.push("row sum above one");
        }
        if !self.terminates {
            problems.push("chain does not terminate");
        }
        if self.has_exit == Some(false) {
            problems.push("no row with positive exit probability");
        }
        problems.join(", ")
    }
}

pub fn validate_substochastic(a: &Matrix, strict_exit: bool) -> SubstochasticReport {
    let square = a.nrows() == a.ncols();
    let entries_in_range = a
        .iter()
        .all(|&x| x.is_finite() && (-NEG_CLAMP..=1.0 + ROW_SUM_TOL).contains(&x));
    let row_sums: Vec<f64> = a.row_iter().map(|row| row.sum()).collect();
    let row_sums_ok = row_sums.iter().all(|&s| s <= 1.0 + ROW_SUM_TOL);
    let has_exit = strict_exit.then(|| row_sums.iter().any(|&s| s < 1.0));
    SubstochasticReport {
        entries_in_range,
        row_sums_ok,
        terminates: square && entries_in_range && terminates(a),
        has_exit,
    }
}

/// Clamps round-off negatives in `[-1e-12, 0)` to zero; rejects anything lower.
pub fn clamp_nonnegative(a: &Matrix, what: &str) -> Result<Matrix> {
    if let Some(bad) = a.iter().find(|&&x| !x.is_finite() || x < -NEG_CLAMP) {
        return Err(Error::InvalidParameters(format!(
            "{what} has invalid entry {bad}"
        )));
    }
    Ok(a.map(|x| x.max(0.0)))
}
