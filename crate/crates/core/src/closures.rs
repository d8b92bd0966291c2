//! Closure constructions: coupled chain for `max`/`min`, a DPH representation
//! of `tau1 + tau2`, finite mixtures and sums of independent pairs.
//!
//! The coupled chain runs on `E ∪ (S×S) ∪ ({∂1}×S) ∪ (S×{∂2})`. Pairs in `S×S`
//! are flattened row-major, first coordinate major, everywhere in the crate.

use crate::cdph::{CdphParams, Shift};
use crate::dph::DphParams;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Which part of the coupled state space a flat index belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainState {
    /// Common shock still running.
    Common(usize),
    /// Both chains active in `S`.
    Both(usize, usize),
    /// First chain absorbed, second in the given state.
    FirstDone(usize),
    /// Second chain absorbed, first in the given state.
    SecondDone(usize),
}

/// Initial vector, `P_max` and the block index of the coupled chain.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledChainParams {
    pub init: Vector,
    pub pmax: Matrix,
    pub states: Vec<ChainState>,
    e_dim: usize,
    s_dim: usize,
}

impl CoupledChainParams {
    pub fn dim(&self) -> usize {
        self.init.len()
    }

    /// `|E| + |S|^2`, the states where both coordinates are still counting.
    pub fn shared_len(&self) -> usize {
        self.e_dim + self.s_dim * self.s_dim
    }

    /// `U*` with `u*_{i,(j1,j2)} = u_{i j1} [j1 = j2]`.
    pub fn u_star(&self) -> Matrix {
        self.pmax
            .view((0, self.e_dim), (self.e_dim, self.s_dim * self.s_dim))
            .into_owned()
    }
}

/// `U*` from `U`: the jump out of `E` lands both chains in the same state.
pub fn u_star(u: &Matrix) -> Matrix {
    let (e, s) = u.shape();
    let mut out = Matrix::zeros(e, s * s);
    for i in 0..e {
        for j in 0..s {
            out[(i, j * s + j)] = u[(i, j)];
        }
    }
    out
}

pub fn build_coupled_chain(params: &CdphParams) -> CoupledChainParams {
    let (e, s) = params.dims();
    let ss = s * s;
    let dim = e + ss + 2 * s;
    let (o_both, o_first, o_second) = (e, e + ss, e + ss + s);
    let q1 = params.q1();
    let q2 = params.q2();
    let q1_exit = Matrix::from_column_slice(s, 1, params.q1_exit().as_slice());
    let q2_exit = Matrix::from_column_slice(s, 1, params.q2_exit().as_slice());

    let mut pmax = Matrix::zeros(dim, dim);
    pmax.view_mut((0, 0), (e, e)).copy_from(params.p());
    pmax.view_mut((0, o_both), (e, ss))
        .copy_from(&u_star(params.u()));
    pmax.view_mut((o_both, o_both), (ss, ss))
        .copy_from(&linalg::kron(q1, q2));
    pmax.view_mut((o_both, o_first), (ss, s))
        .copy_from(&linalg::kron(&q1_exit, q2));
    pmax.view_mut((o_both, o_second), (ss, s))
        .copy_from(&linalg::kron(q1, &q2_exit));
    pmax.view_mut((o_first, o_first), (s, s)).copy_from(q2);
    pmax.view_mut((o_second, o_second), (s, s)).copy_from(q1);

    let mut init = Vector::zeros(dim);
    init.rows_mut(0, e).copy_from(params.alpha());

    let mut states = Vec::with_capacity(dim);
    states.extend((0..e).map(ChainState::Common));
    states.extend((0..ss).map(|k| ChainState::Both(k / s, k % s)));
    states.extend((0..s).map(ChainState::FirstDone));
    states.extend((0..s).map(ChainState::SecondDone));

    CoupledChainParams {
        init,
        pmax,
        states,
        e_dim: e,
        s_dim: s,
    }
}

/// `max(tau1, tau2)` is the absorption time of the coupled chain.
pub fn max_dph(params: &CdphParams) -> Result<DphParams> {
    let chain = build_coupled_chain(params);
    DphParams::new(chain.init, chain.pmax)
}

/// `min(tau1, tau2)` is the exit time from `E ∪ (S×S)`.
pub fn min_dph(params: &CdphParams) -> Result<DphParams> {
    let chain = build_coupled_chain(params);
    let n = chain.shared_len();
    let pmin = chain.pmax.view((0, 0), (n, n)).into_owned();
    DphParams::new(chain.init.rows(0, n).into_owned(), pmin)
}

/// `tau1 + tau2` as a DPH.
///
/// Every visit to `E ∪ (S×S)` counts twice, so each such state is split into
/// an entry copy that always steps to a pass-through copy; the pass-through
/// copy carries the original outgoing row. States where one chain is already
/// absorbed count once and are kept as they are.
pub fn sum_dph(params: &CdphParams) -> Result<DphParams> {
    let chain = build_coupled_chain(params);
    let doubled = chain.shared_len();
    let single = chain.dim() - doubled;
    let dim = 2 * doubled + single;
    // entry copies: 0..doubled, pass-through: doubled..2*doubled, singles after
    let target = |j: usize| if j < doubled { j } else { doubled + j };
    // outgoing rows sit on pass-through copies and singles alike
    let source = |r: usize| doubled + r;

    let mut p = Matrix::zeros(dim, dim);
    for r in 0..doubled {
        p[(r, doubled + r)] = 1.0;
    }
    for r in 0..chain.dim() {
        let from = source(r);
        for j in 0..chain.dim() {
            let w = chain.pmax[(r, j)];
            if w != 0.0 {
                p[(from, target(j))] += w;
            }
        }
    }
    let mut init = Vector::zeros(dim);
    for r in 0..chain.dim() {
        if chain.init[r] != 0.0 {
            init[target(r)] = chain.init[r];
        }
    }
    DphParams::new(init, p)
}

/// Finite mixture with block-diagonal parameters.
pub fn mixture(components: &[(f64, CdphParams)]) -> Result<CdphParams> {
    let first = components
        .first()
        .ok_or_else(|| Error::InvalidParameters("mixture needs at least one component".into()))?;
    let shift = first.1.shift();
    let mut total = 0.0;
    for (w, c) in components {
        if !(*w > 0.0) || !w.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "mixture weight {w} is not positive"
            )));
        }
        if c.shift() != shift {
            return Err(Error::InvalidParameters(
                "mixture components must share one shift".into(),
            ));
        }
        total += w;
    }
    if (total - 1.0).abs() > linalg::ROW_SUM_TOL {
        return Err(Error::InvalidParameters(format!(
            "mixture weights sum to {total}, expected 1"
        )));
    }
    let alpha_parts: Vec<f64> = components
        .iter()
        .flat_map(|(w, c)| c.alpha().iter().map(move |a| w * a).collect::<Vec<_>>())
        .collect();
    let alpha = Vector::from_vec(alpha_parts);
    let blocks = |f: fn(&CdphParams) -> &Matrix| {
        let mats: Vec<&Matrix> = components.iter().map(|(_, c)| f(c)).collect();
        linalg::block_diag(&mats)
    };
    CdphParams::new(
        alpha,
        blocks(CdphParams::p),
        blocks(CdphParams::u),
        blocks(CdphParams::q1),
        blocks(CdphParams::q2),
    )?
    .with_shift(shift)
}

/// Representation of `(tau1(a) + tau1(b), tau2(a) + tau2(b))` for independent
/// pairs. Common-shock states are `E(a) ∪ (S(a)×E(b))`, the independent
/// states `(S(a)×S(b)) ∪ S(b)`.
pub fn sum_of_vectors(a: &CdphParams, b: &CdphParams) -> Result<CdphParams> {
    if a.shift() != Shift::default() || b.shift() != Shift::default() {
        return Err(Error::InvalidParameters(
            "sums of pairs are defined on the unshifted lattice only".into(),
        ));
    }
    let (ea, sa) = a.dims();
    let (eb, sb) = b.dims();
    let e_sum = ea + sa * eb;
    let s_sum = sa * sb + sb;

    let mut alpha = Vector::zeros(e_sum);
    alpha.rows_mut(0, ea).copy_from(a.alpha());

    let alpha_b = Matrix::from_row_slice(1, eb, b.alpha().as_slice());
    let id_sa = Matrix::identity(sa, sa);
    let id_sb = Matrix::identity(sb, sb);

    let mut p = Matrix::zeros(e_sum, e_sum);
    p.view_mut((0, 0), (ea, ea)).copy_from(a.p());
    p.view_mut((0, ea), (ea, sa * eb))
        .copy_from(&linalg::kron(a.u(), &alpha_b));
    p.view_mut((ea, ea), (sa * eb, sa * eb))
        .copy_from(&linalg::kron(&id_sa, b.p()));

    let mut u = Matrix::zeros(e_sum, s_sum);
    u.view_mut((ea, 0), (sa * eb, sa * sb))
        .copy_from(&linalg::kron(&id_sa, b.u()));

    let q_sum = |k: usize| {
        let exit = Matrix::from_column_slice(sa, 1, a.q_exit(k).as_slice());
        let mut q = Matrix::zeros(s_sum, s_sum);
        q.view_mut((0, 0), (sa * sb, sa * sb))
            .copy_from(&linalg::kron(a.q(k), &id_sb));
        q.view_mut((0, sa * sb), (sa * sb, sb))
            .copy_from(&linalg::kron(&exit, &id_sb));
        q.view_mut((sa * sb, sa * sb), (sb, sb)).copy_from(b.q(k));
        q
    };
    CdphParams::new(alpha, p, u, q_sum(1), q_sum(2))
}
