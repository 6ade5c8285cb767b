//! Linear programming: `min cᵀv  s.t.  A_eq v = b_eq,  A_in v ≤ b_in,  l ≤ v ≤ u`.
//!
//! Solved with a homogeneous self-dual interior-point method (Mehrotra predictor-corrector)
//! whose normal equations are factored by an envelope Cholesky in reverse Cuthill–McKee order.

mod envelope;
mod ipm;
mod standard;

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::serde_matrix;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 200;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("malformed linear program: {0}")]
    Malformed(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProgram {
    pub c: Vec<f64>,
    #[serde(with = "serde_matrix::matrix")]
    pub a_eq: DMatrix<f64>,
    pub b_eq: Vec<f64>,
    #[serde(with = "serde_matrix::matrix")]
    pub a_in: DMatrix<f64>,
    pub b_in: Vec<f64>,
    #[serde(with = "infinite_as_null")]
    pub lower: Vec<f64>,
    #[serde(with = "infinite_as_null")]
    pub upper: Vec<f64>,
}

mod infinite_as_null {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        v.iter()
            .map(|x| x.is_finite().then_some(*x))
            .collect::<Vec<_>>()
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        // `null` stands for an absent bound; the sign is recovered from field position by the caller.
        let raw = Vec::<Option<f64>>::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect())
    }
}

impl LinearProgram {
    /// Free variables, no constraints.
    pub fn new(c: Vec<f64>) -> Self {
        let n = c.len();
        Self {
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: Vec::new(),
            a_in: DMatrix::zeros(0, n),
            b_in: Vec::new(),
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: Vec<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        let mut lp: Self = serde_json::from_str(text)?;
        let n = lp.c.len();
        if lp.a_eq.nrows() == 0 {
            lp.a_eq = DMatrix::zeros(0, n);
        }
        if lp.a_in.nrows() == 0 {
            lp.a_in = DMatrix::zeros(0, n);
        }
        for l in &mut lp.lower {
            if l.is_nan() {
                *l = f64::NEG_INFINITY;
            }
        }
        for u in &mut lp.upper {
            if u.is_nan() {
                *u = f64::INFINITY;
            }
        }
        Ok(lp)
    }

    pub fn validate(&self) -> Result<(), LpError> {
        let n = self.num_vars();
        let shape = |what: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(LpError::Malformed(format!("{what} is {got:?}, expected {want:?}")))
            }
        };
        shape("A_eq", self.a_eq.shape(), (self.b_eq.len(), n))?;
        shape("A_in", self.a_in.shape(), (self.b_in.len(), n))?;
        if self.lower.len() != n || self.upper.len() != n {
            return Err(LpError::Malformed("bound vectors must match the variable count".into()));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.c) {
            return Err(LpError::NonFinite("c"));
        }
        if !finite(self.a_eq.as_slice()) || !finite(&self.b_eq) {
            return Err(LpError::NonFinite("equality constraints"));
        }
        if !finite(self.a_in.as_slice()) || !finite(&self.b_in) {
            return Err(LpError::NonFinite("inequality constraints"));
        }
        for j in 0..n {
            let (l, u) = (self.lower[j], self.upper[j]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(LpError::NonFinite("bounds"));
            }
            if l > u {
                return Err(LpError::Malformed(format!("variable {j}: lower bound {l} exceeds upper {u}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
}

/// Worst-case violations of the optimality conditions, all absolute.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `∥A_eq v − b_eq∥∞`
    pub primal_eq: f64,
    /// `max(0, A_in v − b_in)`
    pub primal_ineq: f64,
    pub bounds: f64,
    /// `∥c + A_eqᵀ y + A_inᵀ λ − z_l + z_u∥∞`
    pub dual: f64,
    /// Negative multipliers, or multipliers on absent bounds.
    pub dual_sign: f64,
    /// Largest single complementary product.
    pub complementarity: f64,
    /// Primal minus dual objective.
    pub gap: f64,
}

impl KktResiduals {
    pub fn max_violation(&self) -> f64 {
        [
            self.primal_eq,
            self.primal_ineq,
            self.bounds,
            self.dual,
            self.dual_sign,
            self.complementarity,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

/// Ray proving infeasibility (multipliers) or unboundedness (primal direction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Certificate {
    /// `A_eqᵀy + A_inᵀλ − z_l + z_u = 0` with `λ, z ≥ 0` and positive dual objective.
    Farkas {
        eq: Vec<f64>,
        ineq: Vec<f64>,
        lower: Vec<f64>,
        upper: Vec<f64>,
        value: f64,
    },
    /// Direction keeping every constraint satisfied with negative cost slope.
    Ray { direction: Vec<f64>, slope: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub status: LpStatus,
    pub v: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    pub objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub certificate: Option<Certificate>,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

pub fn solve(lp: &LinearProgram, tol: f64, max_iters: usize) -> Result<LpSolution, LpError> {
    lp.validate()?;
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(LpError::Malformed(format!("tolerance must be positive, got {tol}")));
    }
    Ok(ipm::solve(lp, tol, max_iters))
}

pub fn solve_default(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    solve(lp, DEFAULT_TOL, DEFAULT_MAX_ITERS)
}

fn dual_objective(lp: &LinearProgram, y: &[f64], lam: &[f64], zl: &[f64], zu: &[f64]) -> f64 {
    let mut d = -dot(&lp.b_eq, y) - dot(&lp.b_in, lam);
    for j in 0..lp.num_vars() {
        if lp.lower[j].is_finite() {
            d += lp.lower[j] * zl[j];
        }
        if lp.upper[j].is_finite() {
            d -= lp.upper[j] * zu[j];
        }
    }
    d
}

/// Moves `x` to the nearest point (in the Euclidean sense) satisfying the sparse equalities
/// `rows`, which must be consistent. Dependent rows are tolerated.
pub fn project_onto_equalities(rows: &[(Vec<(usize, f64)>, f64)], x: &mut [f64], sweeps: usize) {
    let m = rows.len();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); x.len()];
    for (i, (terms, _)) in rows.iter().enumerate() {
        for &(j, v) in terms {
            cols[j].push((i, v));
        }
    }
    let mut chol = envelope::Envelope::new(m, &cols);
    chol.factor(&vec![1.0; x.len()]);
    for _ in 0..sweeps {
        let resid: Vec<f64> = rows
            .iter()
            .map(|(terms, rhs)| terms.iter().map(|&(j, v)| v * x[j]).sum::<f64>() - rhs)
            .collect();
        let y = chol.solve(&resid);
        for (j, col) in cols.iter().enumerate() {
            x[j] -= col.iter().map(|&(i, v)| v * y[i]).sum::<f64>();
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Residuals of a primal/dual pair, computed directly from the problem data.
pub fn kkt_residuals(
    lp: &LinearProgram,
    v: &[f64],
    y: &[f64],
    lam: &[f64],
    zl: &[f64],
    zu: &[f64],
) -> KktResiduals {
    let n = lp.num_vars();
    let vv = nalgebra::DVector::from_column_slice(v);
    let eq = &lp.a_eq * &vv;
    let ineq = &lp.a_in * &vv;
    let mut r = KktResiduals::default();
    for (i, b) in lp.b_eq.iter().enumerate() {
        r.primal_eq = r.primal_eq.max((eq[i] - b).abs());
    }
    for (i, b) in lp.b_in.iter().enumerate() {
        let slack = b - ineq[i];
        r.primal_ineq = r.primal_ineq.max(-slack);
        r.dual_sign = r.dual_sign.max(-lam[i]);
        r.complementarity = r.complementarity.max((lam[i] * slack).abs());
    }
    let mut stat = nalgebra::DVector::from_column_slice(&lp.c);
    stat += lp.a_eq.tr_mul(&nalgebra::DVector::from_column_slice(y));
    stat += lp.a_in.tr_mul(&nalgebra::DVector::from_column_slice(lam));
    for j in 0..n {
        stat[j] += zu[j] - zl[j];
        let (l, u) = (lp.lower[j], lp.upper[j]);
        r.dual_sign = r.dual_sign.max(-zl[j]).max(-zu[j]);
        if l.is_finite() {
            r.bounds = r.bounds.max(l - v[j]);
            r.complementarity = r.complementarity.max((zl[j] * (v[j] - l)).abs());
        } else {
            r.dual_sign = r.dual_sign.max(zl[j].abs());
        }
        if u.is_finite() {
            r.bounds = r.bounds.max(v[j] - u);
            r.complementarity = r.complementarity.max((zu[j] * (u - v[j])).abs());
        } else {
            r.dual_sign = r.dual_sign.max(zu[j].abs());
        }
    }
    r.dual = stat.amax();
    r.gap = dot(&lp.c, v) - dual_objective(lp, y, lam, zl, zu);
    r
}

/// Recomputes every residual of a reported solution.
pub fn verify_kkt(lp: &LinearProgram, sol: &LpSolution) -> KktResiduals {
    kkt_residuals(lp, &sol.v, &sol.eq_duals, &sol.ineq_duals, &sol.lower_duals, &sol.upper_duals)
}
