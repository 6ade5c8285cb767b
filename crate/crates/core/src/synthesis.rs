//! Robust perception-based synthesis compiled to a single linear program.
//!
//! Decision variables are the FIR taps of the four closed-loop responses. Each tap entry is split
//! into non-negative parts so that absolute values, and hence `ℓ∞`-induced norms, become linear
//! row-sum epigraphs.

use std::fmt;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::error_model::PerceptionBounds;
use crate::fir::{FirOperator, SystemResponses};
use crate::lp::{self, LinearProgram, LpStatus};
use crate::lti::DiscreteLtiSystem;

/// Tolerance on the tap recursions and the robustness row when re-checking a returned design.
pub const CHECK_TOL: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Xw,
    Xe,
    Uw,
    Ue,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Xw, Block::Xe, Block::Uw, Block::Ue];

    fn slot(self) -> usize {
        self as usize
    }
}

/// Which tap entries are decision variables, and where they sit in the variable vector.
#[derive(Debug, Clone)]
pub struct ResponseLayout {
    n: usize,
    m: usize,
    p: usize,
    horizon: usize,
    index: [Vec<Option<usize>>; 4],
    entries: Vec<(Block, usize, usize, usize)>,
}

/// Connected components of the state/input/output coupling graph.
fn coupling_groups(sys: &DiscreteLtiSystem) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
    let mut parent: Vec<usize> = (0..n + m + p).collect();
    fn find(parent: &mut [usize], mut v: usize) -> usize {
        while parent[v] != v {
            parent[v] = parent[parent[v]];
            v = parent[v];
        }
        v
    }
    let mut union = |a: usize, b: usize| {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    };
    for i in 0..n {
        for j in 0..n {
            if sys.a[(i, j)] != 0.0 {
                union(i, j);
            }
        }
        for k in 0..m {
            if sys.b[(i, k)] != 0.0 {
                union(i, n + k);
            }
        }
        for l in 0..p {
            if sys.c[(l, i)] != 0.0 {
                union(n + m + l, i);
            }
        }
    }
    let mut roots: Vec<usize> = (0..n + m + p).map(|v| find(&mut parent, v)).collect();
    let outputs = roots.split_off(n + m);
    let inputs = roots.split_off(n);
    (roots, inputs, outputs)
}

impl ResponseLayout {
    fn build(sys: &DiscreteLtiSystem, horizon: usize, keep: impl Fn(Block, usize, usize) -> bool) -> Self {
        let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
        let mut layout = Self {
            n,
            m,
            p,
            horizon,
            index: Default::default(),
            entries: Vec::new(),
        };
        for block in Block::ALL {
            let (rows, cols) = layout.dims(block);
            let mut idx = vec![None; horizon * rows * cols];
            for t in 1..=horizon {
                for i in 0..rows {
                    for j in 0..cols {
                        if keep(block, i, j) {
                            idx[((t - 1) * rows + i) * cols + j] = Some(layout.entries.len());
                            layout.entries.push((block, t, i, j));
                        }
                    }
                }
            }
            layout.index[block.slot()] = idx;
        }
        layout
    }

    /// Every tap entry is a variable.
    pub fn full(sys: &DiscreteLtiSystem, horizon: usize) -> Self {
        Self::build(sys, horizon, |_, _, _| true)
    }

    /// Only entries coupling signals of the same decoupled subsystem are variables.
    ///
    /// Zeroing the cross-subsystem entries of any feasible point keeps it feasible and does not
    /// increase any row sum, so this loses nothing for the norm-based costs and constraints.
    pub fn grouped(sys: &DiscreteLtiSystem, horizon: usize) -> Self {
        let (gs, gi, go) = coupling_groups(sys);
        Self::build(sys, horizon, |block, i, j| match block {
            Block::Xw => gs[i] == gs[j],
            Block::Xe => gs[i] == go[j],
            Block::Uw => gi[i] == gs[j],
            Block::Ue => gi[i] == go[j],
        })
    }

    pub fn dims(&self, block: Block) -> (usize, usize) {
        match block {
            Block::Xw => (self.n, self.n),
            Block::Xe => (self.n, self.p),
            Block::Uw => (self.m, self.n),
            Block::Ue => (self.m, self.p),
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Variable index of `block(t)[i, j]`, `t` starting at 1.
    pub fn get(&self, block: Block, t: usize, i: usize, j: usize) -> Option<usize> {
        if t == 0 || t > self.horizon {
            return None;
        }
        let (rows, cols) = self.dims(block);
        self.index[block.slot()][((t - 1) * rows + i) * cols + j]
    }

    pub fn entries(&self) -> &[(Block, usize, usize, usize)] {
        &self.entries
    }

    pub fn unpack(&self, values: &[f64]) -> SystemResponses {
        let mut taps: Vec<Vec<DMatrix<f64>>> = Block::ALL
            .iter()
            .map(|&b| {
                let (r, c) = self.dims(b);
                vec![DMatrix::zeros(r, c); self.horizon]
            })
            .collect();
        for (k, &(block, t, i, j)) in self.entries.iter().enumerate() {
            taps[block.slot()][t - 1][(i, j)] = values[k];
        }
        let mut ops = taps.into_iter().map(|t| FirOperator::new(t).expect("uniform taps"));
        SystemResponses {
            phi_xw: ops.next().unwrap(),
            phi_xe: ops.next().unwrap(),
            phi_uw: ops.next().unwrap(),
            phi_ue: ops.next().unwrap(),
            horizon: self.horizon,
        }
    }

    /// Variable values of `resp`, plus the largest entry left outside the layout.
    pub fn pack(&self, resp: &SystemResponses) -> (Vec<f64>, f64) {
        let values = self
            .entries
            .iter()
            .map(|&(block, t, i, j)| block_of(resp, block).tap(t)[(i, j)])
            .collect();
        let mut outside: f64 = 0.0;
        for block in Block::ALL {
            let op = block_of(resp, block);
            for t in 1..=op.horizon().min(self.horizon) {
                let tap = op.tap(t);
                for i in 0..tap.nrows() {
                    for j in 0..tap.ncols() {
                        if self.get(block, t, i, j).is_none() {
                            outside = outside.max(tap[(i, j)].abs());
                        }
                    }
                }
            }
        }
        (values, outside)
    }
}

pub fn block_of(resp: &SystemResponses, block: Block) -> &FirOperator {
    match block {
        Block::Xw => &resp.phi_xw,
        Block::Xe => &resp.phi_xe,
        Block::Uw => &resp.phi_uw,
        Block::Ue => &resp.phi_ue,
    }
}

/// `Σ terms · v = rhs`
#[derive(Debug, Clone, PartialEq)]
pub struct AffineRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

#[derive(Debug, Clone)]
pub struct AffineConstraints {
    pub layout: ResponseLayout,
    pub rows: Vec<AffineRow>,
}

impl AffineConstraints {
    /// Largest absolute violation at `values`.
    pub fn residual(&self, values: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.terms.iter().map(|&(k, c)| c * values[k]).sum::<f64>() - r.rhs).abs())
            .fold(0.0, f64::max)
    }
}

fn push_row(rows: &mut Vec<AffineRow>, terms: Vec<(usize, f64)>, rhs: f64) {
    if terms.is_empty() {
        debug_assert!(rhs == 0.0, "empty achievability row with nonzero target");
        return;
    }
    rows.push(AffineRow { terms, rhs });
}

/// Tap recursions obtained by matching powers of `z` in both the left and the right
/// achievability families, restricted to `layout`.
pub fn achievability_rows(sys: &DiscreteLtiSystem, layout: &ResponseLayout) -> Vec<AffineRow> {
    let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
    let horizon = layout.horizon;
    let a = &sys.a;
    let mut rows = Vec::new();

    // Left family: [zI − A, −B] Φ = [I, 0], one column family per exogenous signal.
    for (xb, ub, cols, identity) in [(Block::Xw, Block::Uw, n, true), (Block::Xe, Block::Ue, p, false)] {
        for j in 0..cols {
            for i in 0..n {
                let target = if identity && i == j { 1.0 } else { 0.0 };
                let terms = layout.get(xb, 1, i, j).map(|k| vec![(k, 1.0)]).unwrap_or_default();
                push_row(&mut rows, terms, target);
                for t in 1..=horizon {
                    let mut terms = Vec::new();
                    if let Some(k) = layout.get(xb, t + 1, i, j) {
                        terms.push((k, 1.0));
                    }
                    for k in 0..n {
                        if a[(i, k)] != 0.0 {
                            if let Some(v) = layout.get(xb, t, k, j) {
                                terms.push((v, -a[(i, k)]));
                            }
                        }
                    }
                    for q in 0..m {
                        if sys.b[(i, q)] != 0.0 {
                            if let Some(v) = layout.get(ub, t, q, j) {
                                terms.push((v, -sys.b[(i, q)]));
                            }
                        }
                    }
                    push_row(&mut rows, terms, 0.0);
                }
            }
        }
    }

    // Right family: Φ [zI − A; −C] = [I; 0], one row family per internal signal.
    for (wb, eb, row_count, identity) in [(Block::Xw, Block::Xe, n, true), (Block::Uw, Block::Ue, m, false)] {
        for i in 0..row_count {
            for j in 0..n {
                if !identity {
                    let terms = layout.get(wb, 1, i, j).map(|k| vec![(k, 1.0)]).unwrap_or_default();
                    push_row(&mut rows, terms, 0.0);
                }
                for t in 1..=horizon {
                    let mut terms = Vec::new();
                    if let Some(k) = layout.get(wb, t + 1, i, j) {
                        terms.push((k, 1.0));
                    }
                    for k in 0..n {
                        if a[(k, j)] != 0.0 {
                            if let Some(v) = layout.get(wb, t, i, k) {
                                terms.push((v, -a[(k, j)]));
                            }
                        }
                    }
                    for l in 0..p {
                        if sys.c[(l, j)] != 0.0 {
                            if let Some(v) = layout.get(eb, t, i, l) {
                                terms.push((v, -sys.c[(l, j)]));
                            }
                        }
                    }
                    push_row(&mut rows, terms, 0.0);
                }
            }
        }
    }
    rows
}

/// The achievability constraints over every tap entry.
pub fn achievability_constraints(sys: &DiscreteLtiSystem, horizon: usize) -> Result<AffineConstraints> {
    if horizon < 2 {
        return Err(invalid("horizon", format!("must be at least 2, got {horizon}")));
    }
    let layout = ResponseLayout::full(sys, horizon);
    let rows = achievability_rows(sys, &layout);
    Ok(AffineConstraints { layout, rows })
}

/// Largest violation of the tap recursions, evaluated with plain matrix products.
pub fn tap_residual(sys: &DiscreteLtiSystem, resp: &SystemResponses) -> f64 {
    let n = sys.states();
    let horizon = resp.horizon;
    let x = |op: &FirOperator, t: usize| op.tap(t);
    let mut worst: f64 = 0.0;
    let mut track = |mat: DMatrix<f64>| worst = worst.max(mat.amax());
    track(x(&resp.phi_xw, 1) - DMatrix::identity(n, n));
    track(x(&resp.phi_xe, 1));
    track(x(&resp.phi_uw, 1));
    for t in 1..=horizon {
        track(x(&resp.phi_xw, t + 1) - &sys.a * x(&resp.phi_xw, t) - &sys.b * x(&resp.phi_uw, t));
        track(x(&resp.phi_xe, t + 1) - &sys.a * x(&resp.phi_xe, t) - &sys.b * x(&resp.phi_ue, t));
        track(x(&resp.phi_xw, t + 1) - x(&resp.phi_xw, t) * &sys.a - x(&resp.phi_xe, t) * &sys.c);
        track(x(&resp.phi_uw, t + 1) - x(&resp.phi_uw, t) * &sys.a - x(&resp.phi_ue, t) * &sys.c);
    }
    worst
}

fn transfer(op: &FirOperator, z: Complex64) -> DMatrix<Complex64> {
    let zinv = z.inv();
    let mut power = Complex64::new(1.0, 0.0);
    let mut acc = DMatrix::from_element(op.rows(), op.cols(), Complex64::new(0.0, 0.0));
    for tap in op.taps() {
        power *= zinv;
        acc += tap.map(|v| Complex64::new(v, 0.0)) * power;
    }
    acc
}

fn complexify(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|v| Complex64::new(v, 0.0))
}

fn stack(resp: &SystemResponses, z: Complex64) -> DMatrix<Complex64> {
    let (xw, xe, uw, ue) = (
        transfer(&resp.phi_xw, z),
        transfer(&resp.phi_xe, z),
        transfer(&resp.phi_uw, z),
        transfer(&resp.phi_ue, z),
    );
    let (n, p, m) = (xw.nrows(), xe.ncols(), uw.nrows());
    let mut out = DMatrix::from_element(n + m, n + p, Complex64::new(0.0, 0.0));
    out.view_mut((0, 0), (n, n)).copy_from(&xw);
    out.view_mut((0, n), (n, p)).copy_from(&xe);
    out.view_mut((n, 0), (m, n)).copy_from(&uw);
    out.view_mut((n, n), (m, p)).copy_from(&ue);
    out
}

fn max_modulus(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|v| v.norm()).fold(0.0, f64::max)
}

/// `max |[zI − A, −B] Φ(z) − [I, 0]|` over entries.
pub fn left_residual(sys: &DiscreteLtiSystem, resp: &SystemResponses, z: Complex64) -> f64 {
    let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
    let mut lhs = DMatrix::from_element(n, n + m, Complex64::new(0.0, 0.0));
    lhs.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::<Complex64>::identity(n, n) * z - complexify(&sys.a)));
    lhs.view_mut((0, n), (n, m)).copy_from(&(-complexify(&sys.b)));
    let mut target = DMatrix::from_element(n, n + p, Complex64::new(0.0, 0.0));
    target.view_mut((0, 0), (n, n)).fill_with_identity();
    max_modulus(&(lhs * stack(resp, z) - target))
}

/// `max |Φ(z) [zI − A; −C] − [I; 0]|` over entries.
pub fn right_residual(sys: &DiscreteLtiSystem, resp: &SystemResponses, z: Complex64) -> f64 {
    let (n, m, p) = (sys.states(), sys.inputs(), sys.outputs());
    let mut rhs = DMatrix::from_element(n + p, n, Complex64::new(0.0, 0.0));
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(DMatrix::<Complex64>::identity(n, n) * z - complexify(&sys.a)));
    rhs.view_mut((n, 0), (p, n)).copy_from(&(-complexify(&sys.c)));
    let mut target = DMatrix::from_element(n + m, n, Complex64::new(0.0, 0.0));
    target.view_mut((0, 0), (n, n)).fill_with_identity();
    max_modulus(&(stack(resp, z) * rhs - target))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    QuadraticL1,
    Imitation,
}

/// Objective of the synthesis program with diagonal state and input weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSpec {
    pub kind: CostKind,
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal: Option<SystemResponses>,
}

impl CostSpec {
    pub fn quadratic(q_diag: Vec<f64>, r_diag: Vec<f64>) -> Self {
        Self {
            kind: CostKind::QuadraticL1,
            q_diag,
            r_diag,
            nominal: None,
        }
    }

    pub fn imitation(q_diag: Vec<f64>, r_diag: Vec<f64>, nominal: SystemResponses) -> Self {
        Self {
            kind: CostKind::Imitation,
            q_diag,
            r_diag,
            nominal: Some(nominal),
        }
    }

    /// Builds a spec from full weight matrices, which must be diagonal.
    pub fn from_matrices(
        kind: CostKind,
        q: &DMatrix<f64>,
        r: &DMatrix<f64>,
        nominal: Option<SystemResponses>,
    ) -> Result<Self> {
        let diag = |w: &DMatrix<f64>, name: &'static str| -> Result<Vec<f64>> {
            if !w.is_square() {
                return Err(invalid(name, "weight matrix must be square"));
            }
            for i in 0..w.nrows() {
                for j in 0..w.ncols() {
                    if i != j && w[(i, j)] != 0.0 {
                        return Err(invalid(name, "only diagonal weights are supported"));
                    }
                }
            }
            Ok(w.diagonal().iter().copied().collect())
        };
        Ok(Self {
            kind,
            q_diag: diag(q, "Q")?,
            r_diag: diag(r, "R")?,
            nominal,
        })
    }

    fn validate(&self, n: usize, m: usize) -> Result<()> {
        if self.q_diag.len() != n {
            return Err(mismatch("Q diagonal", n, self.q_diag.len()));
        }
        if self.r_diag.len() != m {
            return Err(mismatch("R diagonal", m, self.r_diag.len()));
        }
        if self.q_diag.iter().chain(&self.r_diag).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(invalid("weights", "must be finite and non-negative"));
        }
        match (self.kind, &self.nominal) {
            (CostKind::Imitation, None) => Err(invalid("nominal", "imitation cost needs nominal responses")),
            (CostKind::QuadraticL1, Some(_)) => Err(invalid("nominal", "only the imitation cost takes nominal responses")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iters: usize,
    /// Bound on the total absolute tap mass, keeping the split variables bounded.
    pub budget: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: lp::DEFAULT_TOL,
            max_iters: lp::DEFAULT_MAX_ITERS,
            budget: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisProblem {
    pub sys: DiscreteLtiSystem,
    pub horizon: usize,
    pub eps_w: f64,
    pub bounds: PerceptionBounds,
    pub d_max: f64,
    pub robustness_enabled: bool,
    pub margin: f64,
    /// Error level entering the guarantee; the fitted `ε_e` when absent.
    #[serde(default)]
    pub r0: Option<f64>,
    pub cost: CostSpec,
    #[serde(default)]
    pub solver: SolverSettings,
}

impl SynthesisProblem {
    pub fn validate(&self) -> Result<()> {
        self.sys.validate()?;
        if self.horizon < 2 {
            return Err(invalid("horizon", format!("must be at least 2, got {}", self.horizon)));
        }
        if !(self.eps_w >= 0.0 && self.eps_w.is_finite()) {
            return Err(invalid("eps_w", "must be finite and non-negative"));
        }
        if !(self.d_max >= 0.0 && self.d_max.is_finite()) {
            return Err(invalid("d_max", "must be finite and non-negative"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(invalid("margin", "must be positive"));
        }
        if let Some(r0) = self.r0 {
            if !(r0 >= 0.0 && r0.is_finite()) {
                return Err(invalid("r0", "must be finite and non-negative"));
            }
        }
        self.bounds.validate()?;
        self.cost.validate(self.sys.states(), self.sys.inputs())?;
        if let Some(nom) = &self.cost.nominal {
            if nom.horizon != self.horizon {
                return Err(mismatch("nominal horizon", self.horizon, nom.horizon));
            }
            nom.validate(self.sys.states(), self.sys.inputs(), self.sys.outputs())?;
        }
        Ok(())
    }

    pub fn r0(&self) -> f64 {
        self.r0.unwrap_or(self.bounds.epsilon_e)
    }

    /// Coefficients `(S + ε_e/r, ε_w/r)` and right-hand side `1 − d_max/r − margin`.
    pub fn robustness_terms(&self) -> (f64, f64, f64) {
        let r = self.bounds.radius;
        (
            self.bounds.slope + self.bounds.epsilon_e / r,
            self.eps_w / r,
            1.0 - self.d_max / r - self.margin,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingTerm {
    PerceptionSlope,
    Disturbance,
    TrajectoryOffset,
}

/// Why the robustness row could not be met.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfeasibilityReport {
    pub rhs: f64,
    pub slope_coefficient: f64,
    pub disturbance_coefficient: f64,
    /// The right-hand side is already non-positive; no solve was attempted.
    pub structural: bool,
    /// Smallest achievable left-hand side, when diagnosed.
    pub min_lhs: Option<f64>,
    pub slope_term: Option<f64>,
    pub disturbance_term: Option<f64>,
    pub binding: Option<BindingTerm>,
}

impl fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.structural {
            return write!(f, "robustness budget 1 - d_max/r - margin = {:.6} is not positive", self.rhs);
        }
        write!(
            f,
            "robustness row (S + eps_e/r) = {:.6}, eps_w/r = {:.6}, budget {:.6}",
            self.slope_coefficient, self.disturbance_coefficient, self.rhs
        )?;
        if let (Some(lhs), Some(s), Some(d)) = (self.min_lhs, self.slope_term, self.disturbance_term) {
            write!(f, "; smallest achievable left side {lhs:.6} (slope term {s:.6}, disturbance term {d:.6})")?;
        }
        if let Some(b) = self.binding {
            write!(f, "; binding term: {b:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub phi_xe_norm: f64,
    pub phi_xw_norm: f64,
    pub gamma: Option<f64>,
    pub guarantee_void: bool,
    pub s_used: f64,
    pub r0: f64,
    pub epsilon_e: f64,
    pub radius: f64,
    pub eps_w: f64,
    pub d_max: f64,
    pub robustness_enabled: bool,
    pub robustness_lhs: f64,
    pub robustness_rhs: f64,
    /// `rhs − lhs` of the robustness row, positive when it holds.
    pub feasibility_margin: f64,
    pub cost: f64,
}

/// `R₀ / (1 − S ∥Φxe∥)`.
pub fn guarantee_gamma(phi_xe_norm: f64, slope: f64, r0: f64) -> Result<f64> {
    let product = slope * phi_xe_norm;
    if !(product < 1.0) {
        return Err(Error::UndefinedBound { product });
    }
    Ok(r0 / (1.0 - product))
}

/// Guarantee figures for arbitrary responses under the problem's error profile.
pub fn guarantee_report(problem: &SynthesisProblem, resp: &SystemResponses, cost: f64) -> GuaranteeReport {
    let phi_xe_norm = resp.phi_xe.inf_induced_norm();
    let phi_xw_norm = resp.phi_xw.inf_induced_norm();
    let (a, b, rhs) = problem.robustness_terms();
    let lhs = a * phi_xe_norm + b * phi_xw_norm;
    let r0 = problem.r0();
    let gamma = guarantee_gamma(phi_xe_norm, problem.bounds.slope, r0).ok();
    GuaranteeReport {
        phi_xe_norm,
        phi_xw_norm,
        gamma,
        guarantee_void: gamma.is_none(),
        s_used: problem.bounds.slope,
        r0,
        epsilon_e: problem.bounds.epsilon_e,
        radius: problem.bounds.radius,
        eps_w: problem.eps_w,
        d_max: problem.d_max,
        robustness_enabled: problem.robustness_enabled,
        robustness_lhs: lhs,
        robustness_rhs: rhs,
        feasibility_margin: rhs - lhs,
        cost,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpStats {
    pub variables: usize,
    pub equalities: usize,
    pub inequalities: usize,
    pub iterations: usize,
    pub objective: f64,
    /// Largest optimality-condition violation of the returned LP point.
    pub kkt_violation: f64,
}

/// Optimality-condition violation tolerated from a solve that stopped short of its own tolerance.
/// The point is still polished and re-verified before use.
pub const NEAR_OPTIMAL_TOL: f64 = 1e-5;

fn near_optimal(sol: &lp::LpSolution) -> bool {
    let gap = sol.kkt.gap.abs() / (1.0 + sol.objective.abs());
    sol.kkt.max_violation().max(gap) <= NEAR_OPTIMAL_TOL && sol.v.iter().all(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOutcome {
    pub responses: SystemResponses,
    pub report: GuaranteeReport,
    pub lp: LpStats,
}

type SparseRow = Vec<(usize, f64)>;

/// Accumulates a sparse LP before densifying it for the solver.
#[derive(Default)]
struct ProgramBuilder {
    c: Vec<f64>,
    lower: Vec<f64>,
    eq: Vec<(SparseRow, f64)>,
    ineq: Vec<(SparseRow, f64)>,
}

impl ProgramBuilder {
    fn var(&mut self, cost: f64) -> usize {
        self.c.push(cost);
        self.lower.push(0.0);
        self.c.len() - 1
    }

    fn build(self) -> LinearProgram {
        let n = self.c.len();
        let dense = |rows: &[(SparseRow, f64)]| {
            let mut a = DMatrix::zeros(rows.len(), n);
            for (i, (terms, _)) in rows.iter().enumerate() {
                for &(j, v) in terms {
                    a[(i, j)] += v;
                }
            }
            (a, rows.iter().map(|r| r.1).collect::<Vec<_>>())
        };
        let (a_eq, b_eq) = dense(&self.eq);
        let (a_in, b_in) = dense(&self.ineq);
        LinearProgram::new(self.c)
            .with_equalities(a_eq, b_eq)
            .with_inequalities(a_in, b_in)
            .with_bounds(self.lower, vec![f64::INFINITY; n])
    }
}

/// The split `Φ = P − N + offset` with the achievability rows, robustness epigraphs and budget row.
struct CoreProgram {
    builder: ProgramBuilder,
    layout: ResponseLayout,
    /// `(P, N)` column of each layout entry.
    split: Vec<(usize, usize)>,
    /// Constant part of each entry; nonzero only for entries parametrised around a target.
    offset: Vec<f64>,
    norm_vars: Option<(usize, usize)>,
}

impl CoreProgram {
    fn new(sys: &DiscreteLtiSystem, layout: ResponseLayout) -> Self {
        let offset = vec![0.0; layout.len()];
        Self::around(sys, layout, offset)
    }

    /// Entries with a nonzero offset are deviations from it, so `P + N` is no longer `|Φ|` there.
    fn around(sys: &DiscreteLtiSystem, layout: ResponseLayout, offset: Vec<f64>) -> Self {
        let mut builder = ProgramBuilder::default();
        let split: Vec<(usize, usize)> = (0..layout.len()).map(|_| (builder.var(0.0), builder.var(0.0))).collect();
        for row in achievability_rows(sys, &layout) {
            let terms = row
                .terms
                .iter()
                .flat_map(|&(k, c)| [(split[k].0, c), (split[k].1, -c)])
                .collect();
            let shift: f64 = row.terms.iter().map(|&(k, c)| c * offset[k]).sum();
            builder.eq.push((terms, row.rhs - shift));
        }
        Self {
            builder,
            layout,
            split,
            offset,
            norm_vars: None,
        }
    }

    /// Sum of `|Φ|` proxies `P + N` over one output row of a block, all taps.
    fn abs_row(&self, block: Block, i: usize, weight: f64) -> SparseRow {
        let (_, cols) = self.layout.dims(block);
        let mut terms = Vec::new();
        for t in 1..=self.layout.horizon {
            for j in 0..cols {
                if let Some(k) = self.layout.get(block, t, i, j) {
                    debug_assert_eq!(self.offset[k], 0.0);
                    terms.push((self.split[k].0, weight));
                    terms.push((self.split[k].1, weight));
                }
            }
        }
        terms
    }

    /// Epigraph variables for `∥Φxe∥` and `∥Φxw∥`.
    fn add_norm_epigraphs(&mut self) -> (usize, usize) {
        let nxe = self.builder.var(0.0);
        let nxw = self.builder.var(0.0);
        let n = self.layout.n;
        for (block, var) in [(Block::Xe, nxe), (Block::Xw, nxw)] {
            for i in 0..n {
                let mut terms = self.abs_row(block, i, 1.0);
                if !terms.is_empty() {
                    terms.push((var, -1.0));
                    self.builder.ineq.push((terms, 0.0));
                }
            }
        }
        self.norm_vars = Some((nxe, nxw));
        (nxe, nxw)
    }

    fn add_budget(&mut self, budget: f64) {
        let terms = self.split.iter().flat_map(|&(p, q)| [(p, 1.0), (q, 1.0)]).collect();
        self.builder.ineq.push((terms, budget));
    }

    fn values(&self, v: &[f64]) -> Vec<f64> {
        self.split
            .iter()
            .zip(&self.offset)
            .map(|(&(p, q), o)| v[p] - v[q] + o)
            .collect()
    }
}

fn choose_layout(problem: &SynthesisProblem) -> ResponseLayout {
    let grouped = ResponseLayout::grouped(&problem.sys, problem.horizon);
    match &problem.cost.nominal {
        Some(nominal) if grouped.pack(nominal).1 > 0.0 => ResponseLayout::full(&problem.sys, problem.horizon),
        _ => grouped,
    }
}

fn add_quadratic_cost(core: &mut CoreProgram, problem: &SynthesisProblem, tau: usize) {
    let sys = &problem.sys;
    let (n, m, d) = (sys.states(), sys.inputs(), sys.disturbances());
    let horizon = problem.horizon;
    let rows = [(Block::Xw, Block::Xe, n, &problem.cost.q_diag), (Block::Uw, Block::Ue, m, &problem.cost.r_diag)];
    for (wb, eb, count, weights) in rows {
        for i in 0..count {
            let w = weights[i].sqrt();
            if w == 0.0 {
                continue;
            }
            let mut terms = core.abs_row(eb, i, w * problem.bounds.epsilon_e);
            if problem.eps_w > 0.0 {
                // (Φ H)(t)[i, col] = E⁺ − E⁻, whose sum bounds the absolute value exactly at optimum.
                for t in 1..=horizon {
                    for col in 0..d {
                        let mut def = Vec::new();
                        for k in 0..n {
                            let h = sys.h[(k, col)];
                            if h != 0.0 {
                                if let Some(idx) = core.layout.get(wb, t, i, k) {
                                    def.push((core.split[idx].0, h));
                                    def.push((core.split[idx].1, -h));
                                }
                            }
                        }
                        if def.is_empty() {
                            continue;
                        }
                        let ep = core.builder.var(0.0);
                        let en = core.builder.var(0.0);
                        def.push((ep, -1.0));
                        def.push((en, 1.0));
                        core.builder.eq.push((def, 0.0));
                        let coef = w * problem.eps_w;
                        terms.push((ep, coef));
                        terms.push((en, coef));
                    }
                }
            }
            terms.retain(|t| t.1 != 0.0);
            if !terms.is_empty() {
                terms.push((tau, -1.0));
                core.builder.ineq.push((terms, 0.0));
            }
        }
    }
}

/// Entries whose `|Φ|` is never needed are parametrised as deviations from the nominal tap, so
/// their split variables are the deviation itself.
fn imitation_program(problem: &SynthesisProblem, layout: ResponseLayout, nominal: &SystemResponses) -> CoreProgram {
    let (targets, _) = layout.pack(nominal);
    let offset = layout
        .entries()
        .iter()
        .zip(&targets)
        .map(|(&(block, ..), &t)| if needs_magnitude(problem, block) { 0.0 } else { t })
        .collect();
    CoreProgram::around(&problem.sys, layout, offset)
}

fn needs_magnitude(problem: &SynthesisProblem, block: Block) -> bool {
    problem.robustness_enabled && matches!(block, Block::Xe | Block::Xw)
}

fn add_imitation_cost(core: &mut CoreProgram, problem: &SynthesisProblem, nominal: &SystemResponses, tau: usize) {
    let (n, m) = (problem.sys.states(), problem.sys.inputs());
    let (targets, _) = core.layout.pack(nominal);
    let mut dev = Vec::with_capacity(core.split.len());
    for k in 0..core.split.len() {
        let (p, q) = core.split[k];
        let block = core.layout.entries()[k].0;
        if !needs_magnitude(problem, block) {
            dev.push((p, q));
            continue;
        }
        let dp = core.builder.var(0.0);
        let dn = core.builder.var(0.0);
        core.builder.eq.push((vec![(p, 1.0), (q, -1.0), (dp, -1.0), (dn, 1.0)], targets[k]));
        dev.push((dp, dn));
    }
    let rows = [(Block::Xw, Block::Xe, n, &problem.cost.q_diag), (Block::Uw, Block::Ue, m, &problem.cost.r_diag)];
    for (wb, eb, count, weights) in rows {
        for i in 0..count {
            let w = weights[i].sqrt();
            if w == 0.0 {
                continue;
            }
            let mut terms = Vec::new();
            for block in [wb, eb] {
                let (_, cols) = core.layout.dims(block);
                for t in 1..=problem.horizon {
                    for j in 0..cols {
                        if let Some(k) = core.layout.get(block, t, i, j) {
                            terms.push((dev[k].0, w));
                            terms.push((dev[k].1, w));
                        }
                    }
                }
            }
            if !terms.is_empty() {
                terms.push((tau, -1.0));
                core.builder.ineq.push((terms, 0.0));
            }
        }
    }
}

/// The cost of `resp` evaluated directly as the induced norm of the explicitly stacked,
/// weighted operator.
pub fn stacked_cost(problem: &SynthesisProblem, resp: &SystemResponses) -> Result<f64> {
    problem.cost.validate(problem.sys.states(), problem.sys.inputs())?;
    let (n, m, p, d) = (
        problem.sys.states(),
        problem.sys.inputs(),
        problem.sys.outputs(),
        problem.sys.disturbances(),
    );
    let sq = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, problem.cost.q_diag.iter().map(|v| v.sqrt())));
    let sr = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(m, problem.cost.r_diag.iter().map(|v| v.sqrt())));
    let horizon = resp.horizon;
    let taps = (1..=horizon)
        .map(|t| {
            let tap = |b: Block| -> DMatrix<f64> {
                let own = block_of(resp, b).tap(t);
                match &problem.cost.nominal {
                    Some(nom) if problem.cost.kind == CostKind::Imitation => own - block_of(nom, b).tap(t),
                    _ => own,
                }
            };
            let (left, right, cols) = match problem.cost.kind {
                CostKind::QuadraticL1 => (&problem.sys.h * problem.eps_w, problem.bounds.epsilon_e, d),
                CostKind::Imitation => (DMatrix::identity(n, n), 1.0, n),
            };
            let mut out = DMatrix::zeros(n + m, cols + p);
            out.view_mut((0, 0), (n, cols)).copy_from(&(&sq * tap(Block::Xw) * &left));
            out.view_mut((0, cols), (n, p)).copy_from(&(&sq * tap(Block::Xe) * right));
            out.view_mut((n, 0), (m, cols)).copy_from(&(&sr * tap(Block::Uw) * &left));
            out.view_mut((n, cols), (m, p)).copy_from(&(&sr * tap(Block::Ue) * right));
            out
        })
        .collect();
    Ok(FirOperator::new(taps)?.inf_induced_norm())
}

/// Assembles, solves and verifies the synthesis program.
pub fn synthesize(problem: &SynthesisProblem) -> Result<SynthesisOutcome> {
    problem.validate()?;
    synthesize_in(problem, choose_layout(problem))
}

fn synthesize_in(problem: &SynthesisProblem, layout: ResponseLayout) -> Result<SynthesisOutcome> {
    let (slope_coef, dist_coef, rhs) = problem.robustness_terms();
    let base_report = InfeasibilityReport {
        rhs,
        slope_coefficient: slope_coef,
        disturbance_coefficient: dist_coef,
        structural: false,
        min_lhs: None,
        slope_term: None,
        disturbance_term: None,
        binding: None,
    };
    if problem.robustness_enabled && rhs <= 0.0 {
        return Err(Error::Infeasible(Box::new(InfeasibilityReport {
            structural: true,
            binding: Some(BindingTerm::TrajectoryOffset),
            ..base_report
        })));
    }

    let mut core = match (&problem.cost.kind, &problem.cost.nominal) {
        (CostKind::Imitation, Some(nominal)) => imitation_program(problem, layout, nominal),
        _ => CoreProgram::new(&problem.sys, layout),
    };
    let tau = core.builder.var(1.0);
    match problem.cost.kind {
        CostKind::QuadraticL1 => add_quadratic_cost(&mut core, problem, tau),
        CostKind::Imitation => {
            let nominal = problem.cost.nominal.as_ref().expect("validated");
            add_imitation_cost(&mut core, problem, nominal, tau)
        }
    }
    if problem.robustness_enabled {
        let (nxe, nxw) = core.add_norm_epigraphs();
        core.builder.ineq.push((vec![(nxe, slope_coef), (nxw, dist_coef)], rhs));
    }
    core.add_budget(problem.solver.budget);

    let program = std::mem::take(&mut core.builder).build();
    let stats = |sol: &lp::LpSolution| LpStats {
        variables: program.num_vars(),
        equalities: program.b_eq.len(),
        inequalities: program.b_in.len(),
        iterations: sol.iterations,
        objective: sol.objective,
        kkt_violation: sol.kkt.max_violation(),
    };
    let sol = lp::solve(&program, problem.solver.tol, problem.solver.max_iters)
        .map_err(|e| Error::Solver(e.to_string()))?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::MaxIterations if near_optimal(&sol) => {
            log::warn!(
                "accepting the least-residual iterate after {} iterations (violation {:.1e})",
                sol.iterations,
                sol.kkt.max_violation()
            );
        }
        LpStatus::Infeasible => return Err(Error::Infeasible(Box::new(base_report))),
        status => {
            return Err(Error::Solver(format!(
                "program ended with status {status:?} after {} iterations",
                sol.iterations
            )))
        }
    }

    let mut values = core.values(&sol.v);
    let rows: Vec<(SparseRow, f64)> = achievability_rows(&problem.sys, &core.layout)
        .into_iter()
        .map(|r| (r.terms, r.rhs))
        .collect();
    lp::project_onto_equalities(&rows, &mut values, 2);
    let mass: f64 = values.iter().map(|v| v.abs()).sum();
    if mass > problem.solver.budget / 2.0 {
        return Err(Error::Solver(format!(
            "tap mass {mass:.3e} reaches the variable budget {:.3e}",
            problem.solver.budget
        )));
    }
    let responses = core.layout.unpack(&values);
    let residual = tap_residual(&problem.sys, &responses);
    if residual > CHECK_TOL {
        return Err(Error::Solver(format!("achievability residual {residual:.3e} after solve")));
    }
    let report = guarantee_report(problem, &responses, sol.objective);
    if problem.robustness_enabled && report.feasibility_margin < -CHECK_TOL {
        return Err(Error::Solver(format!(
            "robustness row violated by {:.3e} after solve",
            -report.feasibility_margin
        )));
    }
    Ok(SynthesisOutcome {
        responses,
        report,
        lp: stats(&sol),
    })
}

/// Smallest achievable left side of the robustness row, and which term dominates it.
pub fn diagnose_robustness(problem: &SynthesisProblem) -> Result<InfeasibilityReport> {
    problem.validate()?;
    let (slope_coef, dist_coef, rhs) = problem.robustness_terms();
    let mut core = CoreProgram::new(&problem.sys, ResponseLayout::grouped(&problem.sys, problem.horizon));
    let (nxe, nxw) = core.add_norm_epigraphs();
    core.builder.c[nxe] = slope_coef;
    core.builder.c[nxw] = dist_coef;
    core.add_budget(problem.solver.budget);
    let program = std::mem::take(&mut core.builder).build();
    let sol = lp::solve(&program, problem.solver.tol, problem.solver.max_iters)
        .map_err(|e| Error::Solver(e.to_string()))?;
    if sol.status != LpStatus::Optimal {
        return Err(Error::Solver(format!("diagnostic program ended with status {:?}", sol.status)));
    }
    let resp = core.layout.unpack(&core.values(&sol.v));
    let slope_term = slope_coef * resp.phi_xe.inf_induced_norm();
    let disturbance_term = dist_coef * resp.phi_xw.inf_induced_norm();
    let offset = problem.d_max / problem.bounds.radius;
    let binding = if offset >= slope_term.max(disturbance_term) {
        BindingTerm::TrajectoryOffset
    } else if slope_term >= disturbance_term {
        BindingTerm::PerceptionSlope
    } else {
        BindingTerm::Disturbance
    };
    Ok(InfeasibilityReport {
        rhs,
        slope_coefficient: slope_coef,
        disturbance_coefficient: dist_coef,
        structural: rhs <= 0.0,
        min_lhs: Some(slope_term + disturbance_term),
        slope_term: Some(slope_term),
        disturbance_term: Some(disturbance_term),
        binding: Some(binding),
    })
}
