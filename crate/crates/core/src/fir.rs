//! Strictly proper FIR convolution operators and controller realisation.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Error, Result};
use crate::serde_matrix;

/// `(Φ s)[k] = Σ_{t=1}^{min(k,T)} Φ(t) s[k-t]`; `taps[0]` holds `Φ(1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirOperator {
    #[serde(with = "serde_matrix::matrix_list")]
    taps: Vec<DMatrix<f64>>,
    rows: usize,
    cols: usize,
}

impl FirOperator {
    pub fn new(taps: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = taps.first().ok_or(Error::Empty("operator taps"))?;
        let (rows, cols) = first.shape();
        if let Some(bad) = taps.iter().find(|t| t.shape() != (rows, cols)) {
            return Err(mismatch("tap shape", format!("{rows}x{cols}"), format!("{:?}", bad.shape())));
        }
        Ok(Self { taps, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize, horizon: usize) -> Self {
        Self {
            taps: vec![DMatrix::zeros(rows, cols); horizon.max(1)],
            rows,
            cols,
        }
    }

    /// Checks the invariants after deserialising.
    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Empty("operator taps"));
        }
        if self.taps.iter().any(|t| t.shape() != (self.rows, self.cols)) {
            return Err(mismatch("tap shape", format!("{}x{}", self.rows, self.cols), "inconsistent"));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.taps.len()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn taps(&self) -> &[DMatrix<f64>] {
        &self.taps
    }

    /// Tap `Φ(t)` for `t >= 1`; zero beyond the horizon.
    pub fn tap(&self, t: usize) -> DMatrix<f64> {
        assert!(t >= 1, "strictly proper operators have no tap 0");
        self.taps
            .get(t - 1)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.rows, self.cols))
    }

    /// `ℓ∞ → ℓ∞` induced norm: the largest absolute row sum over all taps.
    pub fn inf_induced_norm(&self) -> f64 {
        (0..self.rows)
            .map(|i| {
                self.taps
                    .iter()
                    .map(|t| t.row(i).iter().map(|v| v.abs()).sum::<f64>())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// Applies the operator to a signal sampled from `k = 0`.
    pub fn signal_apply(&self, signal: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        if let Some(bad) = signal.iter().find(|s| s.len() != self.cols) {
            return Err(mismatch("signal", self.cols, bad.len()));
        }
        Ok((0..signal.len())
            .map(|k| {
                let mut out = DVector::zeros(self.rows);
                for t in 1..=k.min(self.horizon()) {
                    out.gemv(1.0, &self.taps[t - 1], &signal[k - t], 1.0);
                }
                out
            })
            .collect())
    }

    /// Product `a ∗ b` with taps `1..=horizon`; the first tap of the product is always zero.
    pub fn convolve(a: &FirOperator, b: &FirOperator, horizon: usize) -> Result<FirOperator> {
        if a.cols != b.rows {
            return Err(mismatch("convolve inner dimension", a.cols, b.rows));
        }
        let taps = (1..=horizon.max(1))
            .map(|t| {
                let mut acc = DMatrix::zeros(a.rows, b.cols);
                for j in 1..t {
                    if j <= a.horizon() && t - j <= b.horizon() {
                        acc.gemm(1.0, &a.taps[j - 1], &b.taps[t - j - 1], 1.0);
                    }
                }
                acc
            })
            .collect();
        Ok(FirOperator {
            taps,
            rows: a.rows,
            cols: b.cols,
        })
    }

    /// Natural horizon of `a ∗ b`.
    pub fn product_horizon(a: &FirOperator, b: &FirOperator) -> usize {
        a.horizon() + b.horizon()
    }
}

/// Causal (not strictly proper) taps `G(0), G(1), …` solving `Φxw ∗ G = Φxe`.
///
/// Forward substitution over `G(k) = Φxe(k+1) − Σ_{j=1}^{k} Φxw(j+1) G(k−j)`.
pub fn solve_deconvolution(
    phi_xw: &FirOperator,
    phi_xe: &FirOperator,
    out_len: usize,
) -> Result<Vec<DMatrix<f64>>> {
    if phi_xw.rows != phi_xw.cols {
        return Err(mismatch("state response must be square", phi_xw.rows, phi_xw.cols));
    }
    if phi_xe.rows != phi_xw.rows {
        return Err(mismatch("deconvolution rows", phi_xw.rows, phi_xe.rows));
    }
    let n = phi_xw.rows;
    let deviation = (&phi_xw.taps[0] - DMatrix::<f64>::identity(n, n)).amax();
    if deviation > 1e-9 {
        return Err(Error::NonIdentityLeadingTap { deviation });
    }
    let mut g: Vec<DMatrix<f64>> = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let mut gk = phi_xe.tap(k + 1);
        for j in 1..=k.min(phi_xw.horizon() - 1) {
            gk.gemm(-1.0, &phi_xw.taps[j], &g[k - j], 1.0);
        }
        g.push(gk);
    }
    Ok(g)
}

/// The four closed-loop response blocks of a synthesised design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemResponses {
    pub phi_xw: FirOperator,
    pub phi_xe: FirOperator,
    pub phi_uw: FirOperator,
    pub phi_ue: FirOperator,
    pub horizon: usize,
}

impl SystemResponses {
    pub fn validate(&self, n: usize, m: usize, p: usize) -> Result<()> {
        let blocks = [
            ("phi_xw", &self.phi_xw, n, n),
            ("phi_xe", &self.phi_xe, n, p),
            ("phi_uw", &self.phi_uw, m, n),
            ("phi_ue", &self.phi_ue, m, p),
        ];
        for (name, op, r, c) in blocks {
            op.validate()?;
            if op.rows != r || op.cols != c {
                return Err(mismatch(name, format!("{r}x{c}"), format!("{}x{}", op.rows, op.cols)));
            }
            if op.horizon() != self.horizon {
                return Err(mismatch(name, self.horizon, op.horizon()));
            }
        }
        Ok(())
    }
}

/// Strictly proper output-feedback law `u[k] = Σ_{t=1}^{T_K} K(t) y[k−t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirController {
    #[serde(with = "serde_matrix::matrix_list")]
    pub taps: Vec<DMatrix<f64>>,
    /// Induced norm of the taps dropped by truncation, computed over one extra horizon.
    #[serde(default)]
    pub truncation_tail_norm: f64,
}

impl FirController {
    pub fn new(taps: Vec<DMatrix<f64>>) -> Result<Self> {
        FirOperator::new(taps.clone())?;
        Ok(Self {
            taps,
            truncation_tail_norm: 0.0,
        })
    }

    pub fn horizon(&self) -> usize {
        self.taps.len()
    }

    pub fn inputs(&self) -> usize {
        self.taps[0].nrows()
    }

    pub fn outputs(&self) -> usize {
        self.taps[0].ncols()
    }

    /// `u[k]` from a history whose front is `y[k−1]`.
    pub fn output(&self, history: &MeasurementHistory) -> Result<DVector<f64>> {
        if history.dim != self.outputs() {
            return Err(mismatch("measurement history", self.outputs(), history.dim));
        }
        let mut u = DVector::zeros(self.inputs());
        for (tap, y) in self.taps.iter().zip(history.buf.iter()) {
            u.gemv(1.0, tap, y, 1.0);
        }
        Ok(u)
    }
}

/// Most-recent-first ring buffer of past measurements, zero before the start.
#[derive(Debug, Clone)]
pub struct MeasurementHistory {
    buf: VecDeque<DVector<f64>>,
    capacity: usize,
    dim: usize,
}

impl MeasurementHistory {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self {
            buf: VecDeque::with_capacity(capacity + 1),
            capacity,
            dim,
        }
    }

    pub fn push(&mut self, y: DVector<f64>) -> Result<()> {
        if y.len() != self.dim {
            return Err(mismatch("measurement", self.dim, y.len()));
        }
        self.buf.push_front(y);
        self.buf.truncate(self.capacity);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.buf.clear();
    }
}

/// Free-function form of [`FirController::output`].
pub fn controller_step(ctrl: &FirController, history: &MeasurementHistory) -> Result<DVector<f64>> {
    ctrl.output(history)
}

fn controller_taps(resp: &SystemResponses, len: usize) -> Result<Vec<DMatrix<f64>>> {
    let g = solve_deconvolution(&resp.phi_xw, &resp.phi_xe, len)?;
    let (m, p) = (resp.phi_ue.rows, resp.phi_ue.cols);
    Ok((1..=len)
        .map(|t| {
            let mut k = resp.phi_ue.tap(t);
            for j in 1..=t.min(resp.phi_uw.horizon()) {
                k.gemm(-1.0, &resp.phi_uw.taps[j - 1], &g[t - j], 1.0);
            }
            debug_assert_eq!(k.shape(), (m, p));
            k
        })
        .collect())
}

/// `K = Φue − Φuw ∗ (Φxw⁻¹ ∗ Φxe)`, truncated to `len` taps.
pub fn realize_controller(resp: &SystemResponses, len: usize) -> Result<FirController> {
    if len == 0 {
        return Err(invalid("controller horizon", "must be at least 1"));
    }
    let extended = controller_taps(resp, 2 * len)?;
    let tail = FirOperator::new(extended[len..].to_vec())?.inf_induced_norm();
    Ok(FirController {
        taps: extended[..len].to_vec(),
        truncation_tail_norm: tail,
    })
}
