//! Conversion to `min cᵀx, A x = b, x ≥ 0` and recovery of the original variables and multipliers.

use super::LinearProgram;

#[derive(Debug, Clone, Copy)]
pub(crate) enum VarMap {
    Fixed(f64),
    /// `v = shift + x`
    Lower { col: usize, shift: f64 },
    /// `v = shift − x`
    Upper { col: usize, shift: f64 },
    /// `v = shift + x` with `x + s = width` on `row`
    Boxed { col: usize, shift: f64, row: usize },
    /// `v = x⁺ − x⁻`
    Free { pos: usize, neg: usize },
}

pub(crate) struct StandardForm {
    pub m: usize,
    pub n: usize,
    /// Column-wise nonzeros `(row, value)`, rows ascending.
    pub cols: Vec<Vec<(usize, f64)>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub map: Vec<VarMap>,
    pub n_eq: usize,
    pub n_in: usize,
}

impl StandardForm {
    pub fn new(lp: &LinearProgram) -> Self {
        let n_eq = lp.b_eq.len();
        let n_in = lp.b_in.len();
        let nv = lp.num_vars();
        let n_boxed = (0..nv)
            .filter(|&j| lp.lower[j].is_finite() && lp.upper[j].is_finite() && lp.lower[j] < lp.upper[j])
            .count();
        let m = n_eq + n_in + n_boxed;
        let mut b: Vec<f64> = lp.b_eq.iter().chain(&lp.b_in).copied().collect();
        b.resize(m, 0.0);
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut c = Vec::new();
        let mut map = Vec::with_capacity(nv);
        let mut next_row = n_eq + n_in;

        let column_of = |j: usize, sign: f64| -> Vec<(usize, f64)> {
            let eq = lp.a_eq.column(j);
            let ineq = lp.a_in.column(j);
            eq.iter()
                .enumerate()
                .chain(ineq.iter().enumerate().map(|(i, v)| (i + n_eq, v)))
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i, sign * v))
                .collect()
        };

        for j in 0..nv {
            let (l, u) = (lp.lower[j], lp.upper[j]);
            let shift = if l.is_finite() {
                l
            } else if u.is_finite() {
                u
            } else {
                0.0
            };
            if shift != 0.0 {
                for (i, v) in lp.a_eq.column(j).iter().enumerate() {
                    b[i] -= v * shift;
                }
                for (i, v) in lp.a_in.column(j).iter().enumerate() {
                    b[n_eq + i] -= v * shift;
                }
            }
            let entry = if l.is_finite() && u.is_finite() && l == u {
                VarMap::Fixed(l)
            } else if l.is_finite() && u.is_finite() {
                let col = cols.len();
                let mut entries = column_of(j, 1.0);
                entries.push((next_row, 1.0));
                cols.push(entries);
                c.push(lp.c[j]);
                b[next_row] = u - l;
                let row = next_row;
                next_row += 1;
                VarMap::Boxed { col, shift, row }
            } else if l.is_finite() {
                cols.push(column_of(j, 1.0));
                c.push(lp.c[j]);
                VarMap::Lower { col: cols.len() - 1, shift }
            } else if u.is_finite() {
                cols.push(column_of(j, -1.0));
                c.push(-lp.c[j]);
                VarMap::Upper { col: cols.len() - 1, shift }
            } else {
                cols.push(column_of(j, 1.0));
                c.push(lp.c[j]);
                cols.push(column_of(j, -1.0));
                c.push(-lp.c[j]);
                VarMap::Free {
                    pos: cols.len() - 2,
                    neg: cols.len() - 1,
                }
            };
            map.push(entry);
        }
        for i in 0..n_in {
            cols.push(vec![(n_eq + i, 1.0)]);
            c.push(0.0);
        }
        for entry in &map {
            if let VarMap::Boxed { row, .. } = entry {
                cols.push(vec![(*row, 1.0)]);
                c.push(0.0);
            }
        }
        debug_assert_eq!(next_row, m);
        Self {
            m,
            n: cols.len(),
            cols,
            b,
            c,
            map,
            n_eq,
            n_in,
        }
    }

    /// Original-space primal values.
    pub fn primal(&self, x: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|m| match *m {
                VarMap::Fixed(v) => v,
                VarMap::Lower { col, shift } | VarMap::Boxed { col, shift, .. } => shift + x[col],
                VarMap::Upper { col, shift } => shift - x[col],
                VarMap::Free { pos, neg } => x[pos] - x[neg],
            })
            .collect()
    }

    /// Original-space multipliers `(y, λ, z_l, z_u)` from standard-form `(y, z)`.
    pub fn duals(
        &self,
        lp: &LinearProgram,
        y: &[f64],
        z: &[f64],
        with_cost: bool,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let eq: Vec<f64> = y[..self.n_eq].iter().map(|v| -v).collect();
        let ineq: Vec<f64> = y[self.n_eq..self.n_eq + self.n_in].iter().map(|v| -v).collect();
        let nv = self.map.len();
        let mut zl = vec![0.0; nv];
        let mut zu = vec![0.0; nv];
        for (j, m) in self.map.iter().enumerate() {
            match *m {
                VarMap::Lower { col, .. } => zl[j] = z[col],
                VarMap::Upper { col, .. } => zu[j] = z[col],
                VarMap::Boxed { col, row, .. } => {
                    zl[j] = z[col];
                    zu[j] = -y[row];
                }
                VarMap::Fixed(_) => {
                    let cost = if with_cost { lp.c[j] } else { 0.0 };
                    let reduced = cost
                        + lp.a_eq.column(j).iter().zip(&eq).map(|(a, v)| a * v).sum::<f64>()
                        + lp.a_in.column(j).iter().zip(&ineq).map(|(a, v)| a * v).sum::<f64>();
                    zl[j] = reduced.max(0.0);
                    zu[j] = (-reduced).max(0.0);
                }
                VarMap::Free { .. } => {}
            }
        }
        (eq, ineq, zl, zu)
    }

    /// Original-space direction from a standard-form direction (no shift).
    pub fn direction(&self, dx: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|m| match *m {
                VarMap::Fixed(_) => 0.0,
                VarMap::Lower { col, .. } | VarMap::Boxed { col, .. } => dx[col],
                VarMap::Upper { col, .. } => -dx[col],
                VarMap::Free { pos, neg } => dx[pos] - dx[neg],
            })
            .collect()
    }
}
