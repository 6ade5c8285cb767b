//! Homogeneous self-dual Mehrotra predictor-corrector on the standard form.

use super::envelope::Envelope;
use super::standard::StandardForm;
use super::{dot, dual_objective, kkt_residuals, Certificate, KktResiduals, LinearProgram, LpSolution, LpStatus};

const STEP_FRACTION: f64 = 0.99995;
const PRIMAL_REG: f64 = 1e-10;
/// Iterations without a new least residual before giving up.
const STAGNATION_ITERS: usize = 40;

struct Sparse<'a> {
    cols: &'a [Vec<(usize, f64)>],
    m: usize,
}

impl Sparse<'_> {
    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m];
        for (col, &xj) in self.cols.iter().zip(x) {
            if xj != 0.0 {
                for &(i, v) in col {
                    out[i] += v * xj;
                }
            }
        }
        out
    }

    fn tr_mul(&self, y: &[f64]) -> Vec<f64> {
        self.cols
            .iter()
            .map(|col| col.iter().map(|&(i, v)| v * y[i]).sum())
            .collect()
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a.max(x.abs()))
}

const REFINEMENT_STEPS: usize = 4;

/// `A D Aᵀ p = rhs` with iterative refinement while it keeps reducing the residual.
fn normal_solve(a: &Sparse, d: &[f64], chol: &mut Envelope, rhs: &[f64]) -> Vec<f64> {
    let residual = |p: &[f64]| -> Vec<f64> {
        let mut t = a.tr_mul(p);
        t.iter_mut().zip(d).for_each(|(v, dj)| *v *= dj);
        rhs.iter().zip(&a.mul(&t)).map(|(r, v)| r - v).collect()
    };
    let mut p = chol.solve(rhs);
    let mut resid = residual(&p);
    let mut size = inf_norm(&resid);
    for _ in 0..REFINEMENT_STEPS {
        if size == 0.0 {
            break;
        }
        let corr = chol.solve(&resid);
        let trial: Vec<f64> = p.iter().zip(&corr).map(|(v, c)| v + c).collect();
        let next = residual(&trial);
        let next_size = inf_norm(&next);
        if !(next_size < 0.5 * size) {
            if next_size < size {
                p = trial;
            }
            break;
        }
        p = trial;
        resid = next;
        size = next_size;
    }
    p
}

#[derive(Clone)]
struct Point {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dz: Vec<f64>,
    dtau: f64,
    dkappa: f64,
}

fn max_step(pt: &Point, dir: &Direction) -> f64 {
    let mut alpha = f64::INFINITY;
    for (v, dv) in pt.x.iter().zip(&dir.dx).chain(pt.z.iter().zip(&dir.dz)) {
        if *dv < 0.0 {
            alpha = alpha.min(-v / dv);
        }
    }
    if dir.dtau < 0.0 {
        alpha = alpha.min(-pt.tau / dir.dtau);
    }
    if dir.dkappa < 0.0 {
        alpha = alpha.min(-pt.kappa / dir.dkappa);
    }
    alpha
}

/// Rows of `A` that are linear combinations of the others, found from the pivots of `A Aᵀ`.
struct Reduction {
    kept: Vec<usize>,
    cols: Vec<Vec<(usize, f64)>>,
    b: Vec<f64>,
}

enum Presolve {
    Reduced(Reduction),
    /// Multipliers `y` with `Aᵀy ≈ 0` and `bᵀy > 0`.
    Inconsistent(Vec<f64>),
}

fn restrict(sf: &StandardForm, kept: &[usize]) -> Reduction {
    let mut new_index = vec![usize::MAX; sf.m];
    for (new, &old) in kept.iter().enumerate() {
        new_index[old] = new;
    }
    let cols = sf
        .cols
        .iter()
        .map(|col| {
            col.iter()
                .filter(|e| new_index[e.0] != usize::MAX)
                .map(|&(i, v)| (new_index[i], v))
                .collect()
        })
        .collect();
    Reduction {
        kept: kept.to_vec(),
        cols,
        b: kept.iter().map(|&i| sf.b[i]).collect(),
    }
}

fn drop_dependent_rows(sf: &StandardForm) -> Presolve {
    let mut full = Envelope::new(sf.m, &sf.cols);
    full.factor(&vec![1.0; sf.n]);
    let dropped = full.replaced_rows();
    if dropped.is_empty() {
        return Presolve::Reduced(restrict(sf, &(0..sf.m).collect::<Vec<_>>()));
    }
    let is_dropped = {
        let mut flags = vec![false; sf.m];
        dropped.iter().for_each(|&i| flags[i] = true);
        flags
    };
    let mut kept: Vec<usize> = (0..sf.m).filter(|&i| !is_dropped[i]).collect();
    let red = restrict(sf, &kept);
    let mut chol = Envelope::new(kept.len(), &red.cols);
    chol.factor(&vec![1.0; sf.n]);
    let a_red = Sparse { cols: &red.cols, m: kept.len() };
    let mut restore = Vec::new();
    for &row in &dropped {
        // Least-squares combination of kept rows reproducing the dropped one.
        let a_row: Vec<f64> = sf
            .cols
            .iter()
            .map(|col| col.iter().filter(|e| e.0 == row).map(|e| e.1).sum())
            .collect();
        let y = normal_solve(&a_red, &vec![1.0; sf.n], &mut chol, &a_red.mul(&a_row));
        let fit = a_red.tr_mul(&y);
        let scale = 1.0 + inf_norm(&a_row) * (1.0 + inf_norm(&y));
        let miss = fit.iter().zip(&a_row).map(|(f, r)| (f - r).abs()).fold(0.0, f64::max);
        if miss > 1e-9 * scale {
            restore.push(row);
            continue;
        }
        let gap = dot(&red.b, &y) - sf.b[row];
        if gap.abs() > 1e-9 * (1.0 + sf.b[row].abs() + inf_norm(&red.b) * inf_norm(&y)) {
            let sign = gap.signum();
            let mut cert = vec![0.0; sf.m];
            for (k, &old) in kept.iter().enumerate() {
                cert[old] = sign * y[k];
            }
            cert[row] = -sign;
            return Presolve::Inconsistent(cert);
        }
    }
    if restore.is_empty() {
        return Presolve::Reduced(red);
    }
    kept.extend(restore);
    kept.sort_unstable();
    Presolve::Reduced(restrict(sf, &kept))
}

pub(super) fn solve(lp: &LinearProgram, tol: f64, max_iters: usize) -> LpSolution {
    let sf = StandardForm::new(lp);
    let n = sf.n;
    let red = match drop_dependent_rows(&sf) {
        Presolve::Reduced(red) => red,
        Presolve::Inconsistent(y) => {
            let a = Sparse { cols: &sf.cols, m: sf.m };
            let z: Vec<f64> = a.tr_mul(&y).iter().map(|v| -v).collect();
            let (eq, ineq, zl, zu) = sf.duals(lp, &y, &z, false);
            let value = dual_objective(lp, &eq, &ineq, &zl, &zu);
            return LpSolution {
                status: LpStatus::Infeasible,
                v: vec![f64::NAN; lp.num_vars()],
                eq_duals: eq.clone(),
                ineq_duals: ineq.clone(),
                lower_duals: zl.clone(),
                upper_duals: zu.clone(),
                objective: f64::INFINITY,
                kkt: KktResiduals::default(),
                iterations: 0,
                certificate: Some(Certificate::Farkas {
                    eq,
                    ineq,
                    lower: zl,
                    upper: zu,
                    value,
                }),
            };
        }
    };
    let m = red.kept.len();
    let expand = |y: &[f64]| -> Vec<f64> {
        let mut full = vec![0.0; sf.m];
        for (k, &old) in red.kept.iter().enumerate() {
            full[old] = y[k];
        }
        full
    };
    let a = Sparse { cols: &red.cols, m };
    let b = &red.b;
    let c = &sf.c;
    let mut chol = Envelope::new(m, &red.cols);

    let mut pt = Point {
        x: vec![1.0; n],
        y: vec![0.0; m],
        z: vec![1.0; n],
        tau: 1.0,
        kappa: 1.0,
    };
    let nn = (n + 1) as f64;

    let finish = |pt: &Point, status: LpStatus, iterations: usize, certificate: Option<Certificate>| {
        let scale = if status == LpStatus::Optimal || status == LpStatus::MaxIterations {
            1.0 / pt.tau
        } else {
            0.0
        };
        let xs: Vec<f64> = pt.x.iter().map(|v| v * scale).collect();
        let ys: Vec<f64> = expand(&pt.y).iter().map(|v| v * scale).collect();
        let zs: Vec<f64> = pt.z.iter().map(|v| v * scale).collect();
        let v = if scale > 0.0 { sf.primal(&xs) } else { vec![f64::NAN; lp.num_vars()] };
        let (eq, ineq, zl, zu) = sf.duals(lp, &ys, &zs, true);
        let kkt = if scale > 0.0 {
            kkt_residuals(lp, &v, &eq, &ineq, &zl, &zu)
        } else {
            KktResiduals::default()
        };
        let objective = match status {
            LpStatus::Infeasible => f64::INFINITY,
            LpStatus::Unbounded => f64::NEG_INFINITY,
            _ => dot(&lp.c, &v),
        };
        LpSolution {
            status,
            v,
            eq_duals: eq,
            ineq_duals: ineq,
            lower_duals: zl,
            upper_duals: zu,
            objective,
            kkt,
            iterations,
            certificate,
        }
    };

    let mut stalls = 0;
    // Least-residual iterate so far, returned when the method stops short of the tolerance.
    let mut best: Option<(f64, usize, Point)> = None;
    for iter in 0..=max_iters {
        let ax = a.mul(&pt.x);
        let aty = a.tr_mul(&pt.y);
        let rp: Vec<f64> = (0..m).map(|i| b[i] * pt.tau - ax[i]).collect();
        let rd: Vec<f64> = (0..n).map(|j| c[j] * pt.tau - aty[j] - pt.z[j]).collect();
        let ctx = dot(c, &pt.x);
        let bty = dot(b, &pt.y);
        let rg = ctx - bty + pt.kappa;
        let mu = (dot(&pt.x, &pt.z) + pt.tau * pt.kappa) / nn;

        let max_xz = pt.x.iter().zip(&pt.z).fold(0.0f64, |acc, (x, z)| acc.max(x * z));
        let pre = (inf_norm(&rp) / pt.tau)
            .max(inf_norm(&rd) / pt.tau)
            .max(max_xz / (pt.tau * pt.tau));
        if pre <= 10.0 * tol {
            let candidate = finish(&pt, LpStatus::Optimal, iter, None);
            if candidate.kkt.max_violation() <= tol {
                return candidate;
            }
        }

        // Farkas ray for the primal: Aᵀy + z = cτ − r_d, bᵀy > 0.
        if bty > 0.0 {
            let ray: Vec<f64> = (0..n).map(|j| c[j] * pt.tau - rd[j]).collect();
            if inf_norm(&ray) <= tol * bty && pt.tau < 1e-2 * pt.kappa.max(1.0) {
                let scale = 1.0 / bty;
                let ys: Vec<f64> = expand(&pt.y).iter().map(|v| v * scale).collect();
                let zs: Vec<f64> = pt.z.iter().map(|v| v * scale).collect();
                let (eq, ineq, zl, zu) = sf.duals(lp, &ys, &zs, false);
                let value = dual_objective(lp, &eq, &ineq, &zl, &zu);
                let cert = Certificate::Farkas {
                    eq,
                    ineq,
                    lower: zl,
                    upper: zu,
                    value,
                };
                return finish(&pt, LpStatus::Infeasible, iter, Some(cert));
            }
        }
        // Primal ray: A x = bτ − r_p ≈ 0 with cᵀx < 0.
        if ctx < 0.0 {
            let img: Vec<f64> = (0..m).map(|i| b[i] * pt.tau - rp[i]).collect();
            if inf_norm(&img) <= tol * (-ctx) && pt.tau < 1e-2 * pt.kappa.max(1.0) {
                let scale = 1.0 / (-ctx);
                let dx: Vec<f64> = pt.x.iter().map(|v| v * scale).collect();
                let direction = sf.direction(&dx);
                let slope = dot(&lp.c, &direction);
                return finish(&pt, LpStatus::Unbounded, iter, Some(Certificate::Ray { direction, slope }));
            }
        }
        if best.as_ref().is_none_or(|b| pre < b.0) {
            best = Some((pre, iter, pt.clone()));
        }
        let stagnant = best.as_ref().is_some_and(|b| iter - b.1 >= STAGNATION_ITERS);
        if iter == max_iters || stalls >= 5 || stagnant {
            let at = best.as_ref().map_or(&pt, |b| &b.2);
            return finish(at, LpStatus::MaxIterations, iter, None);
        }

        let d: Vec<f64> = pt.x.iter().zip(&pt.z).map(|(x, z)| x / (z + PRIMAL_REG * x)).collect();
        chol.factor(&d);

        // q solves M q = A D c + b, shared by predictor and corrector.
        let dc: Vec<f64> = c.iter().zip(&d).map(|(cj, dj)| cj * dj).collect();
        let adc = a.mul(&dc);
        let rhs_q: Vec<f64> = adc.iter().zip(b).map(|(v, bi)| v + bi).collect();
        let q = normal_solve(&a, &d, &mut chol, &rhs_q);
        let atq = a.tr_mul(&q);
        let v: Vec<f64> = (0..n).map(|j| d[j] * (atq[j] - c[j])).collect();
        let ctv = dot(c, &v);
        let btq = dot(b, &q);

        let direction = |eta: f64, rxz: &[f64], rtk: f64, chol: &mut Envelope| -> Direction {
            let w: Vec<f64> = (0..n).map(|j| eta * rd[j] - rxz[j] / pt.x[j]).collect();
            let dw: Vec<f64> = w.iter().zip(&d).map(|(wj, dj)| wj * dj).collect();
            let adw = a.mul(&dw);
            let rhs_p: Vec<f64> = (0..m).map(|i| eta * rp[i] + adw[i]).collect();
            let p = normal_solve(&a, &d, chol, &rhs_p);
            let atp = a.tr_mul(&p);
            let u: Vec<f64> = (0..n).map(|j| d[j] * (atp[j] - w[j])).collect();
            let num = -eta * rg - dot(c, &u) + dot(b, &p) - rtk / pt.tau;
            let den = ctv - btq - pt.kappa / pt.tau;
            let dtau = num / den;
            let dy: Vec<f64> = p.iter().zip(&q).map(|(pi, qi)| pi + qi * dtau).collect();
            let dx: Vec<f64> = u.iter().zip(&v).map(|(ui, vi)| ui + vi * dtau).collect();
            let dz: Vec<f64> = (0..n).map(|j| (rxz[j] - pt.z[j] * dx[j]) / pt.x[j]).collect();
            let dkappa = (rtk - pt.kappa * dtau) / pt.tau;
            Direction { dx, dy, dz, dtau, dkappa }
        };

        let rxz_aff: Vec<f64> = pt.x.iter().zip(&pt.z).map(|(x, z)| -x * z).collect();
        let aff = direction(1.0, &rxz_aff, -pt.tau * pt.kappa, &mut chol);
        let alpha_aff = max_step(&pt, &aff).min(1.0);
        let mu_aff = ((0..n)
            .map(|j| (pt.x[j] + alpha_aff * aff.dx[j]) * (pt.z[j] + alpha_aff * aff.dz[j]))
            .sum::<f64>()
            + (pt.tau + alpha_aff * aff.dtau) * (pt.kappa + alpha_aff * aff.dkappa))
            / nn;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let rxz: Vec<f64> = (0..n)
            .map(|j| sigma * mu - pt.x[j] * pt.z[j] - aff.dx[j] * aff.dz[j])
            .collect();
        let rtk = sigma * mu - pt.tau * pt.kappa - aff.dtau * aff.dkappa;
        let dir = direction(1.0 - sigma, &rxz, rtk, &mut chol);
        let alpha = (STEP_FRACTION * max_step(&pt, &dir)).min(1.0);
        if !alpha.is_finite() || alpha < 1e-10 {
            stalls += 1;
        } else {
            stalls = 0;
        }
        if !(alpha.is_finite() && alpha > 0.0) || dir.dx.iter().any(|v| !v.is_finite()) {
            let at = best.as_ref().map_or(&pt, |b| &b.2);
            return finish(at, LpStatus::MaxIterations, iter, None);
        }
        for j in 0..n {
            pt.x[j] += alpha * dir.dx[j];
            pt.z[j] += alpha * dir.dz[j];
        }
        for i in 0..m {
            pt.y[i] += alpha * dir.dy[i];
        }
        pt.tau += alpha * dir.dtau;
        pt.kappa += alpha * dir.dkappa;
        log::trace!("iter {iter}: mu {mu:.3e} tau {:.3e} kappa {:.3e} alpha {alpha:.3}", pt.tau, pt.kappa);
    }
    unreachable!("loop returns at max_iters")
}
