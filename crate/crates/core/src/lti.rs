//! Continuous and discrete linear time-invariant plants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::serde_matrix;

/// Physical constants of the near-hover quadrotor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub g: f64,
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 0.256,
            g: 9.81,
        }
    }
}

impl QuadrotorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(invalid("mass", format!("must be positive, got {}", self.mass)));
        }
        if !(self.g > 0.0 && self.g.is_finite()) {
            return Err(invalid("g", format!("must be positive, got {}", self.g)));
        }
        Ok(())
    }

    /// Hover trim input: zero attitude, thrust balancing gravity.
    pub fn trim(&self) -> DVector<f64> {
        DVector::from_vec(vec![0.0, 0.0, self.mass * self.g])
    }
}

fn check_shapes(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(mismatch("A", format!("{n}x{n}"), format!("{}x{}", n, a.ncols())));
    }
    if b.nrows() != n {
        return Err(mismatch("B rows", n, b.nrows()));
    }
    if c.ncols() != n {
        return Err(mismatch("C cols", n, c.ncols()));
    }
    if h.nrows() != n {
        return Err(mismatch("H rows", n, h.nrows()));
    }
    Ok(())
}

/// `dx/dt = A x + B u + H w`, `y = C x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousLtiSystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

impl ContinuousLtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, h: DMatrix<f64>) -> Result<Self> {
        check_shapes(&a, &b, &c, &h)?;
        Ok(Self { a, b, c, h })
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }
}

/// `x[k+1] = A x[k] + B u[k] + H w[k]`, `y[k] = C x[k] + e[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteLtiSystem {
    #[serde(rename = "A", with = "serde_matrix::matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "serde_matrix::matrix")]
    pub b: DMatrix<f64>,
    #[serde(rename = "C", with = "serde_matrix::matrix")]
    pub c: DMatrix<f64>,
    #[serde(rename = "H", with = "serde_matrix::matrix")]
    pub h: DMatrix<f64>,
    pub dt: f64,
}

impl DiscreteLtiSystem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        h: DMatrix<f64>,
        dt: f64,
    ) -> Result<Self> {
        let sys = Self { a, b, c, h, dt };
        sys.validate()?;
        Ok(sys)
    }

    /// Re-checks shape consistency and the sample time, e.g. after deserialising.
    pub fn validate(&self) -> Result<()> {
        check_shapes(&self.a, &self.b, &self.c, &self.h)?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
        if !(finite(&self.a) && finite(&self.b) && finite(&self.c) && finite(&self.h)) {
            return Err(invalid("system", "matrices contain non-finite entries"));
        }
        Ok(())
    }

    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }

    pub fn disturbances(&self) -> usize {
        self.h.ncols()
    }

    /// One plant update `A x + B u + H w`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.states() {
            return Err(mismatch("state", self.states(), x.len()));
        }
        if u.len() != self.inputs() {
            return Err(mismatch("input", self.inputs(), u.len()));
        }
        if w.len() != self.disturbances() {
            return Err(mismatch("disturbance", self.disturbances(), w.len()));
        }
        Ok(&self.a * x + &self.b * u + &self.h * w)
    }
}

/// Linearisation of the quadrotor about hover with yaw held at zero.
///
/// State `(x, y, z, vx, vy, vz)`, input `(pitch, roll, thrust)`.
pub fn quadrotor_hover_model(params: QuadrotorParams) -> Result<ContinuousLtiSystem> {
    params.validate()?;
    let mut a = DMatrix::zeros(6, 6);
    for i in 0..3 {
        a[(i, i + 3)] = 1.0;
    }
    let mut b = DMatrix::zeros(6, 3);
    b[(3, 0)] = -params.g;
    b[(4, 1)] = params.g;
    b[(5, 2)] = 1.0 / params.mass;
    ContinuousLtiSystem::new(a, b, DMatrix::identity(6, 6), DMatrix::identity(6, 6))
}

/// Exact zero-order-hold discretisation.
///
/// The exponential of `[[A, B, H], [0, 0, 0], [0, 0, 0]] * dt` carries `A_d` in its leading
/// block and the held-input couplings of `B` and `H` beside it.
pub fn discretize(sys: &ContinuousLtiSystem, dt: f64) -> Result<DiscreteLtiSystem> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(invalid("dt", format!("must be positive, got {dt}")));
    }
    let n = sys.states();
    let m = sys.b.ncols();
    let d = sys.h.ncols();
    let size = n + m + d;
    let mut aug = DMatrix::zeros(size, size);
    aug.view_mut((0, 0), (n, n)).copy_from(&(&sys.a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(&sys.b * dt));
    aug.view_mut((0, n + m), (n, d)).copy_from(&(&sys.h * dt));
    let e = aug.exp();
    DiscreteLtiSystem::new(
        e.view((0, 0), (n, n)).into_owned(),
        e.view((0, n), (n, m)).into_owned(),
        sys.c.clone(),
        e.view((0, n + m), (n, d)).into_owned(),
        dt,
    )
}

/// Discrete quadrotor plant with the given sample time.
pub fn quadrotor_plant(params: QuadrotorParams, dt: f64) -> Result<DiscreteLtiSystem> {
    discretize(&quadrotor_hover_model(params)?, dt)
}
