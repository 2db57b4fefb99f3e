//! Discrete right-hand side of the staggered-grid momentum equations,
//! pressure Poisson solve and divergence-free projection.
//!
//! Sign convention: [`convection`] returns `-sum_b d_b(u_a u_b)`, i.e. the
//! term as it appears on the right-hand side of the momentum equation.

mod poisson;

pub use poisson::{poisson_solve, solver_for, PoissonSolution, SpectralPoisson, MEAN_TOLERANCE};
#[allow(unused_imports)]
pub(crate) use poisson::FftNd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{roll, roll_into, Grid, Real, ScalarField, VectorField, Weighting};

/// Body force kind and parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BodyForce {
    #[default]
    None,
    /// `f^1 = amplitude * sin(2 pi wavenumber x^2 / L_2)`, other components zero.
    Kolmogorov { amplitude: f64, wavenumber: u32 },
}

impl BodyForce {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BodyForce::None => Ok(()),
            BodyForce::Kolmogorov { amplitude, wavenumber } => {
                if !amplitude.is_finite() {
                    return Err(Error::InvalidArgument("force amplitude must be finite".into()));
                }
                if wavenumber < 1 {
                    return Err(Error::InvalidArgument("forcing wavenumber must be >= 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Viscosity and forcing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub viscosity: f64,
    #[serde(default)]
    pub force: BodyForce,
}

impl FlowParams {
    pub fn new(viscosity: f64, force: BodyForce) -> Result<Self> {
        let p = FlowParams { viscosity, force };
        p.validate()?;
        Ok(p)
    }

    /// `nu = 1 / Re`.
    pub fn from_reynolds(re: f64, force: BodyForce) -> Result<Self> {
        if !(re > 0.0) {
            return Err(Error::InvalidArgument(format!("Reynolds number must be positive, got {re}")));
        }
        Self::new(1.0 / re, force)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.viscosity >= 0.0 && self.viscosity.is_finite()) {
            return Err(Error::InvalidArgument(format!("viscosity must be >= 0, got {}", self.viscosity)));
        }
        self.force.validate()
    }
}

/// `(Du)_I = sum_a (u^a_I - u^a_{I-e_a}) / h_a`.
pub fn divergence<T: Real>(u: &VectorField<T>) -> ScalarField<T> {
    let g = *u.grid();
    let mut out = vec![T::zero(); g.ncell()];
    let mut shifted = vec![T::zero(); g.ncell()];
    for a in 0..g.dim() {
        let ua = u.comp(a);
        roll_into(&g, ua, a, -1, &mut shifted);
        let inv_h = T::cast_from(1.0 / g.spacing(a));
        for ((o, &x), &xm) in out.iter_mut().zip(ua).zip(&shifted) {
            *o = *o + (x - xm) * inv_h;
        }
    }
    ScalarField::from_vec(&g, out).expect("grid-sized")
}

/// `(Gp)^a_I = (p_{I+e_a} - p_I) / h_a`, the negative transpose of `D`.
pub fn pressure_gradient(p: &ScalarField) -> VectorField {
    let g = *p.grid();
    let nc = g.ncell();
    let mut out = vec![0.0; g.dim() * nc];
    for a in 0..g.dim() {
        let pp = roll(&g, p.data(), a, 1);
        let inv_h = 1.0 / g.spacing(a);
        for ((o, &x1), &x0) in out[a * nc..(a + 1) * nc].iter_mut().zip(&pp).zip(p.data()) {
            *o = (x1 - x0) * inv_h;
        }
    }
    VectorField::from_vec(&g, out).expect("grid-sized")
}

/// Flux `Phi_ab[J] = 1/4 (u^a_J + u^a_{J+e_b}) (u^b_J + u^b_{J+e_a})`, i.e.
/// `u^a u^b` at the point half a cell from `u^a_J` in direction `b`.
fn flux_factors(g: &Grid, u: &VectorField, a: usize, b: usize) -> (Vec<f64>, Vec<f64>) {
    let ua = u.comp(a);
    let ub = u.comp(b);
    let sa = roll(g, ua, b, 1);
    let sb = roll(g, ub, a, 1);
    let fa: Vec<f64> = ua.iter().zip(&sa).map(|(x, y)| x + y).collect();
    let fb: Vec<f64> = ub.iter().zip(&sb).map(|(x, y)| x + y).collect();
    (fa, fb)
}

/// Energy-conserving convective term `-sum_b d_b(u^a u^b)` at the `u^a` points.
pub fn convection(u: &VectorField) -> VectorField {
    let g = *u.grid();
    let nc = g.ncell();
    let d = g.dim();
    let mut out = vec![0.0; d * nc];
    for a in 0..d {
        let oa = &mut out[a * nc..(a + 1) * nc];
        for b in 0..d {
            let (fa, fb) = flux_factors(&g, u, a, b);
            let phi: Vec<f64> = fa.iter().zip(&fb).map(|(x, y)| 0.25 * x * y).collect();
            let phim = roll(&g, &phi, b, -1);
            let inv_h = 1.0 / g.spacing(b);
            for ((o, p), pm) in oa.iter_mut().zip(&phi).zip(&phim) {
                *o -= (p - pm) * inv_h;
            }
        }
    }
    VectorField::from_vec(&g, out).expect("grid-sized")
}

/// Transpose of the Jacobian of [`convection`] at `u`, applied to `w`.
pub fn convection_vjp(u: &VectorField, w: &VectorField) -> VectorField {
    let g = *u.grid();
    let nc = g.ncell();
    let d = g.dim();
    let mut out = vec![0.0; d * nc];
    for a in 0..d {
        let wa = w.comp(a);
        for b in 0..d {
            let inv_h = 1.0 / g.spacing(b);
            // adjoint of the backward difference: -(w - S+_b w) / h_b
            let wp = roll(&g, wa, b, 1);
            let gphi: Vec<f64> = wa.iter().zip(&wp).map(|(x, y)| -(x - y) * inv_h).collect();
            let (fa, fb) = flux_factors(&g, u, a, b);
            let da: Vec<f64> = gphi.iter().zip(&fb).map(|(gp, y)| 0.25 * gp * y).collect();
            let db: Vec<f64> = gphi.iter().zip(&fa).map(|(gp, x)| 0.25 * gp * x).collect();
            let dam = roll(&g, &da, b, -1);
            let dbm = roll(&g, &db, a, -1);
            for (o, (x, y)) in out[a * nc..(a + 1) * nc].iter_mut().zip(da.iter().zip(&dam)) {
                *o += x + y;
            }
            for (o, (x, y)) in out[b * nc..(b + 1) * nc].iter_mut().zip(db.iter().zip(&dbm)) {
                *o += x + y;
            }
        }
    }
    VectorField::from_vec(&g, out).expect("grid-sized")
}

/// `nu * sum_b d_b d_b u^a`, the componentwise `2d+1`-point Laplacian.
pub fn diffusion(u: &VectorField, viscosity: f64) -> VectorField {
    let g = *u.grid();
    let nc = g.ncell();
    let d = g.dim();
    let mut out = vec![0.0; d * nc];
    if viscosity == 0.0 {
        return VectorField::from_vec(&g, out).expect("grid-sized");
    }
    for a in 0..d {
        let ua = u.comp(a);
        let oa = &mut out[a * nc..(a + 1) * nc];
        for b in 0..d {
            let c = viscosity / (g.spacing(b) * g.spacing(b));
            let up = roll(&g, ua, b, 1);
            let um = roll(&g, ua, b, -1);
            for (o, ((x, p), m)) in oa.iter_mut().zip(ua.iter().zip(&up).zip(&um)) {
                *o += c * (p - 2.0 * x + m);
            }
        }
    }
    VectorField::from_vec(&g, out).expect("grid-sized")
}

/// Time-constant body force sampled at the velocity points.
pub fn body_force(grid: &Grid, spec: &BodyForce) -> VectorField {
    match *spec {
        BodyForce::None => VectorField::zeros(grid),
        BodyForce::Kolmogorov { amplitude, wavenumber } => {
            let k = 2.0 * std::f64::consts::PI * wavenumber as f64 / grid.length(1);
            let lo = grid.lo(1);
            VectorField::from_fn(grid, |a, x| if a == 0 { amplitude * (k * (x[1] - lo)).sin() } else { 0.0 })
        }
    }
}

/// Convection, diffusion and forcing, with the force field cached per grid.
#[derive(Clone, Debug)]
pub struct Rhs {
    params: FlowParams,
    force: Option<VectorField>,
}

impl Rhs {
    pub fn new(grid: &Grid, params: FlowParams) -> Self {
        let force = match params.force {
            BodyForce::None => None,
            spec => Some(body_force(grid, &spec)),
        };
        Rhs { params, force }
    }

    pub fn params(&self) -> &FlowParams {
        &self.params
    }

    pub fn force(&self) -> Option<&VectorField> {
        self.force.as_ref()
    }

    /// `F(u)`, without pressure.
    pub fn eval(&self, u: &VectorField) -> VectorField {
        let mut f = convection(u);
        if self.params.viscosity != 0.0 {
            f.add_assign_scaled(1.0, &diffusion(u, self.params.viscosity));
        }
        if let Some(force) = &self.force {
            f.add_assign_scaled(1.0, force);
        }
        f
    }

    /// `P F(u)`.
    pub fn eval_projected(&self, u: &VectorField) -> VectorField {
        project(&self.eval(u))
    }
}

/// `F(u) = convection + diffusion + body force`.
pub fn rhs(u: &VectorField, params: &FlowParams) -> VectorField {
    Rhs::new(u.grid(), *params).eval(u)
}

/// Pressure `p = L^+ (Omega_p D u)` whose gradient removes the divergent part of `u`.
pub fn projection_pressure(u: &VectorField) -> ScalarField {
    let g = *u.grid();
    let mut r = divergence(u);
    let vol = g.cell_volume();
    for v in r.data_mut() {
        *v *= vol;
    }
    // D u differences neighbours of size max|u|, which sets its round-off
    let terms = u.max_abs() * vol * (0..g.dim()).map(|a| 2.0 / g.spacing(a)).sum::<f64>();
    solver_for(&g).solve_scaled(&r, terms).pressure
}

/// `P u = u - G L^+ Omega_p D u`.
pub fn project(u: &VectorField) -> VectorField {
    let p = projection_pressure(u);
    u.sub(&pressure_gradient(&p))
}

/// `<u, nu Lap u>_Omega`, the viscous energy dissipation rate.
pub fn dissipation(u: &VectorField, viscosity: f64) -> f64 {
    let du = diffusion(u, viscosity);
    crate::grid::dot(u.data(), du.data()) * u.grid().cell_volume()
}

/// `||D u|| / ||u||`, 0 for the zero field.
pub fn relative_divergence<T: Real>(u: &VectorField<T>) -> f64 {
    let n = u.norm(Weighting::None);
    if n == 0.0 {
        return 0.0;
    }
    divergence(u).norm(Weighting::None) / n
}

#[cfg(test)]
mod tests;
