//! Explicit Runge-Kutta integration of the pressure-free system
//! `du/dt = P F(u)`.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Precision, VectorField};
use crate::operators::{project, FlowParams, Rhs};

type Q = Ratio<i64>;

fn q(n: i64, d: i64) -> Q {
    Ratio::new(n, d)
}

/// Butcher tableau of an explicit scheme with exact rational coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct RkTableau {
    name: &'static str,
    a: Vec<Vec<Q>>,
    b: Vec<Q>,
}

/// Named tableaus selectable from configuration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    #[default]
    Wray3,
    Rk4,
}

impl Scheme {
    pub fn tableau(self) -> RkTableau {
        match self {
            Scheme::Wray3 => wray3_tableau(),
            Scheme::Rk4 => rk4_tableau(),
        }
    }
}

/// Wray's low-storage third order scheme (stages stored explicitly here).
pub fn wray3_tableau() -> RkTableau {
    let z = q(0, 1);
    RkTableau {
        name: "wray3",
        a: vec![vec![z, z, z], vec![q(8, 15), z, z], vec![q(1, 4), q(5, 12), z]],
        b: vec![q(1, 4), z, q(3, 4)],
    }
}

/// Classical fourth order Runge-Kutta.
pub fn rk4_tableau() -> RkTableau {
    let z = q(0, 1);
    let h = q(1, 2);
    RkTableau {
        name: "rk4",
        a: vec![vec![z, z, z, z], vec![h, z, z, z], vec![z, h, z, z], vec![z, z, q(1, 1), z]],
        b: vec![q(1, 6), q(1, 3), q(1, 3), q(1, 6)],
    }
}

impl RkTableau {
    /// Validates an arbitrary explicit tableau.
    pub fn new(name: &'static str, a: Vec<Vec<Q>>, b: Vec<Q>) -> Result<Self> {
        let s = b.len();
        if s == 0 || a.len() != s || a.iter().any(|r| r.len() != s) {
            return Err(Error::InvalidArgument("tableau must be s x s with s weights".into()));
        }
        for (i, row) in a.iter().enumerate() {
            if row[i..].iter().any(|x| *x != q(0, 1)) {
                return Err(Error::InvalidArgument("tableau is not explicit".into()));
            }
        }
        if b.iter().sum::<Q>() != q(1, 1) {
            return Err(Error::InvalidArgument("weights do not sum to one".into()));
        }
        Ok(RkTableau { name, a, b })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn stages(&self) -> usize {
        self.b.len()
    }

    pub fn a_exact(&self, i: usize, j: usize) -> Q {
        self.a[i][j]
    }

    pub fn b_exact(&self, i: usize) -> Q {
        self.b[i]
    }

    pub fn a(&self, i: usize, j: usize) -> f64 {
        to_f64(self.a[i][j])
    }

    pub fn b(&self, i: usize) -> f64 {
        to_f64(self.b[i])
    }

    /// Row sums `c_i = sum_j a_ij`.
    pub fn c_exact(&self) -> Vec<Q> {
        self.a.iter().map(|r| r.iter().sum()).collect()
    }

    /// Coefficients of the stability polynomial `R(z) = 1 + sum_k z^k b^T A^(k-1) 1`.
    pub fn stability_polynomial(&self) -> Vec<Q> {
        let s = self.stages();
        let mut coeffs = vec![q(1, 1)];
        let mut v = vec![q(1, 1); s];
        for _ in 0..s {
            coeffs.push(self.b.iter().zip(&v).map(|(b, x)| b * x).sum());
            v = (0..s).map(|i| (0..s).map(|j| self.a[i][j] * v[j]).sum()).collect();
        }
        while coeffs.len() > 1 && *coeffs.last().unwrap() == q(0, 1) {
            coeffs.pop();
        }
        coeffs
    }
}

fn to_f64(x: Q) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// Time step selection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StepControl {
    Fixed { dt: f64 },
    Cfl { sigma: f64 },
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl::Cfl { sigma: 0.85 }
    }
}

impl StepControl {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepControl::Fixed { dt } if !(dt > 0.0 && dt.is_finite()) => {
                Err(Error::InvalidArgument(format!("fixed time step must be positive, got {dt}")))
            }
            StepControl::Cfl { sigma } if !(sigma > 0.0 && sigma <= 1.0) => {
                Err(Error::InvalidArgument(format!("CFL factor must lie in (0, 1], got {sigma}")))
            }
            _ => Ok(()),
        }
    }
}

/// One explicit RK step. `rhs_fn` returns `F(u)`; when `project_each_stage`
/// is set every stage derivative is projected.
pub fn rk_step<F>(u: &VectorField, dt: f64, tableau: &RkTableau, mut rhs_fn: F, project_each_stage: bool) -> Result<VectorField>
where
    F: FnMut(&VectorField) -> Result<VectorField>,
{
    let s = tableau.stages();
    let mut k: Vec<VectorField> = Vec::with_capacity(s);
    for i in 0..s {
        let mut ui = u.clone();
        for (j, kj) in k.iter().enumerate() {
            let aij = tableau.a(i, j);
            if aij != 0.0 {
                ui.add_assign_scaled(dt * aij, kj);
            }
        }
        let mut ki = rhs_fn(&ui)?;
        if project_each_stage {
            ki = project(&ki);
        }
        if !ki.is_finite() {
            return Err(Error::NonFinite(format!("stage {} of {}", i + 1, tableau.name())));
        }
        k.push(ki);
    }
    let mut out = u.clone();
    for (i, ki) in k.iter().enumerate() {
        let bi = tableau.b(i);
        if bi != 0.0 {
            out.add_assign_scaled(dt * bi, ki);
        }
    }
    Ok(out)
}

const CFL_EPS: f64 = 1e-12;

/// `sigma * min(h_a / (max|u^a| + eps), h^2 / (2 d nu))`.
pub fn cfl_dt(u: &VectorField, params: &FlowParams, sigma: f64) -> f64 {
    cfl_dt_visc(u, params.viscosity, sigma)
}

pub(crate) fn cfl_dt_visc(u: &VectorField, viscosity: f64, sigma: f64) -> f64 {
    let g = u.grid();
    let mut dt = f64::INFINITY;
    for a in 0..g.dim() {
        dt = dt.min(g.spacing(a) / (u.max_abs_comp(a) + CFL_EPS));
    }
    if viscosity > 0.0 {
        let h = g.min_spacing();
        dt = dt.min(h * h / (2.0 * g.dim() as f64 * viscosity));
    }
    sigma * dt
}

/// Integration settings shared by DNS and LES drivers.
#[derive(Clone, Debug)]
pub struct Integration {
    pub control: StepControl,
    pub tableau: RkTableau,
    pub max_steps: usize,
    pub precision: Precision,
}

impl Integration {
    pub fn new(control: StepControl, scheme: Scheme) -> Self {
        Integration { control, tableau: scheme.tableau(), max_steps: 10_000_000, precision: Precision::Double }
    }

    pub fn fixed(dt: f64) -> Self {
        Self::new(StepControl::Fixed { dt }, Scheme::Wray3)
    }

    pub fn with_max_steps(mut self, n: usize) -> Self {
        self.max_steps = n;
        self
    }

    pub fn with_precision(mut self, p: Precision) -> Self {
        self.precision = p;
        self
    }
}

/// Advances `u0` to `t_end` with an arbitrary right-hand side. The last step
/// is clamped to land on `t_end`. The observer sees step 0 and every step after.
pub fn integrate_with<F, O>(
    u0: &VectorField,
    t_end: f64,
    opts: &Integration,
    viscosity: f64,
    mut rhs_fn: F,
    project_each_stage: bool,
    mut observer: O,
) -> Result<VectorField>
where
    F: FnMut(&VectorField) -> Result<VectorField>,
    O: FnMut(usize, f64, &VectorField),
{
    opts.control.validate()?;
    if !(t_end >= 0.0) {
        return Err(Error::InvalidArgument(format!("end time must be >= 0, got {t_end}")));
    }
    let mut u = u0.rounded(opts.precision);
    let mut t = 0.0;
    let mut step = 0;
    observer(0, t, &u);
    // relative slack so round-off in t does not produce a sliver step
    let slack = 1e-12 * t_end.max(1.0);
    while t < t_end - slack {
        if step >= opts.max_steps {
            return Err(Error::StepLimit(opts.max_steps));
        }
        let mut dt = match opts.control {
            StepControl::Fixed { dt } => dt,
            StepControl::Cfl { sigma } => cfl_dt_visc(&u, viscosity, sigma),
        };
        if t + dt > t_end - slack {
            dt = t_end - t;
        }
        u = rk_step(&u, dt, &opts.tableau, &mut rhs_fn, project_each_stage)
            .map_err(|e| Error::BlowUp { step: step + 1, time: t, detail: e.to_string() })?
            .rounded(opts.precision);
        if !u.is_finite() {
            return Err(Error::BlowUp { step: step + 1, time: t + dt, detail: "non-finite state".into() });
        }
        step += 1;
        t = if t + dt >= t_end - slack { t_end } else { t + dt };
        observer(step, t, &u);
    }
    Ok(u)
}

/// DNS integration of `du/dt = P F(u)`; `u0` is projected first.
pub fn integrate<O>(u0: &VectorField, t_end: f64, opts: &Integration, params: &FlowParams, observer: O) -> Result<VectorField>
where
    O: FnMut(usize, f64, &VectorField),
{
    params.validate()?;
    let rhs = Rhs::new(u0.grid(), *params);
    let u0 = project(u0);
    integrate_with(&u0, t_end, opts, params.viscosity, |u| Ok(rhs.eval(u)), true, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::operators::{relative_divergence, BodyForce};
    use crate::testutil::{random_divfree, random_vector, rel_err};
    use std::f64::consts::PI;

    fn tg(g: &Grid) -> VectorField {
        VectorField::from_fn(g, |a, x| if a == 0 { -x[0].sin() * x[1].cos() } else { x[0].cos() * x[1].sin() })
    }

    #[test]
    fn wray3_coefficients() {
        let t = wray3_tableau();
        assert_eq!(t.b, vec![q(1, 4), q(0, 1), q(3, 4)]);
        assert_eq!(t.a_exact(1, 0), q(8, 15));
        assert_eq!(t.a_exact(2, 0), q(1, 4));
        assert_eq!(t.a_exact(2, 1), q(5, 12));
        assert_eq!(t.c_exact(), vec![q(0, 1), q(8, 15), q(2, 3)]);
        assert_eq!(t.stability_polynomial(), vec![q(1, 1), q(1, 1), q(1, 2), q(1, 6)]);
        assert_eq!(rk4_tableau().stability_polynomial(), vec![q(1, 1), q(1, 1), q(1, 2), q(1, 6), q(1, 24)]);
    }

    #[test]
    fn rejects_implicit_or_inconsistent_tableau() {
        let z = q(0, 1);
        assert!(RkTableau::new("x", vec![vec![q(1, 2)]], vec![q(1, 1)]).is_err());
        assert!(RkTableau::new("x", vec![vec![z, z], vec![z, z]], vec![q(1, 2), q(1, 3)]).is_err());
        assert!(RkTableau::new("euler", vec![vec![z]], vec![q(1, 1)]).is_ok());
    }

    #[test]
    fn zero_rhs_leaves_state() {
        let g = Grid::unit(2, 8).unwrap();
        let u = random_vector(&g, 1);
        let out = rk_step(&u, 0.1, &wray3_tableau(), |v| Ok(VectorField::zeros(v.grid())), false).unwrap();
        assert_eq!(out, u);
    }

    #[test]
    fn linear_amplification_factor() {
        let g = Grid::unit(2, 4).unwrap();
        let u = random_vector(&g, 2);
        for &z in &[-0.3, 0.1, -1.7] {
            let lambda = 2.0;
            let dt = z / lambda;
            let out = rk_step(&u, dt, &wray3_tableau(), |v| Ok(v.scale(lambda)), false).unwrap();
            let r = 1.0 + z + z * z / 2.0 + z * z * z / 6.0;
            assert!(rel_err(out.data(), u.scale(r).data()) < 1e-14);
        }
    }

    #[test]
    fn blow_up_is_reported() {
        let g = Grid::unit(2, 4).unwrap();
        let u = random_vector(&g, 3);
        let r = rk_step(&u, 0.1, &wray3_tableau(), |v| Ok(v.scale(f64::NAN)), false);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let opts = Integration::fixed(0.1);
        let r = integrate_with(&u, 1.0, &opts, 0.0, |v| Ok(v.scale(1e300)), false, |_, _, _| {});
        assert!(matches!(r, Err(Error::BlowUp { step: 1, .. })));
    }

    #[test]
    fn cfl_examples() {
        let g = Grid::unit(2, 64).unwrap();
        let nu = 1e-3;
        let p = FlowParams::new(nu, BodyForce::None).unwrap();
        let h = 1.0 / 64.0;
        let u0 = VectorField::zeros(&g);
        assert!((cfl_dt(&u0, &p, 0.85) - 0.85 * h * h / (4.0 * nu)).abs() < 1e-15);
        let mut u = VectorField::zeros(&g);
        u.comp_mut(0)[5] = -1.0;
        let p0 = FlowParams::new(0.0, BodyForce::None).unwrap();
        assert!((cfl_dt(&u, &p0, 1.0) - h / (1.0 + 1e-12)).abs() < 1e-15);
        assert_eq!(cfl_dt(&u, &p0, 0.5), 0.5 * cfl_dt(&u, &p0, 1.0));
    }

    #[test]
    fn integrate_edge_cases() {
        let g = Grid::cube(2, 16, 0.0, 2.0 * PI).unwrap();
        let u = tg(&g);
        let p = FlowParams::new(0.01, BodyForce::None).unwrap();
        let out = integrate(&u, 0.0, &Integration::fixed(0.01), &p, |_, _, _| {}).unwrap();
        assert!(rel_err(out.data(), u.data()) < 1e-13);
        let r = integrate(&u, 1.0, &Integration::fixed(0.01).with_max_steps(5), &p, |_, _, _| {});
        assert!(matches!(r, Err(Error::StepLimit(5))));
        assert!(integrate(&u, 1.0, &Integration::fixed(-1.0), &p, |_, _, _| {}).is_err());
    }

    #[test]
    fn final_step_lands_on_end_time() {
        let g = Grid::cube(2, 16, 0.0, 2.0 * PI).unwrap();
        let p = FlowParams::new(0.01, BodyForce::None).unwrap();
        let mut times = Vec::new();
        integrate(&tg(&g), 0.25, &Integration::fixed(0.1), &p, |_, t, _| times.push(t)).unwrap();
        assert_eq!(times.len(), 4);
        assert_eq!(*times.last().unwrap(), 0.25);
    }

    #[test]
    fn taylor_green_decay() {
        let n = 64;
        let g = Grid::cube(2, n, 0.0, 2.0 * PI).unwrap();
        let nu = 1e-2;
        let p = FlowParams::new(nu, BodyForce::None).unwrap();
        let u0 = tg(&g);
        let t_end = 0.5;
        let out = integrate(&u0, t_end, &Integration::fixed(0.01), &p, |_, _, _| {}).unwrap();
        let h = g.spacing(0);
        let lam = (2.0 * (h / 2.0).sin() / h).powi(2);
        // the discrete TG mode decays with the discrete Laplacian eigenvalue
        let discrete = (-2.0 * nu * lam * t_end).exp();
        let continuous = (-2.0 * nu * t_end).exp();
        assert!(rel_err(out.data(), u0.scale(discrete).data()) < 1e-9);
        assert!((discrete - continuous).abs() < 1e-5);
    }

    #[test]
    fn deterministic_and_divergence_free() {
        let g = Grid::unit(2, 16).unwrap();
        let p = FlowParams::new(1e-3, BodyForce::Kolmogorov { amplitude: 1.0, wavenumber: 4 }).unwrap();
        let u0 = random_divfree(&g, 5);
        let mut worst: f64 = 0.0;
        let opts = Integration::new(StepControl::Cfl { sigma: 0.5 }, Scheme::Wray3);
        let a = integrate(&u0, 0.05, &opts, &p, |_, _, u| worst = worst.max(relative_divergence(u))).unwrap();
        let b = integrate(&u0, 0.05, &opts, &p, |_, _, _| {}).unwrap();
        assert_eq!(a, b);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn single_precision_state_is_rounded() {
        let g = Grid::unit(2, 8).unwrap();
        let p = FlowParams::new(1e-3, BodyForce::None).unwrap();
        let opts = Integration::fixed(1e-3).with_precision(Precision::Single);
        let out = integrate(&random_divfree(&g, 6), 0.005, &opts, &p, |_, _, _| {}).unwrap();
        assert!(out.data().iter().all(|&x| x == x as f32 as f64));
    }
}
