//! Coarse-grid LES models: closure outside (DIF) or inside (DCF) the projection.

use serde::{Deserialize, Serialize};

use crate::closure::Closure;
use crate::error::{Error, Result};
use crate::grid::{norm2, Grid, VectorField, Weighting};
use crate::operators::{divergence, project, FlowParams, Rhs};
use crate::timestepping::{integrate_with, rk_step, Integration, RkTableau};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    /// `P F(v) + m`.
    Dif,
    /// `P (F(v) + m)`.
    #[default]
    Dcf,
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Formulation::Dif => "dif",
            Formulation::Dcf => "dcf",
        })
    }
}

impl std::str::FromStr for Formulation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dif" => Ok(Formulation::Dif),
            "dcf" => Ok(Formulation::Dcf),
            _ => Err(Error::InvalidArgument(format!("unknown formulation '{s}' (expected dif or dcf)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LesModel {
    formulation: Formulation,
    closure: Closure,
    rhs: Rhs,
    grid: Grid,
}

impl LesModel {
    pub fn new(grid: &Grid, params: FlowParams, formulation: Formulation, closure: Closure) -> Result<Self> {
        params.validate()?;
        if let Closure::Cnn(p) = &closure {
            if p.arch().dim != grid.dim() {
                return Err(Error::Shape(format!("{}D closure on a {}D grid", p.arch().dim, grid.dim())));
            }
        }
        Ok(LesModel { formulation, closure, rhs: Rhs::new(grid, params), grid: *grid })
    }

    pub fn formulation(&self) -> Formulation {
        self.formulation
    }

    pub fn closure(&self) -> &Closure {
        &self.closure
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &FlowParams {
        self.rhs.params()
    }

    pub(crate) fn coarse_rhs(&self) -> &Rhs {
        &self.rhs
    }

    /// Right-hand side for a given closure output.
    pub fn rhs_with(&self, v: &VectorField, m: Option<&VectorField>) -> VectorField {
        let f = self.rhs.eval(v);
        match (self.formulation, m) {
            (_, None) => project(&f),
            (Formulation::Dif, Some(m)) => project(&f).add(m),
            (Formulation::Dcf, Some(m)) => project(&f.add(m)),
        }
    }
}

pub fn les_rhs(v: &VectorField, model: &LesModel) -> Result<VectorField> {
    model.grid.check_same(v.grid())?;
    let m = model.closure.apply(v)?;
    Ok(model.rhs_with(v, m.as_ref()))
}

/// One step with an arbitrary closure source; `closure(stage, v)` is called once per stage.
pub fn les_step_with<C>(v: &VectorField, model: &LesModel, dt: f64, tableau: &RkTableau, mut closure: C) -> Result<VectorField>
where
    C: FnMut(usize, &VectorField) -> Result<Option<VectorField>>,
{
    let mut stage = 0;
    rk_step(
        v,
        dt,
        tableau,
        |x| {
            let m = closure(stage, x)?;
            stage += 1;
            Ok(model.rhs_with(x, m.as_ref()))
        },
        false,
    )
}

pub fn les_step(v: &VectorField, model: &LesModel, dt: f64, tableau: &RkTableau) -> Result<VectorField> {
    les_step_with(v, model, dt, tableau, |_, x| model.closure.apply(x))
}

/// Outcome of an LES run; `unstable` carries the blow-up diagnostic of a run cut short.
#[derive(Clone, Debug)]
pub struct LesRun {
    pub state: VectorField,
    pub steps: usize,
    pub time: f64,
    pub unstable: Option<String>,
}

/// Integrates `v0` to `t_end`. A blow-up ends the run early with the last
/// finite state and is reported through [`LesRun::unstable`].
pub fn run_les<O>(v0: &VectorField, model: &LesModel, opts: &Integration, t_end: f64, mut observer: O) -> Result<LesRun>
where
    O: FnMut(usize, f64, &VectorField),
{
    model.grid.check_same(v0.grid())?;
    let mut last = (v0.clone(), 0usize, 0.0f64);
    let res = integrate_with(
        v0,
        t_end,
        opts,
        model.params().viscosity,
        |x| les_rhs(x, model),
        false,
        |step, t, v| {
            last = (v.clone(), step, t);
            observer(step, t, v);
        },
    );
    let (state, steps, time) = last;
    match res {
        Ok(_) => Ok(LesRun { state, steps, time, unstable: None }),
        Err(e @ Error::BlowUp { .. }) => Ok(LesRun { state, steps, time, unstable: Some(e.to_string()) }),
        Err(e) => Err(e),
    }
}

/// Mean over snapshots of `||v_i - u_i|| / ||u_i||`.
pub fn aposteriori_error(v: &[VectorField], u: &[VectorField]) -> Result<f64> {
    if v.len() != u.len() || v.is_empty() {
        return Err(Error::Shape(format!("trajectories of length {} and {}", v.len(), u.len())));
    }
    let mut s = 0.0;
    for (a, b) in v.iter().zip(u) {
        a.grid().check_same(b.grid())?;
        let nb = b.norm(Weighting::None);
        if nb == 0.0 {
            return Err(Error::InvalidArgument("reference snapshot with zero norm".into()));
        }
        s += a.sub(b).norm(Weighting::None) / nb;
    }
    Ok(s / v.len() as f64)
}

/// `sqrt(mean_I (D v)_I^2)`.
pub fn divergence_rms(v: &VectorField) -> f64 {
    let d = divergence(v);
    norm2(d.data()) / (v.grid().ncell() as f64).sqrt()
}

/// `1/2 ||v||_Omega^2`.
pub fn total_energy(v: &VectorField) -> f64 {
    0.5 * v.norm(Weighting::Volume).powi(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{init_params, CnnArchitecture};
    use crate::filters::{filtered_pair, CoarseningMap, FilterKind};
    use crate::initial_conditions::{random_spectral_field, SpectrumSpec};
    use crate::operators::{dissipation, relative_divergence, BodyForce};
    use crate::testutil::{max_abs_diff, random_divfree, random_vector};
    use crate::timestepping::wray3_tableau;

    fn params(nu: f64) -> FlowParams {
        FlowParams::new(nu, BodyForce::None).unwrap()
    }

    fn cnn_closure(g: &Grid) -> Closure {
        Closure::Cnn(init_params(&CnnArchitecture::uniform(g.dim(), 1, 4, 2), 3).unwrap())
    }

    #[test]
    fn formulations_agree_without_closure() {
        let g = Grid::unit(2, 16).unwrap();
        let v = random_divfree(&g, 1);
        let a = LesModel::new(&g, params(1e-3), Formulation::Dif, Closure::None).unwrap();
        let b = LesModel::new(&g, params(1e-3), Formulation::Dcf, Closure::None).unwrap();
        assert_eq!(les_rhs(&v, &a).unwrap(), les_rhs(&v, &b).unwrap());
        let t = wray3_tableau();
        assert_eq!(les_step(&v, &a, 1e-3, &t).unwrap(), les_step(&v, &b, 1e-3, &t).unwrap());
    }

    #[test]
    fn dcf_output_is_divergence_free() {
        for (d, n) in [(2, 16), (3, 6)] {
            let g = Grid::unit(d, n).unwrap();
            let v = random_divfree(&g, 2);
            for c in [Closure::Smagorinsky(0.3), cnn_closure(&g)] {
                let m = LesModel::new(&g, params(1e-3), Formulation::Dcf, c).unwrap();
                assert!(relative_divergence(&les_rhs(&v, &m).unwrap()) < 1e-12);
            }
        }
    }

    #[test]
    fn dif_equals_dcf_for_projected_closure() {
        let g = Grid::unit(2, 16).unwrap();
        let v = random_divfree(&g, 3);
        let pm = project(&random_vector(&g, 4));
        let a = LesModel::new(&g, params(1e-3), Formulation::Dif, Closure::None).unwrap();
        let b = LesModel::new(&g, params(1e-3), Formulation::Dcf, Closure::None).unwrap();
        let x = a.rhs_with(&v, Some(&pm));
        let y = b.rhs_with(&v, Some(&pm));
        assert!(max_abs_diff(x.data(), y.data()) < 1e-12 * x.max_abs());
        // and over several steps
        let t = wray3_tableau();
        let (mut va, mut vb) = (v.clone(), v.clone());
        for _ in 0..5 {
            va = les_step_with(&va, &a, 1e-3, &t, |_, _| Ok(Some(pm.clone()))).unwrap();
            vb = les_step_with(&vb, &b, 1e-3, &t, |_, _| Ok(Some(pm.clone()))).unwrap();
            assert!(max_abs_diff(va.data(), vb.data()) <= 1e-12 * vb.max_abs());
        }
    }

    #[test]
    fn dif_with_generic_cnn_may_leave_divergence() {
        let g = Grid::unit(2, 16).unwrap();
        let v = random_divfree(&g, 5);
        let m = LesModel::new(&g, params(1e-3), Formulation::Dif, cnn_closure(&g)).unwrap();
        let r = les_rhs(&v, &m).unwrap();
        // only the measurement is asserted
        assert!(divergence_rms(&r).is_finite());
    }

    #[test]
    fn zero_field_stays_zero() {
        let g = Grid::unit(2, 8).unwrap();
        let m = LesModel::new(&g, params(1e-2), Formulation::Dcf, Closure::Smagorinsky(0.2)).unwrap();
        let run = run_les(&VectorField::zeros(&g), &m, &Integration::fixed(1e-2), 0.1, |_, _, _| {}).unwrap();
        assert_eq!(run.state.max_abs(), 0.0);
        assert_eq!(run.steps, 10);
        assert!(run.unstable.is_none());
    }

    #[test]
    fn blow_up_is_flagged() {
        let g = Grid::unit(2, 16).unwrap();
        let v = random_divfree(&g, 6).scale(50.0);
        let m = LesModel::new(&g, params(0.0), Formulation::Dif, Closure::None).unwrap();
        let run = run_les(&v, &m, &Integration::fixed(0.5), 100.0, |_, _, _| {}).unwrap();
        assert!(run.unstable.is_some());
        assert!(run.state.is_finite());
    }

    #[test]
    fn oracle_closure_replays_filtered_dns() {
        let fine = Grid::unit(2, 64).unwrap();
        let map = CoarseningMap::uniform(&fine, 16).unwrap();
        let p = params(5e-4);
        let fine_rhs = Rhs::new(&fine, p);
        let coarse_rhs = Rhs::new(map.coarse(), p);
        let tab = wray3_tableau();
        let dt = 2e-3;
        let mut u = random_spectral_field(&fine, &SpectrumSpec { peak_wavenumber: 4.0, seed: 2 }).unwrap();
        let model = LesModel::new(map.coarse(), p, Formulation::Dcf, Closure::None).unwrap();
        let mut v = crate::filters::apply_filter(&u, &map, FilterKind::Fa).unwrap();
        for _ in 0..10 {
            // stage commutators along the DNS step
            let mut cs = Vec::new();
            let next = rk_step(
                &u,
                dt,
                &tab,
                |x| {
                    let pf = fine_rhs.eval_projected(x);
                    cs.push(filtered_pair(x, &pf, &map, FilterKind::Fa, &coarse_rhs)?.1);
                    Ok(pf)
                },
                false,
            )
            .unwrap();
            u = next;
            v = les_step_with(&v, &model, dt, &tab, |s, _| Ok(Some(cs[s].clone()))).unwrap();
            let ubar = crate::filters::apply_filter(&u, &map, FilterKind::Fa).unwrap();
            assert!(ubar.sub(&v).norm(Weighting::None) <= 1e-10 * ubar.norm(Weighting::None));
        }
    }

    #[test]
    fn metric_examples() {
        let g = Grid::unit(2, 8).unwrap();
        let u = random_vector(&g, 7);
        let traj = vec![u.clone(), u.scale(2.0)];
        assert_eq!(aposteriori_error(&traj, &traj).unwrap(), 0.0);
        let z = vec![VectorField::zeros(&g); 2];
        assert_eq!(aposteriori_error(&z, &traj).unwrap(), 1.0);
        let e = 1e-3;
        let s: Vec<_> = traj.iter().map(|x| x.scale(1.0 + e)).collect();
        assert!((aposteriori_error(&s, &traj).unwrap() - e).abs() < 1e-14);
        assert!(aposteriori_error(&traj[..1], &traj).is_err());

        let mut w = VectorField::zeros(&g);
        w.comp_mut(0)[5] = 0.25;
        // one face value produces +-delta in two cells
        let delta = 0.25 / g.spacing(0);
        assert!((divergence_rms(&w) - delta * (2.0f64).sqrt() / 8.0).abs() < 1e-12);
        assert!(divergence_rms(&random_divfree(&g, 8)) < 1e-12);

        assert_eq!(total_energy(&VectorField::zeros(&g)), 0.0);
        let one = VectorField::from_fn(&g, |a, _| if a == 0 { 1.0 } else { 0.0 });
        assert!((total_energy(&one) - 0.5).abs() < 1e-15);
        assert!((total_energy(&u.scale(2.0)) - 4.0 * total_energy(&u)).abs() < 1e-12);
    }

    #[test]
    fn energy_rate_matches_dissipation() {
        let g = Grid::unit(2, 32).unwrap();
        let nu = 1e-2;
        let v = random_spectral_field(&g, &SpectrumSpec { peak_wavenumber: 3.0, seed: 4 }).unwrap();
        let m = LesModel::new(&g, params(nu), Formulation::Dcf, Closure::None).unwrap();
        let t = wray3_tableau();
        let rate = |dt: f64| {
            let a = les_step(&v, &m, dt, &t).unwrap();
            let b = les_step(&v, &m, -dt, &t).unwrap();
            (total_energy(&a) - total_energy(&b)) / (2.0 * dt)
        };
        let want = dissipation(&v, nu);
        let e1 = (rate(1e-3) - want).abs();
        let e2 = (rate(5e-4) - want).abs();
        assert!(e1 < 1e-4 * want.abs());
        assert!(e2 < 0.3 * e1);
    }
}
