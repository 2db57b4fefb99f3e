//! Built-in self-checks: discrete identities, filter properties, the
//! Taylor-Green commutator oracle and tape gradients.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use log::info;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use dcles::analysis::{tg_solver_check, transfer_fa, transfer_va};
use dcles::closure::{init_params, CnnArchitecture, Closure, ClosureParams};
use dcles::filters::{apply_filter, commutator, face_average, filtered_pair, CoarseningMap, FilterKind};
use dcles::grid::{dot, norm2, Grid, ScalarField, VectorField, Weighting};
use dcles::initial_conditions::{random_spectral_field, SpectrumSpec};
use dcles::les::{Formulation, LesModel};
use dcles::operators::{convection, divergence, pressure_gradient, project, relative_divergence, BodyForce, FlowParams, Rhs};
use dcles::timestepping::{rk_step, wray3_tableau};
use dcles::training::{loss_post, loss_post_grad, loss_prior, loss_prior_grad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Operators,
    Filters,
    TaylorGreen,
    Gradients,
    All,
}

/// One checked quantity: `value` must not exceed `bound` (or reach it, for lower bounds).
struct Check {
    name: String,
    value: f64,
    bound: f64,
    lower: bool,
}

impl Check {
    fn max(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, lower: false }
    }

    fn min(name: impl Into<String>, value: f64, bound: f64) -> Self {
        Check { name: name.into(), value, bound, lower: true }
    }

    fn pass(&self) -> bool {
        if self.lower {
            self.value >= self.bound
        } else {
            self.value <= self.bound
        }
    }
}

fn write_checks(path: &Path, checks: &[Check]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "check,value,bound,kind,pass")?;
    for c in checks {
        writeln!(w, "{},{:.6e},{:.1e},{},{}", c.name, c.value, c.bound, if c.lower { "min" } else { "max" }, c.pass())?;
    }
    w.flush()?;
    Ok(())
}

fn random_field(g: &Grid, r: &mut Xoshiro256PlusPlus) -> VectorField {
    VectorField::from_vec(g, (0..g.dim() * g.ncell()).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn operators() -> Result<Vec<Check>> {
    let mut worst = [0.0f64; 5];
    let mut r = Xoshiro256PlusPlus::seed_from_u64(4);
    for g in [Grid::unit(2, 16)?, Grid::unit(3, 8)?] {
        for _ in 0..20 {
            let u = random_field(&g, &mut r);
            let p = ScalarField::from_vec(&g, (0..g.ncell()).map(|_| r.random_range(-1.0..1.0)).collect())?;
            let pu = project(&u);
            let gp = pressure_gradient(&p);
            let du = divergence(&u);
            worst[0] = worst[0].max(norm2(divergence(&pu).data()) / norm2(du.data()));
            worst[1] = worst[1].max(norm2(project(&pu).sub(&pu).data()) / norm2(pu.data()));
            worst[2] = worst[2].max(norm2(project(&gp).data()) / norm2(gp.data()));
            worst[3] = worst[3].max((dot(gp.data(), u.data()) + dot(p.data(), du.data())).abs() / (norm2(gp.data()) * norm2(u.data())));
            let w = project(&random_field(&g, &mut r));
            let cw = convection(&w);
            worst[4] = worst[4].max(dot(w.data(), cw.data()).abs() / (norm2(w.data()) * norm2(cw.data())));
        }
    }
    let names = ["divergence_of_projection", "projection_idempotent", "projection_of_gradient", "gradient_divergence_adjoint", "convection_energy_neutral"];
    Ok(names.iter().zip(worst).map(|(n, v)| Check::max(*n, v, 1e-11)).collect())
}

fn filters() -> Result<Vec<Check>> {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(2);
    let mut fa: f64 = 0.0;
    let mut fa32: f64 = 0.0;
    let mut va = f64::INFINITY;
    for g in [Grid::unit(2, 64)?, Grid::unit(3, 16)?] {
        let u = project(&random_field(&g, &mut r));
        for m in [2, 4] {
            let map = CoarseningMap::uniform(&g, g.n(0) / m)?;
            fa = fa.max(relative_divergence(&face_average(&u, &map)?));
            fa32 = fa32.max(relative_divergence(&face_average(&u.cast::<f32>(), &map)?));
            va = va.min(relative_divergence(&apply_filter(&u, &map, FilterKind::Va)?));
        }
    }
    let g = Grid::unit(2, 128)?;
    let u = random_spectral_field(&g, &SpectrumSpec { peak_wavenumber: 10.0, seed: 3 })?;
    let flow = FlowParams::from_reynolds(2000.0, BodyForce::None)?;
    let map = CoarseningMap::uniform(&g, 32)?;
    let split = |k| -> Result<f64> {
        let c = commutator(&u, &map, k, &flow)?;
        Ok(c.sub(&project(&c)).norm(Weighting::None) / c.norm(Weighting::None))
    };
    let w = 1.0 / 32.0;
    let mut order = 0.0f64;
    for k0 in -32..32 {
        for k1 in -32..32 {
            let k = [k0 as f64, k1 as f64];
            for a in 0..2 {
                order = order.max(transfer_va(&k, w) - transfer_fa(&k, w, a));
            }
        }
    }
    Ok(vec![
        Check::max("fa_divergence_64bit", fa, 1e-11),
        Check::max("fa_divergence_32bit", fa32, 1e-4),
        Check::min("va_divergence", va, 1e-2),
        Check::max("fa_commutator_non_solenoidal_part", split(FilterKind::Fa)?, 1e-9),
        Check::min("va_commutator_non_solenoidal_part", split(FilterKind::Va)?, 1e-3),
        Check::max("va_transfer_minus_fa_transfer", order, 0.0),
    ])
}

fn taylor_green(run: &Path) -> Result<Vec<Check>> {
    let mut w = BufWriter::new(File::create(run.join("taylor_green.csv"))?);
    writeln!(w, "cells,n,max_abs_residual")?;
    let mut checks = Vec::new();
    for n in [1, 2, 4] {
        let c = tg_solver_check(256, n)?;
        writeln!(w, "{},{},{:.6e}", c.cells, c.n, c.max_err())?;
        checks.push(Check::max(format!("taylor_green_commutator_n{n}"), c.max_err(), 1e-12));
    }
    w.flush()?;
    Ok(checks)
}

fn gradients() -> Result<Vec<Check>> {
    let fine = Grid::unit(2, 64)?;
    let map = CoarseningMap::uniform(&fine, 16)?;
    let flow = FlowParams::new(1e-3, BodyForce::None)?;
    let (fr, cr) = (Rhs::new(&fine, flow), Rhs::new(map.coarse(), flow));
    let tab = wray3_tableau();
    let dt = 4e-3;
    let mut u = random_spectral_field(&fine, &SpectrumSpec { peak_wavenumber: 5.0, seed: 7 })?;
    let mut window = Vec::new();
    let mut first = None;
    for i in 0..4 {
        let (ub, c) = filtered_pair(&u, &fr.eval_projected(&u), &map, FilterKind::Fa, &cr)?;
        first.get_or_insert(c);
        window.push(ub);
        if i < 3 {
            for _ in 0..4 {
                u = rk_step(&u, dt, &tab, |x| Ok(fr.eval_projected(x)), false)?;
            }
        }
    }
    let c0 = first.unwrap();
    let p = init_params(&CnnArchitecture::default_for(2), 70)?;
    let batch = vec![(&window[0], &c0)];
    let model = |q: &ClosureParams| LesModel::new(map.coarse(), flow, Formulation::Dcf, Closure::Cnn(q.clone()));
    let (_, gp) = loss_prior_grad(&batch, &p)?;
    let (_, gq) = loss_post_grad(&window, &model(&p)?, &p, 4.0 * dt, &tab)?;
    let gq = gq.ok_or_else(|| anyhow::anyhow!("trajectory loss blew up"))?;

    let mut r = Xoshiro256PlusPlus::seed_from_u64(71);
    let h = 1e-4;
    let shifted = |i: usize, d: f64| {
        let mut th = p.theta().to_vec();
        th[i] += d;
        p.with_theta(th)
    };
    let mut prior: f64 = 0.0;
    let mut post: f64 = 0.0;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    for _ in 0..10 {
        let i = r.random_range(0..p.theta().len());
        let lp = |d| -> Result<f64> { Ok(loss_prior(&batch, &Closure::Cnn(shifted(i, d)?))?) };
        let lq = |d| -> Result<f64> { Ok(loss_post(&window, &model(&shifted(i, d)?)?, 4.0 * dt, &tab)?.value) };
        prior = prior.max(rel((lp(h)? - lp(-h)?) / (2.0 * h), gp[i]));
        post = post.max(rel((lq(h)? - lq(-h)?) / (2.0 * h), gq[i]));
    }
    Ok(vec![Check::max("prior_loss_gradient", prior, 1e-6), Check::max("trajectory_loss_gradient", post, 1e-5)])
}

/// Runs `suite`, writes one CSV per suite into `run` and returns the number of failed checks.
pub fn run(suite: Suite, run: &Path) -> Result<usize> {
    let suites: Vec<Suite> = match suite {
        Suite::All => vec![Suite::Operators, Suite::Filters, Suite::TaylorGreen, Suite::Gradients],
        s => vec![s],
    };
    let mut failed = 0;
    for s in suites {
        let (name, checks) = match s {
            Suite::Operators => ("operators", operators()?),
            Suite::Filters => ("filters", filters()?),
            Suite::TaylorGreen => ("taylor_green_checks", taylor_green(run)?),
            Suite::Gradients => ("gradients", gradients()?),
            Suite::All => unreachable!(),
        };
        write_checks(&run.join(format!("{name}.csv")), &checks)?;
        for c in &checks {
            let verdict = if c.pass() { "ok" } else { "FAILED" };
            info!("{name}: {} = {:.3e} ({} {:.0e}) {verdict}", c.name, c.value, if c.lower { ">=" } else { "<=" }, c.bound);
            if !c.pass() {
                eprintln!("validation failure: {} = {:e}", c.name, c.value);
                failed += 1;
            }
        }
    }
    Ok(failed)
}
