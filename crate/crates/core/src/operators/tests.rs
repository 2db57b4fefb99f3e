use std::f64::consts::PI;

use super::*;
use crate::grid::{dot, inner_product, Weighting};
use crate::testutil::*;

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

fn tg_grid(n: usize) -> Grid {
    Grid::cube(2, n, 0.0, 2.0 * PI).unwrap()
}

fn taylor_green(g: &Grid) -> VectorField {
    VectorField::from_fn(g, |a, x| {
        if a == 0 {
            -x[0].sin() * x[1].cos()
        } else {
            x[0].cos() * x[1].sin()
        }
    })
}

/// Dense `L = Omega_p D G` assembled column by column from the stencils.
fn dense_laplacian(g: &Grid) -> Vec<f64> {
    let n = g.ncell();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut e = ScalarField::zeros(g);
        e.data_mut()[j] = 1.0;
        let col = divergence(&pressure_gradient(&e));
        for i in 0..n {
            l[i * n + j] = g.cell_volume() * col.data()[i];
        }
    }
    l
}

/// Bordered system `[L e; e^T 0]` solved densely.
fn bordered_solve(g: &Grid, rhs: &[f64]) -> Vec<f64> {
    let n = g.ncell();
    let l = dense_laplacian(g);
    let m = n + 1;
    let mut a = vec![0.0; m * m];
    for i in 0..n {
        for j in 0..n {
            a[i * m + j] = l[i * n + j];
        }
        a[i * m + n] = 1.0;
        a[n * m + i] = 1.0;
    }
    let mut b = rhs.to_vec();
    b.push(0.0);
    let mut x = dense_solve(a, b);
    x.truncate(n);
    x
}

#[test]
fn divergence_examples() {
    let g = Grid::unit(2, 8).unwrap();
    let c = VectorField::<f64>::from_fn(&g, |a, _| 1.0 + a as f64);
    assert!(divergence(&c).max_abs() < 1e-13);

    let h = g.spacing(0);
    let mut u = VectorField::zeros(&g);
    let i = g.linear([3, 5, 0]);
    u.comp_mut(0)[i] = 1.0;
    let du = divergence(&u);
    for l in 0..g.ncell() {
        let want = if l == i {
            1.0 / h
        } else if l == g.linear([4, 5, 0]) {
            -1.0 / h
        } else {
            0.0
        };
        assert!((du.data()[l] - want).abs() < 1e-12);
    }

    let g = tg_grid(32);
    let tg = taylor_green(&g);
    assert!(divergence(&tg).max_abs() < 1e-13);
}

#[test]
fn gradient_examples() {
    let g = Grid::unit(2, 6).unwrap();
    let c = ScalarField::from_fn(&g, |_| 2.5);
    assert!(pressure_gradient(&c).max_abs() < 1e-13);

    let h = g.spacing(0);
    let mut p = ScalarField::zeros(&g);
    let i = g.linear([2, 3, 0]);
    p.data_mut()[i] = 1.0;
    let gp = pressure_gradient(&p);
    let mut nonzero = 0;
    for a in 0..2 {
        for l in 0..g.ncell() {
            let v = gp.comp(a)[l];
            if v != 0.0 {
                nonzero += 1;
                let idx = g.unravel(l);
                // face below the impulse cell gets +1/h, face above gets -1/h
                let want = if l == i { -1.0 / h } else { 1.0 / h };
                assert!((v - want).abs() < 1e-12, "{a} {idx:?}");
            }
        }
    }
    assert_eq!(nonzero, 4);
}

#[test]
fn adjointness_of_gradient_and_divergence() {
    for (k, g) in [Grid::unit(2, 16).unwrap(), Grid::new(3, &[8, 6, 4], &[(0.0, 1.0), (0.0, 2.0), (0.0, 0.5)]).unwrap()]
        .iter()
        .enumerate()
    {
        for s in 0..100 {
            let p = random_scalar(g, 1000 * k as u64 + 2 * s);
            let u = random_vector(g, 1000 * k as u64 + 2 * s + 1);
            let lhs = inner_product(&pressure_gradient(&p), &u, Weighting::Volume).unwrap();
            let rhs = inner_product(&p, &divergence(&u), Weighting::Volume).unwrap();
            let scale = lhs.abs().max(rhs.abs()).max(1.0);
            assert!((lhs + rhs).abs() <= 1e-12 * scale, "{lhs} {rhs}");
        }
    }
}

#[test]
fn convection_examples() {
    let g = Grid::unit(2, 8).unwrap();
    let c = VectorField::from_fn(&g, |a, _| 0.3 - a as f64);
    assert!(convection(&c).max_abs() < 1e-12);

    for n in [16, 64, 256] {
        let g = tg_grid(n);
        let d = g.spacing(0);
        let conv = convection(&taylor_green(&g));
        let want = VectorField::from_fn(&g, |a, x| -0.25 * (2.0 * x[a]).sin() * (sinc(d) + sinc(2.0 * d)));
        assert!(max_abs_diff(conv.data(), want.data()) < 1e-13, "n = {n}");
    }

    for g in [Grid::unit(2, 16).unwrap(), Grid::unit(3, 8).unwrap()] {
        for s in 0..10 {
            let u = random_divfree(&g, 77 + s);
            let e = dot(u.data(), convection(&u).data());
            assert!(e.abs() <= 1e-12 * dot(u.data(), u.data()));
        }
    }
}

#[test]
fn convection_vjp_matches_directional_derivative() {
    let g = Grid::new(2, &[6, 5], &[(0.0, 1.0), (0.0, 1.3)]).unwrap();
    let u = random_vector(&g, 3);
    let v = random_vector(&g, 4);
    let w = random_vector(&g, 5);
    // convection is quadratic, so the central difference is exact up to round-off
    let eps = 1e-3;
    let cp = convection(&u.axpy(eps, &v));
    let cm = convection(&u.axpy(-eps, &v));
    let jv: Vec<f64> = cp.data().iter().zip(cm.data()).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
    let lhs = dot(w.data(), &jv);
    let rhs = dot(convection_vjp(&u, &w).data(), v.data());
    assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} {rhs}");
}

#[test]
fn diffusion_examples() {
    let g = Grid::unit(3, 4).unwrap();
    let c = VectorField::from_fn(&g, |_, _| 1.7);
    assert!(diffusion(&c, 0.3).max_abs() < 1e-12);

    let g = tg_grid(32);
    let h = g.spacing(0);
    let nu = 0.37;
    let u = VectorField::from_fn(&g, |a, x| if a == 0 { x[0].sin() } else { 0.0 });
    let du = diffusion(&u, nu);
    let eig = (2.0 * (h / 2.0).sin() / h).powi(2);
    assert!(max_abs_diff(du.data(), u.scale(-nu * eig).data()) < 1e-12);

    for s in 0..100 {
        let g = Grid::unit(2, 8).unwrap();
        let u = random_vector(&g, 500 + s);
        assert!(dot(u.data(), diffusion(&u, 0.1).data()) <= 0.0);
    }

    // self-adjointness
    let g = Grid::unit(3, 6).unwrap();
    let u = random_vector(&g, 1);
    let v = random_vector(&g, 2);
    let a = dot(diffusion(&u, 0.2).data(), v.data());
    let b = dot(u.data(), diffusion(&v, 0.2).data());
    assert!((a - b).abs() < 1e-11 * a.abs().max(1.0));
}

#[test]
fn body_force_examples() {
    let g = Grid::unit(2, 8).unwrap();
    assert_eq!(body_force(&g, &BodyForce::None).max_abs(), 0.0);

    let f = body_force(&g, &BodyForce::Kolmogorov { amplitude: 1.0, wavenumber: 4 });
    // u^1 points sit at cell centers along axis 2; the first one is x^2 = 1/16
    let l = g.linear([0, 0, 0]);
    assert!((f.comp(0)[l] - 1.0).abs() < 1e-14);
    assert_eq!(f.max_abs_comp(1), 0.0);

    let g3 = Grid::unit(3, 8).unwrap();
    let f3 = body_force(&g3, &BodyForce::Kolmogorov { amplitude: 5.0, wavenumber: 4 });
    assert!((f3.comp(0)[0] - 5.0).abs() < 1e-13);
    assert!((f3.max_abs() - 5.0).abs() < 1e-13);

    assert!(BodyForce::Kolmogorov { amplitude: 1.0, wavenumber: 0 }.validate().is_err());
}

#[test]
fn rhs_examples() {
    let g = Grid::unit(2, 8).unwrap();
    let z = VectorField::zeros(&g);
    let p = FlowParams::new(0.01, BodyForce::None).unwrap();
    assert_eq!(rhs(&z, &p).max_abs(), 0.0);

    let force = BodyForce::Kolmogorov { amplitude: 1.0, wavenumber: 4 };
    let p = FlowParams::new(0.01, force).unwrap();
    assert_eq!(rhs(&z, &p), body_force(&g, &force));

    let g = tg_grid(64);
    let d = g.spacing(0);
    let nu = 0.05;
    let u = taylor_green(&g);
    let f = rhs(&u, &FlowParams::new(nu, BodyForce::None).unwrap());
    let eig = 2.0 * (2.0 * (d / 2.0).sin() / d).powi(2);
    let want = VectorField::from_fn(&g, |a, x| -0.25 * (2.0 * x[a]).sin() * (sinc(d) + sinc(2.0 * d)))
        .axpy(-nu * eig, &u);
    assert!(max_abs_diff(f.data(), want.data()) < 1e-12);
}

#[test]
fn poisson_examples() {
    let g = Grid::unit(2, 8).unwrap();
    let z = poisson_solve(&ScalarField::zeros(&g));
    assert_eq!(z.pressure.max_abs(), 0.0);

    let n = g.ncell();
    let l = dense_laplacian(&g);
    let p0 = ScalarField::from_fn(&g, |x| (2.0 * PI * x[0]).cos());
    let lp: Vec<f64> = (0..n).map(|i| (0..n).map(|j| l[i * n + j] * p0.data()[j]).sum()).collect();
    let back = poisson_solve(&ScalarField::from_vec(&g, lp).unwrap());
    assert!(back.is_consistent());
    assert!(max_abs_diff(back.pressure.data(), p0.data()) < 1e-12);

    for s in 0..5 {
        let mut r = random_vec(40 + s, n);
        let m = r.iter().sum::<f64>() / n as f64;
        r.iter_mut().for_each(|x| *x -= m);
        let fft = poisson_solve(&ScalarField::from_vec(&g, r.clone()).unwrap());
        let dense = bordered_solve(&g, &r);
        assert!(max_abs_diff(fft.pressure.data(), &dense) < 1e-12);
        assert!(fft.pressure.mean().abs() < 1e-14);
    }

    // inconsistent right-hand side: reported, projected system still solved
    let mut r = random_vec(9, n);
    r[0] += 3.0;
    let sol = poisson_solve(&ScalarField::from_vec(&g, r.clone()).unwrap());
    assert!(!sol.is_consistent());
    let m = r.iter().sum::<f64>() / n as f64;
    let proj: Vec<f64> = r.iter().map(|x| x - m).collect();
    assert!(max_abs_diff(sol.pressure.data(), &bordered_solve(&g, &proj)) < 1e-12);
}

#[test]
fn projector_algebra() {
    for g in [Grid::unit(2, 16).unwrap(), Grid::unit(3, 8).unwrap()] {
        for s in 0..100 {
            let u = random_vector(&g, 9000 + s);
            let pu = project(&u);
            let nu = pu.norm(Weighting::None);
            assert!(divergence(&pu).norm(Weighting::None) * g.min_spacing() <= 1e-11 * nu);
            let ppu = project(&pu);
            assert!(rel_err(ppu.data(), pu.data()) <= 1e-11);
            let p = random_scalar(&g, 7000 + s);
            let gp = pressure_gradient(&p);
            assert!(project(&gp).norm(Weighting::None) <= 1e-11 * gp.norm(Weighting::None));
        }
    }
    let g = Grid::unit(2, 16).unwrap();
    let tg = VectorField::from_fn(&g, |a, x| {
        let (s, c) = ((2.0 * PI * x[0]).sin(), (2.0 * PI * x[1]).cos());
        if a == 0 {
            -s * c
        } else {
            (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin()
        }
    });
    assert!(rel_err(project(&tg).data(), tg.data()) < 1e-13);
}

#[test]
fn dissipation_examples() {
    let g = tg_grid(16);
    assert_eq!(dissipation(&VectorField::zeros(&g), 0.1), 0.0);
    let u = taylor_green(&g);
    assert_eq!(dissipation(&u, 0.0), 0.0);
    let nu = 0.2;
    let d = g.spacing(0);
    let eig = 2.0 * (2.0 * (d / 2.0).sin() / d).powi(2);
    let n2 = u.norm(Weighting::Volume).powi(2);
    assert!((dissipation(&u, nu) + nu * eig * n2).abs() < 1e-12 * n2);
}

#[test]
fn linearity() {
    let g = Grid::unit(2, 8).unwrap();
    let (x, y) = (random_vector(&g, 1), random_vector(&g, 2));
    let (a, b) = (0.7, -1.9);
    let comb = x.scale(a).axpy(b, &y);
    let lhs = divergence(&comb);
    let rhs: Vec<f64> = divergence(&x).data().iter().zip(divergence(&y).data()).map(|(p, q)| a * p + b * q).collect();
    assert!(max_abs_diff(lhs.data(), &rhs) < 1e-12);
    let lhs = diffusion(&comb, 0.3);
    let rhs = diffusion(&x, 0.3).scale(a).axpy(b, &diffusion(&y, 0.3));
    assert!(max_abs_diff(lhs.data(), rhs.data()) < 1e-11);
    let (p, q) = (random_scalar(&g, 3), random_scalar(&g, 4));
    let pq = ScalarField::from_vec(&g, p.data().iter().zip(q.data()).map(|(s, t)| a * s + b * t).collect()).unwrap();
    let lhs = pressure_gradient(&pq);
    let rhs = pressure_gradient(&p).scale(a).axpy(b, &pressure_gradient(&q));
    assert!(max_abs_diff(lhs.data(), rhs.data()) < 1e-11);
}

#[test]
fn divergence_in_single_precision() {
    let g = Grid::unit(2, 16).unwrap();
    let u = random_divfree(&g, 3);
    let u32f: VectorField<f32> = u.cast();
    assert!(relative_divergence(&u32f) < 1e-3 / g.spacing(0));
}
