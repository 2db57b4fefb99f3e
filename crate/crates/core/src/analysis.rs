//! Energy spectra, filter transfer functions and closed-form Taylor-Green
//! results used as exactness oracles.
//!
//! Transforms use the `1/N` forward normalization, so `u_hat_0` is the mean
//! and `sum_k E_k = 1/2 mean(|u|^2)`. Wavenumbers are integer mode numbers per
//! box length.

use std::f64::consts::PI;
use std::io::Write;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::Result;
use crate::filters::tophat_values;
use crate::grid::{Grid, VectorField};
use crate::operators::{convection, FftNd};

/// `(1 + sqrt 5) / 2`, the default bin ratio.
pub const GOLDEN: f64 = 1.618_033_988_749_895;

/// Signed mode number of index `i` on an axis with `n` points.
#[inline]
pub fn mode_number(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

/// Wavenumber vector of the linear index `lin`, trailing entries zero.
pub fn mode_vector(grid: &Grid, lin: usize) -> [i64; 3] {
    let idx = grid.unravel(lin);
    let mut k = [0; 3];
    for a in 0..grid.dim() {
        k[a] = mode_number(idx[a], grid.n(a));
    }
    k
}

fn mode_norm(grid: &Grid, lin: usize) -> f64 {
    let k = mode_vector(grid, lin);
    ((k[0] * k[0] + k[1] * k[1] + k[2] * k[2]) as f64).sqrt()
}

/// `E_k = 1/2 |u_hat_k|^2` per wavenumber in layout order, each component
/// transformed at its own location.
pub fn mode_energies(u: &VectorField) -> Vec<f64> {
    let g = *u.grid();
    let nc = g.ncell();
    let fft = FftNd::new(&g);
    let mut e = vec![0.0; nc];
    let inv = 1.0 / nc as f64;
    for a in 0..g.dim() {
        let mut buf: Vec<Complex64> = u.comp(a).iter().map(|&x| Complex64::new(x, 0.0)).collect();
        fft.forward(&mut buf);
        for (ek, z) in e.iter_mut().zip(&buf) {
            *ek += 0.5 * (z * inv).norm_sqr();
        }
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectrumResult {
    pub ratio: f64,
    pub levels: Vec<f64>,
    pub energies: Vec<f64>,
}

impl SpectrumResult {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "kappa,energy")?;
        for (k, e) in self.levels.iter().zip(&self.energies) {
            writeln!(w, "{k:.17e},{e:.17e}")?;
        }
        Ok(())
    }
}

/// `a^j, j = 0, 1, ...` while the bin `[a^j / a, a^j a]` still reaches a resolved wavenumber.
pub fn spectrum_levels(kmax: f64, a: f64) -> Vec<f64> {
    assert!(a > 1.0, "bin ratio must exceed 1");
    let mut out = Vec::new();
    let mut k = 1.0;
    while k / a <= kmax {
        out.push(k);
        k *= a;
    }
    out
}

/// Bin energies `sum_{k/a <= |k| <= ka} E_k` at the given levels.
pub fn binned_energies(u: &VectorField, levels: &[f64], a: f64) -> Vec<f64> {
    let g = *u.grid();
    let e = mode_energies(u);
    let norms: Vec<f64> = (0..g.ncell()).map(|l| mode_norm(&g, l)).collect();
    levels
        .iter()
        .map(|&lvl| {
            let (lo, hi) = (lvl / a, lvl * a);
            norms.iter().zip(&e).filter(|(k, _)| **k >= lo && **k <= hi).map(|(_, x)| x).sum()
        })
        .collect()
}

/// Largest wavenumber magnitude on the grid.
pub fn max_wavenumber(grid: &Grid) -> f64 {
    (0..grid.dim()).map(|a| ((grid.n(a) / 2) as f64).powi(2)).sum::<f64>().sqrt()
}

pub fn energy_spectrum(u: &VectorField, a: f64) -> SpectrumResult {
    let levels = spectrum_levels(max_wavenumber(u.grid()), a);
    let energies = binned_energies(u, &levels, a);
    SpectrumResult { ratio: a, levels, energies }
}

/// `sin(x) / x` with the removable singularity filled in.
#[inline]
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Volume-averaging transfer function `prod_a sinc(pi k_a w / 2)`.
pub fn transfer_va(k: &[f64], width: f64) -> f64 {
    k.iter().map(|&ka| sinc(PI * ka * width / 2.0)).product()
}

/// Face-averaging transfer function for component `alpha`: the same product without axis `alpha`.
pub fn transfer_fa(k: &[f64], width: f64, alpha: usize) -> f64 {
    k.iter().enumerate().map(|(b, &kb)| if b == alpha { 1.0 } else { sinc(PI * kb * width / 2.0) }).product()
}

/// Taylor-Green vortex `(u, v, p)` at `(x, y, t)`.
pub fn taylor_green(x: f64, y: f64, t: f64, viscosity: f64) -> (f64, f64, f64) {
    let f = (-2.0 * viscosity * t).exp();
    (-x.sin() * y.cos() * f, x.cos() * y.sin() * f, 0.25 * ((2.0 * x).cos() + (2.0 * y).cos()) * f * f)
}

/// Taylor-Green velocity at the staggered points of `grid` at time `t`.
pub fn taylor_green_field(grid: &Grid, t: f64, viscosity: f64) -> VectorField {
    VectorField::from_fn(grid, |a, x| {
        let (u, v, _) = taylor_green(x[0], x[1], t, viscosity);
        if a == 0 {
            u
        } else {
            v
        }
    })
}

/// Continuous convective commutator of the top-hat filter of width `delta`.
pub fn tg_continuous_commutator(delta: f64, x: f64, y: f64) -> (f64, f64) {
    let c = -0.5 * (sinc(delta / 2.0).powi(4) - sinc(delta));
    (c * (2.0 * x).sin(), c * (2.0 * y).sin())
}

/// Transfer function `G_{n,d}` of the `2n+1`-point top-hat on spacing `d`.
pub fn tophat_transfer(n: usize, d: f64) -> f64 {
    let ni = n as i64;
    (-ni..=ni).map(|i| (i as f64 * d).cos()).sum::<f64>() / (2 * n + 1) as f64
}

/// Coefficient `E` of the discrete convective commutator, with `Delta = 2 n d`.
pub fn tg_discrete_commutator_coeff(n: usize, d: f64) -> f64 {
    let delta = 2.0 * n as f64 * d;
    tophat_transfer(n, d).powi(4) * (sinc(delta) + sinc(2.0 * delta)) - tophat_transfer(n, 2.0 * d) * (sinc(d) + sinc(2.0 * d))
}

/// Outcome of the solver cross-check of the discrete commutator.
#[derive(Clone, Debug, Serialize)]
pub struct TgCommutatorCheck {
    pub cells: usize,
    pub n: usize,
    pub coeff: f64,
    pub max_err_x: f64,
    pub max_err_y: f64,
    /// Largest predicted value, for scale.
    pub max_predicted: f64,
}

impl TgCommutatorCheck {
    pub fn max_err(&self) -> f64 {
        self.max_err_x.max(self.max_err_y)
    }
}

/// Evaluates `Phi conv_d(u) - conv_Delta(Phi u)` for the sampled Taylor-Green
/// field with the solver's convection and top-hat, on `cells^2` points over
/// `[0, 2 pi]^2`, and compares with `-E/4 sin(2x)`, `-E/4 sin(2y)`.
///
/// The coarse grid has spacing `Delta = 2 n d`. Its `u` points are fine `u`
/// points of a fine grid shifted by `-d/2` in `y`, its `v` points fine `v`
/// points of a grid shifted by `-d/2` in `x`, so every filtered value is taken
/// from a fine lattice that contains the coarse point.
pub fn tg_solver_check(cells: usize, n: usize) -> Result<TgCommutatorCheck> {
    let two_pi = 2.0 * PI;
    let d = two_pi / cells as f64;
    let step = 2 * n.max(1);
    if n == 0 || cells % step != 0 {
        return Err(crate::Error::InvalidArgument(format!("cells {cells} must be a multiple of 2n = {}", 2 * n)));
    }
    let coarse = Grid::new(2, &[cells / step; 2], &[(0.0, two_pi); 2])?;
    let nc = coarse.ncell();

    let mut filtered_conv = vec![0.0; 2 * nc];
    let mut filtered_u = vec![0.0; 2 * nc];
    for comp in 0..2 {
        let mut ext = [(0.0, two_pi); 2];
        let other = 1 - comp;
        ext[other] = (-d / 2.0, two_pi - d / 2.0);
        let fine = Grid::new(2, &[cells; 2], &ext)?;
        let u = taylor_green_field(&fine, 0.0, 0.0);
        // convection() returns minus the discrete conv term
        let conv: Vec<f64> = convection(&u).comp(comp).iter().map(|x| -x).collect();
        let pc = tophat_values(&fine, &conv, n)?;
        let pu = tophat_values(&fine, u.comp(comp), n)?;
        for lin in 0..nc {
            let j = coarse.unravel(lin);
            // coarse point along comp: face (J+1) Delta = fine face index step (J+1) - 1
            // along the other axis: center (J + 1/2) Delta = shifted fine center index step J + n
            let mut fi = [0usize; 3];
            fi[comp] = step * (j[comp] + 1) - 1;
            fi[other] = step * j[other] + n;
            let l = fine.linear(fi);
            filtered_conv[comp * nc + lin] = pc[l];
            filtered_u[comp * nc + lin] = pu[l];
        }
    }
    let ubar = VectorField::from_vec(&coarse, filtered_u)?;
    let conv_coarse = convection(&ubar);
    let e = tg_discrete_commutator_coeff(n, d);
    let mut report = TgCommutatorCheck { cells, n, coeff: e, max_err_x: 0.0, max_err_y: 0.0, max_predicted: 0.0 };
    for comp in 0..2 {
        for lin in 0..nc {
            let x = coarse.velocity_point(comp, coarse.unravel(lin));
            let got = filtered_conv[comp * nc + lin] + conv_coarse.comp(comp)[lin];
            let want = -e * 0.25 * (2.0 * x[comp]).sin();
            let err = (got - want).abs();
            report.max_predicted = report.max_predicted.max(want.abs());
            if comp == 0 {
                report.max_err_x = report.max_err_x.max(err);
            } else {
                report.max_err_y = report.max_err_y.max(err);
            }
        }
    }
    Ok(report)
}
