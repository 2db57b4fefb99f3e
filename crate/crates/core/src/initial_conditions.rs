//! Random divergence-free velocity fields with a prescribed energy spectrum.
//!
//! Random numbers come from xoshiro256++ seeded through SplitMix64
//! (`seed_from_u64`). Stream `a < d` (the base generator jumped `a` times)
//! supplies the phases `xi^a_k`; stream `d` supplies the directions `e_k`.
//! Phases are drawn for every `k` with all components in `0..=N/2`, directions
//! for every half-space representative `k`, both in layout order (axis 1
//! fastest). A wavenumber is a representative when its last nonzero
//! component is positive.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::analysis::mode_vector;
use crate::error::{Error, Result};
use crate::grid::{Grid, VectorField};
use crate::operators::{project, FftNd};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSpec {
    /// Peak wavenumber in modes per box length.
    pub peak_wavenumber: f64,
    pub seed: u64,
}

/// `(8 pi / (3 kp^5)) k^4 exp(-2 pi (k / kp)^2)`.
pub fn spectrum_profile(kappa: f64, kp: f64) -> f64 {
    8.0 * PI / (3.0 * kp.powi(5)) * kappa.powi(4) * (-2.0 * PI * (kappa / kp).powi(2)).exp()
}

/// Everything produced on the way to the final field.
#[derive(Clone, Debug)]
pub struct SpectralSample {
    /// Staggered-projected field.
    pub field: VectorField,
    /// Inverse transform placed at the canonical positions, before projection.
    pub unprojected: VectorField,
    /// Spectral coefficients per component in layout order, forward transform scaled by `1/N`.
    pub coefficients: Vec<Vec<Complex64>>,
    /// Largest imaginary part left by the inverse transform.
    pub imag_residue: f64,
}

fn stream(seed: u64, k: usize) -> Xoshiro256PlusPlus {
    let mut r = Xoshiro256PlusPlus::seed_from_u64(seed);
    for _ in 0..k {
        r.jump();
    }
    r
}

fn is_representative(k: [i64; 3]) -> bool {
    k.iter().rev().find(|&&c| c != 0).is_some_and(|&c| c > 0)
}

fn unit_vector(d: usize, r: &mut Xoshiro256PlusPlus) -> [f64; 3] {
    if d == 2 {
        let t = r.random_range(0.0..2.0 * PI);
        [t.cos(), t.sin(), 0.0]
    } else {
        let t = r.random_range(0.0..PI);
        let p = r.random_range(0.0..2.0 * PI);
        [t.sin() * p.cos(), t.sin() * p.sin(), t.cos()]
    }
}

pub fn spectral_sample(grid: &Grid, spec: &SpectrumSpec) -> Result<SpectralSample> {
    let d = grid.dim();
    let kp = spec.peak_wavenumber;
    let nyq = (0..d).map(|a| grid.n(a) / 2).min().unwrap() as f64;
    if !(kp > 0.0 && kp <= nyq) {
        return Err(Error::InvalidArgument(format!("peak wavenumber must lie in (0, {nyq}], got {kp}")));
    }
    let nc = grid.ncell();
    let half = [grid.n(0) / 2 + 1, if d > 1 { grid.n(1) / 2 + 1 } else { 1 }, if d > 2 { grid.n(2) / 2 + 1 } else { 1 }];
    let nhalf = half[0] * half[1] * half[2];
    let half_lin = |k: [i64; 3]| -> usize {
        let a = k.map(|c| c.unsigned_abs() as usize);
        a[0] + half[0] * (a[1] + half[1] * a[2])
    };

    let xi: Vec<Vec<f64>> = (0..d)
        .map(|a| {
            let mut r = stream(spec.seed, a);
            (0..nhalf).map(|_| r.random_range(0.0..1.0)).collect()
        })
        .collect();

    let mut dir_rng = stream(spec.seed, d);
    let mut dirs: Vec<Option<[f64; 3]>> = vec![None; nc];
    for (lin, slot) in dirs.iter_mut().enumerate() {
        if is_representative(mode_vector(grid, lin)) {
            *slot = Some(unit_vector(d, &mut dir_rng));
        }
    }

    let mut coefficients = vec![vec![Complex64::new(0.0, 0.0); nc]; d];
    for lin in 0..nc {
        let k = mode_vector(grid, lin);
        let nyquist = (0..d).any(|a| grid.n(a) % 2 == 0 && k[a].unsigned_abs() as usize == grid.n(a) / 2);
        if nyquist || k == [0; 3] {
            continue;
        }
        let e = if is_representative(k) {
            dirs[lin].unwrap()
        } else {
            let mut m = [0isize; 3];
            for a in 0..3 {
                m[a] = -k[a] as isize;
            }
            dirs[grid.linear_wrapped(m)].unwrap()
        };
        let kk: f64 = k.iter().map(|&c| (c * c) as f64).sum();
        let ke: f64 = (0..d).map(|a| k[a] as f64 * e[a]).sum();
        let mut pe = [0.0; 3];
        for a in 0..d {
            pe[a] = e[a] - k[a] as f64 * ke / kk;
        }
        let npe = pe.iter().map(|x| x * x).sum::<f64>().sqrt();
        if npe < 1e-14 {
            continue;
        }
        let tau: f64 = (0..d).map(|a| k[a].signum() as f64 * xi[a][half_lin(k)]).sum();
        let amp = (2.0 * spectrum_profile(kk.sqrt(), kp)).sqrt();
        let ak = Complex64::from_polar(amp, 2.0 * PI * tau);
        for a in 0..d {
            coefficients[a][lin] = ak * (pe[a] / npe);
        }
    }

    let fft = FftNd::new(grid);
    let mut data = Vec::with_capacity(d * nc);
    let mut imag_residue: f64 = 0.0;
    for c in &coefficients {
        let mut buf = c.clone();
        fft.inverse(&mut buf);
        for z in &buf {
            imag_residue = imag_residue.max((z.im * nc as f64).abs());
            data.push(z.re * nc as f64);
        }
    }
    let unprojected = VectorField::from_vec(grid, data)?;
    let field = project(&unprojected);
    Ok(SpectralSample { field, unprojected, coefficients, imag_residue })
}

/// `u = P DFT^{-1}(u_hat)`.
pub fn random_spectral_field(grid: &Grid, spec: &SpectrumSpec) -> Result<VectorField> {
    Ok(spectral_sample(grid, spec)?.field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{energy_spectrum, mode_energies, GOLDEN};
    use crate::grid::Weighting;
    use crate::operators::relative_divergence;

    #[test]
    fn profile_examples() {
        assert_eq!(spectrum_profile(0.0, 5.0), 0.0);
        let kp = 7.0;
        let want = 8.0 * PI / (3.0 * kp) * (-2.0 * PI).exp();
        assert!((spectrum_profile(kp, kp) - want).abs() < 1e-15 * want.max(1.0));
        let ratio = spectrum_profile(2.0 * kp, kp) / spectrum_profile(kp, kp);
        assert!((ratio / (16.0 * (-6.0 * PI).exp()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn field_is_real_and_divergence_free() {
        for (d, n) in [(2, 32), (3, 12)] {
            let g = Grid::unit(d, n).unwrap();
            for seed in 0..3 {
                let s = spectral_sample(&g, &SpectrumSpec { peak_wavenumber: 4.0, seed }).unwrap();
                let norm = s.field.norm(Weighting::None);
                assert!(s.imag_residue <= 1e-12 * norm, "{}", s.imag_residue / norm);
                assert!(relative_divergence(&s.field) < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let g = Grid::unit(2, 16).unwrap();
        let spec = SpectrumSpec { peak_wavenumber: 3.0, seed: 42 };
        assert_eq!(random_spectral_field(&g, &spec).unwrap(), random_spectral_field(&g, &spec).unwrap());
        let other = random_spectral_field(&g, &SpectrumSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(random_spectral_field(&g, &spec).unwrap(), other);
    }

    #[test]
    fn rejects_peak_beyond_nyquist() {
        let g = Grid::unit(2, 16).unwrap();
        assert!(random_spectral_field(&g, &SpectrumSpec { peak_wavenumber: 9.0, seed: 0 }).is_err());
        assert!(random_spectral_field(&g, &SpectrumSpec { peak_wavenumber: 0.0, seed: 0 }).is_err());
    }

    #[test]
    fn spectral_divergence_and_zero_mean() {
        let g = Grid::unit(3, 10).unwrap();
        let s = spectral_sample(&g, &SpectrumSpec { peak_wavenumber: 3.0, seed: 9 }).unwrap();
        for lin in 0..g.ncell() {
            let k = mode_vector(&g, lin);
            let div: Complex64 = (0..3).map(|a| s.coefficients[a][lin] * k[a] as f64).sum();
            let mag: f64 = (0..3).map(|a| s.coefficients[a][lin].norm_sqr()).sum::<f64>().sqrt();
            assert!(div.norm() * 2.0 * PI <= 1e-10 * mag.max(1e-300) || mag == 0.0);
        }
        assert!((0..3).all(|a| s.coefficients[a][0].norm() == 0.0));
    }

    #[test]
    fn binned_spectrum_matches_profile() {
        let g = Grid::unit(2, 64).unwrap();
        let kp = 10.0;
        let s = spectral_sample(&g, &SpectrumSpec { peak_wavenumber: kp, seed: 1 }).unwrap();
        let spec = energy_spectrum(&s.unprojected, GOLDEN);
        for (lvl, e) in spec.levels.iter().zip(&spec.energies) {
            if lvl * GOLDEN >= 31.0 {
                continue;
            }
            let mut want = 0.0;
            for lin in 0..g.ncell() {
                let k = mode_vector(&g, lin);
                let km = ((k[0] * k[0] + k[1] * k[1]) as f64).sqrt();
                if km >= lvl / GOLDEN && km <= lvl * GOLDEN {
                    want += spectrum_profile(km, kp);
                }
            }
            assert!((e - want).abs() <= 0.05 * want, "level {lvl}: {e} vs {want}");
        }
        // energy lost by the staggered projection
        let e0: f64 = mode_energies(&s.unprojected).iter().sum();
        let e1: f64 = mode_energies(&s.field).iter().sum();
        assert!((e0 - e1) / e0 <= 0.02, "{}", (e0 - e1) / e0);
    }
}
