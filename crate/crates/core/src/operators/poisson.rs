//! Pressure Poisson solver for uniform periodic grids.
//!
//! The scaled Laplacian `L = -Omega_p D Omega_u^{-1} D^T Omega_p` is circulant,
//! so it is diagonal in the discrete Fourier basis with eigenvalues
//! `-|Omega| * sum_a (2 sin(pi k_a / N_a) / h_a)^2`. The zero mode carries the
//! mean-pressure constraint and is set to zero.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::{Grid, ScalarField};

/// Relative mean of a right-hand side above which the system is reported as
/// inconsistent.
pub const MEAN_TOLERANCE: f64 = 1e-10;

pub(crate) struct FftNd {
    grid: Grid,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub(crate) fn new(grid: &Grid) -> Self {
        let mut planner = FftPlanner::new();
        let d = grid.dim();
        FftNd {
            grid: *grid,
            forward: (0..d).map(|a| planner.plan_fft_forward(grid.n(a))).collect(),
            inverse: (0..d).map(|a| planner.plan_fft_inverse(grid.n(a))).collect(),
        }
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let g = &self.grid;
        for a in 0..g.dim() {
            let plan = if inverse { &self.inverse[a] } else { &self.forward[a] };
            let n = g.n(a);
            let stride = g.stride(a);
            if stride == 1 {
                for line in data.chunks_exact_mut(n) {
                    plan.process(line);
                }
                continue;
            }
            let block = n * stride;
            let mut line = vec![Complex64::new(0.0, 0.0); n];
            for chunk in data.chunks_exact_mut(block) {
                for off in 0..stride {
                    for i in 0..n {
                        line[i] = chunk[off + i * stride];
                    }
                    plan.process(&mut line);
                    for i in 0..n {
                        chunk[off + i * stride] = line[i];
                    }
                }
            }
        }
    }

    /// Unnormalized forward transform.
    pub(crate) fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, false);
    }

    /// Inverse transform including the `1/N` factor.
    pub(crate) fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, true);
        let s = 1.0 / data.len() as f64;
        for v in data.iter_mut() {
            *v *= s;
        }
    }
}

/// FFT-diagonalized solver for `L p = r` on one grid.
pub struct SpectralPoisson {
    grid: Grid,
    fft: FftNd,
    eigenvalues: Vec<f64>,
}

/// Result of a Poisson solve; `rhs_mean` is the mean of the input that had
/// to be discarded to make the system solvable.
#[derive(Clone, Debug)]
pub struct PoissonSolution {
    pub pressure: ScalarField,
    pub rhs_mean: f64,
    pub rhs_scale: f64,
}

impl PoissonSolution {
    /// Whether the input was in the range of `L` up to `MEAN_TOLERANCE`.
    pub fn is_consistent(&self) -> bool {
        self.rhs_mean.abs() <= MEAN_TOLERANCE * self.rhs_scale.max(f64::MIN_POSITIVE)
    }
}

impl SpectralPoisson {
    pub fn new(grid: &Grid) -> Self {
        let vol = grid.cell_volume();
        let mut eigenvalues = vec![0.0; grid.ncell()];
        for (l, ev) in eigenvalues.iter_mut().enumerate() {
            let idx = grid.unravel(l);
            let mut s = 0.0;
            for a in 0..grid.dim() {
                let w = 2.0 * (std::f64::consts::PI * idx[a] as f64 / grid.n(a) as f64).sin() / grid.spacing(a);
                s += w * w;
            }
            *ev = -vol * s;
        }
        SpectralPoisson { grid: *grid, fft: FftNd::new(grid), eigenvalues }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Eigenvalue of `L` for the Fourier mode with flat index `l`.
    pub fn eigenvalue(&self, l: usize) -> f64 {
        self.eigenvalues[l]
    }

    /// Mean-zero solution of the projected system.
    pub fn solve_values(&self, rhs: &[f64]) -> (Vec<f64>, f64) {
        let mut buf: Vec<Complex64> = rhs.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.forward(&mut buf);
        let mean = buf[0].re / rhs.len() as f64;
        buf[0] = Complex64::new(0.0, 0.0);
        for (v, &ev) in buf.iter_mut().zip(&self.eigenvalues).skip(1) {
            *v /= ev;
        }
        self.fft.inverse(&mut buf);
        (buf.iter().map(|c| c.re).collect(), mean)
    }

    pub fn solve(&self, rhs: &ScalarField) -> PoissonSolution {
        self.solve_scaled(rhs, rhs.max_abs())
    }

    /// As [`solve`](Self::solve), with the consistency check taken relative to
    /// `scale`, the magnitude of the terms the right-hand side was built from.
    /// A difference of nearly equal terms has round-off far above its own size.
    pub fn solve_scaled(&self, rhs: &ScalarField, scale: f64) -> PoissonSolution {
        debug_assert!(rhs.grid().same_as(&self.grid));
        let (p, mean) = self.solve_values(rhs.data());
        let sol = PoissonSolution {
            pressure: ScalarField::from_vec(&self.grid, p).expect("solver output has grid size"),
            rhs_mean: mean,
            rhs_scale: scale,
        };
        if !sol.is_consistent() {
            log::warn!("Poisson right-hand side has mean {mean:e} (scale {scale:e}); solving the projected system");
        }
        sol
    }
}

type Key = ([usize; 3], [u64; 3]);

fn key(grid: &Grid) -> Key {
    let mut lens = [0u64; 3];
    for (a, l) in lens.iter_mut().enumerate().take(grid.dim()) {
        *l = grid.length(a).to_bits();
    }
    (grid.shape3(), lens)
}

thread_local! {
    static SOLVERS: RefCell<HashMap<Key, Rc<SpectralPoisson>>> = RefCell::new(HashMap::new());
}

/// Per-thread cached solver for `grid`.
pub fn solver_for(grid: &Grid) -> Rc<SpectralPoisson> {
    SOLVERS.with(|s| {
        s.borrow_mut().entry(key(grid)).or_insert_with(|| Rc::new(SpectralPoisson::new(grid))).clone()
    })
}

/// Solves `L p = rhs` with zero mean pressure.
pub fn poisson_solve(rhs: &ScalarField) -> PoissonSolution {
    solver_for(rhs.grid()).solve(rhs)
}
