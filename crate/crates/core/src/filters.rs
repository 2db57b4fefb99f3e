//! Fine-to-coarse discrete filters on staggered grids.
//!
//! Coarse cell `J` along an axis with compression `m` covers fine cells
//! `mJ .. mJ+m-1`, so the upper face of coarse cell `J` coincides with the
//! upper face of fine cell `m(J+1)-1`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Real, ScalarField, VectorField};
use crate::operators::{divergence, FlowParams, Rhs};

/// Fine/coarse grid pair with integer compression per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoarseningMap {
    fine: Grid,
    coarse: Grid,
    m: [usize; 3],
}

impl CoarseningMap {
    /// Coarse grid with `coarse_n` cells per axis on the same box as `fine`.
    pub fn new(fine: &Grid, coarse_n: &[usize]) -> Result<Self> {
        let coarse = Grid::new(fine.dim(), coarse_n, &fine.extents())?;
        Self::from_grids(fine, &coarse)
    }

    /// Same coarse size along every axis.
    pub fn uniform(fine: &Grid, coarse_n: usize) -> Result<Self> {
        Self::new(fine, &vec![coarse_n; fine.dim()])
    }

    pub fn from_grids(fine: &Grid, coarse: &Grid) -> Result<Self> {
        if fine.dim() != coarse.dim() || fine.extents() != coarse.extents() {
            return Err(Error::GridMismatch("fine and coarse grids must share dimension and box".into()));
        }
        let mut m = [1; 3];
        for a in 0..fine.dim() {
            let (nf, nc) = (fine.n(a), coarse.n(a));
            if nf % nc != 0 {
                return Err(Error::InvalidArgument(format!(
                    "axis {a}: fine size {nf} is not an integer multiple of coarse size {nc}"
                )));
            }
            m[a] = nf / nc;
        }
        Ok(CoarseningMap { fine: *fine, coarse: *coarse, m })
    }

    pub fn fine(&self) -> &Grid {
        &self.fine
    }

    pub fn coarse(&self) -> &Grid {
        &self.coarse
    }

    pub fn factor(&self, axis: usize) -> usize {
        self.m[axis]
    }

    /// Filter width, equal to the coarse spacing.
    pub fn width(&self, axis: usize) -> f64 {
        self.coarse.spacing(axis)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// Face averaging.
    Fa,
    /// Volume averaging.
    Va,
}

impl fmt::Display for FilterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FilterKind::Fa => "fa",
            FilterKind::Va => "va",
        })
    }
}

impl std::str::FromStr for FilterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fa" => Ok(FilterKind::Fa),
            "va" => Ok(FilterKind::Va),
            _ => Err(Error::InvalidArgument(format!("unknown filter kind '{s}'"))),
        }
    }
}

/// Normal-direction stencil of the volume-averaging filter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaStencil {
    /// Centered on the coarse face: `m+1` faces with half end weights for
    /// even `m`, `m` faces with equal weights for odd `m`.
    #[default]
    Trapezoidal,
    /// The `m` fine faces inside the coarse cell, equal weights.
    UniformOffset,
}

impl VaStencil {
    /// `(offset from the coarse face in fine cells, weight)` pairs, summing to 1.
    pub fn weights(self, m: usize) -> Vec<(isize, f64)> {
        let mi = m as isize;
        match self {
            VaStencil::UniformOffset => (0..mi).map(|o| (o - mi + 1, 1.0 / m as f64)).collect(),
            VaStencil::Trapezoidal if m % 2 == 0 => {
                let h = mi / 2;
                (-h..=h).map(|o| (o, if o.abs() == h { 0.5 } else { 1.0 } / m as f64)).collect()
            }
            VaStencil::Trapezoidal => {
                let h = (mi - 1) / 2;
                (-h..=h).map(|o| (o, 1.0 / m as f64)).collect()
            }
        }
    }
}

/// Tangential block average combined with the given normal stencil.
fn staggered_filter<T: Real>(
    u: &VectorField<T>,
    map: &CoarseningMap,
    normal: impl Fn(usize) -> Vec<(isize, f64)>,
) -> Result<VectorField<T>> {
    map.fine.check_same(u.grid())?;
    let (fine, coarse) = (&map.fine, &map.coarse);
    let d = fine.dim();
    let nc = coarse.ncell();
    let mut out = vec![T::zero(); d * nc];
    for a in 0..d {
        let ua = u.comp(a);
        let w: Vec<(isize, T)> = normal(map.m[a]).into_iter().map(|(o, x)| (o, T::cast_from(x))).collect();
        let mut tang = map.m;
        tang[a] = 1;
        let ntang = tang[0] * tang[1] * tang[2];
        let scale = T::cast_from(1.0 / ntang as f64);
        for (lin, o) in out[a * nc..(a + 1) * nc].iter_mut().enumerate() {
            let jc = coarse.unravel(lin);
            let mut base = [0isize; 3];
            for b in 0..3 {
                base[b] = if b == a { (map.m[b] * (jc[b] + 1)) as isize - 1 } else { (map.m[b] * jc[b]) as isize };
            }
            let mut s = T::zero();
            for t2 in 0..tang[2] {
                for t1 in 0..tang[1] {
                    for t0 in 0..tang[0] {
                        let mut idx = [base[0] + t0 as isize, base[1] + t1 as isize, base[2] + t2 as isize];
                        let na = idx[a];
                        for &(off, wt) in &w {
                            idx[a] = na + off;
                            s = s + wt * ua[fine.linear_wrapped(idx)];
                        }
                    }
                }
            }
            *o = s * scale;
        }
    }
    VectorField::<T>::from_vec(coarse, out)
}

/// Average of the fine velocities lying on each coarse face.
pub fn face_average<T: Real>(u: &VectorField<T>, map: &CoarseningMap) -> Result<VectorField<T>> {
    staggered_filter(u, map, |_| vec![(0, 1.0)])
}

/// Top-hat volume average of width equal to the coarse spacing, centered on each coarse face.
pub fn volume_average<T: Real>(u: &VectorField<T>, map: &CoarseningMap) -> Result<VectorField<T>> {
    volume_average_with(u, map, VaStencil::Trapezoidal)
}

pub fn volume_average_with<T: Real>(u: &VectorField<T>, map: &CoarseningMap, stencil: VaStencil) -> Result<VectorField<T>> {
    staggered_filter(u, map, |m| stencil.weights(m))
}

pub fn apply_filter<T: Real>(u: &VectorField<T>, map: &CoarseningMap, kind: FilterKind) -> Result<VectorField<T>> {
    match kind {
        FilterKind::Fa => face_average(u, map),
        FilterKind::Va => volume_average(u, map),
    }
}

/// Mean of the fine cell values inside each coarse cell.
pub fn pressure_filter(p: &ScalarField, map: &CoarseningMap) -> Result<ScalarField> {
    map.fine.check_same(p.grid())?;
    let (fine, coarse) = (&map.fine, &map.coarse);
    let m = map.m;
    let scale = 1.0 / (m[0] * m[1] * m[2]) as f64;
    let mut out = vec![0.0; coarse.ncell()];
    let pd = p.data();
    for (lin, o) in out.iter_mut().enumerate() {
        let j = coarse.unravel(lin);
        let mut s = 0.0;
        for t2 in 0..m[2] {
            for t1 in 0..m[1] {
                let row = fine.linear([m[0] * j[0], m[1] * j[1] + t1, m[2] * j[2] + t2]);
                s += pd[row..row + m[0]].iter().sum::<f64>();
            }
        }
        *o = s * scale;
    }
    ScalarField::from_vec(coarse, out)
}

/// `c(u) = Phi P F(u) - Pbar Fbar(Phi u)`.
pub fn commutator(u: &VectorField, map: &CoarseningMap, kind: FilterKind, params: &FlowParams) -> Result<VectorField> {
    let fine_rhs = Rhs::new(&map.fine, *params);
    let coarse_rhs = Rhs::new(&map.coarse, *params);
    let pf = fine_rhs.eval_projected(u);
    Ok(filtered_pair(u, &pf, map, kind, &coarse_rhs)?.1)
}

/// `(Phi u, c(u))` from a precomputed fine `P F(u)`, so one fine evaluation
/// serves several coarse grids and filters.
pub fn filtered_pair(
    u: &VectorField,
    pf_fine: &VectorField,
    map: &CoarseningMap,
    kind: FilterKind,
    coarse_rhs: &Rhs,
) -> Result<(VectorField, VectorField)> {
    let ubar = apply_filter(u, map, kind)?;
    let mut c = apply_filter(pf_fine, map, kind)?;
    c.add_assign_scaled(-1.0, &coarse_rhs.eval_projected(&ubar));
    Ok((ubar, c))
}

/// `c_D = Dbar Phi u - Psi D u`, identically zero for face averaging.
pub fn div_commutator_cd(u: &VectorField, map: &CoarseningMap, kind: FilterKind) -> Result<ScalarField> {
    let a = divergence(&apply_filter(u, map, kind)?);
    let b = pressure_filter(&divergence(u), map)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    ScalarField::from_vec(&map.coarse, data)
}

/// `(2n+1)^d` moving average on the same grid, periodic.
pub fn tophat_values(grid: &Grid, x: &[f64], n: usize) -> Result<Vec<f64>> {
    if x.len() != grid.ncell() {
        return Err(Error::Shape(format!("expected {} values, got {}", grid.ncell(), x.len())));
    }
    for a in 0..grid.dim() {
        if 2 * n + 1 > grid.n(a) {
            return Err(Error::InvalidArgument(format!("top-hat half-width {n} too large for axis {a}")));
        }
    }
    let mut cur = x.to_vec();
    if n == 0 {
        return Ok(cur);
    }
    let w = 1.0 / (2 * n + 1) as f64;
    let ni = n as isize;
    for a in 0..grid.dim() {
        let mut next = vec![0.0; cur.len()];
        for o in -ni..=ni {
            let s = crate::grid::roll(grid, &cur, a, o);
            for (y, v) in next.iter_mut().zip(&s) {
                *y += v;
            }
        }
        next.iter_mut().for_each(|y| *y *= w);
        cur = next;
    }
    Ok(cur)
}

pub fn tophat_same_grid(u: &VectorField, n: usize) -> Result<VectorField> {
    let g = *u.grid();
    let mut data = Vec::with_capacity(u.data().len());
    for a in 0..g.dim() {
        data.extend(tophat_values(&g, u.comp(a), n)?);
    }
    VectorField::from_vec(&g, data)
}

pub fn tophat_scalar(p: &ScalarField, n: usize) -> Result<ScalarField> {
    ScalarField::from_vec(p.grid(), tophat_values(p.grid(), p.data(), n)?)
}
