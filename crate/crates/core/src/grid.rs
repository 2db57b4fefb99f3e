//! Uniform periodic staggered grids and the fields that live on them.
//!
//! Storage follows one canonical layout everywhere: a flat array per
//! component, axis 1 varying fastest, i.e. `lin = i0 + n0 * (i1 + n1 * i2)`.
//! Pressure-like scalars sit at cell centers `x_alpha = lo + (i + 1/2) h`.
//! Velocity component `alpha` with index `i` sits on the face between cell
//! `i` and cell `i + e_alpha`, so its `alpha` coordinate is `lo + (i + 1) h`.

use std::fmt;

use crate::error::{Error, Result};

/// Floating point storage type of a field.
pub trait Real:
    num_traits::Float + Copy + Default + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    const BITS: u8;
    fn cast_from(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const BITS: u8 = 64;
    #[inline]
    fn cast_from(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const BITS: u8 = 32;
    #[inline]
    fn cast_from(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Scalar precision mode: 64-bit for validation, 32-bit for speed/storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    Single,
    #[serde(rename = "64")]
    Double,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            32 => Ok(Precision::Single),
            64 => Ok(Precision::Double),
            other => Err(Error::InvalidArgument(format!("unsupported precision {other}"))),
        }
    }

    /// Rounds a value to what this precision can store.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::Single => x as f32 as f64,
            Precision::Double => x,
        }
    }
}

/// Uniform periodic Cartesian grid in 2 or 3 dimensions.
#[derive(Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    n: [usize; 3],
    lo: [f64; 3],
    hi: [f64; 3],
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Grid{}D{:?}", self.dim, &self.n[..self.dim])
    }
}

impl Grid {
    /// Builds a grid from per-axis cell counts and `[lo, hi]` extents.
    pub fn new(dim: usize, n: &[usize], extents: &[(f64, f64)]) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::InvalidArgument(format!("dimension must be 2 or 3, got {dim}")));
        }
        if n.len() != dim || extents.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "expected {dim} cell counts and extents, got {} and {}",
                n.len(),
                extents.len()
            )));
        }
        let mut g = Grid { dim, n: [1; 3], lo: [0.0; 3], hi: [1.0; 3] };
        for a in 0..dim {
            let (lo, hi) = extents[a];
            if n[a] < 2 {
                return Err(Error::InvalidArgument(format!("axis {a}: need at least 2 cells, got {}", n[a])));
            }
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidArgument(format!("axis {a}: invalid extent [{lo}, {hi}]")));
            }
            g.n[a] = n[a];
            g.lo[a] = lo;
            g.hi[a] = hi;
        }
        Ok(g)
    }

    /// `n^dim` cells on the box `[lo, hi]^dim`.
    pub fn cube(dim: usize, n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(dim, &vec![n; dim], &vec![(lo, hi); dim])
    }

    /// `n^dim` cells on the unit box.
    pub fn unit(dim: usize, n: usize) -> Result<Self> {
        Self::cube(dim, n, 0.0, 1.0)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn n(&self, axis: usize) -> usize {
        self.n[axis]
    }

    pub fn shape(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    /// Padded to 3 entries with trailing ones.
    #[inline]
    pub fn shape3(&self) -> [usize; 3] {
        self.n
    }

    #[inline]
    pub fn lo(&self, axis: usize) -> f64 {
        self.lo[axis]
    }

    #[inline]
    pub fn length(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn extents(&self) -> Vec<(f64, f64)> {
        (0..self.dim).map(|a| (self.lo[a], self.hi[a])).collect()
    }

    #[inline]
    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / self.n[axis] as f64
    }

    pub fn spacings(&self) -> Vec<f64> {
        (0..self.dim).map(|a| self.spacing(a)).collect()
    }

    pub fn min_spacing(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).fold(f64::INFINITY, f64::min)
    }

    #[inline]
    pub fn ncell(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|a| self.spacing(a)).product()
    }

    pub fn face_area(&self, axis: usize) -> f64 {
        self.cell_volume() / self.spacing(axis)
    }

    /// Stride of `axis` in the flat layout.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.n[0],
            _ => self.n[0] * self.n[1],
        }
    }

    #[inline]
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.n[0] * (idx[1] + self.n[1] * idx[2])
    }

    /// Linear index of a possibly out-of-range multi-index, wrapped periodically.
    #[inline]
    pub fn linear_wrapped(&self, idx: [isize; 3]) -> usize {
        let w = |i: isize, n: usize| i.rem_euclid(n as isize) as usize;
        self.linear([w(idx[0], self.n[0]), w(idx[1], self.n[1]), w(idx[2], self.n[2])])
    }

    #[inline]
    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let i0 = lin % self.n[0];
        let r = lin / self.n[0];
        [i0, r % self.n[1], r / self.n[1]]
    }

    /// Cell center coordinate along `axis` for index `i`.
    #[inline]
    pub fn center(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 0.5) * self.spacing(axis)
    }

    /// Coordinate of the upper face of cell `i` along `axis`.
    #[inline]
    pub fn face(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (i as f64 + 1.0) * self.spacing(axis)
    }

    /// Position of the velocity component `comp` with multi-index `idx`.
    pub fn velocity_point(&self, comp: usize, idx: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = if a == comp { self.face(a, idx[a]) } else { self.center(a, idx[a]) };
        }
        x
    }

    pub fn center_point(&self, idx: [usize; 3]) -> [f64; 3] {
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.center(a, idx[a]);
        }
        x
    }

    /// True when both grids have the same dimension, shape and extents.
    pub fn same_as(&self, other: &Grid) -> bool {
        self == other
    }

    pub(crate) fn check_same(&self, other: &Grid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!("{self:?} vs {other:?}")))
        }
    }
}

/// Periodic shift of one flat component: `out[I] = x[I + offset * e_axis]`.
pub fn roll(grid: &Grid, x: &[f64], axis: usize, offset: isize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    roll_into(grid, x, axis, offset, &mut out);
    out
}

pub fn roll_into<T: Copy>(grid: &Grid, x: &[T], axis: usize, offset: isize, out: &mut [T]) {
    let n = grid.n(axis);
    let inner = grid.stride(axis);
    let block = n * inner;
    let off = offset.rem_euclid(n as isize) as usize;
    debug_assert_eq!(x.len(), out.len());
    for (src, dst) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        // dst rows [0, n - off) come from src rows [off, n), the rest wraps
        let split = (n - off) * inner;
        dst[..split].copy_from_slice(&src[off * inner..]);
        dst[split..].copy_from_slice(&src[..off * inner]);
    }
}

/// Norm weighting: plain Euclidean or multiplied by the cell volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weighting {
    None,
    Volume,
}

/// Cell-centered scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<T: Real = f64> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Real> ScalarField<T> {
    pub fn zeros(grid: &Grid) -> Self {
        ScalarField { grid: *grid, data: vec![T::zero(); grid.ncell()] }
    }

    pub fn from_vec(grid: &Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.ncell() {
            return Err(Error::Shape(format!("scalar field needs {} values, got {}", grid.ncell(), data.len())));
        }
        Ok(ScalarField { grid: *grid, data })
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let data = (0..grid.ncell()).map(|l| T::cast_from(f(grid.center_point(grid.unravel(l))))).collect();
        ScalarField { grid: *grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn norm(&self, w: Weighting) -> f64 {
        weighted_norm(&self.grid, &self.data, w)
    }

    pub fn cast<U: Real>(&self) -> ScalarField<U> {
        ScalarField { grid: self.grid, data: self.data.iter().map(|x| U::cast_from(x.as_f64())).collect() }
    }
}

/// Staggered velocity-like field: component `alpha` on the `alpha` faces.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T: Real = f64> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Real> VectorField<T> {
    pub fn zeros(grid: &Grid) -> Self {
        VectorField { grid: *grid, data: vec![T::zero(); grid.dim() * grid.ncell()] }
    }

    /// Components concatenated in order, each in the canonical layout.
    pub fn from_vec(grid: &Grid, data: Vec<T>) -> Result<Self> {
        let want = grid.dim() * grid.ncell();
        if data.len() != want {
            return Err(Error::Shape(format!("vector field needs {want} values, got {}", data.len())));
        }
        Ok(VectorField { grid: *grid, data })
    }

    /// Samples `f(component, position)` at each component's own face points.
    pub fn from_fn(grid: &Grid, f: impl Fn(usize, [f64; 3]) -> f64) -> Self {
        let nc = grid.ncell();
        let mut data = Vec::with_capacity(grid.dim() * nc);
        for a in 0..grid.dim() {
            for l in 0..nc {
                data.push(T::cast_from(f(a, grid.velocity_point(a, grid.unravel(l)))));
            }
        }
        VectorField { grid: *grid, data }
    }

    #[inline]
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    #[inline]
    pub fn comp(&self, a: usize) -> &[T] {
        let nc = self.grid.ncell();
        &self.data[a * nc..(a + 1) * nc]
    }

    #[inline]
    pub fn comp_mut(&mut self, a: usize) -> &mut [T] {
        let nc = self.grid.ncell();
        &mut self.data[a * nc..(a + 1) * nc]
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn max_abs_comp(&self, a: usize) -> f64 {
        self.comp(a).iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn norm(&self, w: Weighting) -> f64 {
        weighted_norm(&self.grid, &self.data, w)
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField { grid: self.grid, data: self.data.iter().map(|x| U::cast_from(x.as_f64())).collect() }
    }
}

impl VectorField<f64> {
    pub fn scale(&self, s: f64) -> Self {
        VectorField { grid: self.grid, data: self.data.iter().map(|x| s * x).collect() }
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        debug_assert!(self.grid.same_as(&other.grid));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + s * b).collect();
        VectorField { grid: self.grid, data }
    }

    pub fn add_assign_scaled(&mut self, s: f64, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &Self) -> Self {
        self.axpy(1.0, other)
    }

    /// Rounds every entry to the given precision.
    pub fn rounded(&self, p: Precision) -> Self {
        VectorField { grid: self.grid, data: self.data.iter().map(|&x| p.round(x)).collect() }
    }
}

fn weighted_norm<T: Real>(grid: &Grid, data: &[T], w: Weighting) -> f64 {
    let ss = sum_compensated(data.iter().map(|x| {
        let v = x.as_f64();
        v * v
    }));
    match w {
        Weighting::None => ss.sqrt(),
        Weighting::Volume => (ss * grid.cell_volume()).sqrt(),
    }
}

/// Neumaier summation; losses are differenced at tiny parameter offsets, so
/// plain accumulation error would swamp them.
pub fn sum_compensated(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0;
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

/// Euclidean norm of a flat array.
pub fn norm2(x: &[f64]) -> f64 {
    sq_norm(x).sqrt()
}

/// Squared Euclidean norm.
pub fn sq_norm(x: &[f64]) -> f64 {
    sum_compensated(x.iter().map(|v| v * v))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    sum_compensated(a.iter().zip(b).map(|(x, y)| x * y))
}

/// Field-like values that can enter an inner product.
pub trait FieldData {
    fn grid(&self) -> &Grid;
    fn values(&self) -> &[f64];
    fn kind(&self) -> &'static str;
}

impl FieldData for ScalarField<f64> {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn kind(&self) -> &'static str {
        "scalar"
    }
}

impl FieldData for VectorField<f64> {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
    fn kind(&self) -> &'static str {
        "vector"
    }
}

pub fn field_norm<F: FieldData>(x: &F, w: Weighting) -> f64 {
    weighted_norm(x.grid(), x.values(), w)
}

/// Bilinear form `<a, b>`, optionally weighted by the cell volume.
pub fn inner_product<F: FieldData>(a: &F, b: &F, w: Weighting) -> Result<f64> {
    a.grid().check_same(b.grid())?;
    if a.values().len() != b.values().len() {
        return Err(Error::GridMismatch(format!("{} vs {} values", a.values().len(), b.values().len())));
    }
    let s = dot(a.values(), b.values());
    Ok(match w {
        Weighting::None => s,
        Weighting::Volume => s * a.grid().cell_volume(),
    })
}
