//! Closure models `m(ubar, theta)`: none, Smagorinsky and a staggered CNN.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{roll, Grid, ScalarField, VectorField};

// ---------------------------------------------------------------------------
// strain rate and Smagorinsky

/// Discrete strain rate. Diagonal entries live at cell centers; the entry
/// `(a, b)`, `a < b`, lives at the corner/edge `I + e_a/2 + e_b/2`.
#[derive(Clone, Debug)]
pub struct StrainRate {
    grid: Grid,
    diag: Vec<Vec<f64>>,
    off: Vec<((usize, usize), Vec<f64>)>,
}

impl StrainRate {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `S_aa` at the cell centers.
    pub fn diagonal(&self, a: usize) -> &[f64] {
        &self.diag[a]
    }

    /// `S_ab` at its corner/edge location.
    pub fn off_diagonal(&self, a: usize, b: usize) -> &[f64] {
        let key = (a.min(b), a.max(b));
        &self.off.iter().find(|(k, _)| *k == key).expect("off-diagonal pair").1
    }

    /// `S_ab` averaged to the cell centers.
    pub fn at_centers(&self, a: usize, b: usize) -> Vec<f64> {
        if a == b {
            return self.diag[a].clone();
        }
        let (p, q) = (a.min(b), a.max(b));
        let s = self.off_diagonal(p, q);
        let sp = roll(&self.grid, s, p, -1);
        let sq = roll(&self.grid, s, q, -1);
        let spq = roll(&self.grid, &sp, q, -1);
        (0..s.len()).map(|i| 0.25 * (s[i] + sp[i] + sq[i] + spq[i])).collect()
    }
}

pub fn strain_rate(u: &VectorField) -> StrainRate {
    let g = *u.grid();
    let d = g.dim();
    let diag = (0..d)
        .map(|a| {
            let ua = u.comp(a);
            let um = roll(&g, ua, a, -1);
            let h = g.spacing(a);
            ua.iter().zip(&um).map(|(x, y)| (x - y) / h).collect()
        })
        .collect();
    let mut off = Vec::new();
    for a in 0..d {
        for b in a + 1..d {
            let ua = u.comp(a);
            let ub = u.comp(b);
            let dua = roll(&g, ua, b, 1);
            let dub = roll(&g, ub, a, 1);
            let (ha, hb) = (g.spacing(a), g.spacing(b));
            let s = (0..g.ncell()).map(|i| 0.5 * ((dua[i] - ua[i]) / hb + (dub[i] - ub[i]) / ha)).collect();
            off.push(((a, b), s));
        }
    }
    StrainRate { grid: g, diag, off }
}

/// `sqrt(2 S:S)` from a full tensor given entrywise.
fn magnitude(entries: &dyn Fn(usize, usize) -> f64, d: usize) -> f64 {
    let mut ss = 0.0;
    for a in 0..d {
        for b in 0..d {
            let s = entries(a, b);
            ss += s * s;
        }
    }
    (2.0 * ss).sqrt()
}

/// Smagorinsky filter width: the LES spacing (geometric mean if anisotropic).
pub fn smagorinsky_width(grid: &Grid) -> f64 {
    grid.cell_volume().powf(1.0 / grid.dim() as f64)
}

/// Eddy viscosity `theta^2 Delta^2 sqrt(2 S:S)` at the cell centers.
pub fn eddy_viscosity(u: &VectorField, theta: f64) -> ScalarField {
    let s = strain_rate(u);
    let g = *u.grid();
    let d = g.dim();
    let c = (theta * smagorinsky_width(&g)).powi(2);
    let full: Vec<Vec<Vec<f64>>> = (0..d).map(|a| (0..d).map(|b| s.at_centers(a, b)).collect()).collect();
    let data = (0..g.ncell()).map(|i| c * magnitude(&|a, b| full[a][b][i], d)).collect();
    ScalarField::from_vec(&g, data).expect("grid-sized")
}

/// `m = div(2 nu_t S)` at the velocity points. Diagonal stresses use `nu_t`
/// at the centers; the `(a, b)` stress uses `nu_t` at its own corner/edge, with
/// the native `S_ab` and the other entries averaged from the four adjacent centers.
pub fn smagorinsky(u: &VectorField, theta: f64) -> Result<VectorField> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::InvalidArgument(format!("Smagorinsky coefficient must lie in [0, 1], got {theta}")));
    }
    let g = *u.grid();
    let d = g.dim();
    let nc = g.ncell();
    let mut out = vec![0.0; d * nc];
    if theta == 0.0 {
        return VectorField::from_vec(&g, out);
    }
    let s = strain_rate(u);
    let c = (theta * smagorinsky_width(&g)).powi(2);
    let full: Vec<Vec<Vec<f64>>> = (0..d).map(|a| (0..d).map(|b| s.at_centers(a, b)).collect()).collect();

    // diagonal: T_aa = 2 nu_t S_aa at centers, d_a T_aa lands on the u^a faces
    let nu_c: Vec<f64> = (0..nc).map(|i| c * magnitude(&|a, b| full[a][b][i], d)).collect();
    for a in 0..d {
        let t: Vec<f64> = (0..nc).map(|i| 2.0 * nu_c[i] * s.diagonal(a)[i]).collect();
        let tp = roll(&g, &t, a, 1);
        let h = g.spacing(a);
        for (o, (x, y)) in out[a * nc..(a + 1) * nc].iter_mut().zip(tp.iter().zip(&t)) {
            *o += (x - y) / h;
        }
    }

    for a in 0..d {
        for b in a + 1..d {
            // center values averaged to the (a, b) corner: centers I, I+e_a, I+e_b, I+e_a+e_b
            let corner = |v: &[f64]| -> Vec<f64> {
                let va = roll(&g, v, a, 1);
                let vb = roll(&g, v, b, 1);
                let vab = roll(&g, &va, b, 1);
                (0..nc).map(|i| 0.25 * (v[i] + va[i] + vb[i] + vab[i])).collect()
            };
            let interp: Vec<Vec<Vec<f64>>> = (0..d).map(|p| (0..d).map(|q| corner(&full[p][q])).collect()).collect();
            let sab = s.off_diagonal(a, b);
            let t: Vec<f64> = (0..nc)
                .map(|i| {
                    let e = |p: usize, q: usize| if (p, q) == (a, b) || (p, q) == (b, a) { sab[i] } else { interp[p][q][i] };
                    2.0 * c * magnitude(&e, d) * sab[i]
                })
                .collect();
            // u^a gets d_b T_ab: corners I and I - e_b; u^b gets d_a T_ab: corners I and I - e_a
            let tb = roll(&g, &t, b, -1);
            let ta = roll(&g, &t, a, -1);
            let (ha, hb) = (g.spacing(a), g.spacing(b));
            for i in 0..nc {
                out[a * nc + i] += (t[i] - tb[i]) / hb;
                out[b * nc + i] += (t[i] - ta[i]) / ha;
            }
        }
    }
    VectorField::from_vec(&g, out)
}

// ---------------------------------------------------------------------------
// collocation

/// Face to center: `c^a_I = (u^a_I + u^a_{I-e_a}) / 2`.
pub fn collocate_values(g: &Grid, u: &[f64]) -> Vec<f64> {
    let nc = g.ncell();
    let mut out = Vec::with_capacity(u.len());
    for a in 0..g.dim() {
        let ua = &u[a * nc..(a + 1) * nc];
        let um = roll(g, ua, a, -1);
        out.extend(ua.iter().zip(&um).map(|(x, y)| 0.5 * (x + y)));
    }
    out
}

/// Center to face: `u^a_I = (c^a_I + c^a_{I+e_a}) / 2`; the transpose of [`collocate_values`].
pub fn decollocate_values(g: &Grid, c: &[f64]) -> Vec<f64> {
    let nc = g.ncell();
    let mut out = Vec::with_capacity(c.len());
    for a in 0..g.dim() {
        let ca = &c[a * nc..(a + 1) * nc];
        let cp = roll(g, ca, a, 1);
        out.extend(ca.iter().zip(&cp).map(|(x, y)| 0.5 * (x + y)));
    }
    out
}

/// `d` cell-centered channels, stored like a vector field.
pub fn collocate(u: &VectorField) -> VectorField {
    VectorField::from_vec(u.grid(), collocate_values(u.grid(), u.data())).expect("grid-sized")
}

pub fn decollocate(c: &VectorField) -> VectorField {
    VectorField::from_vec(c.grid(), decollocate_values(c.grid(), c.data())).expect("grid-sized")
}

// ---------------------------------------------------------------------------
// CNN

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub radius: usize,
    pub cin: usize,
    pub cout: usize,
    pub activation: Activation,
    pub bias: bool,
}

impl LayerSpec {
    pub fn kernel_size(&self, dim: usize) -> usize {
        (2 * self.radius + 1).pow(dim as u32)
    }

    pub fn weight_count(&self, dim: usize) -> usize {
        self.kernel_size(dim) * self.cin * self.cout
    }

    pub fn param_count(&self, dim: usize) -> usize {
        self.weight_count(dim) + if self.bias { self.cout } else { 0 }
    }

    pub fn fan_in(&self, dim: usize) -> usize {
        self.kernel_size(dim) * self.cin
    }

    /// Kernel offsets in layout order (axis 1 fastest).
    pub fn offsets(&self, dim: usize) -> Vec<[isize; 3]> {
        let r = self.radius as isize;
        let w = 2 * r + 1;
        let n2 = if dim == 3 { w } else { 1 };
        let mut out = Vec::with_capacity(self.kernel_size(dim));
        for k2 in 0..n2 {
            for k1 in 0..w {
                for k0 in 0..w {
                    out.push([k0 - r, k1 - r, if dim == 3 { k2 - r } else { 0 }]);
                }
            }
        }
        out
    }
}

/// Layer stack between a collocation and a decollocation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArchitecture {
    pub dim: usize,
    pub layers: Vec<LayerSpec>,
}

impl CnnArchitecture {
    /// `d -> 24 -> 24 -> 24 -> 24 -> d`, radius 2, tanh and bias on inner layers.
    pub fn default_for(dim: usize) -> Self {
        Self::uniform(dim, 2, 24, 4)
    }

    /// `hidden` layers of `width` channels with kernel radius `radius`.
    pub fn uniform(dim: usize, radius: usize, width: usize, hidden: usize) -> Self {
        let mut layers = Vec::new();
        let mut cin = dim;
        for _ in 0..hidden {
            layers.push(LayerSpec { radius, cin, cout: width, activation: Activation::Tanh, bias: true });
            cin = width;
        }
        layers.push(LayerSpec { radius, cin, cout: dim, activation: Activation::Identity, bias: false });
        CnnArchitecture { dim, layers }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("CNN architecture: {m}")));
        if self.dim != 2 && self.dim != 3 {
            return bad("dimension must be 2 or 3");
        }
        let (first, last) = match (self.layers.first(), self.layers.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return bad("no layers"),
        };
        if first.cin != self.dim || last.cout != self.dim {
            return bad("first layer must read and last layer must write d channels");
        }
        if last.activation != Activation::Identity || last.bias {
            return bad("last layer must be linear without bias");
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].cout != w[1].cin {
                return bad(&format!("channel mismatch after layer {i}"));
            }
        }
        if self.layers.iter().any(|l| l.radius < 1 || l.cin == 0 || l.cout == 0) {
            return bad("radii and channel counts must be >= 1");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count(self.dim)).sum()
    }

    /// Start of each layer's block in the flat parameter vector: weights `[co][ci][k]`, then bias `[co]`.
    pub fn layer_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            off.push(o);
            o += l.param_count(self.dim);
        }
        off
    }

    /// Sum of the kernel radii (receptive radius of the conv stack alone).
    pub fn conv_radius(&self) -> usize {
        self.layers.iter().map(|l| l.radius).sum()
    }
}

pub fn param_count(arch: &CnnArchitecture) -> usize {
    arch.param_count()
}

/// Flat parameter vector together with its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosureParams {
    arch: CnnArchitecture,
    theta: Vec<f64>,
}

impl ClosureParams {
    pub fn new(arch: CnnArchitecture, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", arch.param_count(), theta.len())));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("closure parameters".into()));
        }
        Ok(ClosureParams { arch, theta })
    }

    pub fn zeros(arch: CnnArchitecture) -> Result<Self> {
        let n = arch.param_count();
        Self::new(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &CnnArchitecture {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_theta(self) -> Vec<f64> {
        self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.arch.clone(), theta)
    }
}

/// Uniform on `[-sqrt(1/fan_in), sqrt(1/fan_in)]` per layer, weights and bias.
pub fn init_params(arch: &CnnArchitecture, seed: u64) -> Result<ClosureParams> {
    arch.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for l in &arch.layers {
        let b = (1.0 / l.fan_in(arch.dim) as f64).sqrt();
        for _ in 0..l.param_count(arch.dim) {
            theta.push(rng.random_range(-b..=b));
        }
    }
    ClosureParams::new(arch.clone(), theta)
}

/// `out[I] = x[I + off]`, periodic, row-wise copies.
pub(crate) fn shift_into(g: &Grid, x: &[f64], off: [isize; 3], out: &mut [f64]) {
    let [n0, n1, n2] = g.shape3();
    let o0 = off[0].rem_euclid(n0 as isize) as usize;
    let o1 = off[1].rem_euclid(n1 as isize) as usize;
    let o2 = off[2].rem_euclid(n2 as isize) as usize;
    for i2 in 0..n2 {
        let s2 = (i2 + o2) % n2;
        for i1 in 0..n1 {
            let s1 = (i1 + o1) % n1;
            let src = &x[n0 * (s1 + n1 * s2)..][..n0];
            let dst = &mut out[n0 * (i1 + n1 * i2)..][..n0];
            dst[..n0 - o0].copy_from_slice(&src[o0..]);
            dst[n0 - o0..].copy_from_slice(&src[..o0]);
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Pre-activation output of one periodic convolution,
/// `y[co][I] = b[co] + sum_{ci, J} K[co][ci][J] x[ci][I + J]`.
pub fn conv_forward(g: &Grid, spec: &LayerSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let nc = g.ncell();
    let d = g.dim();
    let k = spec.kernel_size(d);
    let nw = spec.weight_count(d);
    let mut y = vec![0.0; spec.cout * nc];
    if spec.bias {
        for co in 0..spec.cout {
            y[co * nc..(co + 1) * nc].fill(params[nw + co]);
        }
    }
    let offsets = spec.offsets(d);
    let mut shifted = vec![0.0; nc];
    for ci in 0..spec.cin {
        let xc = &x[ci * nc..(ci + 1) * nc];
        for (j, off) in offsets.iter().enumerate() {
            shift_into(g, xc, *off, &mut shifted);
            for co in 0..spec.cout {
                let w = params[(co * spec.cin + ci) * k + j];
                if w != 0.0 {
                    axpy(&mut y[co * nc..(co + 1) * nc], w, &shifted);
                }
            }
        }
    }
    y
}

/// Pullback of [`conv_forward`]: returns `(dx, dparams)` for the output adjoint `dy`.
pub fn conv_backward(g: &Grid, spec: &LayerSpec, params: &[f64], x: &[f64], dy: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let nc = g.ncell();
    let d = g.dim();
    let k = spec.kernel_size(d);
    let nw = spec.weight_count(d);
    let mut dx = vec![0.0; spec.cin * nc];
    let mut dp = vec![0.0; spec.param_count(d)];
    let offsets = spec.offsets(d);
    let mut shifted = vec![0.0; nc];
    let mut tmp = vec![0.0; nc];
    let mut back = vec![0.0; nc];
    for ci in 0..spec.cin {
        let xc = &x[ci * nc..(ci + 1) * nc];
        for (j, off) in offsets.iter().enumerate() {
            shift_into(g, xc, *off, &mut shifted);
            tmp.fill(0.0);
            for co in 0..spec.cout {
                let dyc = &dy[co * nc..(co + 1) * nc];
                let idx = (co * spec.cin + ci) * k + j;
                dp[idx] = dyc.iter().zip(&shifted).map(|(a, b)| a * b).sum();
                let w = params[idx];
                if w != 0.0 {
                    axpy(&mut tmp, w, dyc);
                }
            }
            shift_into(g, &tmp, [-off[0], -off[1], -off[2]], &mut back);
            for (a, b) in dx[ci * nc..(ci + 1) * nc].iter_mut().zip(&back) {
                *a += b;
            }
        }
    }
    if spec.bias {
        for co in 0..spec.cout {
            dp[nw + co] = dy[co * nc..(co + 1) * nc].iter().sum();
        }
    }
    (dx, dp)
}

/// `decollocate . conv_L . ... . conv_1 . collocate`, periodic padding.
pub fn cnn_forward(u: &VectorField, params: &ClosureParams) -> Result<VectorField> {
    let arch = params.arch();
    let g = *u.grid();
    if g.dim() != arch.dim {
        return Err(Error::Shape(format!("CNN for {}D applied to a {}D field", arch.dim, g.dim())));
    }
    let offsets = arch.layer_offsets();
    let mut x = collocate_values(&g, u.data());
    for (l, spec) in arch.layers.iter().enumerate() {
        let p = &params.theta()[offsets[l]..offsets[l] + spec.param_count(arch.dim)];
        x = conv_forward(&g, spec, p, &x);
        if spec.activation == Activation::Tanh {
            x.iter_mut().for_each(|v| *v = v.tanh());
        }
    }
    VectorField::from_vec(&g, decollocate_values(&g, &x))
}

// ---------------------------------------------------------------------------
// model selection

/// A closure model ready to evaluate on the LES grid.
#[derive(Clone, Debug, Default)]
pub enum Closure {
    #[default]
    None,
    Smagorinsky(f64),
    Cnn(ClosureParams),
}

impl Closure {
    pub fn apply(&self, u: &VectorField) -> Result<Option<VectorField>> {
        match self {
            Closure::None => Ok(None),
            Closure::Smagorinsky(theta) => smagorinsky(u, *theta).map(Some),
            Closure::Cnn(p) => cnn_forward(u, p).map(Some),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Closure::None => "none",
            Closure::Smagorinsky(_) => "smagorinsky",
            Closure::Cnn(_) => "cnn",
        }
    }
}

// ---------------------------------------------------------------------------
// parameter files

const CNP_MAGIC: &[u8; 4] = b"CNP1";

pub fn write_params<W: Write>(mut w: W, params: &ClosureParams) -> Result<()> {
    let arch = params.arch();
    w.write_all(CNP_MAGIC)?;
    w.write_all(&(arch.dim as u32).to_le_bytes())?;
    w.write_all(&(arch.layers.len() as u32).to_le_bytes())?;
    for l in &arch.layers {
        for v in [l.radius, l.cin, l.cout] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        w.write_all(&[l.activation.code(), l.bias as u8])?;
    }
    w.write_all(&(params.theta().len() as u64).to_le_bytes())?;
    for x in params.theta() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format(format!("truncated parameter file: {e}")))?;
    Ok(b)
}

fn read_u32<R: Read>(r: &mut R) -> Result<usize> {
    Ok(u32::from_le_bytes(read_exact(r)?) as usize)
}

pub fn read_params<R: Read>(mut r: R) -> Result<ClosureParams> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != CNP_MAGIC {
        return Err(Error::Format("not a closure parameter file (bad magic)".into()));
    }
    let dim = read_u32(&mut r)?;
    let n = read_u32(&mut r)?;
    if n > 4096 {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let (radius, cin, cout) = (read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?);
        let [act, bias]: [u8; 2] = read_exact(&mut r)?;
        if bias > 1 {
            return Err(Error::Format(format!("bad bias flag {bias}")));
        }
        layers.push(LayerSpec { radius, cin, cout, activation: Activation::from_code(act)?, bias: bias == 1 });
    }
    let arch = CnnArchitecture { dim, layers };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    let count = u64::from_le_bytes(read_exact(&mut r)?) as usize;
    if count != arch.param_count() {
        return Err(Error::Format(format!("parameter count {count} does not match architecture ({})", arch.param_count())));
    }
    let mut theta = Vec::with_capacity(count);
    for _ in 0..count {
        theta.push(f64::from_le_bytes(read_exact(&mut r)?));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Format("trailing bytes after parameter payload".into()));
    }
    ClosureParams::new(arch, theta)
}

pub fn save_params(path: &Path, params: &ClosureParams) -> Result<()> {
    let mut buf = Vec::new();
    write_params(&mut buf, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ClosureParams> {
    let bytes = std::fs::read(path)?;
    read_params(bytes.as_slice())
}
