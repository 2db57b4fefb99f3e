//! Dataset generation (DNS, filtering, commutators) and on-disk formats.
//!
//! Field files ("SGF1"): magic, u8 kind (0 scalar, 1 vector), u8 dimension,
//! u8 precision bits, u64 cells per axis, f64 box length per axis, then the
//! little-endian payload component by component in the canonical layout.
//! Boxes are stored by length; loaded grids start at the origin.

use std::fs;
use std::hash::Hasher;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{filtered_pair, CoarseningMap, FilterKind};
use crate::grid::{Grid, Precision, ScalarField, VectorField};
use crate::initial_conditions::{random_spectral_field, SpectrumSpec};
use crate::operators::{relative_divergence, BodyForce, FlowParams, Rhs};
use crate::timestepping::{integrate, Integration, Scheme, StepControl};
use crate::training::FilteredTrajectory;

pub const SCHEMA_VERSION: u32 = 1;
const SGF_MAGIC: &[u8; 4] = b"SGF1";

// ---------------------------------------------------------------------------
// field files

#[derive(Clone, Debug, PartialEq)]
pub enum StoredField {
    Scalar(ScalarField),
    Vector(VectorField),
}

impl StoredField {
    fn grid(&self) -> &Grid {
        match self {
            StoredField::Scalar(f) => f.grid(),
            StoredField::Vector(f) => f.grid(),
        }
    }

    fn values(&self) -> &[f64] {
        match self {
            StoredField::Scalar(f) => f.data(),
            StoredField::Vector(f) => f.data(),
        }
    }

    pub fn into_vector(self) -> Result<VectorField> {
        match self {
            StoredField::Vector(v) => Ok(v),
            StoredField::Scalar(_) => Err(Error::Format("expected a vector field, found a scalar field".into())),
        }
    }
}

/// Encodes a field; 32-bit storage rounds every value to `f32`.
pub fn encode_field(field: &StoredField, precision: Precision) -> Vec<u8> {
    let g = field.grid();
    let d = g.dim();
    let vals = field.values();
    let mut out = Vec::with_capacity(7 + 16 * d + vals.len() * 8);
    out.extend_from_slice(SGF_MAGIC);
    out.push(matches!(field, StoredField::Vector(_)) as u8);
    out.push(d as u8);
    out.push(precision.bits());
    for a in 0..d {
        out.extend_from_slice(&(g.n(a) as u64).to_le_bytes());
    }
    for a in 0..d {
        out.extend_from_slice(&g.length(a).to_le_bytes());
    }
    match precision {
        Precision::Double => vals.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Precision::Single => vals.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Format("truncated field file".into()));
    }
    let (a, b) = buf.split_at(n);
    *buf = b;
    Ok(a)
}

/// Decodes a field and its stored precision.
pub fn decode_field(bytes: &[u8]) -> Result<(StoredField, Precision)> {
    let mut b = bytes;
    if take(&mut b, 4)? != SGF_MAGIC {
        return Err(Error::Format("not a field file (bad magic)".into()));
    }
    let head = take(&mut b, 3)?;
    let (kind, d) = (head[0], head[1] as usize);
    let prec = Precision::from_bits(head[2]).map_err(|e| Error::Format(e.to_string()))?;
    if kind > 1 || !(d == 2 || d == 3) {
        return Err(Error::Format(format!("bad field header (kind {kind}, dimension {d})")));
    }
    let mut n = Vec::with_capacity(d);
    for _ in 0..d {
        let v = u64::from_le_bytes(take(&mut b, 8)?.try_into().unwrap());
        n.push(usize::try_from(v).map_err(|_| Error::Format("grid size overflow".into()))?);
    }
    let mut ext = Vec::with_capacity(d);
    for _ in 0..d {
        ext.push((0.0, f64::from_le_bytes(take(&mut b, 8)?.try_into().unwrap())));
    }
    let grid = Grid::new(d, &n, &ext).map_err(|e| Error::Format(e.to_string()))?;
    let count = grid.ncell().checked_mul(if kind == 1 { d } else { 1 }).ok_or_else(|| Error::Format("size overflow".into()))?;
    let width = prec.bits() as usize / 8;
    if b.len() != count * width {
        return Err(Error::Format(format!("payload has {} bytes, expected {}", b.len(), count * width)));
    }
    let vals: Vec<f64> = match prec {
        Precision::Double => b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        Precision::Single => b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    let f = if kind == 1 { StoredField::Vector(VectorField::from_vec(&grid, vals)?) } else { StoredField::Scalar(ScalarField::from_vec(&grid, vals)?) };
    Ok((f, prec))
}

/// Writes the field and returns the FNV-1a checksum of the bytes written.
pub fn save_field(field: &StoredField, precision: Precision, path: &Path) -> Result<u64> {
    let bytes = encode_field(field, precision);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(fnv1a(&bytes))
}

pub fn load_field(path: &Path) -> Result<(StoredField, Precision)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_field(&bytes)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

// ---------------------------------------------------------------------------
// configuration and manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dim: usize,
    pub dns_n: usize,
    pub length: f64,
    pub reynolds: f64,
    pub force: BodyForce,
    pub peak_wavenumber: f64,
    pub seeds: Vec<u64>,
    pub t_burn: f64,
    /// End time, burn-in included.
    pub t_end: f64,
    /// CFL number during burn-in.
    pub cfl: f64,
    /// Fixed DNS step while recording.
    pub dt: f64,
    /// Snapshot every `stride` recording steps; 0 keeps only the final state.
    pub stride: usize,
    pub coarse: Vec<usize>,
    pub filters: Vec<FilterKind>,
    pub precision: Precision,
    pub scheme: Scheme,
    /// Trajectory counts per split (train, validation, test).
    pub splits: [usize; 3],
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dim: 2,
            dns_n: 256,
            length: 1.0,
            reynolds: 2000.0,
            force: BodyForce::None,
            peak_wavenumber: 5.0,
            seeds: vec![0, 1, 2, 3, 4],
            t_burn: 0.5,
            t_end: 1.0,
            cfl: 0.85,
            dt: 1e-3,
            stride: 10,
            coarse: vec![32],
            filters: vec![FilterKind::Fa, FilterKind::Va],
            precision: Precision::Double,
            scheme: Scheme::Wray3,
            splits: [3, 1, 1],
            split_seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("dataset config: {m}")));
        if self.seeds.is_empty() {
            return bad("no trajectory seeds".into());
        }
        if !(self.t_burn >= 0.0 && self.t_end > self.t_burn) {
            return bad(format!("need 0 <= t_burn < t_end, got {} and {}", self.t_burn, self.t_end));
        }
        if !(self.dt > 0.0 && self.cfl > 0.0 && self.length > 0.0) {
            return bad("dt, cfl and length must be positive".into());
        }
        if self.coarse.is_empty() || self.filters.is_empty() {
            return bad("need at least one coarse grid and one filter".into());
        }
        if self.splits.iter().sum::<usize>() == 0 {
            return bad("split counts are all zero".into());
        }
        self.dns_grid()?;
        for &c in &self.coarse {
            CoarseningMap::uniform(&self.dns_grid()?, c)?;
        }
        self.flow()?;
        Ok(())
    }

    pub fn dns_grid(&self) -> Result<Grid> {
        Grid::cube(self.dim, self.dns_n, 0.0, self.length)
    }

    pub fn flow(&self) -> Result<FlowParams> {
        FlowParams::from_reynolds(self.reynolds, self.force)
    }

    /// Recording steps and the adjusted step that lands on `t_end`.
    pub fn recording_steps(&self) -> (usize, f64) {
        let span = self.t_end - self.t_burn;
        let n = (span / self.dt - 1e-9).ceil().max(1.0) as usize;
        (n, span / n as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub path: String,
    /// FNV-1a 64 of the file bytes, hex.
    pub fnv1a64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub coarse: usize,
    pub filter: FilterKind,
    pub ubar: FileRef,
    pub commutator: FileRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub step: usize,
    pub time: f64,
    /// Time to the next snapshot.
    pub dt: f64,
    pub fields: Vec<FieldEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: usize,
    pub seed: u64,
    pub split: Option<Split>,
    pub snapshots: Vec<SnapshotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: u32,
    pub config: DatasetConfig,
    pub dns_dt: f64,
    pub snapshot_dt: f64,
    pub trajectories: Vec<TrajectoryEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), s)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let s = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let m: Manifest = serde_json::from_str(&s)?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::Format(format!("manifest schema {} (expected {SCHEMA_VERSION})", m.schema)));
        }
        Ok(m)
    }

    /// Checks that every referenced file exists with the recorded checksum.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for t in &self.trajectories {
            for s in &t.snapshots {
                for f in &s.fields {
                    for r in [&f.ubar, &f.commutator] {
                        read_checked(dir, r)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        self.trajectories.iter().filter(|t| t.split == Some(split)).map(|t| t.id).collect()
    }
}

fn read_checked(dir: &Path, r: &FileRef) -> Result<Vec<u8>> {
    let path = dir.join(&r.path);
    let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let expected = u64::from_str_radix(&r.fnv1a64, 16).map_err(|_| Error::Format(format!("bad checksum '{}'", r.fnv1a64)))?;
    let found = fnv1a(&bytes);
    if found != expected {
        return Err(Error::Checksum { path: path.display().to_string(), expected, found });
    }
    Ok(bytes)
}

fn load_checked(dir: &Path, r: &FileRef) -> Result<VectorField> {
    decode_field(&read_checked(dir, r)?)?.0.into_vector()
}

// ---------------------------------------------------------------------------
// generation

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn generate_trajectory(cfg: &DatasetConfig, id: usize, seed: u64, root: &Path) -> Result<TrajectoryEntry> {
    let grid = cfg.dns_grid()?;
    let flow = cfg.flow()?;
    let fine_rhs = Rhs::new(&grid, flow);
    let maps: Vec<(CoarseningMap, Rhs)> = cfg
        .coarse
        .iter()
        .map(|&c| {
            let m = CoarseningMap::uniform(&grid, c)?;
            let r = Rhs::new(m.coarse(), flow);
            Ok((m, r))
        })
        .collect::<Result<_>>()?;
    let u0 = random_spectral_field(&grid, &SpectrumSpec { peak_wavenumber: cfg.peak_wavenumber, seed })?;
    let burn = Integration::new(StepControl::Cfl { sigma: cfg.cfl }, cfg.scheme).with_precision(cfg.precision);
    let u = integrate(&u0, cfg.t_burn, &burn, &flow, |_, _, _| {})?;
    info!("trajectory {id} (seed {seed}): burn-in done");

    let dir = root.join(format!("traj_{id:03}"));
    fs::create_dir_all(&dir)?;
    let (nsteps, dt) = cfg.recording_steps();
    let stride = if cfg.stride == 0 { nsteps } else { cfg.stride };
    let snap_dt = dt * stride as f64;
    let mut snapshots = Vec::new();
    let mut failure: Option<Error> = None;
    let rec = Integration::new(StepControl::Fixed { dt }, cfg.scheme).with_precision(cfg.precision).with_max_steps(nsteps + 1);
    let record = |step: usize, t: f64, u: &VectorField| -> Result<SnapshotEntry> {
        let pf = fine_rhs.eval_projected(u);
        let mut fields = Vec::new();
        for (map, crhs) in &maps {
            for &kind in &cfg.filters {
                let (ub, c) = filtered_pair(u, &pf, map, kind, crhs)?;
                if kind == FilterKind::Fa && relative_divergence(&ub) > 1e-10 {
                    return Err(Error::Dataset(format!("face-averaged snapshot not divergence free ({:e})", relative_divergence(&ub))));
                }
                let name = format!("{}_{}_{:05}", map.coarse().n(0), kind, step);
                let up = dir.join(format!("{name}_ubar.sgf"));
                let cp = dir.join(format!("{name}_c.sgf"));
                let uh = save_field(&StoredField::Vector(ub), cfg.precision, &up)?;
                let ch = save_field(&StoredField::Vector(c), cfg.precision, &cp)?;
                fields.push(FieldEntry {
                    coarse: map.coarse().n(0),
                    filter: kind,
                    ubar: FileRef { path: rel(&up, root), fnv1a64: format!("{uh:016x}") },
                    commutator: FileRef { path: rel(&cp, root), fnv1a64: format!("{ch:016x}") },
                });
            }
        }
        Ok(SnapshotEntry { step, time: cfg.t_burn + t, dt: snap_dt, fields })
    };
    integrate(&u, cfg.t_end - cfg.t_burn, &rec, &flow, |step, t, u| {
        if failure.is_some() || step % stride != 0 {
            return;
        }
        match record(step, t, u) {
            Ok(s) => snapshots.push(s),
            Err(e) => failure = Some(e),
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    if cfg.stride == 0 {
        snapshots.retain(|s| s.step == nsteps);
    }
    Ok(TrajectoryEntry { id, seed, split: None, snapshots })
}

/// Runs every trajectory, writes field files and the manifest under `out`.
/// On failure the files written by this call are removed.
pub fn generate_dataset(cfg: &DatasetConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        return Err(Error::InvalidArgument(format!("output directory {} is not empty", out.display())));
    }
    let created = !out.exists();
    fs::create_dir_all(out)?;
    let (nsteps, dt) = cfg.recording_steps();
    let stride = if cfg.stride == 0 { nsteps } else { cfg.stride };
    // independent seeds on the current rayon pool; collect keeps id order
    let trajs = match cfg.seeds.par_iter().enumerate().map(|(id, &seed)| generate_trajectory(cfg, id, seed, out)).collect::<Result<Vec<_>>>() {
        Ok(t) => t,
        Err(e) => {
            cleanup(out, created);
            return Err(e);
        }
    };
    let manifest = Manifest { schema: SCHEMA_VERSION, config: cfg.clone(), dns_dt: dt, snapshot_dt: dt * stride as f64, trajectories: trajs };
    let manifest = split_dataset(&manifest, cfg.splits, cfg.split_seed)?;
    manifest.save(out)?;
    Ok(manifest)
}

fn cleanup(out: &Path, created: bool) {
    if created {
        let _ = fs::remove_dir_all(out);
    } else if let Ok(entries) = fs::read_dir(out) {
        for e in entries.flatten() {
            let _ = fs::remove_dir_all(e.path());
        }
    }
}

/// Assigns whole trajectories to (train, validation, test) in proportion to
/// `ratios` (largest remainder), after a seeded shuffle.
pub fn split_dataset(manifest: &Manifest, ratios: [usize; 3], seed: u64) -> Result<Manifest> {
    let n = manifest.trajectories.len();
    let total: usize = ratios.iter().sum();
    let wanted = ratios.iter().filter(|&&r| r > 0).count();
    if total == 0 || n < wanted {
        return Err(Error::Dataset(format!("{n} trajectories cannot fill {wanted} splits")));
    }
    let mut counts = [0usize; 3];
    let mut rem = Vec::new();
    for i in 0..3 {
        let exact = ratios[i] as f64 * n as f64 / total as f64;
        counts[i] = exact.floor() as usize;
        if ratios[i] > 0 && counts[i] == 0 {
            counts[i] = 1;
        }
        rem.push((exact - exact.floor(), i));
    }
    rem.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        let i = rem[k % 3].1;
        if ratios[i] > 0 {
            counts[i] += 1;
        }
        k += 1;
    }
    while counts.iter().sum::<usize>() > n {
        let i = (0..3).max_by_key(|&i| counts[i]).unwrap();
        counts[i] -= 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut Xoshiro256PlusPlus::seed_from_u64(seed));
    let mut out = manifest.clone();
    let splits = [Split::Train, Split::Valid, Split::Test];
    let mut pos = 0;
    for (i, &c) in counts.iter().enumerate() {
        for &t in &order[pos..pos + c] {
            out.trajectories[t].split = Some(splits[i]);
        }
        pos += c;
    }
    Ok(out)
}

/// Loads the filtered trajectories of one split for one coarse grid and filter.
pub fn load_trajectories(manifest: &Manifest, dir: &Path, split: Split, coarse: usize, filter: FilterKind) -> Result<Vec<FilteredTrajectory>> {
    let mut out = Vec::new();
    for t in manifest.trajectories.iter().filter(|t| t.split == Some(split)) {
        let mut tr = FilteredTrajectory { dt: manifest.snapshot_dt, times: vec![], ubar: vec![], commutator: vec![] };
        for s in &t.snapshots {
            let f = s
                .fields
                .iter()
                .find(|f| f.coarse == coarse && f.filter == filter)
                .ok_or_else(|| Error::Dataset(format!("no {filter} snapshots on the {coarse} grid")))?;
            tr.times.push(s.time);
            tr.ubar.push(load_checked(dir, &f.ubar)?);
            tr.commutator.push(load_checked(dir, &f.commutator)?);
        }
        out.push(tr);
    }
    Ok(out)
}

/// Directory holding a trajectory's files.
pub fn trajectory_dir(root: &Path, id: usize) -> PathBuf {
    root.join(format!("traj_{id:03}"))
}
