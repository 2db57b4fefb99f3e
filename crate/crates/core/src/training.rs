//! Closure training: snapshot (a-priori) and trajectory (a-posteriori) losses,
//! Adam loops with best-validation retention, and the Smagorinsky search.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, clip_norm, cnn_on_tape, cosine_lr, AdamState, Tape, Var};
use crate::closure::{save_params, Closure, ClosureParams};
use crate::error::{Error, Result};
use crate::grid::{sq_norm, VectorField};
use crate::les::{les_step, les_step_with, Formulation, LesModel};
use crate::timestepping::RkTableau;

/// Loss returned for a rollout that produced non-finite values.
pub const BLOWUP_LOSS: f64 = 1e6;

/// Filtered snapshots of one DNS trajectory on one coarse grid with one filter.
#[derive(Clone, Debug)]
pub struct FilteredTrajectory {
    /// Time between consecutive snapshots.
    pub dt: f64,
    pub times: Vec<f64>,
    pub ubar: Vec<VectorField>,
    pub commutator: Vec<VectorField>,
}

impl FilteredTrajectory {
    pub fn len(&self) -> usize {
        self.ubar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ubar.is_empty()
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingData {
    pub train: Vec<FilteredTrajectory>,
    pub valid: Vec<FilteredTrajectory>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Prior,
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Snapshot pairs (prior) or rollout windows (post) per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub n_unroll: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub seed: u64,
    pub validate_every: usize,
    pub formulation: Formulation,
    /// Optional max-norm gradient clip.
    pub clip_norm: Option<f64>,
    /// Cap on the number of validation windows for the trajectory loss.
    pub validation_windows: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Prior,
            batch_size: 8,
            iterations: 500,
            n_unroll: 50,
            lr_start: 1e-3,
            lr_end: 1e-6,
            seed: 0,
            validate_every: 20,
            formulation: Formulation::Dcf,
            clip_norm: None,
            validation_windows: 4,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning defaults for the trajectory loss.
    pub fn post() -> Self {
        TrainConfig { loss: LossKind::Post, batch_size: 1, iterations: 100, lr_start: 1e-4, lr_end: 1e-6, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("training config: {m}")));
        if self.batch_size == 0 || self.n_unroll == 0 || self.validate_every == 0 || self.validation_windows == 0 {
            return bad("batch_size, n_unroll, validate_every and validation_windows must be >= 1".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0 && self.lr_start.is_finite() && self.lr_end.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_start, self.lr_end));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// a-priori loss

fn target_norm2(c: &VectorField) -> Result<f64> {
    let n = sq_norm(c.data());
    if n == 0.0 {
        return Err(Error::InvalidArgument("commutator target with zero norm".into()));
    }
    Ok(n)
}

/// Mean of `||m(ubar) - c||^2 / ||c||^2` over the batch.
pub fn loss_prior(batch: &[(&VectorField, &VectorField)], closure: &Closure) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut s = 0.0;
    for (u, c) in batch {
        let cn = target_norm2(c)?;
        let r = match closure.apply(u)? {
            Some(m) => sq_norm(m.sub(c).data()),
            None => cn,
        };
        s += r / cn;
    }
    Ok(s / batch.len() as f64)
}

/// Snapshot loss of given predictions `m_i` against targets `c_i`.
pub fn prior_loss_of(pairs: &[(&VectorField, &VectorField)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut s = 0.0;
    for (m, c) in pairs {
        s += sq_norm(m.sub(c).data()) / target_norm2(c)?;
    }
    Ok(s / pairs.len() as f64)
}

/// [`loss_prior`] of the CNN closure and its parameter gradient; per-sample
/// gradients are summed in batch order.
pub fn loss_prior_grad(batch: &[(&VectorField, &VectorField)], params: &ClosureParams) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.theta().len()];
    for (u, c) in batch {
        let cn = target_norm2(c)?;
        let mut t = Tape::new();
        let th = t.param(params.theta());
        let x = t.field(u);
        let m = cnn_on_tape(&mut t, x, th, params.arch())?;
        let cv = t.field(c);
        let r = t.sub(m, cv)?;
        let s = t.sq_norm(r);
        let out = t.scale(s, w / cn);
        loss += t.scalar(out);
        let g = t.gradient_of(out, th)?;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// a-posteriori loss

/// Trajectory loss value; `blow_up` is set when the rollout diverged and the
/// value is the sentinel [`BLOWUP_LOSS`].
#[derive(Clone, Debug, PartialEq)]
pub struct PostLoss {
    pub value: f64,
    pub blow_up: Option<String>,
}

fn check_window(window: &[VectorField], model: &LesModel) -> Result<()> {
    if window.len() < 2 {
        return Err(Error::InvalidArgument("trajectory window needs at least two snapshots".into()));
    }
    for w in window {
        model.grid().check_same(w.grid())?;
    }
    Ok(())
}

fn relative_sq(v: &VectorField, u: &VectorField) -> Result<f64> {
    let un = sq_norm(u.data());
    if un == 0.0 {
        return Err(Error::InvalidArgument("reference snapshot with zero norm".into()));
    }
    Ok(sq_norm(v.sub(u).data()) / un)
}

/// `1/n sum_i ||v_i - ubar_i||^2 / ||ubar_i||^2` with `v_0 = ubar_0` and
/// `n = window.len() - 1` steps of size `dt`. `closure(step, stage, v)`
/// supplies the closure term.
pub fn loss_post_with<C>(window: &[VectorField], model: &LesModel, dt: f64, tableau: &RkTableau, mut closure: C) -> Result<PostLoss>
where
    C: FnMut(usize, usize, &VectorField) -> Result<Option<VectorField>>,
{
    check_window(window, model)?;
    let n = window.len() - 1;
    let mut v = window[0].clone();
    let mut s = 0.0;
    for i in 1..=n {
        v = match les_step_with(&v, model, dt, tableau, |stage, x| closure(i - 1, stage, x)) {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Ok(PostLoss { value: BLOWUP_LOSS, blow_up: Some(format!("non-finite state at step {i}")) }),
            Err(e) if e.is_numerical() => return Ok(PostLoss { value: BLOWUP_LOSS, blow_up: Some(format!("step {i}: {e}")) }),
            Err(e) => return Err(e),
        };
        s += relative_sq(&v, &window[i])?;
    }
    let value = s / n as f64;
    if !value.is_finite() {
        return Ok(PostLoss { value: BLOWUP_LOSS, blow_up: Some("non-finite loss".into()) });
    }
    Ok(PostLoss { value, blow_up: None })
}

/// Trajectory loss of the model's own closure.
pub fn loss_post(window: &[VectorField], model: &LesModel, dt: f64, tableau: &RkTableau) -> Result<PostLoss> {
    loss_post_with(window, model, dt, tableau, |_, _, x| model.closure().apply(x))
}

/// Stage right-hand side recorded on the tape.
fn tape_rhs(t: &mut Tape, v: Var, model: &LesModel, theta: Var, params: &ClosureParams, force: Option<Var>) -> Result<Var> {
    let nu = model.params().viscosity;
    let mut f = t.convection(v)?;
    if nu != 0.0 {
        let d = t.diffusion(v, nu)?;
        f = t.add(f, d)?;
    }
    if let Some(fv) = force {
        f = t.add(f, fv)?;
    }
    let m = cnn_on_tape(t, v, theta, params.arch())?;
    match model.formulation() {
        Formulation::Dif => {
            let pf = t.project(f)?;
            t.add(pf, m)
        }
        Formulation::Dcf => {
            let s = t.add(f, m)?;
            t.project(s)
        }
    }
}

/// [`loss_post`] for a CNN closure together with its parameter gradient.
/// The gradient is `None` when the rollout blew up.
pub fn loss_post_grad(
    window: &[VectorField],
    model: &LesModel,
    params: &ClosureParams,
    dt: f64,
    tableau: &RkTableau,
) -> Result<(PostLoss, Option<Vec<f64>>)> {
    check_window(window, model)?;
    let n = window.len() - 1;
    let mut t = Tape::new();
    let th = t.param(params.theta());
    let force = model.coarse_rhs().force().map(|f| t.field(f));
    let mut v = t.field(&window[0]);
    let mut terms = Vec::with_capacity(n);
    for i in 1..=n {
        let mut k: Vec<Var> = Vec::with_capacity(tableau.stages());
        for s in 0..tableau.stages() {
            let mut x = v;
            for (j, kj) in k.iter().enumerate() {
                let a = tableau.a(s, j);
                if a != 0.0 {
                    x = t.axpy(x, dt * a, *kj)?;
                }
            }
            let ks = tape_rhs(&mut t, x, model, th, params, force)?;
            if t.value(ks).iter().any(|z| !z.is_finite()) {
                return Ok((PostLoss { value: BLOWUP_LOSS, blow_up: Some(format!("non-finite stage {} at step {i}", s + 1)) }, None));
            }
            k.push(ks);
        }
        for (s, ks) in k.iter().enumerate() {
            let b = tableau.b(s);
            if b != 0.0 {
                v = t.axpy(v, dt * b, *ks)?;
            }
        }
        let un = sq_norm(window[i].data());
        if un == 0.0 {
            return Err(Error::InvalidArgument("reference snapshot with zero norm".into()));
        }
        let u = t.field(&window[i]);
        let r = t.sub(v, u)?;
        let sq = t.sq_norm(r);
        terms.push(t.scale(sq, 1.0 / (un * n as f64)));
    }
    let out = t.sum(&terms)?;
    let value = t.scalar(out);
    if !value.is_finite() {
        return Ok((PostLoss { value: BLOWUP_LOSS, blow_up: Some("non-finite loss".into()) }, None));
    }
    match t.gradient_of(out, th) {
        Ok(g) => Ok((PostLoss { value, blow_up: None }, Some(g))),
        Err(Error::Autodiff(m)) => {
            warn!("gradient rejected: {m}");
            Ok((PostLoss { value, blow_up: Some(m) }, None))
        }
        Err(e) => Err(e),
    }
}

// ---------------------------------------------------------------------------
// loops

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub lr: f64,
    /// `None` for the row before the first step.
    pub train_loss: Option<f64>,
    pub validation_loss: Option<f64>,
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "iteration,lr,train_loss,validation_loss,wall_time";

impl MetricRow {
    pub fn csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|x| format!("{x:.10e}")).unwrap_or_default();
        format!("{},{:.6e},{},{},{:.3}", self.iteration, self.lr, opt(self.train_loss), opt(self.validation_loss), self.wall_time)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the lowest validation loss seen.
    pub params: ClosureParams,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub history: Vec<MetricRow>,
    /// Iterations whose step was skipped because the rollout blew up.
    pub rejected_steps: usize,
}

/// Where metrics and best-validation checkpoints go; both optional.
#[derive(Default)]
pub struct TrainSinks<'a> {
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint: Option<PathBuf>,
}

impl TrainSinks<'_> {
    fn row(&mut self, row: &MetricRow) -> Result<()> {
        if let Some(w) = self.metrics.as_mut() {
            writeln!(w, "{}", row.csv())?;
        }
        Ok(())
    }

    fn save(&self, p: &ClosureParams) -> Result<()> {
        if let Some(path) = &self.checkpoint {
            save_params(path, p)?;
        }
        Ok(())
    }
}

/// Shuffled epochs of item indices, one batch per iteration.
struct Batcher {
    items: usize,
    batch: usize,
    rng: Xoshiro256PlusPlus,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    fn new(items: usize, batch: usize, seed: u64) -> Self {
        Batcher { items, batch, rng: Xoshiro256PlusPlus::seed_from_u64(seed), order: Vec::new(), pos: 0 }
    }

    fn next(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch.min(self.items) {
            if self.pos == self.order.len() {
                self.order = (0..self.items).collect();
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn snapshot_pairs(trajs: &[FilteredTrajectory]) -> Vec<(&VectorField, &VectorField)> {
    trajs.iter().flat_map(|t| t.ubar.iter().zip(&t.commutator)).collect()
}

/// `(trajectory, start)` of every window of `n` steps, shifted by `stride`.
pub fn windows(trajs: &[FilteredTrajectory], n: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let mut s = 0;
        while s + n < t.len() {
            out.push((i, s));
            s += stride.max(1);
        }
    }
    out
}

fn check_dt(trajs: &[FilteredTrajectory]) -> Result<f64> {
    let dt = trajs.first().ok_or_else(|| Error::Dataset("no trajectories".into()))?.dt;
    if trajs.iter().any(|t| (t.dt - dt).abs() > 1e-12 * dt) {
        return Err(Error::Dataset("trajectories with different snapshot intervals".into()));
    }
    Ok(dt)
}

fn run_loop<G, V>(init: &ClosureParams, cfg: &TrainConfig, items: usize, mut batch_grad: G, mut validate: V, mut sinks: TrainSinks) -> Result<TrainOutcome>
where
    G: FnMut(&ClosureParams, &[usize]) -> Result<(f64, Option<Vec<f64>>)>,
    V: FnMut(&ClosureParams) -> Result<f64>,
{
    cfg.validate()?;
    let start = Instant::now();
    let mut theta = init.theta().to_vec();
    let mut adam = AdamState::new(theta.len());
    let mut batches = Batcher::new(items, cfg.batch_size, cfg.seed);
    let initial = validate(init)?;
    let mut best = (initial, init.clone());
    let mut history = Vec::new();
    let row0 = MetricRow { iteration: 0, lr: cfg.lr_start, train_loss: None, validation_loss: Some(initial), wall_time: 0.0 };
    sinks.row(&row0)?;
    history.push(row0);
    sinks.save(init)?;
    let mut rejected = 0;
    for it in 1..=cfg.iterations {
        let lr = cosine_lr(it - 1, cfg.iterations, cfg.lr_start, cfg.lr_end);
        let current = init.with_theta(theta.clone())?;
        let idx = batches.next();
        let (loss, g) = batch_grad(&current, &idx)?;
        match g {
            Some(mut g) => {
                if let Some(c) = cfg.clip_norm {
                    clip_norm(&mut g, c);
                }
                adam_step(&mut theta, &g, &mut adam, lr)?;
            }
            None => rejected += 1,
        }
        let val = if it % cfg.validate_every == 0 || it == cfg.iterations {
            let p = init.with_theta(theta.clone())?;
            let v = validate(&p)?;
            if v < best.0 {
                best = (v, p);
                sinks.save(&best.1)?;
            }
            info!("iteration {it}: train {loss:.4e}, validation {v:.4e}, best {:.4e}", best.0);
            Some(v)
        } else {
            None
        };
        let row = MetricRow { iteration: it, lr, train_loss: Some(loss), validation_loss: val, wall_time: start.elapsed().as_secs_f64() };
        sinks.row(&row)?;
        history.push(row);
    }
    Ok(TrainOutcome { params: best.1, initial_validation: initial, best_validation: best.0, history, rejected_steps: rejected })
}

/// Adam on the snapshot loss with cosine learning rate decay.
pub fn train_prior(data: &TrainingData, init: &ClosureParams, cfg: &TrainConfig, sinks: TrainSinks) -> Result<TrainOutcome> {
    let train = snapshot_pairs(&data.train);
    let valid = snapshot_pairs(&data.valid);
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Dataset("a-priori training needs train and validation snapshots".into()));
    }
    run_loop(
        init,
        cfg,
        train.len(),
        |p, idx| {
            let batch: Vec<_> = idx.iter().map(|&i| train[i]).collect();
            let (l, g) = loss_prior_grad(&batch, p)?;
            Ok((l, Some(g)))
        },
        |p| loss_prior(&valid, &Closure::Cnn(p.clone())),
        sinks,
    )
}

/// Mean trajectory loss over the given windows.
pub fn mean_post_loss(trajs: &[FilteredTrajectory], wins: &[(usize, usize)], n: usize, model: &LesModel, tableau: &RkTableau) -> Result<f64> {
    if wins.is_empty() {
        return Err(Error::Dataset(format!("no trajectory window of {n} steps")));
    }
    let mut s = 0.0;
    for &(i, st) in wins {
        let t = &trajs[i];
        s += loss_post(&t.ubar[st..=st + n], model, t.dt, tableau)?.value;
    }
    Ok(s / wins.len() as f64)
}

/// Fine-tuning through unrolled LES steps; Adam starts from fresh moments.
pub fn train_post(
    data: &TrainingData,
    init: &ClosureParams,
    model: &LesModel,
    tableau: &RkTableau,
    cfg: &TrainConfig,
    sinks: TrainSinks,
) -> Result<TrainOutcome> {
    check_dt(&data.train)?;
    let n = cfg.n_unroll;
    let train_w = windows(&data.train, n, 1);
    let mut valid_w = windows(&data.valid, n, n);
    valid_w.truncate(cfg.validation_windows);
    if train_w.is_empty() || valid_w.is_empty() {
        return Err(Error::Dataset(format!("trajectories too short for n_unroll = {n}")));
    }
    let with = |p: &ClosureParams| LesModel::new(model.grid(), *model.params(), model.formulation(), Closure::Cnn(p.clone()));
    run_loop(
        init,
        cfg,
        train_w.len(),
        |p, idx| {
            let m = with(p)?;
            let w = 1.0 / idx.len() as f64;
            let mut loss = 0.0;
            let mut grad = vec![0.0; p.theta().len()];
            for &k in idx {
                let (ti, st) = train_w[k];
                let t = &data.train[ti];
                let (l, g) = loss_post_grad(&t.ubar[st..=st + n], &m, p, t.dt, tableau)?;
                loss += w * l.value;
                match g {
                    Some(g) => grad.iter_mut().zip(&g).for_each(|(a, b)| *a += w * b),
                    None => {
                        warn!("rollout rejected: {}", l.blow_up.unwrap_or_default());
                        return Ok((loss, None));
                    }
                }
            }
            Ok((loss, Some(grad)))
        },
        |p| mean_post_loss(&data.valid, &valid_w, n, &with(p)?, tableau),
        sinks,
    )
}

/// `{0, 1/1000, ..., 300/1000}`.
pub fn default_smagorinsky_grid() -> Vec<f64> {
    (0..=300).map(|i| i as f64 / 1000.0).collect()
}

/// Result of the coefficient search.
#[derive(Clone, Debug)]
pub struct SearchResult {
    pub theta: f64,
    pub loss: f64,
    pub losses: Vec<(f64, f64)>,
}

/// Trajectory-loss argmin over `candidates` on the training windows of
/// `n_unroll` steps (non-overlapping); ties go to the smaller coefficient.
pub fn smagorinsky_search(
    train: &[FilteredTrajectory],
    model: &LesModel,
    tableau: &RkTableau,
    n_unroll: usize,
    candidates: &[f64],
) -> Result<SearchResult> {
    check_dt(train)?;
    let wins = windows(train, n_unroll, n_unroll);
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, f64)> = None;
    let mut losses = Vec::with_capacity(sorted.len());
    for &th in &sorted {
        let m = LesModel::new(model.grid(), *model.params(), model.formulation(), Closure::Smagorinsky(th))?;
        let l = mean_post_loss(train, &wins, n_unroll, &m, tableau)?;
        losses.push((th, l));
        if best.is_none_or(|(_, b)| l < b) {
            best = Some((th, l));
        }
    }
    let (theta, loss) = best.ok_or_else(|| Error::InvalidArgument("no Smagorinsky candidates".into()))?;
    Ok(SearchResult { theta, loss, losses })
}

/// Rollout of the model from `traj.ubar[0]` for `steps` steps at the snapshot interval.
pub fn rollout(traj: &FilteredTrajectory, model: &LesModel, tableau: &RkTableau, steps: usize) -> Result<Vec<VectorField>> {
    let mut v = traj.ubar[0].clone();
    let mut out = vec![v.clone()];
    for _ in 0..steps {
        v = les_step(&v, model, traj.dt, tableau)?;
        out.push(v.clone());
    }
    Ok(out)
}

pub fn write_metrics_header(w: &mut dyn Write) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    Ok(())
}

/// Convenience for callers that keep the checkpoint next to the metrics.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.cnp")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::closure::{init_params, CnnArchitecture};
    use crate::filters::{filtered_pair, CoarseningMap, FilterKind};
    use crate::grid::Grid;
    use crate::initial_conditions::{random_spectral_field, SpectrumSpec};
    use crate::operators::{BodyForce, FlowParams, Rhs};
    use crate::testutil::{random_divfree, random_vec, random_vector};
    use crate::timestepping::{rk_step, wray3_tableau};

    fn flow() -> FlowParams {
        FlowParams::new(1e-3, BodyForce::None).unwrap()
    }

    /// Filtered DNS trajectory with the stage commutators of every step.
    fn tiny_dataset(seed: u64, steps: usize) -> (FilteredTrajectory, Vec<Vec<VectorField>>) {
        let fine = Grid::unit(2, 64).unwrap();
        let map = CoarseningMap::uniform(&fine, 16).unwrap();
        let fr = Rhs::new(&fine, flow());
        let cr = Rhs::new(map.coarse(), flow());
        let mut u = random_spectral_field(&fine, &SpectrumSpec { peak_wavenumber: 5.0, seed }).unwrap();
        let dt = 4e-3;
        let tab = wray3_tableau();
        let mut traj = FilteredTrajectory { dt, times: vec![], ubar: vec![], commutator: vec![] };
        let mut stages = Vec::new();
        for i in 0..=steps {
            let pf = fr.eval_projected(&u);
            let (ub, c) = filtered_pair(&u, &pf, &map, FilterKind::Fa, &cr).unwrap();
            traj.times.push(i as f64 * dt);
            traj.ubar.push(ub);
            traj.commutator.push(c);
            if i < steps {
                let mut cs = Vec::new();
                u = rk_step(
                    &u,
                    dt,
                    &tab,
                    |x| {
                        let pf = fr.eval_projected(x);
                        cs.push(filtered_pair(x, &pf, &map, FilterKind::Fa, &cr)?.1);
                        Ok(pf)
                    },
                    false,
                )
                .unwrap();
                stages.push(cs);
            }
        }
        (traj, stages)
    }

    #[test]
    fn prior_loss_examples() {
        let g = Grid::unit(2, 8).unwrap();
        let u = random_vector(&g, 1);
        let c = random_vector(&g, 2);
        let big = c.scale(1e6);
        assert_eq!(loss_prior(&[(&u, &c), (&u, &big)], &Closure::None).unwrap(), 1.0);
        assert!(loss_prior(&[(&u, &VectorField::zeros(&g))], &Closure::None).is_err());
        assert!(loss_prior(&[], &Closure::None).is_err());
        assert_eq!(prior_loss_of(&[(&c, &c)]).unwrap(), 0.0);
        assert!((prior_loss_of(&[(&c.scale(2.0), &c)]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn prior_gradient_matches_finite_differences() {
        let g = Grid::unit(2, 16).unwrap();
        let arch = CnnArchitecture::default_for(2);
        let p = init_params(&arch, 11).unwrap();
        let u = random_divfree(&g, 3);
        let c = random_vector(&g, 4).scale(0.1);
        let u2 = random_divfree(&g, 5);
        let batch = [(&u, &c), (&u2, &c)];
        let (l, gr) = loss_prior_grad(&batch, &p).unwrap();
        assert!((l - loss_prior(&batch, &Closure::Cnn(p.clone())).unwrap()).abs() < 1e-13 * l);
        let coords: Vec<usize> = random_vec(6, 20).iter().map(|x| ((x + 1.0) / 2.0 * p.theta().len() as f64) as usize).collect();
        for i in coords {
            let h = 1e-6;
            let f = |d: f64| {
                let mut th = p.theta().to_vec();
                th[i] += d;
                loss_prior(&batch, &Closure::Cnn(p.with_theta(th).unwrap())).unwrap()
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert!((fd - gr[i]).abs() <= 1e-6 * gr[i].abs().max(1e-4), "{i}: {fd} vs {}", gr[i]);
        }
    }

    #[test]
    fn post_gradient_matches_finite_differences() {
        let (traj, _) = tiny_dataset(1, 3);
        let arch = CnnArchitecture::default_for(2);
        let p = init_params(&arch, 12).unwrap();
        let tab = wray3_tableau();
        for form in [Formulation::Dcf, Formulation::Dif] {
            let m = LesModel::new(traj.ubar[0].grid(), flow(), form, Closure::Cnn(p.clone())).unwrap();
            let (l, gr) = loss_post_grad(&traj.ubar, &m, &p, traj.dt, &tab).unwrap();
            let gr = gr.unwrap();
            let plain = loss_post(&traj.ubar, &m, traj.dt, &tab).unwrap();
            assert!((l.value - plain.value).abs() <= 1e-12 * plain.value);
            let coords: Vec<usize> = random_vec(7, 20).iter().map(|x| ((x + 1.0) / 2.0 * p.theta().len() as f64) as usize).collect();
            for i in coords {
                let h = 1e-6;
                let f = |d: f64| {
                    let mut th = p.theta().to_vec();
                    th[i] += d;
                    let q = p.with_theta(th).unwrap();
                    let mm = LesModel::new(m.grid(), flow(), form, Closure::Cnn(q)).unwrap();
                    loss_post(&traj.ubar, &mm, traj.dt, &tab).unwrap().value
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                assert!((fd - gr[i]).abs() <= 1e-5 * gr[i].abs().max(1e-4), "{form} {i}: {fd} vs {}", gr[i]);
            }
        }
    }

    #[test]
    fn oracle_post_loss_vanishes() {
        let (traj, stages) = tiny_dataset(2, 6);
        let m = LesModel::new(traj.ubar[0].grid(), flow(), Formulation::Dcf, Closure::None).unwrap();
        let tab = wray3_tableau();
        let l = loss_post_with(&traj.ubar, &m, traj.dt, &tab, |i, s, _| Ok(Some(stages[i][s].clone()))).unwrap();
        assert!(l.value <= 1e-10, "{}", l.value);
        let one = loss_post_with(&traj.ubar[..2], &m, traj.dt, &tab, |i, s, _| Ok(Some(stages[i][s].clone()))).unwrap();
        assert!(one.value <= 1e-10);
        assert_eq!(TrainConfig::default().n_unroll, 50);
    }

    #[test]
    fn blow_up_gives_sentinel() {
        let g = Grid::unit(2, 16).unwrap();
        let big = random_divfree(&g, 9).scale(1e3);
        let window = vec![big.clone(); 30];
        let m = LesModel::new(&g, FlowParams::new(0.0, BodyForce::None).unwrap(), Formulation::Dif, Closure::None).unwrap();
        let l = loss_post(&window, &m, 1.0, &wray3_tableau()).unwrap();
        assert_eq!(l.value, BLOWUP_LOSS);
        assert!(l.blow_up.is_some());
    }

    fn small_data() -> TrainingData {
        let (a, _) = tiny_dataset(3, 4);
        let (b, _) = tiny_dataset(4, 4);
        TrainingData { train: vec![a], valid: vec![b] }
    }

    #[test]
    fn zero_budget_returns_initial() {
        let data = small_data();
        let p = init_params(&CnnArchitecture::uniform(2, 1, 4, 1), 1).unwrap();
        let cfg = TrainConfig { iterations: 0, ..Default::default() };
        assert_eq!(train_prior(&data, &p, &cfg, TrainSinks::default()).unwrap().params, p);
        let m = LesModel::new(data.train[0].ubar[0].grid(), flow(), Formulation::Dcf, Closure::None).unwrap();
        let cfg = TrainConfig { iterations: 0, n_unroll: 2, ..TrainConfig::post() };
        assert_eq!(train_post(&data, &p, &m, &wray3_tableau(), &cfg, TrainSinks::default()).unwrap().params, p);
    }

    #[test]
    fn prior_training_improves_and_is_deterministic() {
        let data = small_data();
        let p = init_params(&CnnArchitecture::uniform(2, 1, 6, 2), 2).unwrap();
        let cfg = TrainConfig { iterations: 40, batch_size: 2, validate_every: 5, lr_start: 1e-2, ..Default::default() };
        let mut buf = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        let sinks = TrainSinks { metrics: Some(&mut buf), checkpoint: Some(checkpoint_path(dir.path())) };
        let a = train_prior(&data, &p, &cfg, sinks).unwrap();
        assert!(a.best_validation < a.initial_validation);
        for r in &a.history {
            if let Some(v) = r.validation_loss {
                assert!(a.best_validation <= v);
            }
        }
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 41);
        assert_eq!(crate::closure::load_params(&checkpoint_path(dir.path())).unwrap(), a.params);
        let b = train_prior(&data, &p, &cfg, TrainSinks::default()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn post_training_does_not_increase_validation() {
        let data = small_data();
        let p = init_params(&CnnArchitecture::uniform(2, 1, 4, 1), 3).unwrap();
        let m = LesModel::new(data.train[0].ubar[0].grid(), flow(), Formulation::Dcf, Closure::None).unwrap();
        let cfg = TrainConfig { iterations: 6, n_unroll: 2, validate_every: 2, ..TrainConfig::post() };
        let out = train_post(&data, &p, &m, &wray3_tableau(), &cfg, TrainSinks::default()).unwrap();
        assert!(out.best_validation <= out.initial_validation);
    }

    #[test]
    fn search_prefers_smallest_on_ties() {
        // zero flow: every candidate gives the same (zero) error
        let g = Grid::unit(2, 8).unwrap();
        let u = VectorField::from_fn(&g, |a, _| if a == 0 { 1.0 } else { 0.0 });
        let traj = FilteredTrajectory { dt: 0.01, times: vec![0.0, 0.01, 0.02], ubar: vec![u.clone(); 3], commutator: vec![VectorField::zeros(&g); 3] };
        let m = LesModel::new(&g, FlowParams::new(0.0, BodyForce::None).unwrap(), Formulation::Dcf, Closure::None).unwrap();
        let r = smagorinsky_search(&[traj], &m, &wray3_tableau(), 2, &[0.3, 0.1, 0.0]).unwrap();
        assert_eq!(r.theta, 0.0);
        assert_eq!(default_smagorinsky_grid().len(), 301);
        assert_eq!(default_smagorinsky_grid()[1], 0.001);
    }

    #[test]
    fn batcher_covers_epochs() {
        let mut b = Batcher::new(5, 2, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| b.next()).collect();
        seen.truncate(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }
}
