use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;

use dcles::analysis::energy_spectrum;
use dcles::closure::{init_params, load_params, save_params, Closure};
use dcles::les::{divergence_rms, run_les, total_energy, Formulation, LesModel};
use dcles::operators::relative_divergence;
use dcles::pipeline::{generate_dataset, load_field, load_trajectories, save_field, Manifest, Split, StoredField};
use dcles::timestepping::{Integration, StepControl};
use dcles::training::{
    checkpoint_path, smagorinsky_search, train_post, train_prior, write_metrics_header, FilteredTrajectory, LossKind, TrainSinks, TrainingData,
};

use crate::config::{ClosureKind, RunConfig};
use crate::Failure;

pub fn generate(cfg: &RunConfig, run: &Path) -> Result<()> {
    let out = run.join("dataset");
    let m = generate_dataset(&cfg.dataset_config(), &out)?;
    let snaps: usize = m.trajectories.iter().map(|t| t.snapshots.len()).sum();
    info!("wrote {} trajectories, {snaps} snapshots to {}", m.trajectories.len(), out.display());
    Ok(())
}

struct Data {
    manifest: Manifest,
    coarse: usize,
}

fn open_dataset(cfg: &RunConfig) -> Result<(Data, PathBuf)> {
    let dir = cfg.dataset_path()?.to_path_buf();
    let manifest = Manifest::load(&dir)?;
    let coarse = match cfg.dataset.coarse {
        Some(c) => c,
        None => *manifest.config.coarse.first().context("dataset has no coarse grids")?,
    };
    if !manifest.config.coarse.contains(&coarse) {
        bail!("dataset has no {coarse}-cell coarse grid (available: {:?})", manifest.config.coarse);
    }
    if !manifest.config.filters.contains(&cfg.dataset.filter) {
        bail!("dataset has no {} fields", cfg.dataset.filter);
    }
    Ok((Data { manifest, coarse }, dir))
}

fn load_split(cfg: &RunConfig, d: &Data, dir: &Path, split: Split) -> Result<Vec<FilteredTrajectory>> {
    Ok(load_trajectories(&d.manifest, dir, split, d.coarse, cfg.dataset.filter)?)
}

fn cnn_start(cfg: &RunConfig, dim: usize) -> Result<dcles::closure::ClosureParams> {
    match cfg.params_path()? {
        Some(p) => {
            info!("starting from {}", p.display());
            Ok(load_params(p)?)
        }
        None => Ok(init_params(&cfg.closure.architecture(dim), cfg.closure.init_seed)?),
    }
}

pub fn train(cfg: &RunConfig, run: &Path, loss: LossKind) -> Result<()> {
    let (d, dir) = open_dataset(cfg)?;
    let data = TrainingData { train: load_split(cfg, &d, &dir, Split::Train)?, valid: load_split(cfg, &d, &dir, Split::Valid)? };
    let flow = d.manifest.config.flow()?;
    let grid = *data.train.first().context("no training trajectories")?.ubar[0].grid();
    let tableau = d.manifest.config.scheme.tableau();
    let tc = cfg.training.for_loss(loss);

    if cfg.closure.kind == ClosureKind::Smagorinsky {
        let n = cfg.training.smagorinsky_candidates;
        let candidates: Vec<f64> = (0..n).map(|i| 0.3 * i as f64 / (n - 1) as f64).collect();
        // a trajectory loss, so the rollout settings of the post stage apply
        let post = cfg.training.for_loss(LossKind::Post);
        let model = LesModel::new(&grid, flow, post.formulation, Closure::None)?;
        let res = smagorinsky_search(&data.train, &model, &tableau, post.n_unroll, &candidates)?;
        let mut w = BufWriter::new(File::create(run.join("smagorinsky.csv"))?);
        writeln!(w, "theta,loss")?;
        for (th, l) in &res.losses {
            writeln!(w, "{th:.6},{l:.10e}")?;
        }
        w.flush()?;
        fs::write(run.join("theta.txt"), format!("{}\n", res.theta))?;
        info!("best theta {} (loss {:.4e})", res.theta, res.loss);
        return Ok(());
    }
    if cfg.closure.kind != ClosureKind::Cnn {
        bail!("train needs closure.kind = \"cnn\" or \"smagorinsky\"");
    }

    let init = cnn_start(cfg, grid.dim())?;
    let mut metrics = BufWriter::new(File::create(run.join("metrics.csv"))?);
    write_metrics_header(&mut metrics)?;
    let sinks = TrainSinks { metrics: Some(&mut metrics), checkpoint: Some(checkpoint_path(run)) };
    let out = match loss {
        LossKind::Prior => train_prior(&data, &init, &tc, sinks)?,
        LossKind::Post => {
            let model = LesModel::new(&grid, flow, tc.formulation, Closure::Cnn(init.clone()))?;
            train_post(&data, &init, &model, &tableau, &tc, sinks)?
        }
    };
    metrics.flush()?;
    save_params(&run.join("params.cnp"), &out.params)?;
    info!(
        "validation loss {:.4e} -> {:.4e}; {} rejected steps",
        out.initial_validation, out.best_validation, out.rejected_steps
    );
    if !out.best_validation.is_finite() {
        return Err(Failure::Numerical("validation loss is not finite".into()).into());
    }
    Ok(())
}

fn closure_from(cfg: &RunConfig, kind: ClosureKind, dim: usize) -> Result<Closure> {
    Ok(match kind {
        ClosureKind::None => Closure::None,
        ClosureKind::Smagorinsky => Closure::Smagorinsky(cfg.closure.theta.context("closure.theta is required for the smagorinsky closure")?),
        ClosureKind::Cnn => {
            let p = cfg.params_path()?.context("closure.params is required for the cnn closure")?;
            let params = load_params(p)?;
            if params.arch().dim != dim {
                bail!("closure parameters are {}-dimensional, the dataset is {dim}-dimensional", params.arch().dim);
            }
            Closure::Cnn(params)
        }
    })
}

pub fn les(cfg: &RunConfig, run: &Path, kind: ClosureKind, formulation: Formulation) -> Result<()> {
    let (d, dir) = open_dataset(cfg)?;
    let trajs = load_split(cfg, &d, &dir, cfg.les.split)?;
    let reference = trajs
        .get(cfg.les.trajectory)
        .with_context(|| format!("split {:?} has {} trajectories, asked for index {}", cfg.les.split, trajs.len(), cfg.les.trajectory))?;
    let v0 = &reference.ubar[0];
    let grid = *v0.grid();
    let model = LesModel::new(&grid, d.manifest.config.flow()?, formulation, closure_from(cfg, kind, grid.dim())?)?;
    let control = cfg.les.control.unwrap_or(StepControl::Fixed { dt: reference.dt });
    let opts = Integration::new(control, d.manifest.config.scheme);
    let t0 = reference.times[0];
    let t_end = cfg.les.t_end.unwrap_or(reference.times.last().copied().unwrap_or(t0) - t0);

    let fields = run.join("fields");
    fs::create_dir_all(&fields)?;
    let mut series = BufWriter::new(File::create(run.join("les.csv"))?);
    writeln!(series, "step,time,energy,divergence_rms,relative_error")?;
    let mut io_err: Option<anyhow::Error> = None;
    let tol = 1e-9 * reference.dt;
    let result = run_les(v0, &model, &opts, t_end, |step, t, v| {
        if io_err.is_some() {
            return;
        }
        let err = reference
            .times
            .iter()
            .position(|&s| (s - t0 - t).abs() <= tol)
            .map(|i| format!("{:.10e}", v.sub(&reference.ubar[i]).norm(dcles::grid::Weighting::None) / reference.ubar[i].norm(dcles::grid::Weighting::None)))
            .unwrap_or_default();
        let mut write = || -> Result<()> {
            writeln!(series, "{step},{:.10e},{:.10e},{:.6e},{err}", t0 + t, total_energy(v), divergence_rms(v))?;
            if cfg.les.save_every > 0 && step % cfg.les.save_every == 0 {
                save_field(&StoredField::Vector(v.clone()), d.manifest.config.precision, &fields.join(format!("v_{step:06}.sgf")))?;
            }
            Ok(())
        };
        if let Err(e) = write() {
            io_err = Some(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e);
    }
    series.flush()?;
    save_field(&StoredField::Vector(result.state.clone()), d.manifest.config.precision, &run.join("final.sgf"))?;
    match result.unstable {
        Some(msg) => Err(Failure::Numerical(format!("LES stopped after {} steps: {msg}", result.steps)).into()),
        None => {
            info!("{} steps to t = {:.4}", result.steps, t0 + result.time);
            Ok(())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Quantity {
    Spectrum,
    Energy,
    Divergence,
}

fn analysis_inputs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in &cfg.analysis.inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "sgf"))
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            bail!("analysis input {} does not exist", p.display());
        }
    }
    if files.is_empty() {
        bail!("analysis.inputs names no field files");
    }
    Ok(files)
}

pub fn analyze(cfg: &RunConfig, run: &Path, what: Quantity) -> Result<()> {
    let files = analysis_inputs(cfg)?;
    if what == Quantity::Spectrum {
        let mut stems: Vec<_> = files.iter().filter_map(|f| f.file_stem()).collect();
        stems.sort();
        if stems.windows(2).any(|w| w[0] == w[1]) {
            bail!("analysis inputs share file names, their spectra would collide");
        }
    }
    let mut table = match what {
        Quantity::Spectrum => None,
        Quantity::Energy => Some((BufWriter::new(File::create(run.join("energy.csv"))?), "file,energy")),
        Quantity::Divergence => Some((BufWriter::new(File::create(run.join("divergence.csv"))?), "file,divergence_rms,relative_divergence")),
    };
    if let Some((w, header)) = table.as_mut() {
        writeln!(w, "{header}")?;
    }
    for f in &files {
        let v = load_field(f)?.0.into_vector().with_context(|| format!("{} is not a velocity field", f.display()))?;
        let name = f.display();
        match (what, table.as_mut()) {
            (Quantity::Spectrum, _) => {
                let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "field".into());
                let s = energy_spectrum(&v, cfg.analysis.ratio);
                s.write_csv(BufWriter::new(File::create(run.join(format!("spectrum_{stem}.csv")))?))?;
            }
            (Quantity::Energy, Some((w, _))) => writeln!(w, "{name},{:.17e}", total_energy(&v))?,
            (Quantity::Divergence, Some((w, _))) => writeln!(w, "{name},{:.6e},{:.6e}", divergence_rms(&v), relative_divergence(&v))?,
            _ => unreachable!(),
        }
    }
    if let Some((mut w, _)) = table {
        w.flush()?;
    }
    info!("analyzed {} field files", files.len());
    Ok(())
}
