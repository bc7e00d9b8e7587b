//! Subcommand implementations. Each writes its outputs plus one `experiment.json`
//! into its output directory and returns a one-line JSON summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use dynacq::data::{gen_dataset, load_dataset, save_dataset, DynVolume, PhantomSpec};
use dynacq::metrics::{metric_report, transition_report, MetricReport, TransitionReport};
use dynacq::pipeline::{
    dataset_mu, evaluate_plain, evaluate_stacked, history_csv, split_train_val, train_main, train_refine, Model,
    MuMode, MuStats, StackedEval, TrainConfig, TrainOutcome,
};
use dynacq::recon::{
    export_attention, load_checkpoint, recon_forward, save_checkpoint, AttentionRegion, ReconConfig,
};
use dynacq::trajectory::{export_trajectory, import_trajectory, PhysicsConfig};

use crate::args::*;
use crate::manifest::{hash_dir, ExperimentManifest};
use crate::{resolve, CliError, CliResult};

pub const HISTORY_FILE: &str = "history.csv";
pub const VIOLATIONS_FILE: &str = "step_violations.csv";
pub const REFINED_DIR: &str = "refined";

/// Configuration snapshot stored in a run's manifest; `refine` reads it back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    pub train: TrainConfig,
    pub physics: PhysicsConfig,
    pub recon: ReconConfig,
    #[serde(default)]
    pub stats: Option<MuStats>,
}

fn usage_if_invalid(r: dynacq::Result<()>) -> CliResult<()> {
    r.map_err(CliError::usage)
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn load_data(dir: &Path) -> CliResult<Vec<DynVolume>> {
    Ok(load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?)
}

fn load_model(run: &Path) -> CliResult<Model> {
    let (rcfg, params) =
        load_checkpoint(run).with_context(|| format!("loading checkpoint from {}", run.display()))?;
    let (trajectory, header) =
        import_trajectory(run).with_context(|| format!("loading trajectory from {}", run.display()))?;
    let bounds = header
        .bounds
        .ok_or_else(|| anyhow!("trajectory in {} has no kinematic bounds", run.display()))?;
    Ok(Model {
        rcfg,
        params,
        trajectory,
        bounds,
    })
}

fn save_run(dir: &Path, outcome: &TrainOutcome) -> CliResult<()> {
    create_dir(dir)?;
    let m = &outcome.model;
    save_checkpoint(dir, &m.rcfg, &m.params)?;
    export_trajectory(&m.trajectory, Some(&m.bounds), dir)?;
    fs::write(dir.join(HISTORY_FILE), history_csv(&outcome.history))?;
    let mut v = String::from("step,max_constraint_violation\n");
    for (i, x) in outcome.step_violations.iter().enumerate() {
        v.push_str(&format!("{},{:.17e}\n", i, x));
    }
    fs::write(dir.join(VIOLATIONS_FILE), v)?;
    Ok(())
}

fn select(data: &[DynVolume], split: SplitArg) -> CliResult<Vec<DynVolume>> {
    match split {
        SplitArg::Val => Ok(split_train_val(data)?.1),
        SplitArg::All => Ok(data.to_vec()),
    }
}

fn json_line(v: serde_json::Value) -> CliResult<String> {
    Ok(serde_json::to_string(&v)?)
}

pub fn gen_data(a: GenDataArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    if a.count == 0 {
        return Err(CliError::usage("count must be >= 1"));
    }
    let spec = PhantomSpec {
        height: a.grid,
        width: a.grid,
        frames: a.frames,
        noise_sigma: a.noise,
        seed: a.seed,
        ..Default::default()
    };
    usage_if_invalid(spec.validate())?;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::usage(format!("noise {} must be >= 0", a.noise)));
    }
    create_dir(&a.out)?;
    let vols = gen_dataset(&spec, a.count)?;
    save_dataset(&a.out, &vols)?;
    ExperimentManifest::new("gen-data", a.seed, json!({ "args": a, "phantom": spec }), BTreeMap::new())?
        .write(&a.out)?;
    json_line(json!({ "out": a.out, "count": a.count }))
}

pub fn train(a: TrainArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    let data = load_data(&a.data)?;
    let first = data.first().ok_or_else(|| anyhow!("dataset {} is empty", a.data.display()))?;
    let window = match a.window.as_slice() {
        [t, h, w] => (*t, *h, *w),
        other => return Err(CliError::usage(format!("window needs 3 values, got {:?}", other))),
    };
    let tcfg = TrainConfig {
        epochs_main: a.epochs,
        lr_traj: a.lr_traj,
        lr_net: a.lr_net,
        batch: a.batch,
        seed: a.seed,
        frames_k: a.frames_k,
        shots: a.shots,
        points: a.points_per_shot,
        traj: a.traj.into(),
        ..Default::default()
    };
    let pcfg = PhysicsConfig {
        g_max: a.g_max,
        s_max: a.s_max,
        dt: a.dt,
        fov: a.fov,
        grid: (first.height(), first.width()),
        ..Default::default()
    };
    let rcfg = ReconConfig {
        channels: a.channels,
        n_blocks: a.blocks,
        heads: a.heads,
        window,
        mlp_ratio: a.mlp_ratio,
    };
    usage_if_invalid(tcfg.validate())?;
    usage_if_invalid(pcfg.validate())?;
    usage_if_invalid(rcfg.validate())?;
    if first.frames() % a.frames_k != 0 {
        return Err(CliError::usage(format!(
            "dataset frames {} not divisible by frames_k {}",
            first.frames(),
            a.frames_k
        )));
    }

    let mut inputs = BTreeMap::new();
    hash_dir("data", &a.data, &mut inputs)?;
    let outcome = train_main(&data, &tcfg, &pcfg, &rcfg)?;
    save_run(&a.out, &outcome)?;
    let cfg = RunConfig {
        data: a.data.clone(),
        train: tcfg,
        physics: pcfg,
        recon: rcfg,
        stats: None,
    };
    ExperimentManifest::new("train", a.seed, json!({ "args": a, "run": cfg }), inputs)?.write(&a.out)?;
    let last = outcome.history.last();
    json_line(json!({
        "out": a.out,
        "epochs": outcome.history.len(),
        "final_val_loss": last.map(|r| r.val_loss),
        "max_constraint_violation": outcome.step_violations.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }))
}

fn run_config(run: &Path) -> CliResult<RunConfig> {
    let m = ExperimentManifest::read(run)?;
    let v = m
        .config
        .get("run")
        .cloned()
        .ok_or_else(|| anyhow!("{} does not hold a training run", run.display()))?;
    Ok(serde_json::from_value(v).with_context(|| format!("run config in {}", run.display()))?)
}

pub fn refine(a: RefineArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    let prior = load_model(&a.run)?;
    let mut cfg = run_config(&a.run)?;
    let data_dir = a.data.clone().unwrap_or_else(|| cfg.data.clone());
    let out = a.out.clone().unwrap_or_else(|| a.run.join(REFINED_DIR));
    let tcfg = TrainConfig {
        epochs_refine: a.epochs_refine,
        lambda_ref: a.lambda_ref,
        refine_lr_scale: a.lr_scale,
        freeze_net_refine: a.freeze_net,
        mu_mode: a.mu_mode.into(),
        ..cfg.train.clone()
    };
    usage_if_invalid(tcfg.validate())?;
    let data = load_data(&data_dir)?;
    let k = prior.trajectory.frames();
    if let Some(v) = data.first() {
        if v.frames() % (2 * k) != 0 {
            return Err(CliError::usage(format!("dataset frames {} not divisible by 2k = {}", v.frames(), 2 * k)));
        }
    }
    let (train, _) = split_train_val(&data)?;
    let stats = dataset_mu(&train, k, tcfg.mu_mode)?;

    let mut inputs = BTreeMap::new();
    hash_dir("data", &data_dir, &mut inputs)?;
    hash_dir("prior", &a.run, &mut inputs)?;
    let outcome = train_refine(&data, &tcfg, &stats, &prior)?;
    save_run(&out, &outcome)?;
    fs::write(out.join("mu_stats.json"), serde_json::to_string_pretty(&stats)?)?;
    cfg.data = data_dir;
    cfg.train = tcfg;
    cfg.stats = Some(stats);
    ExperimentManifest::new("refine", cfg.train.seed, json!({ "args": a, "run": cfg }), inputs)?.write(&out)?;
    json_line(json!({
        "out": out,
        "mu_x": stats.mu_x,
        "final_val_loss": outcome.history.last().map(|r| r.val_loss),
    }))
}

#[derive(Serialize)]
struct EvalSummary {
    volumes: usize,
    mse: f64,
    psnr: Option<f64>,
    vif: Option<f64>,
    fsim: Option<f64>,
    reports: Vec<Option<MetricReport>>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(pairs: &[(DynVolume, DynVolume)]) -> CliResult<EvalSummary> {
    let mut reports = Vec::new();
    let mut mse = 0.0;
    for (x, r) in pairs {
        mse += dynacq::pipeline::loss_main(x, r)?;
        let ok = x.height() >= dynacq::metrics::VIF_MIN_SIDE && x.width() >= dynacq::metrics::VIF_MIN_SIDE;
        reports.push(if ok { Some(metric_report(x, r)?) } else { None });
    }
    let got: Vec<&MetricReport> = reports.iter().flatten().collect();
    Ok(EvalSummary {
        volumes: pairs.len(),
        mse: mse / pairs.len().max(1) as f64,
        psnr: mean(&got.iter().filter_map(|m| m.psnr).collect::<Vec<_>>()),
        vif: mean(&got.iter().map(|m| m.vif).collect::<Vec<_>>()),
        fsim: mean(&got.iter().map(|m| m.fsim).collect::<Vec<_>>()),
        reports,
    })
}

fn write_frame_csvs(out: &Path, reports: &[Option<MetricReport>]) -> CliResult<()> {
    for (i, r) in reports.iter().enumerate() {
        if let Some(r) = r {
            fs::write(out.join(format!("frames_vol{}.csv", i)), r.frames_csv())?;
        }
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    let model = load_model(&a.run)?;
    let data = load_data(&a.data)?;
    let val = select(&data, a.split)?;
    let k = model.trajectory.frames();
    let mut pairs = Vec::new();
    for z in &val {
        if z.frames() % k != 0 {
            return Err(CliError::usage(format!("volume frames {} not divisible by k = {}", z.frames(), k)));
        }
        let parts = z.partition(k)?.iter().map(|u| evaluate_plain(&model, u)).collect::<dynacq::Result<Vec<_>>>()?;
        pairs.push((DynVolume::concat(&parts)?, z.clone()));
    }
    let summary = summarize(&pairs)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    write_frame_csvs(&a.out, &summary.reports)?;
    let mut inputs = BTreeMap::new();
    hash_dir("data", &a.data, &mut inputs)?;
    hash_dir("run", &a.run, &mut inputs)?;
    ExperimentManifest::new("eval", 0, json!({ "args": a }), inputs)?.write(&a.out)?;
    json_line(json!({ "out": a.out, "mse": summary.mse, "psnr": summary.psnr, "vif": summary.vif, "fsim": summary.fsim }))
}

#[derive(Serialize)]
struct StackSummary {
    total_frames: usize,
    k: usize,
    /// Mean over validation volumes of each transition's `mu`.
    mean_mu: Vec<f64>,
    transitions: TransitionReport,
    baseline_mean_mu: Option<Vec<f64>>,
    metrics: EvalSummary,
    volumes: Vec<StackedEval>,
}

fn stacked_mu(model: &Model, vols: &[DynVolume], mode: MuMode) -> CliResult<(Vec<f64>, Vec<StackedEval>)> {
    let evals = vols
        .iter()
        .map(|z| evaluate_stacked(model, z, mode))
        .collect::<dynacq::Result<Vec<_>>>()?;
    let n = evals[0].mu.len();
    let mut mu = vec![0.0; n];
    for e in &evals {
        for (m, v) in mu.iter_mut().zip(&e.mu) {
            *m += v / evals.len() as f64;
        }
    }
    Ok((mu, evals))
}

pub fn stack_eval(a: StackEvalArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    if a.total_frames < 1 {
        return Err(CliError::usage("total_frames must be >= 1"));
    }
    let model = load_model(&a.run)?;
    let data = load_data(&a.data)?;
    let val = select(&data, a.split)?;
    if val[0].frames() < a.total_frames {
        return Err(CliError::usage(format!(
            "total_frames {} exceeds the dataset's {} frames",
            a.total_frames,
            val[0].frames()
        )));
    }
    if a.total_frames < 2 {
        return Err(CliError::usage("stacked evaluation needs total_frames >= 2 for mu"));
    }
    let vols = val
        .iter()
        .map(|z| z.frames_range(0, a.total_frames))
        .collect::<dynacq::Result<Vec<_>>>()?;
    let mode: MuMode = a.mu_mode.into();
    let k = model.trajectory.frames();
    let (mean_mu, evals) = stacked_mu(&model, &vols, mode)?;
    let baseline_mean_mu = match &a.baseline {
        Some(b) => Some(stacked_mu(&load_model(b)?, &vols, mode)?.0),
        None => None,
    };
    let transitions = transition_report(&mean_mu, k, baseline_mean_mu.as_deref()).map_err(CliError::usage)?;
    let recon: Vec<DynVolume> = evals.iter().filter_map(|e| e.recon.clone()).collect();
    let pairs: Vec<(DynVolume, DynVolume)> = recon.iter().cloned().zip(vols.iter().cloned()).collect();
    let metrics = summarize(&pairs)?;

    create_dir(&a.out)?;
    save_dataset(a.out.join("recon"), &recon)?;
    fs::write(a.out.join("mu.csv"), transitions.csv())?;
    write_frame_csvs(&a.out, &metrics.reports)?;
    let summary = StackSummary {
        total_frames: a.total_frames,
        k,
        mean_mu,
        transitions,
        baseline_mean_mu,
        metrics,
        volumes: evals,
    };
    fs::write(a.out.join("stack_eval.json"), serde_json::to_string_pretty(&summary)?)?;
    let mut inputs = BTreeMap::new();
    hash_dir("data", &a.data, &mut inputs)?;
    hash_dir("run", &a.run, &mut inputs)?;
    if let Some(b) = &a.baseline {
        hash_dir("baseline", b, &mut inputs)?;
    }
    ExperimentManifest::new("stack-eval", 0, json!({ "args": a }), inputs)?.write(&a.out)?;
    json_line(json!({
        "out": a.out,
        "transitions": summary.transitions.transitions,
        "peak": summary.transitions.peak,
        "baseline_peak": summary.transitions.baseline_peak,
        "reduction": summary.transitions.reduction,
        "psnr": summary.metrics.psnr,
    }))
}

pub fn export(a: ExportArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    let model = load_model(&a.run)?;
    create_dir(&a.out)?;
    let mut inputs = BTreeMap::new();
    hash_dir("run", &a.run, &mut inputs)?;
    let summary = match a.what {
        ExportWhat::Trajectory => {
            export_trajectory(&model.trajectory, Some(&model.bounds), &a.out)?;
            json!({ "out": a.out, "frames": model.trajectory.frames() })
        }
        ExportWhat::Attention => {
            let data_dir = a.data.as_ref().ok_or_else(|| CliError::usage("attention export needs --data"))?;
            hash_dir("data", data_dir, &mut inputs)?;
            let data = load_data(data_dir)?;
            let z = data
                .get(a.volume)
                .ok_or_else(|| CliError::usage(format!("volume {} of {}", a.volume, data.len())))?;
            let k = model.trajectory.frames();
            if a.start + k > z.frames() {
                return Err(CliError::usage(format!("window [{}, {}) outside {} frames", a.start, a.start + k, z.frames())));
            }
            if a.block >= model.rcfg.n_blocks {
                return Err(CliError::usage(format!("block {} of {}", a.block, model.rcfg.n_blocks)));
            }
            let input = dynacq::pipeline::acquire(&z.frames_range(a.start, k)?, &model.trajectory)?;
            let (_, records) = recon_forward(&input, &model.rcfg, &model.params, true)?;
            let records = records.ok_or_else(|| anyhow!("attention was not recorded"))?;
            let region = AttentionRegion {
                t: a.t,
                y: a.y,
                x: a.x,
                extent: a.extent,
            };
            let info = export_attention(&records[a.block], region, a.head, &a.out).map_err(|e| match e {
                dynacq::Error::InvalidArgument(m) => CliError::Usage(m),
                other => other.into(),
            })?;
            json!({ "out": a.out, "maps": info.maps.len(), "tokens": info.tokens })
        }
    };
    ExperimentManifest::new("export", 0, json!({ "args": a }), inputs)?.write(&a.out)?;
    json_line(summary)
}

pub fn metrics(a: MetricsArgs) -> CliResult<String> {
    let a = resolve(&a, a.config.as_deref())?;
    let xs = load_data(&a.x)?;
    let refs = load_data(&a.reference)?;
    if xs.len() != refs.len() {
        return Err(CliError::usage(format!("{} volumes vs {} reference volumes", xs.len(), refs.len())));
    }
    let pairs: Vec<(DynVolume, DynVolume)> = xs.into_iter().zip(refs).collect();
    let summary = summarize(&pairs)?;
    create_dir(&a.out)?;
    fs::write(a.out.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
    write_frame_csvs(&a.out, &summary.reports)?;
    let mut inputs = BTreeMap::new();
    hash_dir("x", &a.x, &mut inputs)?;
    hash_dir("reference", &a.reference, &mut inputs)?;
    ExperimentManifest::new("metrics", 0, json!({ "args": a }), inputs)?.write(&a.out)?;
    json_line(json!({ "out": a.out, "psnr": summary.psnr, "vif": summary.vif, "fsim": summary.fsim }))
}
