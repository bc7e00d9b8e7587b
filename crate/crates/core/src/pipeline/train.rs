//! Main (MSE) and refinement (MSE + transition hinge) training loops.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{acquire, acquire_graph, loss_refine_graph, split_train_val, MuMode, MuStats, TrainConfig, TrajInit};
use crate::autodiff::{adam_step, AdamState, Graph, Tensor, Var};
use crate::data::DynVolume;
use crate::error::{Error, Result};
use crate::recon::{recon_graph, ReconConfig, ReconParams};
use crate::trajectory::{
    feasibility_report, init_golden_angle, init_radial, kinematic_bounds, project_coords, project_kinematic,
    KinematicBounds, PhysicsConfig, Trajectory,
};

/// Everything needed to reconstruct: network config and weights plus the trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub rcfg: ReconConfig,
    pub params: ReconParams,
    pub trajectory: Trajectory,
    pub bounds: KinematicBounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Main,
    Refine,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Main => "main",
            Stage::Refine => "refine",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Largest feasibility violation of any trajectory iterate in the epoch (negative = slack).
    pub max_constraint_violation: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRow>,
    /// Feasibility violation after each optimizer step.
    pub step_violations: Vec<f64>,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from("epoch,stage,train_loss,val_loss,max_constraint_violation\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.17e},{:.17e},{:.17e}",
            r.epoch,
            r.stage.as_str(),
            r.train_loss,
            r.val_loss,
            r.max_constraint_violation
        )
        .expect("string write");
    }
    s
}

fn max_violation(k: &Trajectory, b: &KinematicBounds) -> f64 {
    let (v, a) = feasibility_report(k, b);
    v.max(a)
}

/// Initial trajectory for `tcfg`, already projected.
pub(crate) fn initial_trajectory(tcfg: &TrainConfig, b: &KinematicBounds) -> Result<Trajectory> {
    let (k, s, m) = (tcfg.frames_k, tcfg.shots, tcfg.points);
    let mut init = match tcfg.traj {
        TrajInit::Learned | TrajInit::Radial => init_radial(k, s, m, tcfg.span)?,
        TrajInit::Gar => init_golden_angle(k, s, m, tcfg.span)?,
    };
    init.learnable = tcfg.trajectory_trainable();
    project_kinematic(&init, b, tcfg.proj_tol, tcfg.proj_max_iter)
}

struct StageSpec<'a> {
    stage: Stage,
    epochs: usize,
    /// Frames per training unit (k or 2k); reconstructed in windows of `k`.
    unit: usize,
    stats: MuStats,
    lambda: f64,
    train_net: bool,
    train_traj: bool,
    /// Multiplies both learning rates.
    lr_scale: f64,
    tcfg: &'a TrainConfig,
}

/// Input per `k`-frame window, precomputed when the trajectory is fixed.
fn cached_inputs(units: &[DynVolume], k: usize, traj: &Trajectory) -> Result<Vec<Vec<Tensor>>> {
    units
        .iter()
        .map(|u| u.partition(k)?.iter().map(|w| acquire(w, traj)).collect())
        .collect()
}

/// Builds the loss graph for one unit. Returns the loss var.
fn unit_loss(
    g: &mut Graph,
    model: &Model,
    vars: &[Var],
    coords: Var,
    z: &DynVolume,
    cached: Option<&[Tensor]>,
    spec: &StageSpec,
) -> Result<Var> {
    let k = model.trajectory.frames();
    let windows = z.frames() / k;
    let mut outs = Vec::with_capacity(windows);
    for w in 0..windows {
        let input = match cached {
            Some(c) => g.constant(c[w].clone())?,
            None => {
                let zw = g.constant(z.frames_range(w * k, k)?.to_tensor())?;
                acquire_graph(g, zw, coords)?
            }
        };
        let (out, _) = recon_graph(g, input, &model.rcfg, vars, false)?;
        outs.push(out);
    }
    let z_hat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 0)? };
    let target = g.constant(z.to_tensor())?;
    loss_refine_graph(g, z_hat, target, &spec.stats, spec.lambda)
}

fn eval_loss(model: &Model, units: &[DynVolume], cache: Option<&[Vec<Tensor>]>, spec: &StageSpec) -> Result<f64> {
    let mut total = 0.0;
    for (i, z) in units.iter().enumerate() {
        let mut g = Graph::new();
        let vars = model.params.to_graph(&mut g, false)?;
        let coords = g.constant(model.trajectory.to_tensor())?;
        let loss = unit_loss(&mut g, model, &vars, coords, z, cache.map(|c| c[i].as_slice()), spec)?;
        total += g.value(loss).item();
    }
    Ok(total / units.len() as f64)
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::Divergence {
            epoch,
            step,
            detail: format!("non-finite value in {}", what),
        },
        other => other,
    }
}

fn run_stage(
    mut model: Model,
    train: &[DynVolume],
    val: &[DynVolume],
    spec: StageSpec,
    seed: u64,
) -> Result<TrainOutcome> {
    let tcfg = spec.tcfg;
    let k = model.trajectory.frames();
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation sets must be nonempty"));
    }
    for u in train.iter().chain(val) {
        if u.frames() != spec.unit {
            return Err(Error::shape(format!("unit has {} frames, expected {}", u.frames(), spec.unit)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net_state: Vec<AdamState> = model
        .params
        .tensors
        .iter()
        .map(|t| AdamState::new(t.shape(), tcfg.lr_net * spec.lr_scale))
        .collect();
    let mut traj_state = AdamState::new(&model.trajectory.shape(), tcfg.lr_traj * spec.lr_scale);

    let (train_cache, val_cache) = if spec.train_traj {
        (None, None)
    } else {
        (
            Some(cached_inputs(train, k, &model.trajectory)?),
            Some(cached_inputs(val, k, &model.trajectory)?),
        )
    };

    let mut history = Vec::with_capacity(spec.epochs);
    let mut step_violations = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..spec.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_violation = max_violation(&model.trajectory, &model.bounds);
        for batch in order.chunks(tcfg.batch) {
            let mut net_grads: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut traj_grad = vec![0.0; model.trajectory.coords().len()];
            for &i in batch {
                let mut g = Graph::new();
                let vars = model.params.to_graph(&mut g, spec.train_net)?;
                let coords = g.leaf(model.trajectory.to_tensor(), spec.train_traj)?;
                let cached = train_cache.as_ref().map(|c| c[i].as_slice());
                let loss = unit_loss(&mut g, &model, &vars, coords, &train[i], cached, &spec)
                    .map_err(|e| diverged(epoch, step, e))?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        detail: format!("loss {}", value),
                    });
                }
                epoch_loss += value;
                let mut grads = g.backward_scalar(loss).map_err(|e| diverged(epoch, step, e))?;
                if spec.train_net {
                    for (acc, v) in net_grads.iter_mut().zip(&vars) {
                        let gt = grads.take(*v).expect("gradient for trainable parameter");
                        acc.iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
                    }
                }
                if spec.train_traj {
                    let gt = grads.take(coords).expect("gradient for trajectory");
                    traj_grad.iter_mut().zip(gt.data()).for_each(|(a, b)| *a += b);
                }
            }
            let inv = 1.0 / batch.len() as f64;
            if spec.train_net {
                for ((p, gacc), st) in model.params.tensors.iter_mut().zip(net_grads).zip(&mut net_state) {
                    let grad = Tensor::new(p.shape().to_vec(), gacc.into_iter().map(|v| v * inv).collect())?;
                    adam_step(p, &grad, st).map_err(|e| diverged(epoch, step, e))?;
                }
            }
            if spec.train_traj {
                let mut coords = model.trajectory.to_tensor();
                let grad = Tensor::new(coords.shape().to_vec(), traj_grad.into_iter().map(|v| v * inv).collect())?;
                adam_step(&mut coords, &grad, &mut traj_state).map_err(|e| diverged(epoch, step, e))?;
                let projected = project_coords(
                    coords.data(),
                    model.trajectory.points(),
                    &model.bounds,
                    tcfg.proj_tol,
                    tcfg.proj_max_iter,
                )?;
                let t = &model.trajectory;
                model.trajectory = Trajectory::from_coords(t.frames(), t.shots(), t.points(), projected, t.learnable)?;
            }
            let v = max_violation(&model.trajectory, &model.bounds);
            epoch_violation = epoch_violation.max(v);
            step_violations.push(v);
            step += 1;
        }
        let val_loss = eval_loss(&model, val, val_cache.as_deref(), &spec).map_err(|e| diverged(epoch, step, e))?;
        history.push(HistoryRow {
            epoch,
            stage: spec.stage,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
            max_constraint_violation: epoch_violation,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        step_violations,
    })
}

fn units_of(vols: &[DynVolume], k: usize) -> Result<Vec<DynVolume>> {
    let mut out = Vec::new();
    for v in vols {
        out.extend(v.partition(k)?);
    }
    Ok(out)
}

/// Joint optimisation of θ and the trajectory on `k`-frame units (90/10 split of `data`).
pub fn train_main(
    data: &[DynVolume],
    tcfg: &TrainConfig,
    pcfg: &PhysicsConfig,
    rcfg: &ReconConfig,
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    rcfg.validate()?;
    let (train, val) = split_train_val(data)?;
    if let Some(v) = data.first() {
        if (v.height(), v.width()) != pcfg.grid {
            return Err(Error::invalid(format!(
                "physics grid {:?} does not match data {}x{}",
                pcfg.grid,
                v.height(),
                v.width()
            )));
        }
    }
    let bounds = kinematic_bounds(pcfg)?;
    let model = Model {
        rcfg: rcfg.clone(),
        params: ReconParams::init(rcfg, tcfg.seed)?,
        trajectory: initial_trajectory(tcfg, &bounds)?,
        bounds,
    };
    let spec = StageSpec {
        stage: Stage::Main,
        epochs: tcfg.epochs_main,
        unit: tcfg.frames_k,
        stats: MuStats { mu_x: 0.0, mode: MuMode::Abs },
        lambda: 0.0,
        train_net: true,
        train_traj: tcfg.trajectory_trainable(),
        lr_scale: 1.0,
        tcfg,
    };
    let (train, val) = (units_of(&train, tcfg.frames_k)?, units_of(&val, tcfg.frames_k)?);
    run_stage(model, &train, &val, spec, tcfg.seed)
}

/// Refinement on `2k`-frame units: two independently reconstructed `k`-frame windows
/// under the shared trajectory, penalising transitions above `stats.mu_x`.
pub fn train_refine(data: &[DynVolume], tcfg: &TrainConfig, stats: &MuStats, prior: &Model) -> Result<TrainOutcome> {
    tcfg.validate()?;
    let k = prior.trajectory.frames();
    let (train, val) = split_train_val(data)?;
    let (train, val) = (units_of(&train, 2 * k)?, units_of(&val, 2 * k)?);
    let spec = StageSpec {
        stage: Stage::Refine,
        epochs: tcfg.epochs_refine,
        unit: 2 * k,
        stats: *stats,
        lambda: tcfg.lambda_ref,
        train_net: !tcfg.freeze_net_refine,
        train_traj: prior.trajectory.learnable && tcfg.lr_traj > 0.0,
        lr_scale: tcfg.refine_lr_scale,
        tcfg,
    };
    // distinct shuffling stream from the main stage
    run_stage(prior.clone(), &train, &val, spec, tcfg.seed ^ 0x5EE_D0F2_EF1E)
}
