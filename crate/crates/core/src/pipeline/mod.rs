//! Acquisition emulation, losses, temporal-derivative statistics, the two training
//! stages and stacked evaluation.

mod eval;
mod train;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::DynVolume;
use crate::error::{Error, Result};
use crate::nufft::{nudft_adjoint, nudft_forward};
use crate::trajectory::Trajectory;

pub use eval::{evaluate_plain, evaluate_stacked, transition_indices, StackedEval};
pub use train::{
    history_csv, train_main, train_refine, HistoryRow, Model, Stage, TrainOutcome,
};

/// How frame-to-frame mean differences enter the refinement penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuMode {
    /// `|mu(t)|`
    #[default]
    Abs,
    /// `mu(t)` as written, sign included.
    Signed,
}

/// Trajectory initialisation and whether it is optimised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajInit {
    /// Radial start, optimised jointly with the network.
    #[default]
    Learned,
    /// Temporally constant radial, frozen.
    Radial,
    /// Golden-angle radial, frozen.
    Gar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_main: usize,
    pub epochs_refine: usize,
    pub lr_traj: f64,
    pub lr_net: f64,
    pub batch: usize,
    pub lambda_ref: f64,
    pub seed: u64,
    pub frames_k: usize,
    pub shots: usize,
    pub points: usize,
    pub traj: TrajInit,
    pub span: f64,
    pub mu_mode: MuMode,
    /// Keep θ fixed during refinement.
    pub freeze_net_refine: bool,
    /// Learning-rate multiplier for the refinement stage (fresh Adam moments).
    pub refine_lr_scale: f64,
    pub proj_tol: f64,
    pub proj_max_iter: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_main: 30,
            epochs_refine: 10,
            lr_traj: 0.05,
            lr_net: 1e-3,
            batch: 4,
            lambda_ref: 5.0,
            seed: 0,
            frames_k: 4,
            shots: 8,
            points: 64,
            traj: TrajInit::Learned,
            span: crate::trajectory::DEFAULT_SPAN,
            mu_mode: MuMode::Abs,
            freeze_net_refine: false,
            refine_lr_scale: 0.1,
            proj_tol: 1e-7,
            proj_max_iter: 200_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lr_traj >= 0.0 && self.lr_traj.is_finite()) {
            return bad(format!("lr_traj {} must be >= 0", self.lr_traj));
        }
        if !(self.lr_net > 0.0 && self.lr_net.is_finite()) {
            return bad(format!("lr_net {} must be > 0", self.lr_net));
        }
        if !(self.lambda_ref >= 0.0 && self.lambda_ref.is_finite()) {
            return bad(format!("lambda_ref {} must be >= 0", self.lambda_ref));
        }
        if !(self.refine_lr_scale > 0.0 && self.refine_lr_scale.is_finite()) {
            return bad(format!("refine_lr_scale {} must be > 0", self.refine_lr_scale));
        }
        if self.frames_k < 2 {
            return bad(format!("frames_k {} must be >= 2", self.frames_k));
        }
        if self.batch == 0 || self.shots == 0 || self.points < 2 {
            return bad("batch, shots must be >= 1 and points >= 2".into());
        }
        if !(self.proj_tol > 0.0) || self.proj_max_iter == 0 {
            return bad("projection tolerance and iteration cap must be positive".into());
        }
        Ok(())
    }

    /// Whether the trajectory receives optimizer updates.
    pub fn trajectory_trainable(&self) -> bool {
        self.traj == TrajInit::Learned && self.lr_traj > 0.0
    }
}

/// Dataset-level characteristic temporal derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuStats {
    pub mu_x: f64,
    pub mode: MuMode,
}

/// `F*_K F_K z` as a `[2, T, H, W]` (real, imaginary) tensor.
pub fn acquire(z: &DynVolume, k: &Trajectory) -> Result<Tensor> {
    let x = nudft_forward(z, k)?;
    let (re, im) = nudft_adjoint(&x, k, (z.frames(), z.height(), z.width()))?;
    let mut data = re.data().to_vec();
    data.extend_from_slice(im.data());
    Tensor::new(vec![2, z.frames(), z.height(), z.width()], data)
}

/// Graph form of [`acquire`]; `coords` is `[T, S, m, 2]`.
pub fn acquire_graph(g: &mut Graph, z: Var, coords: Var) -> Result<Var> {
    let s = g.shape(z).to_vec();
    let x = g.nudft(z, coords)?;
    g.nudft_adjoint(x, coords, (s[1], s[2]))
}

fn check_same(a: &DynVolume, b: &DynVolume) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error over all voxels.
pub fn loss_main(z_hat: &DynVolume, z: &DynVolume) -> Result<f64> {
    check_same(z_hat, z)?;
    let n = z.data().len() as f64;
    Ok(z_hat.data().iter().zip(z.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `mu(t) = mean(x[t+1]) - mean(x[t])` for `t < T-1`, optionally in magnitude.
pub fn mean_temporal_derivative(x: &DynVolume, mode: MuMode) -> Result<Vec<f64>> {
    if x.frames() < 2 {
        return Err(Error::invalid(format!("need >= 2 frames, got {}", x.frames())));
    }
    let npix = (x.height() * x.width()) as f64;
    let means: Vec<f64> = (0..x.frames()).map(|t| x.frame(t).iter().sum::<f64>() / npix).collect();
    Ok(means
        .windows(2)
        .map(|w| {
            let d = w[1] - w[0];
            match mode {
                MuMode::Abs => d.abs(),
                MuMode::Signed => d,
            }
        })
        .collect())
}

/// Mean over samples of each sample's mean `mu` entry, on `k`-frame units.
pub fn dataset_mu(data: &[DynVolume], k: usize, mode: MuMode) -> Result<MuStats> {
    if data.is_empty() {
        return Err(Error::invalid("dataset_mu on an empty set"));
    }
    let mut units = Vec::new();
    for v in data {
        units.extend(v.partition(k)?);
    }
    let mut total = 0.0;
    for u in &units {
        let mu = mean_temporal_derivative(u, mode)?;
        total += mu.iter().sum::<f64>() / mu.len() as f64;
    }
    Ok(MuStats {
        mu_x: total / units.len() as f64,
        mode,
    })
}

/// Sum over transitions of `max(mu(t) - mu_X, 0)` on the reconstruction.
pub fn refine_penalty(z_hat: &DynVolume, stats: &MuStats) -> Result<f64> {
    Ok(mean_temporal_derivative(z_hat, stats.mode)?
        .iter()
        .map(|m| (m - stats.mu_x).max(0.0))
        .sum())
}

pub fn loss_refine(z_hat: &DynVolume, z: &DynVolume, stats: &MuStats, lambda_ref: f64) -> Result<f64> {
    Ok(loss_main(z_hat, z)? + lambda_ref * refine_penalty(z_hat, stats)?)
}

/// Graph form of the refinement objective on `[2k, H, W]`.
pub(crate) fn loss_refine_graph(g: &mut Graph, z_hat: Var, z: Var, stats: &MuStats, lambda_ref: f64) -> Result<Var> {
    let diff = g.sub(z_hat, z)?;
    let sq = g.square(diff)?;
    let mse = g.mean(sq)?;
    if lambda_ref == 0.0 {
        return Ok(mse);
    }
    let t = g.shape(z_hat)[0];
    let means = g.frame_means(z_hat)?;
    let next = g.slice(means, 0, 1, t - 1)?;
    let prev = g.slice(means, 0, 0, t - 1)?;
    let mut mu = g.sub(next, prev)?;
    if stats.mode == MuMode::Abs {
        mu = g.abs(mu)?;
    }
    let excess = g.add_scalar(mu, -stats.mu_x)?;
    let hinge = g.relu(excess)?;
    let pen = g.sum(hinge)?;
    let pen = g.scale(pen, lambda_ref)?;
    g.add(mse, pen)
}

/// Fixed split: the last `max(1, round(n/10))` volumes validate, the rest train.
pub fn split_train_val(data: &[DynVolume]) -> Result<(Vec<DynVolume>, Vec<DynVolume>)> {
    if data.len() < 2 {
        return Err(Error::invalid(format!("need >= 2 volumes to split, got {}", data.len())));
    }
    let n_val = ((data.len() as f64 / 10.0).round() as usize).max(1);
    let cut = data.len() - n_val;
    Ok((data[..cut].to_vec(), data[cut..].to_vec()))
}
