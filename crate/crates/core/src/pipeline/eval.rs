//! Inference on sequences of arbitrary length by stacking the `k`-frame trajectory.

use serde::{Deserialize, Serialize};

use super::{acquire, mean_temporal_derivative, Model, MuMode};
use crate::data::DynVolume;
use crate::error::{Error, Result};
use crate::metrics::{metric_report, MetricReport, VIF_MIN_SIDE};
use crate::recon::recon_forward;

/// Reconstruction of exactly `k` frames with the model's trajectory.
pub fn evaluate_plain(model: &Model, z: &DynVolume) -> Result<DynVolume> {
    let k = model.trajectory.frames();
    if z.frames() != k {
        return Err(Error::shape(format!("plain evaluation needs {} frames, got {}", k, z.frames())));
    }
    let input = acquire(z, &model.trajectory)?;
    Ok(recon_forward(&input, &model.rcfg, &model.params, false)?.0)
}

/// Window-boundary transition indices `k-1, 2k-1, ...` below `frames - 1`.
pub fn transition_indices(frames: usize, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    (1..).map(|j| j * k - 1).take_while(|&t| t + 1 < frames).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackedEval {
    pub k: usize,
    pub windows: usize,
    /// Zero frames appended to the last window before reconstruction.
    pub padded: usize,
    pub mu: Vec<f64>,
    pub transitions: Vec<usize>,
    /// `None` when frames are below the VIF minimum size.
    pub metrics: Option<MetricReport>,
    #[serde(skip)]
    pub recon: Option<DynVolume>,
}

/// Splits `z_long` into `ceil(T/k)` windows, zero-pads the last one to `k` frames,
/// reconstructs each independently, concatenates and crops the padding.
pub fn evaluate_stacked(model: &Model, z_long: &DynVolume, mode: MuMode) -> Result<StackedEval> {
    let k = model.trajectory.frames();
    let t_n = z_long.frames();
    let windows = t_n.div_ceil(k);
    let padded = windows * k - t_n;
    let (h, w) = (z_long.height(), z_long.width());
    let mut parts = Vec::with_capacity(windows);
    for i in 0..windows {
        let start = i * k;
        let len = k.min(t_n - start);
        let mut win = z_long.frames_range(start, len)?;
        if len < k {
            win = DynVolume::concat(&[win, DynVolume::zeros(k - len, h, w)])?;
        }
        let out = evaluate_plain(model, &win)?;
        parts.push(if len < k { out.frames_range(0, len)? } else { out });
    }
    let recon = DynVolume::concat(&parts)?;
    let mu = if t_n >= 2 { mean_temporal_derivative(&recon, mode)? } else { Vec::new() };
    let metrics = if h >= VIF_MIN_SIDE && w >= VIF_MIN_SIDE {
        Some(metric_report(&recon, z_long)?)
    } else {
        None
    };
    Ok(StackedEval {
        k,
        windows,
        padded,
        mu,
        transitions: transition_indices(t_n, k),
        metrics,
        recon: Some(recon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transition_arithmetic() {
        assert_eq!(transition_indices(24, 8), vec![7, 15]);
        assert_eq!(transition_indices(27, 8), vec![7, 15, 23]);
        assert_eq!(transition_indices(8, 8), Vec::<usize>::new());
        assert_eq!(transition_indices(12, 4), vec![3, 7]);
    }
}
