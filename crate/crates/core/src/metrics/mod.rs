//! Image-quality metrics (PSNR, VIF-P, FSIM) and the stacking-transition report.
//!
//! Volume metrics are computed frame by frame and averaged. VIF-P and FSIM take images
//! on a unit scale and internally work on 0..255, the range their constants assume.

mod fsim;
mod vif;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::DynVolume;
use crate::error::{Error, Result};

pub use fsim::phase_congruency;
pub use vif::MIN_SIDE as VIF_MIN_SIDE;

const SCALE_255: f64 = 255.0;

fn check_same(x: &DynVolume, reference: &DynVolume) -> Result<()> {
    if x.shape() != reference.shape() {
        return Err(Error::shape(format!(
            "metric inputs {:?} vs {:?}",
            x.shape(),
            reference.shape()
        )));
    }
    Ok(())
}

fn psnr_of(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

/// `10 log10(peak^2 / MSE)` over all voxels; `+inf` for identical inputs.
pub fn psnr(x: &DynVolume, reference: &DynVolume, peak: f64) -> Result<f64> {
    check_same(x, reference)?;
    if !(peak > 0.0) {
        return Err(Error::invalid(format!("peak {} must be > 0", peak)));
    }
    Ok(psnr_of(x.data(), reference.data(), peak))
}

fn scaled(f: &[f64]) -> Vec<f64> {
    f.iter().map(|v| v * SCALE_255).collect()
}

/// Per-frame VIF-P values.
pub fn vif_p_frames(x: &DynVolume, reference: &DynVolume) -> Result<Vec<f64>> {
    check_same(x, reference)?;
    let (h, w) = (x.height(), x.width());
    (0..x.frames())
        .map(|t| vif::vif_frame(&scaled(x.frame(t)), &scaled(reference.frame(t)), h, w))
        .collect()
}

pub fn vif_p(x: &DynVolume, reference: &DynVolume) -> Result<f64> {
    let v = vif_p_frames(x, reference)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn fsim_frames(x: &DynVolume, reference: &DynVolume) -> Result<Vec<f64>> {
    check_same(x, reference)?;
    let (h, w) = (x.height(), x.width());
    Ok((0..x.frames())
        .map(|t| fsim::fsim_frame(&scaled(x.frame(t)), &scaled(reference.frame(t)), h, w))
        .collect())
}

pub fn fsim(x: &DynVolume, reference: &DynVolume) -> Result<f64> {
    let v = fsim_frames(x, reference)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Frame-averaged metrics. `psnr` is `None` when every frame is identical to the reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub vif: f64,
    pub fsim: f64,
    pub per_frame_psnr: Vec<Option<f64>>,
    pub per_frame_vif: Vec<f64>,
    pub per_frame_fsim: Vec<f64>,
}

impl MetricReport {
    pub fn frames_csv(&self) -> String {
        let mut s = String::from("frame,psnr,vif,fsim\n");
        for (t, ((p, v), f)) in self
            .per_frame_psnr
            .iter()
            .zip(&self.per_frame_vif)
            .zip(&self.per_frame_fsim)
            .enumerate()
        {
            let p = p.map_or_else(|| "inf".to_string(), |p| format!("{:.17e}", p));
            writeln!(s, "{},{},{:.17e},{:.17e}", t, p, v, f).expect("string write");
        }
        s
    }
}

/// Metrics on magnitude images scaled by the reference peak, so the reference spans
/// `[0, 1]` and the PSNR peak is 1. Frames identical to the reference are excluded from
/// the PSNR mean.
pub fn metric_report(x: &DynVolume, reference: &DynVolume) -> Result<MetricReport> {
    check_same(x, reference)?;
    let peak = reference.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let norm = |v: &DynVolume| -> Result<DynVolume> {
        let s = if peak > 0.0 { 1.0 / peak } else { 1.0 };
        let [t, h, w] = v.shape();
        DynVolume::new(t, h, w, v.data().iter().map(|a| a.abs() * s).collect())
    };
    let (xn, rn) = (norm(x)?, norm(reference)?);
    let per_frame_psnr: Vec<Option<f64>> = (0..xn.frames())
        .map(|t| {
            let p = psnr_of(xn.frame(t), rn.frame(t), 1.0);
            p.is_finite().then_some(p)
        })
        .collect();
    let finite: Vec<f64> = per_frame_psnr.iter().flatten().copied().collect();
    let per_frame_vif = vif_p_frames(&xn, &rn)?;
    let per_frame_fsim = fsim_frames(&xn, &rn)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        psnr: (!finite.is_empty()).then(|| mean(&finite)),
        vif: mean(&per_frame_vif),
        fsim: mean(&per_frame_fsim),
        per_frame_psnr,
        per_frame_vif,
        per_frame_fsim,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub k: usize,
    pub mu: Vec<f64>,
    /// Indices `t = k-1, 2k-1, ...` of the window-boundary transitions `t -> t+1`.
    pub transitions: Vec<usize>,
    /// Largest `|mu|` at a transition.
    pub peak: f64,
    /// Mean `|mu|` away from transitions.
    pub mean_elsewhere: f64,
    pub baseline_peak: Option<f64>,
    /// `(baseline_peak - peak) / baseline_peak`; `None` without a nonzero baseline.
    pub reduction: Option<f64>,
}

impl TransitionReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("t,mu,transition\n");
        for (t, m) in self.mu.iter().enumerate() {
            writeln!(s, "{},{:.17e},{}", t, m, u8::from(self.transitions.contains(&t))).expect("string write");
        }
        s
    }
}

fn peak_at(mu: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&t| mu[t].abs()).fold(0.0, f64::max)
}

/// Marks window-boundary transitions of a `mu` vector and summarises them, optionally
/// against a baseline run's `mu`.
pub fn transition_report(mu: &[f64], k: usize, baseline: Option<&[f64]>) -> Result<TransitionReport> {
    if k == 0 || mu.len() < k {
        return Err(Error::invalid(format!("need k >= 1 and len(mu) >= k; got k {}, len {}", k, mu.len())));
    }
    let transitions: Vec<usize> = (1..).map(|j| j * k - 1).take_while(|&t| t < mu.len()).collect();
    let peak = peak_at(mu, &transitions);
    let others: Vec<f64> = mu
        .iter()
        .enumerate()
        .filter(|(t, _)| !transitions.contains(t))
        .map(|(_, m)| m.abs())
        .collect();
    let mean_elsewhere = if others.is_empty() {
        0.0
    } else {
        others.iter().sum::<f64>() / others.len() as f64
    };
    let baseline_peak = match baseline {
        Some(b) if b.len() != mu.len() => {
            return Err(Error::shape(format!("baseline mu length {} vs {}", b.len(), mu.len())))
        }
        Some(b) => Some(peak_at(b, &transitions)),
        None => None,
    };
    let reduction = baseline_peak.filter(|b| *b > 0.0).map(|b| (b - peak) / b);
    Ok(TransitionReport {
        k,
        mu: mu.to_vec(),
        transitions,
        peak,
        mean_elsewhere,
        baseline_peak,
        reduction,
    })
}
