//! Per-frame multi-shot acquisition trajectories.
//!
//! Coordinates are angular frequencies in radians per pixel, each component in
//! `[-pi, pi]`, stored `[frames, shots, points, 2]` row-major.

mod io;
mod projection;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use io::{export_trajectory, import_trajectory, TrajectoryHeader};
pub use projection::{feasibility_report, project_coords, project_kinematic, Violation};

/// Golden angle `pi (3 - sqrt 5) / 2` (about 111.246 degrees).
pub const GOLDEN_ANGLE: f64 = 1.941_611_038_725_466_3;

/// Default half-extent of generated spokes, leaving slack inside `[-pi, pi]`.
pub const DEFAULT_SPAN: f64 = 0.9 * PI;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    frames: usize,
    shots: usize,
    points: usize,
    coords: Vec<f64>,
    pub learnable: bool,
}

impl Trajectory {
    pub fn from_coords(
        frames: usize,
        shots: usize,
        points: usize,
        coords: Vec<f64>,
        learnable: bool,
    ) -> Result<Self> {
        if frames == 0 || shots == 0 || points == 0 {
            return Err(Error::invalid(format!(
                "trajectory dims must be >= 1, got [{}, {}, {}]",
                frames, shots, points
            )));
        }
        if coords.len() != frames * shots * points * 2 {
            return Err(Error::shape(format!(
                "trajectory [{}, {}, {}, 2] needs {} values, got {}",
                frames,
                shots,
                points,
                frames * shots * points * 2,
                coords.len()
            )));
        }
        if let Some(v) = coords.iter().find(|v| !(v.abs() <= PI)) {
            return Err(Error::invalid(format!("trajectory coordinate {} outside [-pi, pi]", v)));
        }
        Ok(Trajectory {
            frames,
            shots,
            points,
            coords,
            learnable,
        })
    }

    pub fn from_tensor(t: &Tensor, learnable: bool) -> Result<Self> {
        match *t.shape() {
            [f, s, m, 2] => Self::from_coords(f, s, m, t.data().to_vec(), learnable),
            _ => Err(Error::shape(format!(
                "trajectory tensor must be [frames, shots, points, 2], got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.coords.clone()).expect("consistent shape")
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.frames, self.shots, self.points, 2]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn shots(&self) -> usize {
        self.shots
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Coordinates of one frame, `[shots, points, 2]`.
    pub fn frame(&self, f: usize) -> &[f64] {
        let n = self.shots * self.points * 2;
        &self.coords[f * n..(f + 1) * n]
    }

    /// One shot as `[points, 2]`.
    pub fn shot(&self, f: usize, s: usize) -> &[f64] {
        let n = self.points * 2;
        &self.frame(f)[s * n..(s + 1) * n]
    }

    pub fn samples_per_frame(&self) -> usize {
        self.shots * self.points
    }
}

/// Scanner and sampling constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    /// Peak gradient amplitude, T/m.
    pub g_max: f64,
    /// Peak slew rate, T/m/s.
    pub s_max: f64,
    /// Sampling interval, s.
    pub dt: f64,
    /// Gyromagnetic ratio, Hz/T.
    pub gamma: f64,
    /// Field of view, m.
    pub fov: f64,
    /// Image grid (H, W).
    pub grid: (usize, usize),
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            g_max: 40e-3,
            s_max: 200.0,
            dt: 10e-6,
            gamma: 42.576e6,
            fov: 0.2,
            grid: (32, 32),
        }
    }
}

impl PhysicsConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.g_max, self.s_max, self.dt, self.gamma, self.fov]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
            && self.grid.0 > 0
            && self.grid.1 > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("physics constants must be positive: {:?}", self)))
        }
    }
}

/// Per-sample Euclidean bounds on first and second coordinate differences (radians).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicBounds {
    pub alpha: f64,
    pub beta: f64,
}

impl KinematicBounds {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.beta > 0.0 && self.alpha.is_finite() && self.beta.is_finite() {
            Ok(())
        } else {
            Err(Error::invalid(format!("kinematic bounds must be positive: {:?}", self)))
        }
    }
}

/// Converts gradient and slew limits into per-sample bounds in radians.
///
/// A gradient `G` held for `dt` advances k-space by `gamma G dt` cycles/m. One pixel is
/// `fov / H` metres, so in radians per pixel the step is `2 pi gamma G dt fov / H`. The
/// slew limit bounds the change of gradient per sample by `S dt`, which bounds the
/// second difference of k by `2 pi gamma S dt^2 fov / H`.
pub fn kinematic_bounds(p: &PhysicsConfig) -> Result<KinematicBounds> {
    p.validate()?;
    let pixel = p.fov / p.grid.0 as f64;
    let b = KinematicBounds {
        alpha: 2.0 * PI * p.gamma * p.g_max * p.dt * pixel,
        beta: 2.0 * PI * p.gamma * p.s_max * p.dt * p.dt * pixel,
    };
    b.validate()?;
    Ok(b)
}

fn check_sizes(frames: usize, shots: usize, points: usize, span: f64) -> Result<()> {
    if frames == 0 || shots == 0 || points < 2 {
        return Err(Error::invalid(format!(
            "need frames >= 1, shots >= 1, points >= 2; got {}, {}, {}",
            frames, shots, points
        )));
    }
    if !(span > 0.0 && span <= PI) {
        return Err(Error::invalid(format!("span {} must be in (0, pi]", span)));
    }
    Ok(())
}

fn spoke(angle: f64, points: usize, span: f64, out: &mut Vec<f64>) {
    let (s, c) = angle.sin_cos();
    for i in 0..points {
        let r = -span + 2.0 * span * i as f64 / (points - 1) as f64;
        out.push(r * c);
        out.push(r * s);
    }
}

/// Temporally constant radial: spoke `s` at angle `pi s / shots` in every frame.
pub fn init_radial(frames: usize, shots: usize, points: usize, span: f64) -> Result<Trajectory> {
    check_sizes(frames, shots, points, span)?;
    let mut frame = Vec::with_capacity(shots * points * 2);
    for s in 0..shots {
        spoke(PI * s as f64 / shots as f64, points, span, &mut frame);
    }
    let coords = frame.repeat(frames);
    Trajectory::from_coords(frames, shots, points, coords, false)
}

/// Golden-angle radial: each successive spoke, across shots and then frames, advances
/// by the golden angle.
pub fn init_golden_angle(frames: usize, shots: usize, points: usize, span: f64) -> Result<Trajectory> {
    check_sizes(frames, shots, points, span)?;
    let mut coords = Vec::with_capacity(frames * shots * points * 2);
    for n in 0..frames * shots {
        let angle = (n as f64 * GOLDEN_ANGLE) % PI;
        spoke(angle, points, span, &mut coords);
    }
    Trajectory::from_coords(frames, shots, points, coords, false)
}

/// Tiles the trajectory cyclically over `total_frames` frames; the last tile is truncated.
pub fn stack_trajectories(k: &Trajectory, total_frames: usize) -> Result<Trajectory> {
    if total_frames == 0 {
        return Err(Error::invalid("total_frames must be >= 1"));
    }
    let mut coords = Vec::with_capacity(total_frames * k.frame(0).len());
    for t in 0..total_frames {
        coords.extend_from_slice(k.frame(t % k.frames));
    }
    Trajectory::from_coords(total_frames, k.shots, k.points, coords, k.learnable)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bounds_at_reference_constants() {
        // 384-pixel grid over 0.2 m
        let p = PhysicsConfig {
            grid: (384, 144),
            ..Default::default()
        };
        let b = kinematic_bounds(&p).unwrap();
        let pixel = 0.2 / 384.0;
        let alpha = 2.0 * PI * 42.576e6 * 40e-3 * 10e-6 * pixel;
        let beta = 2.0 * PI * 42.576e6 * 200.0 * 1e-10 * pixel;
        assert!((b.alpha - alpha).abs() < 1e-15);
        assert!((b.beta - beta).abs() < 1e-15);
        assert!((b.alpha - 5.5725e-2).abs() < 1e-5, "{}", b.alpha);
    }

    #[test]
    fn bounds_scale_with_dt() {
        let p = PhysicsConfig::default();
        let b1 = kinematic_bounds(&p).unwrap();
        let b2 = kinematic_bounds(&PhysicsConfig { dt: 2.0 * p.dt, ..p.clone() }).unwrap();
        assert!((b2.alpha / b1.alpha - 2.0).abs() < 1e-12);
        assert!((b2.beta / b1.beta - 4.0).abs() < 1e-12);
        assert!(kinematic_bounds(&PhysicsConfig { gamma: 0.0, ..p }).is_err());
    }

    #[test]
    fn radial_single_shot_is_horizontal() {
        let k = init_radial(2, 1, 5, 1.0).unwrap();
        let s = k.shot(0, 0);
        for i in 0..5 {
            assert!(s[2 * i + 1].abs() < 1e-15);
        }
        assert_eq!(s[0], -1.0);
        assert_eq!(s[8], 1.0);
    }

    #[test]
    fn radial_angles_and_constancy() {
        let k = init_radial(3, 4, 9, DEFAULT_SPAN).unwrap();
        for s in 0..4 {
            let last = &k.shot(0, s)[16..18];
            let angle = last[1].atan2(last[0]);
            assert!((angle - PI * s as f64 / 4.0).abs() < 1e-12);
        }
        assert_eq!(k.frame(0), k.frame(1));
        assert_eq!(k.frame(0), k.frame(2));
    }

    #[test]
    fn golden_angle_advances() {
        let k = init_golden_angle(2, 3, 7, DEFAULT_SPAN).unwrap();
        let angle = |f, s| {
            let p = &k.shot(f, s)[12..14];
            p[1].atan2(p[0]).rem_euclid(PI)
        };
        assert!((angle(0, 1) - angle(0, 0) - 1.94161).abs() < 1e-5);
        assert_ne!(k.frame(0), k.frame(1));
        // symmetric radii about the origin
        let s = k.shot(1, 2);
        for i in 0..7 {
            assert!((s[2 * i] + s[2 * (6 - i)]).abs() < 1e-12);
        }
    }

    #[test]
    fn generators_stay_in_range() {
        for k in [
            init_radial(2, 5, 16, PI).unwrap(),
            init_golden_angle(3, 5, 16, PI).unwrap(),
        ] {
            assert!(k.coords().iter().all(|v| v.abs() <= PI));
        }
        assert!(init_radial(1, 1, 1, 1.0).is_err());
        assert!(init_radial(1, 0, 4, 1.0).is_err());
    }

    #[test]
    fn stacking_tiles_and_truncates() {
        let k = init_golden_angle(8, 2, 4, 1.0).unwrap();
        assert_eq!(stack_trajectories(&k, 8).unwrap(), k);
        let long = stack_trajectories(&k, 27).unwrap();
        assert_eq!(long.frames(), 27);
        for t in 0..27 {
            assert_eq!(long.frame(t), k.frame(t % 8));
        }
        assert_eq!(long.frame(24), k.frame(0));
        assert_eq!(long.frame(26), k.frame(2));
        assert!(stack_trajectories(&k, 0).is_err());
    }

    #[test]
    fn feasibility_of_single_point_shots_is_vacuous() {
        let k = Trajectory::from_coords(2, 3, 1, vec![0.1; 12], true).unwrap();
        let b = KinematicBounds { alpha: 0.2, beta: 0.05 };
        assert_eq!(feasibility_report(&k, &b), (-0.2, -0.05));
    }

    #[test]
    fn wide_radial_with_tight_alpha_violates() {
        let k = init_radial(1, 2, 8, DEFAULT_SPAN).unwrap();
        let step = 2.0 * DEFAULT_SPAN / 7.0;
        let b = KinematicBounds { alpha: 0.1, beta: 0.05 };
        let (vel, acc) = feasibility_report(&k, &b);
        assert!((vel - (step - 0.1)).abs() < 1e-12);
        assert!((acc + 0.05).abs() < 1e-12);

        let p = project_kinematic(&k, &b, 1e-6, 200_000).unwrap();
        let (vel, acc) = feasibility_report(&p, &b);
        assert!(vel <= 1e-6 && acc <= 1e-6);
    }
}
