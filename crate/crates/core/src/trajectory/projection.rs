//! Euclidean projection of sampled k-space curves onto the kinematically feasible set
//!
//! ```text
//!   { c : |c[i+1] - c[i]|_2 <= alpha,  |c[i+1] - 2 c[i] + c[i-1]|_2 <= beta,  |c[i]|_inf <= pi }
//! ```
//!
//! solved as the dual problem `min_q 1/2 |A^T q - z|^2 + sigma(q)` with accelerated
//! proximal gradient (FISTA with adaptive restart). `A` stacks the first-difference,
//! second-difference and identity operators, `sigma` is the support function of the
//! constraint set, and the primal point is recovered as `c = z - A^T q`.

use std::f64::consts::PI;

use super::{KinematicBounds, Trajectory};
use crate::error::{Error, Result};

// |D1|^2 + |D2|^2 + |I|^2 <= 4 + 16 + 1
const LIPSCHITZ: f64 = 21.0;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Violation {
    pub velocity: f64,
    pub acceleration: f64,
    pub bounds: f64,
}

impl Violation {
    pub fn max(&self) -> f64 {
        self.velocity.max(self.acceleration).max(self.bounds)
    }
}

/// Constraint violations of one curve given as `[m, 2]` interleaved points. Negative
/// values are slack; a curve too short for a constraint reports `-alpha` / `-beta`.
pub(crate) fn curve_violation(c: &[f64], b: &KinematicBounds) -> Violation {
    let m = c.len() / 2;
    let mut vel = -b.alpha;
    let mut acc = -b.beta;
    let mut bounds = f64::NEG_INFINITY;
    for i in 0..m {
        bounds = bounds.max(c[2 * i].abs() - PI).max(c[2 * i + 1].abs() - PI);
        if i + 1 < m {
            let dx = c[2 * i + 2] - c[2 * i];
            let dy = c[2 * i + 3] - c[2 * i + 1];
            vel = vel.max(dx.hypot(dy) - b.alpha);
        }
        if i + 2 < m {
            let dx = c[2 * i + 4] - 2.0 * c[2 * i + 2] + c[2 * i];
            let dy = c[2 * i + 5] - 2.0 * c[2 * i + 3] + c[2 * i + 1];
            acc = acc.max(dx.hypot(dy) - b.beta);
        }
    }
    Violation {
        velocity: vel,
        acceleration: acc,
        bounds,
    }
}

struct Dual {
    q1: Vec<f64>,
    q2: Vec<f64>,
    q3: Vec<f64>,
}

impl Dual {
    fn zeros(m: usize) -> Self {
        Dual {
            q1: vec![0.0; 2 * m.saturating_sub(1)],
            q2: vec![0.0; 2 * m.saturating_sub(2)],
            q3: vec![0.0; 2 * m],
        }
    }

    fn assign_extrapolated(&mut self, cur: &Dual, prev: &Dual, w: f64) {
        for (dst, (a, b)) in [
            (&mut self.q1, (&cur.q1, &prev.q1)),
            (&mut self.q2, (&cur.q2, &prev.q2)),
            (&mut self.q3, (&cur.q3, &prev.q3)),
        ] {
            for (d, (x, y)) in dst.iter_mut().zip(a.iter().zip(b.iter())) {
                *d = x + w * (x - y);
            }
        }
    }

    fn copy_from(&mut self, other: &Dual) {
        self.q1.copy_from_slice(&other.q1);
        self.q2.copy_from_slice(&other.q2);
        self.q3.copy_from_slice(&other.q3);
    }
}

/// `c = z - A^T q`.
fn primal(z: &[f64], q: &Dual, c: &mut [f64]) {
    let m = z.len() / 2;
    c.copy_from_slice(z);
    for d in 0..2 {
        // D1 c: (D1 c)_i = c_{i+1} - c_i
        for i in 0..m.saturating_sub(1) {
            let v = q.q1[2 * i + d];
            c[2 * (i + 1) + d] -= v;
            c[2 * i + d] += v;
        }
        // D2 c: (D2 c)_i = c_{i+2} - 2 c_{i+1} + c_i
        for i in 0..m.saturating_sub(2) {
            let v = q.q2[2 * i + d];
            c[2 * (i + 2) + d] -= v;
            c[2 * (i + 1) + d] += 2.0 * v;
            c[2 * i + d] -= v;
        }
    }
    for (ci, qi) in c.iter_mut().zip(&q.q3) {
        *ci -= qi;
    }
}

fn group_shrink(q: &mut [f64], radius: f64) {
    for pair in q.chunks_exact_mut(2) {
        let n = pair[0].hypot(pair[1]);
        let s = if n > radius { 1.0 - radius / n } else { 0.0 };
        pair[0] *= s;
        pair[1] *= s;
    }
}

/// Proximal gradient step from `y` (with primal `c = z - A^T y`) into `out`.
fn prox_step(y: &Dual, c: &[f64], b: &KinematicBounds, out: &mut Dual) {
    let m = c.len() / 2;
    let tau = 1.0 / LIPSCHITZ;
    for d in 0..2 {
        for i in 0..m.saturating_sub(1) {
            out.q1[2 * i + d] = y.q1[2 * i + d] + tau * (c[2 * (i + 1) + d] - c[2 * i + d]);
        }
        for i in 0..m.saturating_sub(2) {
            out.q2[2 * i + d] = y.q2[2 * i + d]
                + tau * (c[2 * (i + 2) + d] - 2.0 * c[2 * (i + 1) + d] + c[2 * i + d]);
        }
    }
    for (o, (yi, ci)) in out.q3.iter_mut().zip(y.q3.iter().zip(c)) {
        let v = yi + tau * ci;
        let r = tau * PI;
        *o = v.signum() * (v.abs() - r).max(0.0);
    }
    group_shrink(&mut out.q1, tau * b.alpha);
    group_shrink(&mut out.q2, tau * b.beta);
}

/// `sigma(q) - <q, A c>`, the duality gap at the primal point `c(q)`.
fn duality_gap(q: &Dual, c: &[f64], b: &KinematicBounds) -> f64 {
    let m = c.len() / 2;
    let mut gap = 0.0;
    for i in 0..m.saturating_sub(1) {
        let (qx, qy) = (q.q1[2 * i], q.q1[2 * i + 1]);
        let dx = c[2 * i + 2] - c[2 * i];
        let dy = c[2 * i + 3] - c[2 * i + 1];
        gap += b.alpha * qx.hypot(qy) - (qx * dx + qy * dy);
    }
    for i in 0..m.saturating_sub(2) {
        let (qx, qy) = (q.q2[2 * i], q.q2[2 * i + 1]);
        let dx = c[2 * i + 4] - 2.0 * c[2 * i + 2] + c[2 * i];
        let dy = c[2 * i + 5] - 2.0 * c[2 * i + 3] + c[2 * i + 1];
        gap += b.beta * qx.hypot(qy) - (qx * dx + qy * dy);
    }
    for (qi, ci) in q.q3.iter().zip(c) {
        gap += PI * qi.abs() - qi * ci;
    }
    gap
}

/// Projects one curve (`[m, 2]` interleaved). Returns the iteration count used.
pub(crate) fn project_curve(
    z: &[f64],
    b: &KinematicBounds,
    tol: f64,
    max_iter: usize,
    out: &mut [f64],
) -> Result<usize> {
    out.copy_from_slice(z);
    if curve_violation(z, b).max() <= tol {
        return Ok(0);
    }
    let m = z.len() / 2;
    let mut q = Dual::zeros(m);
    let mut q_prev = Dual::zeros(m);
    let mut y = Dual::zeros(m);
    let mut next = Dual::zeros(m);
    let mut c_y = vec![0.0; z.len()];
    let mut c_q = vec![0.0; z.len()];
    let mut t = 1.0_f64;
    let mut last_violation = f64::INFINITY;

    for it in 1..=max_iter {
        primal(z, &y, &mut c_y);
        prox_step(&y, &c_y, b, &mut next);
        q_prev.copy_from(&q);
        q.copy_from(&next);

        // gradient-based adaptive restart: <y - q_new, q_new - q_prev> > 0
        let mut restart = 0.0;
        for (a, (bq, cq)) in [
            (&y.q1, (&q.q1, &q_prev.q1)),
            (&y.q2, (&q.q2, &q_prev.q2)),
            (&y.q3, (&q.q3, &q_prev.q3)),
        ] {
            for (yi, (qi, pi)) in a.iter().zip(bq.iter().zip(cq.iter())) {
                restart += (yi - qi) * (qi - pi);
            }
        }
        if restart > 0.0 {
            t = 1.0;
            y.copy_from(&q);
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y.assign_extrapolated(&q, &q_prev, (t - 1.0) / t_next);
            t = t_next;
        }

        if it % 10 == 0 || it == max_iter {
            primal(z, &q, &mut c_q);
            let gap = duality_gap(&q, &c_q, b);
            clamp_box(&mut c_q);
            let v = curve_violation(&c_q, b).max();
            last_violation = v;
            if v <= tol && gap <= tol * tol {
                out.copy_from_slice(&c_q);
                return Ok(it);
            }
        }
    }
    // feasible but the gap stalled above tol^2: accept the feasible iterate
    if last_violation <= tol {
        out.copy_from_slice(&c_q);
        return Ok(max_iter);
    }
    Err(Error::Convergence {
        iterations: max_iter,
        max_violation: last_violation,
    })
}

fn clamp_box(c: &mut [f64]) {
    for v in c.iter_mut() {
        *v = v.clamp(-PI, PI);
    }
}

/// Projects every shot of every frame independently.
pub fn project_kinematic(
    k: &Trajectory,
    b: &KinematicBounds,
    tol: f64,
    max_iter: usize,
) -> Result<Trajectory> {
    let coords = project_coords(k.coords(), k.points(), b, tol, max_iter)?;
    Trajectory::from_coords(k.frames(), k.shots(), k.points(), coords, k.learnable)
}

/// Projects raw interleaved coordinates made of consecutive `points`-sample curves. The
/// input may lie outside `[-pi, pi]`; the output does not.
pub fn project_coords(
    coords: &[f64],
    points: usize,
    b: &KinematicBounds,
    tol: f64,
    max_iter: usize,
) -> Result<Vec<f64>> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("projection tolerance {} must be > 0", tol)));
    }
    b.validate()?;
    let len = 2 * points;
    if points == 0 || coords.len() % len != 0 {
        return Err(Error::shape(format!(
            "{} values do not split into curves of {} points",
            coords.len(),
            points
        )));
    }
    if coords.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let mut out = coords.to_vec();
    let mut scratch = vec![0.0; len];
    for (curve_in, curve_out) in coords.chunks(len).zip(out.chunks_mut(len)) {
        project_curve(curve_in, b, tol, max_iter, &mut scratch)?;
        curve_out.copy_from_slice(&scratch);
    }
    Ok(out)
}

/// `(max velocity violation, max acceleration violation)` over all frames and shots.
pub fn feasibility_report(k: &Trajectory, b: &KinematicBounds) -> (f64, f64) {
    let len = 2 * k.points();
    k.coords()
        .chunks(len)
        .map(|c| curve_violation(c, b))
        .fold((f64::NEG_INFINITY, f64::NEG_INFINITY), |(v, a), x| {
            (v.max(x.velocity), a.max(x.acceleration))
        })
}
