//! Exact NUDFT against a direct double-loop sum, its adjoint, the FFT on a full grid and
//! finite differences in the coordinates.

use std::f64::consts::PI;

use dynacq::data::DynVolume;
use dynacq::nufft::{nudft_adjoint, nudft_forward, nudft_grad_coords, KSamples};
use dynacq::trajectory::Trajectory;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

fn rand_volume(t: usize, h: usize, w: usize, seed: u64) -> DynVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DynVolume::new(t, h, w, (0..t * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_traj(t: usize, s: usize, m: usize, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Trajectory::from_coords(t, s, m, (0..t * s * m * 2).map(|_| rng.gen_range(-PI..PI)).collect(), true).unwrap()
}

/// `sum_{r,c} z[r,c] exp(-i (kx (r - H/2) + ky (c - W/2)))`, one exponential per term.
fn loop_oracle(frame: &[f64], h: usize, w: usize, kx: f64, ky: f64) -> Complex64 {
    let mut acc = Complex64::new(0.0, 0.0);
    for r in 0..h {
        for c in 0..w {
            let x = r as f64 - (h / 2) as f64;
            let y = c as f64 - (w / 2) as f64;
            acc += frame[r * w + c] * Complex64::from_polar(1.0, -(kx * x + ky * y));
        }
    }
    acc
}

fn max_rel(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = b.iter().map(|v| v.norm()).fold(1.0, f64::max);
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max) / scale
}

#[test]
fn forward_matches_double_loop() {
    for (t, h, w, seed) in [(4, 32, 32, 1), (2, 7, 10, 2), (1, 1, 1, 3)] {
        let z = rand_volume(t, h, w, seed);
        let k = rand_traj(t, 8, 64, seed + 10);
        let x = nudft_forward(&z, &k).unwrap();
        let per = k.samples_per_frame();
        let mut want = Vec::new();
        for f in 0..t {
            let c = k.frame(f);
            for j in 0..per {
                want.push(loop_oracle(z.frame(f), h, w, c[2 * j], c[2 * j + 1]));
            }
        }
        let err = max_rel(x.values(), &want);
        assert!(err < 1e-12, "{}x{}x{}: {:e}", t, h, w, err);
    }
}

#[test]
fn adjoint_identity() {
    let (t, h, w) = (3, 12, 9);
    let z = rand_volume(t, h, w, 4);
    let k = rand_traj(t, 4, 20, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vals: Vec<Complex64> = (0..k.coords().len() / 2)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let xs = KSamples::new(k.shape()[..3].try_into().unwrap(), vals, dynacq::nufft::trajectory_id(&k)).unwrap();
    let fz = nudft_forward(&z, &k).unwrap();
    // <F z, x> = sum_j Fz_j conj(x_j);  <z, A x> = sum z conj(A x);  A = F^H / (H W)
    let lhs: Complex64 = fz.values().iter().zip(xs.values()).map(|(a, b)| a * b.conj()).sum();
    let (re, im) = nudft_adjoint(&xs, &k, (t, h, w)).unwrap();
    let rhs: Complex64 = z
        .data()
        .iter()
        .zip(re.data().iter().zip(im.data()))
        .map(|(zv, (r, i))| zv * Complex64::new(*r, -*i))
        .sum::<Complex64>()
        * (h * w) as f64;
    let err = (lhs - rhs).norm() / lhs.norm().max(1.0);
    assert!(err < 1e-10, "adjoint identity off by {:e}", err);
}

#[test]
fn full_grid_matches_fft() {
    let (h, w) = (16, 12);
    let z = rand_volume(1, h, w, 7);
    let mut coords = Vec::new();
    for p in 0..h {
        for q in 0..w {
            coords.push(2.0 * PI * p as f64 / h as f64 - if p >= h / 2 { 2.0 * PI } else { 0.0 });
            coords.push(2.0 * PI * q as f64 / w as f64 - if q >= w / 2 { 2.0 * PI } else { 0.0 });
        }
    }
    let k = Trajectory::from_coords(1, h, w, coords, false).unwrap();
    let x = nudft_forward(&z, &k).unwrap();

    let mut buf: Vec<Complex64> = z.data().iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let (row, col) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut tmp = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            tmp[r] = buf[r * w + c];
        }
        col.process(&mut tmp);
        for r in 0..h {
            buf[r * w + c] = tmp[r];
        }
    }
    // centering the pixel grid multiplies bin (p, q) by exp(i pi (p + q))
    let want: Vec<Complex64> = (0..h * w)
        .map(|i| {
            let (p, q) = (i / w, i % w);
            buf[i] * if (p + q) % 2 == 0 { 1.0 } else { -1.0 }
        })
        .collect();
    let err = max_rel(x.values(), &want);
    assert!(err < 1e-9, "fft mismatch {:e}", err);
}

#[test]
fn linear_in_the_image() {
    let (a, b) = (rand_volume(2, 6, 6, 8), rand_volume(2, 6, 6, 9));
    let k = rand_traj(2, 2, 5, 10);
    let combo = DynVolume::new(2, 6, 6, a.data().iter().zip(b.data()).map(|(x, y)| 3.0 * x - 0.5 * y).collect()).unwrap();
    let (fa, fb, fc) = (
        nudft_forward(&a, &k).unwrap(),
        nudft_forward(&b, &k).unwrap(),
        nudft_forward(&combo, &k).unwrap(),
    );
    for i in 0..fc.values().len() {
        let want = fa.values()[i] * 3.0 - fb.values()[i] * 0.5;
        assert!((fc.values()[i] - want).norm() < 1e-12);
    }
}

#[test]
fn frames_are_independent() {
    let z = rand_volume(3, 5, 5, 11);
    let k = rand_traj(3, 2, 4, 12);
    let x = nudft_forward(&z, &k).unwrap();
    // reversing frames of both the image and the trajectory reverses the samples
    let rev = |v: &DynVolume| {
        DynVolume::concat(&(0..3).rev().map(|t| v.frames_range(t, 1).unwrap()).collect::<Vec<_>>()).unwrap()
    };
    let per = k.coords().len() / 3;
    let kc: Vec<f64> = (0..3).rev().flat_map(|t| k.coords()[t * per..(t + 1) * per].to_vec()).collect();
    let kr = Trajectory::from_coords(3, 2, 4, kc, true).unwrap();
    let xr = nudft_forward(&rev(&z), &kr).unwrap();
    let n = x.values().len() / 3;
    for t in 0..3 {
        assert_eq!(&x.values()[t * n..(t + 1) * n], &xr.values()[(2 - t) * n..(3 - t) * n]);
    }
}

#[test]
fn coordinate_gradient_matches_finite_differences() {
    let z = rand_volume(2, 8, 8, 13);
    let k = rand_traj(2, 2, 3, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let up: Vec<Complex64> = (0..k.coords().len() / 2)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    let up = KSamples::new([2, 2, 3], up, 0).unwrap();
    let loss = |c: &[f64]| -> f64 {
        let kk = Trajectory::from_coords(2, 2, 3, c.to_vec(), true).unwrap();
        let x = nudft_forward(&z, &kk).unwrap();
        x.values().iter().zip(up.values()).map(|(a, u)| a.re * u.re + a.im * u.im).sum()
    };
    let g = nudft_grad_coords(&z, &k, &up).unwrap();
    let hstep = 1e-6;
    for i in 0..g.len() {
        let mut p = k.coords().to_vec();
        let mut m = k.coords().to_vec();
        p[i] += hstep;
        m[i] -= hstep;
        let cd = (loss(&p) - loss(&m)) / (2.0 * hstep);
        let rel = (g[i] - cd).abs() / (g[i].abs() + cd.abs() + 1e-12);
        assert!(rel < 1e-6, "coord {}: {} vs {}", i, g[i], cd);
    }
}

#[test]
fn mismatched_frames_rejected() {
    let z = rand_volume(3, 4, 4, 16);
    let k = rand_traj(2, 1, 4, 17);
    assert!(nudft_forward(&z, &k).is_err());
    let x = KSamples::zeros_like(&k);
    assert!(nudft_adjoint(&x, &k, (3, 4, 4)).is_err());
}
