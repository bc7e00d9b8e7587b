//! Feature similarity from phase congruency and gradient magnitude.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ON_F: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const K_NOISE: f64 = 2.0;
const PC_EPS: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;
const GUARD: f64 = 1e-8;

/// In-place 2D FFT of a row-major `h x w` array.
fn fft2(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in data.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Normalised frequency of FFT bin `i` on an `n`-point axis (unshifted order).
fn freq(i: usize, n: usize) -> f64 {
    let denom = if n % 2 == 1 { (n - 1).max(1) as f64 } else { n as f64 };
    let shifted = if i < n.div_ceil(2) { i as f64 } else { i as f64 - n as f64 };
    shifted / denom
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Phase congruency map (log-Gabor bank, 4 scales x 4 orientations).
pub fn phase_congruency(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = h * w;
    let mut spectrum: Vec<Complex64> = img.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut spectrum, h, w, false);

    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    let mut lowpass = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (freq(x, w), freq(y, h));
            let i = y * w + x;
            let r = fx.hypot(fy);
            lowpass[i] = 1.0 / (1.0 + (r / 0.45).powi(30));
            radius[i] = if i == 0 { 1.0 } else { r };
            let theta = (-fy).atan2(fx);
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }
    let log_gabor: Vec<Vec<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g: Vec<f64> = radius
                .iter()
                .zip(&lowpass)
                .map(|(r, lp)| (-(r / fo).ln().powi(2) / denom).exp() * lp)
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();
    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;

    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    for o in 0..NORIENT {
        let angle = o as f64 * PI / NORIENT as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = (0..n)
            .map(|i| {
                let ds = sin_t[i] * ca - cos_t[i] * sa;
                let dc = cos_t[i] * ca + sin_t[i] * sa;
                let d = ds.atan2(dc).abs();
                (-d * d / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut eo: Vec<Vec<Complex64>> = Vec::with_capacity(NSCALE);
        let mut ifft_filters: Vec<Vec<f64>> = Vec::with_capacity(NSCALE);
        let mut sum_an = vec![0.0; n];
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filt: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let mut spatial: Vec<Complex64> = filt.iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft2(&mut spatial, h, w, true);
            let root = (n as f64).sqrt();
            ifft_filters.push(spatial.iter().map(|c| c.re * root).collect());
            let mut resp: Vec<Complex64> = spectrum.iter().zip(&filt).map(|(c, f)| c * f).collect();
            fft2(&mut resp, h, w, true);
            for i in 0..n {
                sum_an[i] += resp[i].norm();
                sum_e[i] += resp[i].re;
                sum_o[i] += resp[i].im;
            }
            if s == 0 {
                em_n = filt.iter().map(|v| v * v).sum();
            }
            eo.push(resp);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let xe = sum_e[i].hypot(sum_o[i]) + PC_EPS;
            let (me, mo) = (sum_e[i] / xe, sum_o[i] / xe);
            for r in &eo {
                let (e, od) = (r[i].re, r[i].im);
                energy[i] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }
        // noise threshold from the finest scale's response statistics
        let median_e2n = median(eo[0].iter().map(|c| c.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5_f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };
        let mut sum_an2 = 0.0;
        let mut sum_aiaj = 0.0;
        for i in 0..n {
            for si in 0..NSCALE {
                let a = ifft_filters[si][i];
                sum_an2 += a * a;
                for f in &ifft_filters[si + 1..] {
                    sum_aiaj += a * f[i];
                }
            }
        }
        let noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (noise_energy2 / 2.0).max(0.0).sqrt();
        let est_noise = tau * (PI / 2.0).sqrt();
        let est_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let threshold = (est_noise + K_NOISE * est_sigma) / 1.7;
        for i in 0..n {
            energy_all[i] += (energy[i] - threshold).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    energy_all.iter().zip(&an_all).map(|(e, a)| e / (a + GUARD)).collect()
}

/// Scharr-type gradient magnitude with zero padding.
fn gradient_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    const DX: [[f64; 3]; 3] = [[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]];
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            img[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = at(y + a as isize - 1, x + b as isize - 1);
                    gx += DX[a][b] * v;
                    gy += DX[b][a] * v;
                }
            }
            out[y as usize * w + x as usize] = (gx / 16.0).hypot(gy / 16.0);
        }
    }
    out
}

/// Box-average by `f` then keep every `f`-th sample (no-op for `f == 1`).
fn downsample(img: &[f64], h: usize, w: usize, f: usize) -> (Vec<f64>, usize, usize) {
    if f <= 1 {
        return (img.to_vec(), h, w);
    }
    let (h2, w2) = (h.div_ceil(f), w.div_ceil(f));
    let mut out = Vec::with_capacity(h2 * w2);
    for y in (0..h).step_by(f) {
        for x in (0..w).step_by(f) {
            let mut s = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < h && xx < w {
                        s += img[yy * w + xx];
                    }
                }
            }
            out.push(s / (f * f) as f64);
        }
    }
    (out, h2, w2)
}

/// FSIM of `dist` against `reference`, both `h x w` on a 0..255 scale.
pub fn fsim_frame(dist: &[f64], reference: &[f64], h: usize, w: usize) -> f64 {
    let f = ((h.min(w) as f64 / 256.0).round() as usize).max(1);
    let (r, h2, w2) = downsample(reference, h, w, f);
    let (d, _, _) = downsample(dist, h, w, f);
    let pc1 = phase_congruency(&r, h2, w2);
    let pc2 = phase_congruency(&d, h2, w2);
    let g1 = gradient_magnitude(&r, h2, w2);
    let g2 = gradient_magnitude(&d, h2, w2);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h2 * w2 {
        let pc_sim = (2.0 * pc1[i] * pc2[i] + T1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + T1);
        let g_sim = (2.0 * g1[i] * g2[i] + T2) / (g1[i] * g1[i] + g2[i] * g2[i] + T2);
        let pcm = pc1[i].max(pc2[i]);
        num += g_sim * pc_sim * pcm;
        den += pcm;
    }
    (num + GUARD) / (den + GUARD)
}
