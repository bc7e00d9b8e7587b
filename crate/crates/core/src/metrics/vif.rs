//! Pixel-domain visual information fidelity over a four-scale Gaussian pyramid.

use crate::error::{Error, Result};

const SIGMA_NSQ: f64 = 2.0;
const FLOOR: f64 = 1e-10;
/// Finest-scale window; frames must be at least this large.
pub const MIN_SIDE: usize = 17;

fn gaussian(n: usize) -> Vec<f64> {
    let sigma = n as f64 / 5.0;
    let c = (n / 2) as f64;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    // half-sample symmetric: d c b a | a b c d | d c b a
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i - 1;
    }
    if i >= n {
        i = 2 * n - i - 1;
    }
    i as usize
}

/// Separable "same" filtering with symmetric boundary extension.
fn filter(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * img[y * w + reflect(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                s += kv * tmp[reflect(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn decimate(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(h2 * w2);
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out.push(img[y * w + x]);
        }
    }
    (out, h2, w2)
}

/// VIF-P of `dist` against `reference`, both `h x w` on a 0..255 scale.
pub fn vif_frame(dist: &[f64], reference: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::invalid(format!(
            "VIF needs frames of at least {0}x{0}, got {1}x{2}",
            MIN_SIDE, h, w
        )));
    }
    let (mut r, mut d) = (reference.to_vec(), dist.to_vec());
    let (mut h, mut w) = (h, w);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 0..4 {
        let n = (1 << (4 - scale)) + 1;
        let win = gaussian(n);
        if scale > 0 {
            let rf = filter(&r, h, w, &win);
            let df = filter(&d, h, w, &win);
            let (r2, h2, w2) = decimate(&rf, h, w);
            let (d2, _, _) = decimate(&df, h, w);
            r = r2;
            d = d2;
            h = h2;
            w = w2;
        }
        let mu1 = filter(&r, h, w, &win);
        let mu2 = filter(&d, h, w, &win);
        let rr: Vec<f64> = r.iter().map(|v| v * v).collect();
        let dd: Vec<f64> = d.iter().map(|v| v * v).collect();
        let rd: Vec<f64> = r.iter().zip(&d).map(|(a, b)| a * b).collect();
        let (f_rr, f_dd, f_rd) = (filter(&rr, h, w, &win), filter(&dd, h, w, &win), filter(&rd, h, w, &win));
        for i in 0..h * w {
            let mut s1 = (f_rr[i] - mu1[i] * mu1[i]).max(0.0);
            let s2 = (f_dd[i] - mu2[i] * mu2[i]).max(0.0);
            let s12 = f_rd[i] - mu1[i] * mu2[i];
            let (mut g, mut sv);
            if s1 < FLOOR {
                // no reference signal: everything observed is noise
                g = 0.0;
                sv = s2;
                s1 = 0.0;
            } else {
                g = s12 / s1;
                sv = s2 - g * s12;
            }
            if s2 < FLOOR {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = s2;
                g = 0.0;
            }
            sv = sv.max(FLOOR);
            num += (1.0 + g * g * s1 / (sv + SIGMA_NSQ)).log10();
            den += (1.0 + s1 / SIGMA_NSQ).log10();
        }
    }
    if den == 0.0 {
        let identical = dist.iter().zip(reference).all(|(a, b)| a == b);
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(num / den)
}
