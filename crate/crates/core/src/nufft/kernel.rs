//! Separable evaluation of `exp(-i (wx x + wy y))` sums over a centered grid.

use num_complex::Complex64;

/// Centered integer coordinates `-n/2 .. n/2 - 1` (for odd `n`, `-(n-1)/2 ..= (n-1)/2`).
pub fn centered_coords(n: usize) -> Vec<f64> {
    let half = (n / 2) as f64;
    (0..n).map(|i| i as f64 - half).collect()
}

pub(crate) struct Grid {
    pub h: usize,
    pub w: usize,
    xs: Vec<f64>,
    ys: Vec<f64>,
    // scratch
    ey_re: Vec<f64>,
    ey_im: Vec<f64>,
    ex: Vec<Complex64>,
}

/// `(S0, Sx, Sy)` with `S0 = sum z e^{-i phi}`, `Sx = sum x z e^{-i phi}`, `Sy = sum y z e^{-i phi}`.
pub(crate) type Moments = [Complex64; 3];

impl Grid {
    pub fn new(h: usize, w: usize) -> Self {
        Grid {
            h,
            w,
            xs: centered_coords(h),
            ys: centered_coords(w),
            ey_re: vec![0.0; w],
            ey_im: vec![0.0; w],
            ex: vec![Complex64::new(0.0, 0.0); h],
        }
    }

    pub fn npix(&self) -> usize {
        self.h * self.w
    }

    fn tables(&mut self, wx: f64, wy: f64, sign: f64) {
        for (y, (er, ei)) in self
            .ys
            .iter()
            .zip(self.ey_re.iter_mut().zip(self.ey_im.iter_mut()))
        {
            let (s, c) = (sign * wy * y).sin_cos();
            *er = c;
            *ei = s;
        }
        for (x, e) in self.xs.iter().zip(self.ex.iter_mut()) {
            let (s, c) = (sign * wx * x).sin_cos();
            *e = Complex64::new(c, s);
        }
    }

    /// Fourier sums of a (possibly complex) image at one frequency. When `with_moments`
    /// is false only `S0` is computed and the other two entries are zero.
    pub fn moments(
        &mut self,
        re: &[f64],
        im: Option<&[f64]>,
        wx: f64,
        wy: f64,
        with_moments: bool,
    ) -> Moments {
        self.tables(wx, wy, -1.0);
        let w = self.w;
        let zero = Complex64::new(0.0, 0.0);
        let (mut s0, mut sx, mut sy) = (zero, zero, zero);
        for xi in 0..self.h {
            let row_re = &re[xi * w..(xi + 1) * w];
            let (mut r0r, mut r0i, mut ryr, mut ryi) = (0.0, 0.0, 0.0, 0.0);
            match im {
                None => {
                    for yi in 0..w {
                        let z = row_re[yi];
                        let (cr, ci) = (z * self.ey_re[yi], z * self.ey_im[yi]);
                        r0r += cr;
                        r0i += ci;
                        if with_moments {
                            ryr += self.ys[yi] * cr;
                            ryi += self.ys[yi] * ci;
                        }
                    }
                }
                Some(im) => {
                    let row_im = &im[xi * w..(xi + 1) * w];
                    for yi in 0..w {
                        let (zr, zi) = (row_re[yi], row_im[yi]);
                        let (er, ei) = (self.ey_re[yi], self.ey_im[yi]);
                        let cr = zr * er - zi * ei;
                        let ci = zr * ei + zi * er;
                        r0r += cr;
                        r0i += ci;
                        if with_moments {
                            ryr += self.ys[yi] * cr;
                            ryi += self.ys[yi] * ci;
                        }
                    }
                }
            }
            let ex = self.ex[xi];
            let r0 = ex * Complex64::new(r0r, r0i);
            s0 += r0;
            if with_moments {
                sx += r0 * self.xs[xi];
                sy += ex * Complex64::new(ryr, ryi);
            }
        }
        [s0, sx, sy]
    }

    /// `out[x, y] += value * exp(+i (wx x + wy y))`.
    pub fn scatter(
        &mut self,
        out_re: &mut [f64],
        out_im: &mut [f64],
        wx: f64,
        wy: f64,
        value: Complex64,
    ) {
        if value.re == 0.0 && value.im == 0.0 {
            return;
        }
        self.tables(wx, wy, 1.0);
        let w = self.w;
        for xi in 0..self.h {
            let b = value * self.ex[xi];
            let row_re = &mut out_re[xi * w..(xi + 1) * w];
            let row_im = &mut out_im[xi * w..(xi + 1) * w];
            for yi in 0..w {
                let (er, ei) = (self.ey_re[yi], self.ey_im[yi]);
                row_re[yi] += b.re * er - b.im * ei;
                row_im[yi] += b.re * ei + b.im * er;
            }
        }
    }
}
