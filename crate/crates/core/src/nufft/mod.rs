//! Exact non-uniform DFT between centered Cartesian frames and arbitrary k-space points.
//!
//! Forward: `X[t,j] = sum_{x,y} z[t,x,y] exp(-i (wx x + wy y))`, with `x` indexing rows
//! (`H`) and `y` columns (`W`), both centered at `n/2`. Adjoint: the conjugate sum scaled
//! by `1/(H W)`, no density compensation. The same kernels back the autodiff nodes
//! [`Graph::nudft`](crate::autodiff::Graph::nudft) and `nudft_adjoint`.

pub(crate) mod kernel;

use std::collections::hash_map::DefaultHasher;
use std::f64::consts::PI;
use std::hash::{Hash, Hasher};

use num_complex::Complex64;

use crate::data::DynVolume;
use crate::error::{Error, Result};
use crate::trajectory::Trajectory;
pub use kernel::centered_coords;
use kernel::Grid;

/// Complex samples `[T, shots, points]` tied to the trajectory that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct KSamples {
    shape: [usize; 3],
    values: Vec<Complex64>,
    coords_ref: u64,
}

impl KSamples {
    pub fn new(shape: [usize; 3], values: Vec<Complex64>, coords_ref: u64) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!(
                "k-space samples {:?} need {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        Ok(KSamples { shape, values, coords_ref })
    }

    pub fn zeros_like(k: &Trajectory) -> Self {
        let shape = [k.frames(), k.shots(), k.points()];
        KSamples {
            shape,
            values: vec![Complex64::new(0.0, 0.0); shape.iter().product()],
            coords_ref: trajectory_id(k),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn coords_ref(&self) -> u64 {
        self.coords_ref
    }

    /// Complex inner product `sum conj(a) b`.
    pub fn dot(&self, other: &KSamples) -> Result<Complex64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum())
    }
}

/// Fingerprint of the coordinate values and layout.
pub fn trajectory_id(k: &Trajectory) -> u64 {
    let mut h = DefaultHasher::new();
    k.shape().hash(&mut h);
    for v in k.coords() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Converts a frequency in cycles per field of view on an `n`-pixel axis to radians per pixel.
pub fn cycles_per_fov_to_radians(k: f64, n: usize) -> f64 {
    2.0 * PI * k / n as f64
}

fn check_pair(frames: usize, k: &Trajectory) -> Result<()> {
    if frames != k.frames() {
        return Err(Error::shape(format!(
            "volume has {} frames, trajectory has {}",
            frames,
            k.frames()
        )));
    }
    Ok(())
}

pub fn nudft_forward(z: &DynVolume, k: &Trajectory) -> Result<KSamples> {
    check_pair(z.frames(), k)?;
    let mut grid = Grid::new(z.height(), z.width());
    let mut out = KSamples::zeros_like(k);
    let per_frame = k.samples_per_frame();
    for t in 0..z.frames() {
        let frame = z.frame(t);
        let coords = k.frame(t);
        for (j, v) in out.values[t * per_frame..(t + 1) * per_frame].iter_mut().enumerate() {
            *v = grid.moments(frame, None, coords[2 * j], coords[2 * j + 1], false)[0];
        }
    }
    Ok(out)
}

/// Scaled adjoint onto `[T, H, W]`; returns (real, imaginary) planes.
pub fn nudft_adjoint(
    x: &KSamples,
    k: &Trajectory,
    out_shape: (usize, usize, usize),
) -> Result<(DynVolume, DynVolume)> {
    let (t_n, h, w) = out_shape;
    check_pair(t_n, k)?;
    if x.shape != [k.frames(), k.shots(), k.points()] {
        return Err(Error::shape(format!(
            "samples {:?} do not match trajectory {:?}",
            x.shape,
            k.shape()
        )));
    }
    let mut re = DynVolume::zeros(t_n, h, w);
    let mut im = DynVolume::zeros(t_n, h, w);
    let mut grid = Grid::new(h, w);
    let scale = 1.0 / grid.npix() as f64;
    let per_frame = k.samples_per_frame();
    let npix = h * w;
    for t in 0..t_n {
        let coords = k.frame(t);
        let fr = &mut re.data_mut()[t * npix..(t + 1) * npix];
        let fi = &mut im.data_mut()[t * npix..(t + 1) * npix];
        for j in 0..per_frame {
            let v = x.values[t * per_frame + j] * scale;
            grid.scatter(fr, fi, coords[2 * j], coords[2 * j + 1], v);
        }
    }
    Ok((re, im))
}

/// Gradient of `Re <upstream, F_K z>` with respect to the coordinates, shaped like `k`.
///
/// `upstream` holds `dL/dRe X + i dL/dIm X`, the convention used throughout autodiff.
pub fn nudft_grad_coords(z: &DynVolume, k: &Trajectory, upstream: &KSamples) -> Result<Vec<f64>> {
    check_pair(z.frames(), k)?;
    if upstream.shape != [k.frames(), k.shots(), k.points()] {
        return Err(Error::shape(format!(
            "upstream {:?} does not match trajectory {:?}",
            upstream.shape,
            k.shape()
        )));
    }
    let mut grid = Grid::new(z.height(), z.width());
    let mut out = vec![0.0; k.coords().len()];
    let per_frame = k.samples_per_frame();
    let mi = Complex64::new(0.0, -1.0);
    for t in 0..z.frames() {
        let frame = z.frame(t);
        let coords = k.frame(t);
        for j in 0..per_frame {
            let idx = t * per_frame + j;
            let g = upstream.values[idx];
            if g.re == 0.0 && g.im == 0.0 {
                continue;
            }
            let [_, sx, sy] = grid.moments(frame, None, coords[2 * j], coords[2 * j + 1], true);
            out[2 * idx] = (g.conj() * mi * sx).re;
            out[2 * idx + 1] = (g.conj() * mi * sy).re;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(rng: &mut ChaCha8Rng, t: usize, h: usize, w: usize) -> DynVolume {
        DynVolume::new(t, h, w, (0..t * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_traj(rng: &mut ChaCha8Rng, t: usize, s: usize, m: usize) -> Trajectory {
        let c = (0..t * s * m * 2).map(|_| rng.gen_range(-PI..PI)).collect();
        Trajectory::from_coords(t, s, m, c, true).unwrap()
    }

    #[test]
    fn impulse_and_dc() {
        let mut z = DynVolume::zeros(1, 6, 4);
        z.data_mut()[3 * 4 + 2] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = random_traj(&mut rng, 1, 2, 5);
        for v in nudft_forward(&z, &k).unwrap().values() {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        }
        let ones = DynVolume::new(1, 6, 4, vec![1.0; 24]).unwrap();
        let dc = Trajectory::from_coords(1, 1, 1, vec![0.0, 0.0], false).unwrap();
        assert_eq!(nudft_forward(&ones, &dc).unwrap().values()[0], Complex64::new(24.0, 0.0));
    }

    #[test]
    fn dc_sample_adjoint_is_constant() {
        let dc = Trajectory::from_coords(1, 1, 1, vec![0.0, 0.0], false).unwrap();
        let x = KSamples::new([1, 1, 1], vec![Complex64::new(12.0, 0.0)], 0).unwrap();
        let (re, im) = nudft_adjoint(&x, &dc, (1, 3, 4)).unwrap();
        assert!(re.data().iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(im.data().iter().all(|v| *v == 0.0));
        let zero = KSamples::zeros_like(&dc);
        let (re, _) = nudft_adjoint(&zero, &dc, (1, 3, 4)).unwrap();
        assert!(re.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_mismatch_and_out_of_range() {
        let z = DynVolume::zeros(2, 4, 4);
        let k = Trajectory::from_coords(1, 1, 1, vec![0.0, 0.0], false).unwrap();
        assert!(matches!(nudft_forward(&z, &k), Err(Error::Shape(_))));
        assert!(Trajectory::from_coords(1, 1, 1, vec![4.0, 0.0], false).is_err());
    }

    #[test]
    fn zero_upstream_and_impulse_give_zero_coordinate_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = random_traj(&mut rng, 1, 2, 3);
        let mut z = DynVolume::zeros(1, 4, 4);
        z.data_mut()[2 * 4 + 2] = 1.0;
        let mut up = KSamples::zeros_like(&k);
        for v in up.values_mut() {
            *v = Complex64::new(rng.gen(), rng.gen());
        }
        assert!(nudft_grad_coords(&z, &k, &up).unwrap().iter().all(|g| g.abs() < 1e-14));
        let z = random_volume(&mut rng, 1, 4, 4);
        let zero = KSamples::zeros_like(&k);
        assert!(nudft_grad_coords(&z, &k, &zero).unwrap().iter().all(|g| *g == 0.0));
    }
}
