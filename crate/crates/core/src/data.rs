//! Synthetic cardiac-like dynamic phantoms and the on-disk dataset format.
//!
//! A dataset directory holds `manifest.json` plus one raw little-endian `f64` blob per
//! volume (`vol_<i>.f64`), each laid out `[T, H, W]` row-major.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Real-valued image sequence `[T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynVolume {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DynVolume {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "volume dims must be positive, got [{}, {}, {}]",
                frames, height, width
            )));
        }
        if data.len() != frames * height * width {
            return Err(Error::shape(format!(
                "volume [{}, {}, {}] needs {} values, got {}",
                frames,
                height,
                width,
                frames * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(DynVolume {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        DynVolume {
            frames,
            height,
            width,
            data: vec![0.0; frames * height * width],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [f, h, w] => Self::new(f, h, w, t.data().to_vec()),
            [1, f, h, w] => Self::new(f, h, w, t.data().to_vec()),
            _ => Err(Error::shape(format!("expected [T,H,W] tensor, got {:?}", t.shape()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("volume shape is consistent")
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    /// Frames `start .. start + len`.
    pub fn frames_range(&self, start: usize, len: usize) -> Result<DynVolume> {
        if len == 0 || start + len > self.frames {
            return Err(Error::shape(format!(
                "frame range [{}, {}) outside {} frames",
                start,
                start + len,
                self.frames
            )));
        }
        let n = self.height * self.width;
        DynVolume::new(
            len,
            self.height,
            self.width,
            self.data[start * n..(start + len) * n].to_vec(),
        )
    }

    /// Splits into consecutive `k`-frame units; `T` must be a multiple of `k`.
    pub fn partition(&self, k: usize) -> Result<Vec<DynVolume>> {
        if k == 0 || self.frames % k != 0 {
            return Err(Error::invalid(format!(
                "cannot partition {} frames into units of {}",
                self.frames, k
            )));
        }
        (0..self.frames / k).map(|i| self.frames_range(i * k, k)).collect()
    }

    pub fn concat(parts: &[DynVolume]) -> Result<DynVolume> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of no volumes"))?;
        let mut data = Vec::new();
        let mut frames = 0;
        for p in parts {
            if p.height != first.height || p.width != first.width {
                return Err(Error::shape("concat of volumes with different grids"));
            }
            frames += p.frames;
            data.extend_from_slice(&p.data);
        }
        DynVolume::new(frames, first.height, first.width, data)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Parameters of the synthetic phantom generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Static background ellipses inside the body outline.
    pub n_ellipses: usize,
    /// Relative radius oscillation amplitude range of the pulsating ellipse.
    pub amplitude: (f64, f64),
    /// Oscillation frequency range in cycles per frame.
    pub frequency: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            height: 32,
            width: 32,
            frames: 8,
            n_ellipses: 4,
            amplitude: (0.15, 0.3),
            frequency: (1.0 / 16.0, 1.0 / 8.0),
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::invalid("phantom grid and frame count must be positive"));
        }
        for (name, (lo, hi)) in [("amplitude", self.amplitude), ("frequency", self.frequency)] {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::invalid(format!("phantom {} range ({}, {}) invalid", name, lo, hi)));
            }
        }
        if self.amplitude.1 >= 1.0 {
            return Err(Error::invalid("phantom amplitude must stay below 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    /// Soft coverage in [0, 1] with a logistic edge about half a pixel wide.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        let r = (u * u + v * v).sqrt();
        let dist = (r - 1.0) * self.a.min(self.b);
        1.0 / (1.0 + (dist / 0.35).exp())
    }

    fn paint(&self, img: &mut [f64], h: usize, w: usize) {
        for i in 0..h {
            for j in 0..w {
                let cov = self.coverage(i as f64 + 0.5, j as f64 + 0.5);
                let p = &mut img[i * w + j];
                *p += cov * (self.intensity - *p);
            }
        }
    }
}

/// Static body with background ellipses and one ellipse whose radii oscillate over time.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<DynVolume> {
    spec.validate()?;
    let (h, w) = (spec.height as f64, spec.width as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let body = Ellipse {
        cx: h / 2.0 + rng.gen_range(-0.03..0.03) * h,
        cy: w / 2.0 + rng.gen_range(-0.03..0.03) * w,
        a: rng.gen_range(0.36..0.44) * h,
        b: rng.gen_range(0.30..0.40) * w,
        angle: rng.gen_range(-0.3..0.3),
        intensity: rng.gen_range(0.25..0.4),
    };
    let mut statics = Vec::with_capacity(spec.n_ellipses);
    for _ in 0..spec.n_ellipses {
        let r = rng.gen_range(0.0..0.6);
        let th = rng.gen_range(0.0..2.0 * PI);
        statics.push(Ellipse {
            cx: body.cx + r * body.a * th.cos(),
            cy: body.cy + r * body.b * th.sin(),
            a: rng.gen_range(0.04..0.12) * h,
            b: rng.gen_range(0.04..0.12) * w,
            angle: rng.gen_range(0.0..PI),
            intensity: rng.gen_range(0.1..0.7),
        });
    }
    let heart = Ellipse {
        cx: body.cx + rng.gen_range(-0.08..0.08) * h,
        cy: body.cy + rng.gen_range(-0.08..0.08) * w,
        a: rng.gen_range(0.12..0.18) * h,
        b: rng.gen_range(0.10..0.16) * w,
        angle: rng.gen_range(0.0..PI),
        intensity: rng.gen_range(0.8..1.0),
    };
    let amp = sample_range(&mut rng, spec.amplitude);
    let freq = sample_range(&mut rng, spec.frequency);
    let phase = rng.gen_range(0.0..2.0 * PI);

    let mut base = vec![0.0; spec.height * spec.width];
    body.paint(&mut base, spec.height, spec.width);
    for e in &statics {
        e.paint(&mut base, spec.height, spec.width);
    }

    let npix = spec.height * spec.width;
    let mut data = Vec::with_capacity(spec.frames * npix);
    for t in 0..spec.frames {
        let s = 1.0 + amp * (2.0 * PI * freq * t as f64 + phase).sin();
        let beat = Ellipse {
            a: heart.a * s,
            b: heart.b * s,
            ..heart
        };
        let mut img = base.clone();
        beat.paint(&mut img, spec.height, spec.width);
        data.extend(img);
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::invalid(format!("noise distribution: {}", e)))?;
        for v in data.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    DynVolume::new(spec.frames, spec.height, spec.width, data)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// `count` phantoms with seeds `seed, seed + 1, ...`.
pub fn gen_dataset(spec: &PhantomSpec, count: usize) -> Result<Vec<DynVolume>> {
    (0..count)
        .map(|i| {
            gen_phantom(&PhantomSpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: String,
}

pub fn volume_file_name(i: usize) -> String {
    format!("vol_{}.f64", i)
}

pub fn save_dataset(dir: impl AsRef<Path>, volumes: &[DynVolume]) -> Result<()> {
    let dir = dir.as_ref();
    let first = volumes
        .first()
        .ok_or_else(|| Error::invalid("cannot save an empty dataset"))?;
    if volumes.iter().any(|v| v.shape() != first.shape()) {
        return Err(Error::shape("dataset volumes must share one shape"));
    }
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        count: volumes.len(),
        frames: first.frames,
        height: first.height,
        width: first.width,
        dtype: "f64le".into(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    for (i, v) in volumes.iter().enumerate() {
        fs::write(dir.join(volume_file_name(i)), f64_to_le_bytes(&v.data))?;
    }
    Ok(())
}

pub fn load_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&path)?)?;
    if manifest.version != DATASET_VERSION {
        return Err(Error::format(&path, format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != "f64le" {
        return Err(Error::format(&path, format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<DynVolume>> {
    let dir = dir.as_ref();
    let m = load_manifest(dir)?;
    let expected = m.frames * m.height * m.width * 8;
    (0..m.count)
        .map(|i| {
            let path = dir.join(volume_file_name(i));
            let bytes = fs::read(&path)?;
            if bytes.len() != expected {
                return Err(Error::format(
                    &path,
                    format!("blob has {} bytes, manifest implies {}", bytes.len(), expected),
                ));
            }
            DynVolume::new(m.frames, m.height, m.width, f64_from_le_bytes(&bytes))
                .map_err(|e| Error::format(&path, e.to_string()))
        })
        .collect()
}

pub(crate) fn f64_to_le_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f64_from_le_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect()
}
