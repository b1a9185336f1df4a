//! Synthetic standard-dose phantoms, low-dose simulation, dataset splits and
//! the on-disk dataset layout.

mod pvol;
mod splits;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use sha2::{Digest, Sha256};

pub use crate::volume::{ImageSlice, ImageVolume};
pub use pvol::{decode_pvol, encode_pvol, read_volume, write_volume};
pub use splits::{build_splits, Role, SplitConfig, SplitManifest};

use crate::error::{Error, Result};

/// Derives an independent RNG seed for `key` (a volume id, a stage tag...)
/// from a run seed. Stable across platforms and releases.
pub fn stream_seed(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub min_ellipses: usize,
    pub max_ellipses: usize,
    pub intensity_levels: Vec<f64>,
    pub background: f64,
    pub slice_size: usize,
    pub volume_depth: usize,
    pub patch_size: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            min_ellipses: 4,
            max_ellipses: 8,
            intensity_levels: vec![0.15, 0.3, 0.5],
            background: 0.02,
            slice_size: 64,
            volume_depth: 8,
            patch_size: 8,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.slice_size == 0
            || !self.slice_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::config(format!(
                "slice size {} is not divisible by patch size {}",
                self.slice_size, self.patch_size
            )));
        }
        if self.volume_depth == 0 {
            return Err(Error::config("volume depth must be positive"));
        }
        if self.min_ellipses > self.max_ellipses {
            return Err(Error::config("ellipse count range is empty"));
        }
        if self.max_ellipses > 0 && self.intensity_levels.is_empty() {
            return Err(Error::config("ellipses need at least one intensity level"));
        }
        if let Some(l) = self
            .intensity_levels
            .iter()
            .find(|l| !(**l > 0.0 && **l <= 1.0))
        {
            return Err(Error::config(format!("intensity level {l} outside (0, 1]")));
        }
        if !(0.0..=0.1).contains(&self.background) {
            return Err(Error::config(format!(
                "background {} outside [0, 0.1]",
                self.background
            )));
        }
        Ok(())
    }
}

/// One additive ellipsoid of a phantom, in voxel-center coordinates
/// `(z, y, x)`, rotated by `angle` in the slice plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub angle: f64,
    pub level: f64,
}

impl Ellipsoid {
    pub fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        let u = (dx * c + dy * s) / self.radii[2];
        let v = (-dx * s + dy * c) / self.radii[1];
        let w = dz / self.radii[0];
        u * u + v * v + w * w <= 1.0
    }
}

/// The shapes [`gen_spet_volume`] rasterizes for `(seed, spec)`.
pub fn place_ellipsoids(seed: u64, spec: &PhantomSpec) -> Result<Vec<Ellipsoid>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(spec.min_ellipses..=spec.max_ellipses);
    let s = spec.slice_size as f64;
    let d = spec.volume_depth as f64;
    let shapes = (0..n)
        .map(|_| Ellipsoid {
            center: [
                rng.random_range(0.0..d),
                rng.random_range(0.25 * s..0.75 * s),
                rng.random_range(0.25 * s..0.75 * s),
            ],
            radii: [
                rng.random_range(0.6 * d..1.5 * d),
                rng.random_range(0.06 * s..0.3 * s),
                rng.random_range(0.06 * s..0.3 * s),
            ],
            angle: rng.random_range(0.0..PI),
            level: spec.intensity_levels[rng.random_range(0..spec.intensity_levels.len())],
        })
        .collect();
    Ok(shapes)
}

/// Rasterizes an additive ellipsoid phantom: background plus the level of
/// every shape covering a voxel center, clamped to 1.
pub fn gen_spet_volume(seed: u64, spec: &PhantomSpec) -> Result<ImageVolume> {
    let shapes = place_ellipsoids(seed, spec)?;
    let (depth, size) = (spec.volume_depth, spec.slice_size);
    let mut data = Vec::with_capacity(depth * size * size);
    for z in 0..depth {
        for y in 0..size {
            for x in 0..size {
                let (zc, yc, xc) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                let mut v = spec.background;
                for e in shapes.iter().filter(|e| e.contains(zc, yc, xc)) {
                    v += e.level;
                }
                data.push(v.min(1.0) as f32);
            }
        }
    }
    ImageVolume::new(depth, size, size, 1, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DoseParams {
    pub drf: f64,
    pub counts_per_unit: f64,
    pub blur_sigma: f64,
}

impl Default for DoseParams {
    fn default() -> Self {
        Self {
            drf: 100.0,
            counts_per_unit: 1e4,
            blur_sigma: 1.0,
        }
    }
}

impl DoseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.drf >= 1.0 && self.drf.is_finite()) {
            return Err(Error::config(format!(
                "dose reduction factor {} < 1",
                self.drf
            )));
        }
        if !(self.counts_per_unit > 0.0 && self.counts_per_unit.is_finite()) {
            return Err(Error::config("counts per unit must be positive"));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::config("blur sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Simulates a reduced-dose acquisition: Poisson counts at `1/drf` of the
/// standard-dose rate, rescaled back to intensity units, then an in-plane
/// Gaussian blur and a clamp to `[0, 1]`.
pub fn derive_lpet(spet: &ImageVolume, dose: &DoseParams, seed: u64) -> Result<ImageVolume> {
    dose.validate()?;
    spet.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = dose.counts_per_unit / dose.drf;
    let mut noisy: Vec<f64> = Vec::with_capacity(spet.data.len());
    for &v in &spet.data {
        let lambda = v as f64 * rate;
        let k = if lambda > 0.0 {
            let p = Poisson::new(lambda)
                .map_err(|e| Error::numeric("dose simulation", e.to_string()))?;
            p.sample(&mut rng)
        } else {
            0.0
        };
        noisy.push(k / rate);
    }
    let plane = spet.height * spet.width * spet.channels;
    let mut out = Vec::with_capacity(noisy.len());
    for z in 0..spet.depth {
        let s = &noisy[z * plane..(z + 1) * plane];
        let blurred = gaussian_blur(s, spet.height, spet.width, dose.blur_sigma);
        out.extend(blurred.into_iter().map(|v| v.clamp(0.0, 1.0) as f32));
    }
    ImageVolume::new(spet.depth, spet.height, spet.width, spet.channels, out)
}

/// Separable Gaussian blur with replicated edges; `sigma == 0` is identity.
pub fn gaussian_blur(img: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sx = clampi(x as isize + j as isize - radius, width);
                acc += k * img[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; img.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sy = clampi(y as isize + j as isize - radius, height);
                acc += k * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Directory layout of a generated dataset.
#[derive(Clone, Debug)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.tsv")
    }

    pub fn spet(&self, id: &str) -> PathBuf {
        self.root.join("spet").join(format!("{id}.pvol"))
    }

    pub fn lpet(&self, id: &str) -> PathBuf {
        self.root.join("lpet").join(format!("{id}.pvol"))
    }

    pub fn rpet(&self, id: &str) -> PathBuf {
        self.root.join("rpet").join(format!("{id}.pvol"))
    }
}

/// Everything needed to synthesize a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub dose: DoseParams,
    pub splits: SplitConfig,
}

/// A standard-dose / low-dose pair for one volume id.
#[derive(Clone, Debug)]
pub struct PairedVolume {
    pub id: String,
    pub spet: ImageVolume,
    pub lpet: ImageVolume,
}

/// Generates the SPET volume for `id` and, for paired ids, its LPET twin.
/// Each volume's randomness depends only on `(seed, id)`.
pub fn synthesize(seed: u64, id: &str, cfg: &DataConfig) -> Result<PairedVolume> {
    let spet = gen_spet_volume(stream_seed(seed, &format!("spet/{id}")), &cfg.phantom)?;
    let lpet = derive_lpet(&spet, &cfg.dose, stream_seed(seed, &format!("lpet/{id}")))?;
    Ok(PairedVolume {
        id: id.to_string(),
        spet,
        lpet,
    })
}

/// Writes every volume named by the split manifest plus the manifest itself.
pub fn write_dataset(root: &Path, cfg: &DataConfig, seed: u64) -> Result<SplitManifest> {
    let manifest = build_splits(&cfg.splits)?;
    let layout = DatasetLayout::new(root);
    fs::create_dir_all(root.join("spet"))?;
    fs::create_dir_all(root.join("lpet"))?;
    for id in &manifest.unpaired_spet {
        let spet = gen_spet_volume(stream_seed(seed, &format!("spet/{id}")), &cfg.phantom)?;
        write_volume(&layout.spet(id), &spet)?;
    }
    for id in manifest.paired_train.iter().chain(&manifest.paired_eval) {
        let pair = synthesize(seed, id, cfg)?;
        write_volume(&layout.spet(id), &pair.spet)?;
        write_volume(&layout.lpet(id), &pair.lpet)?;
    }
    manifest.write(&layout.manifest())?;
    Ok(manifest)
}
