//! Synthetic vessel volumes with exact vessel-wall masks.
//!
//! Each axial plane `z` contains a disc-shaped lumen of radius `r` around a
//! centreline point `c(z)`, surrounded by a wall of thickness `t`. The wall
//! mask is the annulus `r <= |p - c(z)| < r + t`. The centreline drifts
//! sinusoidally in both `x` and `y` so that lateral and frontal slices show
//! a curved tube rather than straight bands.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{json_file, Error, Result};
use crate::volume::{read_volume, write_volume, Volume, VolumeKind};

/// Mean intensities per tissue class, before noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntensityProfile {
    pub lumen: f64,
    pub wall: f64,
    pub background: f64,
}

impl Default for IntensityProfile {
    fn default() -> Self {
        Self {
            lumen: 0.1,
            wall: 0.7,
            background: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    /// Peak centreline offset from the volume axis, in voxels.
    pub drift_amplitude: f64,
    /// Period of the centreline drift along `z`, in voxels.
    pub drift_wavelength: f64,
    pub lumen_radius: f64,
    pub wall_thickness: f64,
    /// Speckle strength in `[0, 1)`: voxel = mean · (1 + σ·g), g ~ N(0, 1).
    pub noise_level: f64,
    /// Extra per-axial-frame noise: frame `z` uses σ = noise_level · (1 + spread · u_z),
    /// u_z ~ U[0, 1). Zero gives isotropic noise.
    pub frame_noise_spread: f64,
    pub intensity: IntensityProfile,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            drift_amplitude: 4.0,
            drift_wavelength: 48.0,
            lumen_radius: 8.0,
            wall_thickness: 4.0,
            noise_level: 0.3,
            frame_noise_spread: 0.0,
            intensity: IntensityProfile::default(),
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let [nx, ny, nz] = self.dims;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::InvalidValue(format!("phantom dims must be >= 1, got {:?}", self.dims)));
        }
        if !(self.lumen_radius > 0.0) || !(self.wall_thickness > 0.0) {
            return Err(Error::InvalidValue(format!(
                "lumen radius ({}) and wall thickness ({}) must be positive",
                self.lumen_radius, self.wall_thickness
            )));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::InvalidValue(format!(
                "noise level {} outside [0, 1)",
                self.noise_level
            )));
        }
        if !(self.frame_noise_spread >= 0.0) || !(self.drift_amplitude >= 0.0) {
            return Err(Error::InvalidValue(
                "drift amplitude and frame noise spread must be non-negative".into(),
            ));
        }
        if self.drift_amplitude > 0.0 && !(self.drift_wavelength > 0.0) {
            return Err(Error::InvalidValue(format!(
                "drift wavelength {} must be positive",
                self.drift_wavelength
            )));
        }
        let half = (nx.min(ny) as f64 - 1.0) / 2.0;
        let reach = self.drift_amplitude + self.lumen_radius + self.wall_thickness;
        if reach > half {
            return Err(Error::InvalidValue(format!(
                "vessel reaches {reach:.1} voxels from the axis but the {nx}x{ny} cross-section \
                 only allows {half:.1}"
            )));
        }
        Ok(())
    }

    /// Centreline position `(x, y)` in axial plane `z`.
    pub fn centre(&self, z: usize) -> (f64, f64) {
        let cx = (self.dims[0] as f64 - 1.0) / 2.0;
        let cy = (self.dims[1] as f64 - 1.0) / 2.0;
        if self.drift_amplitude == 0.0 {
            return (cx, cy);
        }
        let phase = 2.0 * PI * z as f64 / self.drift_wavelength;
        (
            cx + self.drift_amplitude * phase.sin(),
            cy + self.drift_amplitude * (phase + PI / 2.0).sin(),
        )
    }
}

/// An intensity image with its vessel-wall mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub image: Volume,
    pub wall_mask: Volume,
}

impl LabeledVolume {
    pub fn new(image: Volume, wall_mask: Volume) -> Result<Self> {
        if image.dims() != wall_mask.dims() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} differ in dims",
                image.dims(),
                wall_mask.dims()
            )));
        }
        if wall_mask.kind() != VolumeKind::BinaryMask {
            return Err(Error::InvalidValue("wall mask must be a binary mask".into()));
        }
        Ok(Self { image, wall_mask })
    }

    /// Writes `image.{raw,json}` and `mask.{raw,json}` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        write_volume(&self.image, &dir.join("image"))?;
        write_volume(&self.wall_mask, &dir.join("mask"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::new(read_volume(&dir.join("image"))?, read_volume(&dir.join("mask"))?)
    }
}

/// Renders one phantom. Deterministic in `params.seed`.
pub fn generate_phantom(params: &PhantomParams) -> Result<LabeledVolume> {
    params.validate()?;
    let [nx, ny, nz] = params.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let frame_sigma: Vec<f64> = (0..nz)
        .map(|_| params.noise_level * (1.0 + params.frame_noise_spread * rng.gen::<f64>()))
        .collect();
    let centres: Vec<(f64, f64)> = (0..nz).map(|z| params.centre(z)).collect();
    let inner = params.lumen_radius;
    let outer = params.lumen_radius + params.wall_thickness;

    let n = nx * ny * nz;
    let mut image = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    for x in 0..nx {
        for y in 0..ny {
            for z in 0..nz {
                let (cx, cy) = centres[z];
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let (mean, wall) = if d < inner {
                    (params.intensity.lumen, false)
                } else if d < outer {
                    (params.intensity.wall, true)
                } else {
                    (params.intensity.background, false)
                };
                let value = if params.noise_level > 0.0 {
                    let g: f64 = rng.sample(StandardNormal);
                    mean * (1.0 + frame_sigma[z] * g)
                } else {
                    mean
                };
                image.push(value.clamp(0.0, 1.0) as f32);
                mask.push(if wall { 1.0 } else { 0.0 });
            }
        }
    }
    LabeledVolume::new(
        Volume::new(params.dims, VolumeKind::Intensity, image)?,
        Volume::new(params.dims, VolumeKind::BinaryMask, mask)?,
    )
}

/// Inclusive sampling bounds for each phantom parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomRange {
    pub dims: [usize; 3],
    pub drift_amplitude: [f64; 2],
    pub drift_wavelength: [f64; 2],
    pub lumen_radius: [f64; 2],
    pub wall_thickness: [f64; 2],
    pub noise_level: [f64; 2],
    pub frame_noise_spread: [f64; 2],
    pub intensity: IntensityProfile,
}

impl Default for PhantomRange {
    fn default() -> Self {
        Self {
            dims: [64, 64, 32],
            drift_amplitude: [0.0, 6.0],
            drift_wavelength: [32.0, 64.0],
            lumen_radius: [6.0, 10.0],
            wall_thickness: [3.0, 5.0],
            noise_level: [0.2, 0.4],
            frame_noise_spread: [0.0, 0.0],
            intensity: IntensityProfile::default(),
        }
    }
}

impl PhantomRange {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<PhantomParams> {
        fn pick(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2], what: &str) -> Result<f64> {
            if !(lo <= hi) {
                return Err(Error::InvalidValue(format!("{what} range [{lo}, {hi}] is empty")));
            }
            Ok(if lo == hi { lo } else { rng.gen_range(lo..=hi) })
        }
        Ok(PhantomParams {
            dims: self.dims,
            drift_amplitude: pick(rng, self.drift_amplitude, "drift amplitude")?,
            drift_wavelength: pick(rng, self.drift_wavelength, "drift wavelength")?,
            lumen_radius: pick(rng, self.lumen_radius, "lumen radius")?,
            wall_thickness: pick(rng, self.wall_thickness, "wall thickness")?,
            noise_level: pick(rng, self.noise_level, "noise level")?,
            frame_noise_spread: pick(rng, self.frame_noise_spread, "frame noise spread")?,
            intensity: self.intensity,
            seed: rng.gen(),
        })
    }

    /// Parameters for `n` volumes, drawn in order from `seed`.
    pub fn sample_many(&self, n: usize, seed: u64) -> Result<Vec<PhantomParams>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}

/// Train/test listing of a generated dataset. Paths are volume directories
/// relative to the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub params: PhantomRange,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        json_file::read(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        json_file::write(path, self)
    }

    /// Absolute directories of a split, resolved against the manifest location.
    pub fn resolve<'a>(manifest_path: &'a Path, entries: &'a [String]) -> impl Iterator<Item = PathBuf> + 'a {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        entries.iter().map(move |e| base.join(e))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub warnings: Vec<String>,
}

/// Number of training volumes for a split ratio; at least one volume trains.
pub fn train_count(n: usize, train_ratio: f64) -> usize {
    ((n as f64 * train_ratio).round() as usize).clamp(1, n)
}

/// Generates `n_volumes` phantoms into `out_dir/volumes/vol_XXX/` and writes
/// `out_dir/manifest.json`. The first volumes go to the training split.
pub fn make_dataset(
    n_volumes: usize,
    range: &PhantomRange,
    seed: u64,
    train_ratio: f64,
    out_dir: &Path,
) -> Result<DatasetSummary> {
    if n_volumes == 0 {
        return Err(Error::Precondition("dataset needs at least one volume".into()));
    }
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::InvalidValue(format!("train ratio {train_ratio} outside [0, 1]")));
    }
    let params = range.sample_many(n_volumes, seed)?;
    for p in &params {
        p.validate()?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let names: Vec<String> = (0..n_volumes).map(|i| format!("volumes/vol_{i:03}")).collect();
    names
        .par_iter()
        .zip(&params)
        .try_for_each(|(name, p)| -> Result<()> {
            let dir = out_dir.join(name);
            generate_phantom(p)?.save(&dir)?;
            json_file::write(&dir.join("params.json"), p)
        })?;

    let n_train = train_count(n_volumes, train_ratio);
    let mut warnings = Vec::new();
    if n_train == n_volumes {
        let msg = format!("all {n_volumes} volume(s) assigned to training; test split is empty");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let manifest = Manifest {
        train: names[..n_train].to_vec(),
        test: names[n_train..].to_vec(),
        seed,
        params: range.clone(),
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    manifest.save(&manifest_path)?;
    Ok(DatasetSummary {
        manifest,
        manifest_path,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn straight(seed: u64) -> PhantomParams {
        PhantomParams {
            dims: [40, 40, 6],
            drift_amplitude: 0.0,
            lumen_radius: 10.0,
            wall_thickness: 4.0,
            noise_level: 0.0,
            seed,
            ..PhantomParams::default()
        }
    }

    #[test]
    fn noiseless_straight_tube_is_exact_annulus() {
        let p = straight(1);
        let lv = generate_phantom(&p).unwrap();
        let (cx, cy) = p.centre(0);
        for x in 0..40 {
            for y in 0..40 {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let inside = (10.0..14.0).contains(&d);
                for z in 0..6 {
                    assert_eq!(lv.wall_mask.get(x, y, z) == 1.0, inside, "({x},{y},{z}) d={d}");
                    let expected = if d < 10.0 {
                        0.1
                    } else if inside {
                        0.7
                    } else {
                        0.35
                    };
                    assert!((lv.image.get(x, y, z) - expected as f32).abs() < 1e-7);
                }
            }
        }
    }

    #[test]
    fn annulus_area_close_to_continuous() {
        let lv = generate_phantom(&straight(0)).unwrap();
        let per_slice = lv.wall_mask.data().iter().sum::<f32>() as f64 / 6.0;
        let area = PI * (14.0f64.powi(2) - 10.0f64.powi(2));
        assert!((per_slice - area).abs() / area < 0.15, "{per_slice} vs {area}");
    }

    #[test]
    fn deterministic_in_seed_and_clipped() {
        let p = PhantomParams {
            noise_level: 0.9,
            frame_noise_spread: 2.0,
            seed: 5,
            ..PhantomParams::default()
        };
        let a = generate_phantom(&p).unwrap();
        assert_eq!(a, generate_phantom(&p).unwrap());
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let b = generate_phantom(&PhantomParams { seed: 6, ..p }).unwrap();
        assert_ne!(a.image, b.image);
        assert_eq!(a.wall_mask, b.wall_mask);
    }

    #[test]
    fn oversized_geometry_rejected() {
        let p = PhantomParams {
            dims: [20, 20, 4],
            lumen_radius: 8.0,
            wall_thickness: 4.0,
            ..PhantomParams::default()
        };
        assert!(matches!(generate_phantom(&p), Err(Error::InvalidValue(_))));
        let neg = PhantomParams {
            wall_thickness: 0.0,
            ..PhantomParams::default()
        };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn split_counts() {
        assert_eq!(train_count(5, 0.8), 4);
        assert_eq!(train_count(10, 0.8), 8);
        assert_eq!(train_count(1, 0.8), 1);
        assert_eq!(train_count(20, 0.8), 16);
    }

    fn small_range() -> PhantomRange {
        PhantomRange {
            dims: [24, 24, 4],
            drift_amplitude: [0.0, 2.0],
            lumen_radius: [3.0, 4.0],
            wall_thickness: [2.0, 3.0],
            ..PhantomRange::default()
        }
    }

    #[test]
    fn dataset_split_and_determinism() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = make_dataset(5, &small_range(), 11, 0.8, a.path()).unwrap();
        let sb = make_dataset(5, &small_range(), 11, 0.8, b.path()).unwrap();
        assert_eq!(sa.manifest.train.len(), 4);
        assert_eq!(sa.manifest.test.len(), 1);
        assert!(sa.warnings.is_empty());
        assert!(sa.manifest.train.iter().all(|t| !sa.manifest.test.contains(t)));
        assert_eq!(
            fs::read(&sa.manifest_path).unwrap(),
            fs::read(&sb.manifest_path).unwrap()
        );
        let img = |root: &Path| fs::read(root.join("volumes/vol_004/image.raw")).unwrap();
        assert_eq!(img(a.path()), img(b.path()));

        let dirs: Vec<_> = Manifest::resolve(&sa.manifest_path, &sa.manifest.test).collect();
        let lv = LabeledVolume::load(&dirs[0]).unwrap();
        assert_eq!(lv.image.dims(), [24, 24, 4]);
    }

    #[test]
    fn single_volume_dataset_warns() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_dataset(1, &small_range(), 3, 0.8, dir.path()).unwrap();
        assert_eq!(s.manifest.train.len(), 1);
        assert!(s.manifest.test.is_empty());
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn empty_dataset_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(make_dataset(0, &small_range(), 3, 0.8, dir.path()).is_err());
    }
}
