//! Manifest loading and deterministic patch batches for training.
//!
//! Every batch is a pure function of `(seed, batch index)`: the epoch order
//! is a seeded shuffle and each patch draws its crop, augmentation and noise
//! from its own generator, so batches can be built in any order or in
//! parallel and still match a sequential run.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{extract_patches, read_image, Dihedral, Image};
use crate::noise::{NoiseSpec, SIGMA_MAX};
use crate::tensor::Tensor;

/// Image paths listed one per line; `#` starts a comment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub paths: Vec<PathBuf>,
}

impl Manifest {
    /// Relative entries are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let paths: Vec<PathBuf> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(|l| base.join(l))
            .collect();
        if paths.is_empty() {
            return Err(Error::Config("manifest lists no images".into()));
        }
        Ok(Manifest { paths })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Read every image, converted to `channels`, named by file name.
    pub fn read_images(&self, channels: usize) -> Result<Vec<(String, Image)>> {
        self.paths
            .iter()
            .map(|p| {
                let name = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
                Ok((name, read_image(p)?.with_channels(channels)?))
            })
            .collect()
    }
}

/// How each training patch is corrupted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoisePolicy {
    /// Sigma drawn per patch from `U[0, max]`.
    UniformRange { max: f64 },
    Fixed { sigma: f64 },
    /// Peaks-shaped map with intensity `lambda`.
    Variant { lambda: f64 },
}

impl Default for NoisePolicy {
    fn default() -> Self {
        NoisePolicy::UniformRange { max: SIGMA_MAX }
    }
}

impl NoisePolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoisePolicy::UniformRange { max } if !(0.0..=SIGMA_MAX).contains(&max) => {
                Err(Error::Range(format!("sigma range [0, {max}] exceeds [0, {SIGMA_MAX}]")))
            }
            NoisePolicy::UniformRange { .. } => Ok(()),
            NoisePolicy::Fixed { sigma } => NoiseSpec::uniform(sigma, 0).validate(),
            NoisePolicy::Variant { lambda } => NoiseSpec::variant(lambda, 0).validate(),
        }
    }

    /// Concrete noise for one patch.
    pub fn draw(&self, rng: &mut impl Rng) -> NoiseSpec {
        let seed = rng.gen();
        match *self {
            NoisePolicy::UniformRange { max } => NoiseSpec::uniform(rng.gen::<f64>() * max, seed),
            NoisePolicy::Fixed { sigma } => NoiseSpec::uniform(sigma, seed),
            NoisePolicy::Variant { lambda } => NoiseSpec::variant(lambda, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub channels: usize,
    pub patch: usize,
    pub batch: usize,
    pub patches_per_image: usize,
    pub noise: NoisePolicy,
    pub augment: bool,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            channels: 1,
            patch: 180,
            batch: 16,
            patches_per_image: 8,
            noise: NoisePolicy::default(),
            augment: true,
            seed: 0,
        }
    }
}

/// An image left out of the dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipRecord {
    pub name: String,
    pub reason: String,
}

/// One training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub noisy: Tensor,
    pub clean: Tensor,
    /// `n x 1 x h x w` noise level maps in 8-bit sigma units.
    pub level_map: Tensor,
    /// Per-patch sigma (the map maximum for variant noise).
    pub sigmas: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    config: DatasetConfig,
    images: Vec<(String, Image)>,
    skipped: Vec<SkipRecord>,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

impl Dataset {
    /// Images smaller than the patch are skipped and reported by [`Dataset::skipped`].
    pub fn from_images(images: Vec<(String, Image)>, config: DatasetConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("dataset has no images".into()));
        }
        if config.patch == 0 || config.batch == 0 || config.patches_per_image == 0 {
            return Err(Error::Config("patch, batch and patches_per_image must be positive".into()));
        }
        config.noise.validate()?;
        let mut kept = Vec::new();
        let mut skipped = Vec::new();
        for (name, img) in images {
            if img.height < config.patch || img.width < config.patch {
                log::warn!("skipping {name}: {}x{} is smaller than patch {}", img.height, img.width, config.patch);
                skipped.push(SkipRecord {
                    reason: format!("{}x{} smaller than patch {}", img.height, img.width, config.patch),
                    name,
                });
                continue;
            }
            kept.push((name, img.with_channels(config.channels)?));
        }
        let ds = Dataset { config, images: kept, skipped };
        if ds.batches_per_epoch() == 0 {
            return Err(Error::Config(format!(
                "{} usable images x {} patches cannot fill a batch of {}",
                ds.images.len(),
                ds.config.patches_per_image,
                ds.config.batch
            )));
        }
        Ok(ds)
    }

    pub fn from_manifest(manifest: &Manifest, config: DatasetConfig) -> Result<Self> {
        let images = manifest.read_images(config.channels)?;
        Dataset::from_images(images, config)
    }

    pub fn config(&self) -> &DatasetConfig {
        &self.config
    }

    pub fn images(&self) -> &[(String, Image)] {
        &self.images
    }

    pub fn skipped(&self) -> &[SkipRecord] {
        &self.skipped
    }

    pub fn patches_per_epoch(&self) -> usize {
        self.images.len() * self.config.patches_per_image
    }

    /// Incomplete trailing batches are dropped.
    pub fn batches_per_epoch(&self) -> usize {
        self.patches_per_epoch() / self.config.batch
    }

    /// Shuffled patch slots of one epoch.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.patches_per_epoch()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.config.seed, epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Batch number `index` counted from the start of training.
    pub fn batch_at(&self, index: u64) -> Result<Batch> {
        let per_epoch = self.batches_per_epoch() as u64;
        let (epoch, within) = (index / per_epoch, (index % per_epoch) as usize);
        let order = self.epoch_order(epoch);
        let b = self.config.batch;
        let slots = &order[within * b..(within + 1) * b];
        let patches: Vec<(Tensor, Tensor, Tensor, f64)> =
            slots.par_iter().map(|&slot| self.patch(epoch, slot)).collect::<Result<_>>()?;
        let mut clean = Vec::with_capacity(b);
        let mut noisy = Vec::with_capacity(b);
        let mut maps = Vec::with_capacity(b);
        let mut sigmas = Vec::with_capacity(b);
        for (c, n, m, s) in patches {
            clean.push(c);
            noisy.push(n);
            maps.push(m);
            sigmas.push(s);
        }
        Ok(Batch {
            noisy: Tensor::stack(&noisy)?,
            clean: Tensor::stack(&clean)?,
            level_map: Tensor::stack(&maps)?,
            sigmas,
        })
    }

    /// (clean, noisy, map, sigma) for one slot of an epoch.
    fn patch(&self, epoch: u64, slot: usize) -> Result<(Tensor, Tensor, Tensor, f64)> {
        let image = &self.images[slot / self.config.patches_per_image].1;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, epoch), slot as u64));
        let patch = extract_patches(image, self.config.patch, 1, &mut rng)?.remove(0).image;
        let patch = if self.config.augment {
            Dihedral::ALL[rng.gen_range(0..Dihedral::ALL.len())].apply(&patch)?
        } else {
            patch
        };
        let spec = self.config.noise.draw(&mut rng);
        let clean = patch.to_tensor();
        let (noisy, map) = spec.apply(&clean, 0)?;
        let sigma = map.data().iter().copied().fold(0.0, f64::max);
        Ok((clean, noisy, map, sigma))
    }
}
