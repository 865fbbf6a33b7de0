//! Training loop, validation and evaluation.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, RngState};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::{mse_loss, total_loss, LossWeights};
use crate::metrics::{psnr, ssim, ImageMetrics, MetricReport};
use crate::model::{Model, ModelConfig};
use crate::nn::Mode;
use crate::noise::NoiseSpec;
use crate::optim::{clip_global_norm, AdamState, Schedule};
use crate::tape::{Precision, Retain, Tape};
use crate::tensor::Tensor;

/// Training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    /// Mean squared error on the denoised output only.
    Mse,
    /// Charbonnier + edge + total variation of the estimated level map.
    Composite(LossWeights),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub iterations: u64,
    pub loss: LossKind,
    pub schedule: Schedule,
    pub clip_norm: Option<f64>,
    pub precision: Precision,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// 0 disables validation.
    pub val_every: u64,
    pub val_noise: NoiseSpec,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, iterations: u64) -> Self {
        TrainConfig {
            model,
            iterations,
            loss: LossKind::Mse,
            schedule: Schedule::step_decay(),
            clip_norm: None,
            precision: Precision::F64,
            checkpoint_every: 0,
            log_every: 1,
            val_every: 0,
            val_noise: NoiseSpec::uniform(25.0, 0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.val_noise.validate()?;
        if let LossKind::Composite(w) = &self.loss {
            w.validate()?;
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Owns the model and optimizer; batch `k` of the dataset feeds step `k`.
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: AdamState,
    iteration: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone())?;
        let adam = AdamState::new(model.parameters().into_iter().map(|(_, t)| t));
        Ok(Trainer { config, model, adam, iteration: 0 })
    }

    /// Continue from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.config != config.model {
            return Err(Error::Config("checkpoint model config differs from the training config".into()));
        }
        let model = ckpt.build_model()?;
        let adam = ckpt
            .optimizer_for(&model)?
            .ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        Ok(Trainer { config, model, adam, iteration: ckpt.iteration })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.adam
    }

    pub fn checkpoint(&self, dataset: &Dataset) -> Checkpoint {
        let rng = RngState { seed: dataset.config().seed, position: self.iteration };
        Checkpoint::capture(&self.model, Some(&self.adam), self.iteration, rng)
    }

    pub fn step(&mut self, dataset: &Dataset) -> Result<StepStats> {
        let k = self.iteration;
        let batch = dataset.batch_at(k)?;
        let mut tape = Tape::with_precision(self.config.precision);
        let x = tape.constant(batch.noisy);
        let out = self.model.forward(&mut tape, x, Mode::Train)?;
        let target = tape.constant(batch.clean);
        let loss = match &self.config.loss {
            LossKind::Mse => mse_loss(&mut tape, out.denoised, target)?,
            LossKind::Composite(w) => total_loss(&mut tape, out.denoised, target, out.sigma_map, w)?,
        };
        let loss_value = tape.value(loss).item()?;
        if !loss_value.is_finite() {
            return Err(Error::Numeric(format!("loss is {loss_value} at iteration {k}")));
        }
        let mut grads = tape.backward_with(loss, Retain::Leaves)?;
        let mut grads: Vec<Tensor> = out
            .params
            .iter()
            .map(|&id| grads.take(id).unwrap_or_else(|| Tensor::zeros(tape.shape(id))))
            .collect();
        drop(tape);
        let grad_norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt(),
        };
        let lr = self.config.schedule.lr_at(k);
        let names: Vec<String> = self.model.parameters().into_iter().map(|(n, _)| n).collect();
        self.adam.step(&mut self.model.parameters_mut(), &grads, &names, lr)?;
        self.iteration += 1;
        Ok(StepStats { iteration: self.iteration, lr, loss: loss_value, grad_norm })
    }

    /// Train up to `config.iterations`, writing `train.log` and checkpoints
    /// into `out_dir`. Returns the final checkpoint.
    pub fn run(&mut self, dataset: &Dataset, validation: &[(String, Image)], out_dir: &Path) -> Result<Checkpoint> {
        fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join("train.log");
        let file = if self.iteration == 0 { File::create(&log_path)? } else { File::options().append(true).create(true).open(&log_path)? };
        let mut log = BufWriter::new(file);
        let result = self.run_logged(dataset, validation, out_dir, &mut log);
        log.flush()?;
        result
    }

    fn run_logged(
        &mut self,
        dataset: &Dataset,
        validation: &[(String, Image)],
        out_dir: &Path,
        log: &mut impl Write,
    ) -> Result<Checkpoint> {
        let total = self.config.iterations;
        while self.iteration < total {
            let stats = self.step(dataset)?;
            let n = stats.iteration;
            let val_due = self.config.val_every > 0 && !validation.is_empty() && (n % self.config.val_every == 0 || n == total);
            if n % self.config.log_every == 0 || n == total || val_due {
                let mut line = format_log(&stats);
                if val_due {
                    let report = evaluate(&self.model, validation, self.config.val_noise)?;
                    line.push_str(&format!(" val_psnr={:.4}", report.psnr_db));
                }
                writeln!(log, "{line}")?;
                log.flush()?;
                log::info!("{line}");
            }
            if self.config.checkpoint_every > 0 && n % self.config.checkpoint_every == 0 && n != total {
                log.flush()?;
                self.checkpoint(dataset).save(checkpoint_path(out_dir, n))?;
            }
        }
        let ckpt = self.checkpoint(dataset);
        log.flush()?;
        ckpt.save(out_dir.join("final.ckpt"))?;
        Ok(ckpt)
    }
}

pub fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("iter-{iteration:08}.ckpt"))
}

/// `iter=<n> lr=<f> loss=<f>`
pub fn format_log(stats: &StepStats) -> String {
    format!("iter={} lr={:e} loss={:.8e}", stats.iteration, stats.lr, stats.loss)
}

/// Anything that maps a noisy image to a denoised one of the same shape.
pub trait Denoiser: Sync {
    fn denoise(&self, noisy: &Image) -> Result<Image>;
}

/// Returns its input; the noisy baseline.
pub struct Identity;

impl Denoiser for Identity {
    fn denoise(&self, noisy: &Image) -> Result<Image> {
        Ok(noisy.clone())
    }
}

impl Model {
    /// Denoise an image of any size via reflect padding to a multiple of 4.
    /// Returns the denoised image and the level map, both cropped back.
    pub fn denoise_image(&self, noisy: &Image) -> Result<(Image, Image)> {
        if noisy.channels != self.config().input_channels {
            return Err(Error::Shape(format!(
                "model expects {} channels, image has {}",
                self.config().input_channels,
                noisy.channels
            )));
        }
        let (padded, top, left) = noisy.pad_reflect_to_multiple(4);
        let (den, sigma) = self.infer(&padded.to_tensor())?;
        let crop = |t: &Tensor| Image::from_tensor(t, 0)?.crop(top, left, noisy.height, noisy.width);
        Ok((crop(&den)?, crop(&sigma)?))
    }
}

impl Denoiser for Model {
    fn denoise(&self, noisy: &Image) -> Result<Image> {
        Ok(self.denoise_image(noisy)?.0)
    }
}

/// PSNR/SSIM of noisy and denoised images against the clean ones, with
/// every image clipped and quantized to 8 bits before scoring. Image `i`
/// gets noise stream `i` of `noise`, so results are reproducible.
pub fn evaluate(denoiser: &dyn Denoiser, images: &[(String, Image)], noise: NoiseSpec) -> Result<MetricReport> {
    evaluate_with(denoiser, images, noise, true)
}

/// [`evaluate`] with optional quantization. Without it the denoised output
/// is still clipped to [0, 1] and the noisy image is scored as synthesized.
/// The denoiser always sees the unquantized noisy image.
pub fn evaluate_with(
    denoiser: &dyn Denoiser,
    images: &[(String, Image)],
    noise: NoiseSpec,
    quantize: bool,
) -> Result<MetricReport> {
    noise.validate()?;
    let per_image = images
        .par_iter()
        .enumerate()
        .map(|(i, (name, clean))| {
            let (noisy, _) = noise.apply(&clean.to_tensor(), i as u64)?;
            let noisy = Image::from_tensor(&noisy, 0)?;
            let mut den = denoiser.denoise(&noisy)?;
            if (den.channels, den.height, den.width) != (clean.channels, clean.height, clean.width) {
                return Err(Error::Shape(format!("denoiser changed the shape of {name}")));
            }
            den.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            let (clean, noisy, den) = if quantize {
                (clean.quantized(), noisy.quantized(), den.quantized())
            } else {
                (clean.clone(), noisy, den)
            };
            Ok(ImageMetrics {
                name: name.clone(),
                noisy_psnr: psnr(&noisy, &clean, 1.0)?,
                noisy_ssim: ssim(&noisy, &clean, 1.0)?,
                psnr: psnr(&den, &clean, 1.0)?,
                ssim: ssim(&den, &clean, 1.0)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_images(per_image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetConfig, NoisePolicy};

    fn toy_images(n: usize, size: usize) -> Vec<(String, Image)> {
        (0..n)
            .map(|i| {
                let img = Image::from_fn(1, size, size, |_, y, x| {
                    0.5 + 0.3 * ((x as f64 * 0.7 + i as f64).sin() * (y as f64 * 0.4).cos())
                })
                .unwrap();
                (format!("t{i}"), img)
            })
            .collect()
    }

    fn dataset(seed: u64) -> Dataset {
        let cfg = DatasetConfig { patch: 8, batch: 2, patches_per_image: 2, seed, ..DatasetConfig::default() };
        Dataset::from_images(toy_images(2, 12), cfg).unwrap()
    }

    fn config(iterations: u64) -> TrainConfig {
        let mut c = TrainConfig::new(ModelConfig::new(1, 4).with_seed(1), iterations);
        c.schedule = Schedule::cosine(iterations);
        c
    }

    #[test]
    fn identity_psnr_equals_noisy() {
        let r = evaluate(&Identity, &toy_images(3, 16), NoiseSpec::uniform(25.0, 4)).unwrap();
        for m in &r.per_image {
            assert_eq!(m.psnr, m.noisy_psnr);
            assert_eq!(m.ssim, m.noisy_ssim);
        }
        // clipping the output can only move it closer to the clean image
        let raw = evaluate_with(&Identity, &toy_images(3, 16), NoiseSpec::uniform(50.0, 4), false).unwrap();
        assert!(raw.psnr_db > raw.noisy_psnr_db);
        let r0 = evaluate(&Identity, &toy_images(2, 16), NoiseSpec::uniform(0.0, 4)).unwrap();
        assert!(r0.noisy_psnr_db.is_infinite() && r0.psnr_db.is_infinite());
    }

    #[test]
    fn steps_are_deterministic() {
        let ds = dataset(3);
        let mut a = Trainer::new(config(3)).unwrap();
        let mut b = Trainer::new(config(3)).unwrap();
        for _ in 0..3 {
            assert_eq!(a.step(&ds).unwrap(), b.step(&ds).unwrap());
        }
        assert_eq!(a.model().parameters(), b.model().parameters());
        assert_eq!(a.optimizer().t, 3);
    }

    #[test]
    fn composite_loss_trains() {
        let mut c = config(2);
        c.loss = LossKind::Composite(LossWeights::default());
        c.clip_norm = Some(1.0);
        let mut t = Trainer::new(c).unwrap();
        let s = t.step(&dataset(0)).unwrap();
        assert!(s.loss.is_finite() && s.grad_norm > 0.0);
    }

    #[test]
    fn run_writes_log_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = config(4);
        c.checkpoint_every = 2;
        c.log_every = 2;
        c.val_every = 4;
        let mut t = Trainer::new(c).unwrap();
        let ck = t.run(&dataset(0), &toy_images(1, 12), dir.path()).unwrap();
        assert_eq!(ck.iteration, 4);
        let log = fs::read_to_string(dir.path().join("train.log")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("iter=2 lr="));
        assert!(lines[1].starts_with("iter=4 ") && lines[1].contains(" val_psnr="));
        assert!(checkpoint_path(dir.path(), 2).exists());
        assert!(dir.path().join("final.ckpt").exists());
    }

    #[test]
    fn resume_requires_matching_config() {
        let ds = dataset(0);
        let t = Trainer::new(config(2)).unwrap();
        let ck = t.checkpoint(&ds);
        let mut other = config(2);
        other.model = other.model.with_seed(2);
        assert!(matches!(Trainer::resume(other, &ck), Err(Error::Config(_))));
        let without = Checkpoint { optimizer: None, ..ck };
        assert!(Trainer::resume(config(2), &without).is_err());
    }

    #[test]
    fn denoise_image_keeps_odd_shapes() {
        let m = Model::new(ModelConfig::new(1, 4)).unwrap();
        let img = Image::filled(1, 9, 13, 0.4).unwrap();
        let (d, s) = m.denoise_image(&img).unwrap();
        assert_eq!((d.height, d.width, s.channels), (9, 13, 1));
        assert!(m.denoise_image(&Image::filled(3, 8, 8, 0.1).unwrap()).is_err());
    }

    #[test]
    fn fixed_noise_policy_validation_flows_through() {
        let cfg = DatasetConfig { noise: NoisePolicy::Fixed { sigma: -1.0 }, patch: 8, ..DatasetConfig::default() };
        assert!(Dataset::from_images(toy_images(2, 12), cfg).is_err());
    }
}
