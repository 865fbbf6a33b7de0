//! Command-line front end: training, inference, evaluation, noise synthesis
//! and the receptive-field report.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dcbd_core::checkpoint::Checkpoint;
use dcbd_core::dataset::{Dataset, Manifest};
use dcbd_core::image::{read_image, write_image, write_image_16, Image};
use dcbd_core::model::{branch_receptive_fields, ModelConfig, REFERENCE_LOWER_RF, REFERENCE_UPPER_RF};
use dcbd_core::noise::NoiseSpec;
use dcbd_core::trainer::{evaluate_with, Trainer};
use thiserror::Error;

use crate::config::{parse_pair, parse_pairs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Range(String),
    #[error(transparent)]
    Core(#[from] dcbd_core::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Range(_) => "range",
            CliError::Core(e) => e.category(),
        }
    }

    /// 2 usage, 3 format, 4 numeric, 5 io.
    pub fn exit_code(&self) -> i32 {
        use dcbd_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Range(_) => 2,
            CliError::Core(e) => match e {
                E::Format(_) => 3,
                E::Numeric(_) | E::Structural(_) => 4,
                E::Io(_) => 5,
                E::Shape(_) | E::Contract(_) | E::Range(_) | E::Config(_) => 2,
            },
        }
    }

    /// Single machine-parsable line.
    pub fn line(&self) -> String {
        let msg = match self {
            CliError::Core(e) => error_detail(e),
            other => other.to_string(),
        };
        format!("error[{}]: {}", self.category(), msg.replace('\n', " "))
    }
}

fn error_detail(e: &dcbd_core::Error) -> String {
    use dcbd_core::Error as E;
    match e {
        E::Shape(m) | E::Contract(m) | E::Structural(m) | E::Numeric(m) | E::Range(m) | E::Config(m) => m.clone(),
        E::Format(f) => f.to_string(),
        E::Io(io) => io.to_string(),
    }
}

#[derive(Debug, Parser)]
#[command(name = "dcbd", version, about = "Blind image denoising with a dual-branch CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a key=value config.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override one config key; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Denoise one image with a trained checkpoint.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the estimated noise level map as a 16-bit PGM.
        #[arg(long = "sigma-map")]
        sigma_map: Option<PathBuf>,
    },
    /// PSNR/SSIM of a checkpoint over a manifest of clean images.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Also write the report and resolved settings here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score unquantized images instead of 8-bit ones.
        #[arg(long)]
        no_quantize: bool,
    },
    /// Add synthetic noise to an image.
    SynthNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        noise: NoiseArgs,
        /// Write the noise level map (sigma / 255) as a 16-bit PGM.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Print per-layer receptive fields of both branches against the published values.
    RfTable,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// Uniform noise level on the 8-bit scale, in [0, 75].
    #[arg(long, conflicts_with = "variant")]
    pub sigma: Option<f64>,
    /// Spatially variant noise shaped by the peaks surface.
    #[arg(long, requires = "lambda")]
    pub variant: bool,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl NoiseArgs {
    pub fn spec(&self) -> Result<NoiseSpec, CliError> {
        let spec = match (self.sigma, self.variant, self.lambda) {
            (Some(s), false, _) => NoiseSpec::uniform(s, self.seed),
            (None, true, Some(l)) => NoiseSpec::variant(l, self.seed),
            _ => return Err(CliError::Usage("give --sigma S or --variant --lambda L".into())),
        };
        spec.validate().map_err(|e| match e {
            dcbd_core::Error::Range(m) => CliError::Range(m),
            other => other.into(),
        })?;
        Ok(spec)
    }

    fn describe(&self) -> String {
        match (self.sigma, self.lambda) {
            (Some(s), _) => format!("noise=uniform\nsigma={s}\nseed={}\n", self.seed),
            (_, Some(l)) => format!("noise=variant\nlambda={l}\nseed={}\n", self.seed),
            _ => String::new(),
        }
    }
}

/// Run one command, writing human output to `out`.
pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train { config, seed, set } => {
            let file = match &config {
                Some(p) => parse_pairs(&fs::read_to_string(p)?)?,
                None => Vec::new(),
            };
            let mut overrides = set.iter().map(|s| parse_pair(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some(s) = seed {
                overrides.push(("seed".into(), s.to_string()));
            }
            train(&RunConfig::resolve(&file, &overrides)?, out)
        }
        Command::Denoise { ckpt, input, out: dst, sigma_map } => {
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let img = read_image(&input)?.with_channels(model.config().input_channels)?;
            let (den, sigma) = model.denoise_image(&img)?;
            write_image(&dst, &den)?;
            if let Some(p) = &sigma_map {
                write_image_16(p, &sigma)?;
            }
            echo(
                &dst,
                &format!(
                    "command=denoise\nckpt={}\nin={}\nout={}\nsigma_map={}\n",
                    ckpt.display(),
                    input.display(),
                    dst.display(),
                    sigma_map.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
                ),
            )?;
            writeln!(out, "wrote {} ({}x{})", dst.display(), den.height, den.width)?;
            Ok(())
        }
        Command::Eval { ckpt, manifest, noise, out: dir, no_quantize } => {
            let spec = noise.spec()?;
            let model = Checkpoint::load(&ckpt)?.build_model()?;
            let images = Manifest::load(&manifest)?.read_images(model.config().input_channels)?;
            let report = evaluate_with(&model, &images, spec, !no_quantize)?;
            writeln!(out, "{report}")?;
            if let Some(d) = dir {
                fs::create_dir_all(&d)?;
                fs::write(d.join("report.txt"), report.to_records())?;
                let resolved = format!(
                    "command=eval\nckpt={}\nmanifest={}\nquantize={}\n{}",
                    ckpt.display(),
                    manifest.display(),
                    !no_quantize,
                    noise.describe()
                );
                fs::write(d.join("resolved.cfg"), resolved)?;
            }
            Ok(())
        }
        Command::SynthNoise { input, out: dst, noise, map } => {
            let spec = noise.spec()?;
            let img = read_image(&input)?;
            let (noisy, m) = spec.apply(&img.to_tensor(), 0)?;
            write_image(&dst, &Image::from_tensor(&noisy, 0)?)?;
            if let Some(p) = &map {
                write_image_16(p, &Image::from_tensor(&m.map(|v| v / 255.0), 0)?)?;
            }
            echo(&dst, &format!("command=synth-noise\nin={}\nout={}\n{}", input.display(), dst.display(), noise.describe()))?;
            writeln!(out, "wrote {}", dst.display())?;
            Ok(())
        }
        Command::RfTable => {
            write!(out, "{}", rf_table(&ModelConfig::grayscale()))?;
            Ok(())
        }
    }
}

/// Resolved settings of a single-file command, stored next to its output.
fn echo(output: &Path, text: &str) -> Result<(), CliError> {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".cfg");
    fs::write(output.with_file_name(name), text)?;
    Ok(())
}

fn train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let manifest = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| CliError::Usage("missing required key `manifest`".into()))?;
    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("resolved.cfg"), cfg.to_text())?;
    let dataset = Dataset::from_manifest(&Manifest::load(manifest)?, cfg.dataset.clone())?;
    for s in dataset.skipped() {
        writeln!(out, "skipped {}: {}", s.name, s.reason)?;
    }
    let validation = match &cfg.val_manifest {
        Some(p) => Manifest::load(p)?.read_images(cfg.dataset.channels)?,
        None => Vec::new(),
    };
    let mut trainer = match &cfg.resume {
        Some(p) => Trainer::resume(cfg.train.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.train.clone())?,
    };
    let ckpt = trainer.run(&dataset, &validation, &cfg.out_dir)?;
    writeln!(
        out,
        "trained {} iterations; checkpoint {}",
        ckpt.iteration,
        cfg.out_dir.join("final.ckpt").display()
    )?;
    Ok(())
}

fn csv(v: impl IntoIterator<Item = impl ToString>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// `key=v1,v2,...` lines: computed rows, published rows and their differences.
pub fn rf_table(config: &ModelConfig) -> String {
    let (est, upper, lower) = branch_receptive_fields(config);
    let diff = |a: &[usize], b: &[usize]| csv(a.iter().zip(b).map(|(&x, &y)| x as i64 - y as i64));
    format!(
        "estimator_rf={} jump={}\nupper={}\nupper_table={}\nupper_diff={}\nlower={}\nlower_table={}\nlower_diff={}\n",
        est.rf,
        est.jump,
        csv(&upper.per_conv),
        csv(REFERENCE_UPPER_RF),
        diff(&upper.per_conv, &REFERENCE_UPPER_RF),
        csv(&lower.per_conv),
        csv(REFERENCE_LOWER_RF),
        diff(&lower.per_conv, &REFERENCE_LOWER_RF),
    )
}
