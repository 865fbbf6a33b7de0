//! `key=value` run configuration for `dcbd train`.

use std::path::PathBuf;

use dcbd_core::dataset::{DatasetConfig, NoisePolicy};
use dcbd_core::losses::LossWeights;
use dcbd_core::model::ModelConfig;
use dcbd_core::noise::{NoiseSpec, SIGMA_MAX};
use dcbd_core::optim::Schedule;
use dcbd_core::trainer::{LossKind, TrainConfig};
use dcbd_core::Precision;

use crate::CliError;

/// Every accepted key with its default, in output order. Empty means unset.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("manifest", ""),
    ("val_manifest", ""),
    ("out_dir", "run"),
    ("resume", ""),
    ("input_channels", "1"),
    ("channels", "64"),
    ("skip", "true"),
    ("bn", "true"),
    ("seed", "0"),
    ("iterations", "700000"),
    ("batch", "16"),
    ("patch", "180"),
    ("patches_per_image", "8"),
    ("augment", "true"),
    ("noise", "uniform"),
    ("sigma_max", "75"),
    ("sigma", "25"),
    ("lambda", "50"),
    ("loss", "mse"),
    ("lambda_edge", "0.1"),
    ("lambda_tv", "0.05"),
    ("epsilon", "0.001"),
    ("schedule", "step"),
    ("lr", ""),
    ("lr_min", "0.000001"),
    ("decay_every", "100000"),
    ("decay_factor", "0.5"),
    ("clip_norm", ""),
    ("precision", "f64"),
    ("checkpoint_every", "10000"),
    ("log_every", "100"),
    ("val_every", "1000"),
    ("val_sigma", "25"),
    ("val_seed", "0"),
];

/// Fully resolved training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
    pub manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub train: TrainConfig,
    pub dataset: DatasetConfig,
}

/// Split `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, CliError> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| parse_pair(l))
        .collect()
}

pub fn parse_pair(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("expected key=value, got `{s}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn get<'a>(values: &'a [(&'static str, String)], key: &str) -> &'a str {
    &values.iter().find(|(k, _)| *k == key).expect("known key").1
}

fn typed<T: std::str::FromStr>(values: &[(&'static str, String)], key: &str) -> Result<T, CliError> {
    let raw = get(values, key);
    raw.parse()
        .map_err(|_| CliError::Usage(format!("key `{key}`: cannot parse `{raw}` as {}", std::any::type_name::<T>())))
}

fn optional<T: std::str::FromStr>(values: &[(&'static str, String)], key: &str) -> Result<Option<T>, CliError> {
    if get(values, key).is_empty() {
        Ok(None)
    } else {
        typed(values, key).map(Some)
    }
}

fn path(values: &[(&'static str, String)], key: &str) -> Option<PathBuf> {
    Some(get(values, key)).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn sigma_in_range(values: &[(&'static str, String)], key: &str) -> Result<f64, CliError> {
    let v: f64 = typed(values, key)?;
    if !(0.0..=SIGMA_MAX).contains(&v) {
        return Err(CliError::Range(format!("key `{key}`: {v} outside the noise range [0, {SIGMA_MAX}]")));
    }
    Ok(v)
}

fn choice<'a>(values: &'a [(&'static str, String)], key: &str, allowed: &[&str]) -> Result<&'a str, CliError> {
    let v = get(values, key);
    if !allowed.contains(&v) {
        return Err(CliError::Usage(format!("key `{key}`: `{v}` is not one of {}", allowed.join("|"))));
    }
    Ok(v)
}

impl RunConfig {
    /// Defaults, then `file` pairs, then `overrides`; later values win.
    pub fn resolve(file: &[(String, String)], overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut values: Vec<(&'static str, String)> = DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect();
        for (k, v) in file.iter().chain(overrides) {
            let slot = values
                .iter_mut()
                .find(|(key, _)| key == k)
                .ok_or_else(|| CliError::Usage(format!("unknown key `{k}`")))?;
            slot.1 = v.clone();
        }
        Self::build(values)
    }

    fn build(values: Vec<(&'static str, String)>) -> Result<Self, CliError> {
        let v = &values[..];
        let seed: u64 = typed(v, "seed")?;
        let model = ModelConfig::new(typed(v, "input_channels")?, typed(v, "channels")?)
            .with_ablation(typed(v, "skip")?, typed(v, "bn")?)
            .with_seed(seed);
        let noise = match choice(v, "noise", &["uniform", "fixed", "variant"])? {
            "uniform" => NoisePolicy::UniformRange { max: sigma_in_range(v, "sigma_max")? },
            "fixed" => NoisePolicy::Fixed { sigma: sigma_in_range(v, "sigma")? },
            _ => NoisePolicy::Variant { lambda: typed(v, "lambda")? },
        };
        // range-check sigma even when the active policy ignores it
        sigma_in_range(v, "sigma")?;
        sigma_in_range(v, "sigma_max")?;
        let loss = match choice(v, "loss", &["mse", "composite"])? {
            "mse" => LossKind::Mse,
            _ => LossKind::Composite(LossWeights {
                lambda_edge: typed(v, "lambda_edge")?,
                lambda_tv: typed(v, "lambda_tv")?,
                epsilon: typed(v, "epsilon")?,
                ..LossWeights::default()
            }),
        };
        let iterations: u64 = typed(v, "iterations")?;
        let lr: Option<f64> = optional(v, "lr")?;
        let schedule = match choice(v, "schedule", &["step", "cosine"])? {
            "step" => Schedule::StepDecay {
                lr0: lr.unwrap_or(1e-4),
                every: typed(v, "decay_every")?,
                factor: typed(v, "decay_factor")?,
            },
            _ => Schedule::Cosine { lr0: lr.unwrap_or(2e-4), lr_min: typed(v, "lr_min")?, total: iterations },
        };
        let precision = match choice(v, "precision", &["f64", "f32"])? {
            "f64" => Precision::F64,
            _ => Precision::F32,
        };
        let train = TrainConfig {
            model: model.clone(),
            iterations,
            loss,
            schedule,
            clip_norm: optional(v, "clip_norm")?,
            precision,
            checkpoint_every: typed(v, "checkpoint_every")?,
            log_every: typed(v, "log_every")?,
            val_every: typed(v, "val_every")?,
            val_noise: NoiseSpec::uniform(sigma_in_range(v, "val_sigma")?, typed(v, "val_seed")?),
        };
        train.validate()?;
        let dataset = DatasetConfig {
            channels: model.input_channels,
            patch: typed(v, "patch")?,
            batch: typed(v, "batch")?,
            patches_per_image: typed(v, "patches_per_image")?,
            noise,
            augment: typed(v, "augment")?,
            seed,
        };
        noise.validate()?;
        Ok(RunConfig {
            manifest: path(v, "manifest"),
            val_manifest: path(v, "val_manifest"),
            out_dir: path(v, "out_dir").unwrap_or_else(|| PathBuf::from(".")),
            resume: path(v, "resume"),
            train,
            dataset,
            values,
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str())
    }

    /// Every key, one `key=value` per line, re-parsable by [`RunConfig::resolve`].
    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
