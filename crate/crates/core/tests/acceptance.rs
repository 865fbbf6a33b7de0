//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always shown.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use dcbd_core::dataset::{Dataset, DatasetConfig, NoisePolicy};
use dcbd_core::gradcheck::finite_diff_check;
use dcbd_core::image::{decode_pnm, encode_pnm, Image};
use dcbd_core::losses::{charbonnier_loss, edge_loss, mse_loss, total_loss, tv_loss, LossWeights};
use dcbd_core::metrics::{psnr, ssim};
use dcbd_core::model::{
    receptive_field, rf_schedule, Model, ModelConfig, REFERENCE_LOWER_RF, REFERENCE_UPPER_RF,
};
use dcbd_core::nn::{
    activation, batch_norm, conv2d, maxpool2x2, upsample_bilinear2x, Activation, BatchNormState, ConvGeometry, Mode,
};
use dcbd_core::noise::{noise_level_map, peaks, peaks_field, spatially_variant_awgn, GaussianSampler};
use dcbd_core::noise::NoiseSpec;
use dcbd_core::optim::Schedule;
use dcbd_core::trainer::{evaluate, TrainConfig, Trainer};
use dcbd_core::{ops, NodeId, Precision, Result as CoreResult, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use common::{ks_statistic, random, ssim_loops, texture_image};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg)
    }
}

fn receptive_fields() -> Outcome {
    let config = ModelConfig::grayscale();
    let lower = receptive_field(&rf_schedule(&config.lower), 26, 2).per_conv;
    let upper = receptive_field(&rf_schedule(&config.upper), 26, 2).per_conv;
    check(lower == REFERENCE_LOWER_RF, format!("lower {lower:?}"))?;
    check(upper[..5] == REFERENCE_UPPER_RF[..5], format!("upper layers 1-5 {:?}", &upper[..5]))?;
    let diffs: Vec<i64> = upper.iter().zip(REFERENCE_UPPER_RF).map(|(&a, b)| a as i64 - b as i64).collect();
    check(diffs.iter().all(|d| d.abs() <= 2), format!("upper diffs {diffs:?}"))?;
    Ok(format!("lower exact; upper diffs {diffs:?}"))
}

type Scalar = fn(&mut Tape, NodeId) -> CoreResult<NodeId>;

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: NodeId) -> CoreResult<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = Tensor::from_fn(tape.shape(y), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let w = tape.constant(w);
    let p = ops::mul(tape, y, w)?;
    ops::sum(tape, p)
}

fn gradient_integrity() -> Outcome {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: String, err: CoreResult<f64>| -> Result<(), String> {
        let err = err.map_err(|e| format!("{name}: {e}"))?;
        worst.push((name.clone(), err));
        check(err < TOL, format!("{name}: relative error {err:.3e}"))
    };

    for d in [1, 2, 6] {
        let g = ConvGeometry::same(d);
        let x = random(Shape::new(2, 3, 9, 9), &mut rng);
        let w = random(Shape::new(4, 3, 3, 3), &mut rng);
        let b = random(Shape::new(1, 4, 1, 1), &mut rng);
        let (w1, b1) = (w.clone(), b.clone());
        record(
            format!("conv2d d={d} input"),
            finite_diff_check(
                move |t, x| {
                    let (wi, bi) = (t.constant(w1.clone()), t.constant(b1.clone()));
                    let y = conv2d(t, x, wi, Some(bi), g)?;
                    weighted_sum(t, y)
                },
                &x,
                STEP,
            ),
        )?;
        let (x2, b2) = (x.clone(), b.clone());
        record(
            format!("conv2d d={d} weight"),
            finite_diff_check(
                move |t, w| {
                    let (xi, bi) = (t.constant(x2.clone()), t.constant(b2.clone()));
                    let y = conv2d(t, xi, w, Some(bi), g)?;
                    weighted_sum(t, y)
                },
                &w,
                STEP,
            ),
        )?;
        record(
            format!("conv2d d={d} bias"),
            finite_diff_check(
                move |t, b| {
                    let (xi, wi) = (t.constant(x.clone()), t.constant(w.clone()));
                    let y = conv2d(t, xi, wi, Some(b), g)?;
                    weighted_sum(t, y)
                },
                &b,
                STEP,
            ),
        )?;
    }

    let x = random(Shape::new(2, 3, 6, 6), &mut rng);
    let unary: [(&str, Scalar); 4] = [
        ("maxpool", |t, x| {
            let y = maxpool2x2(t, x)?;
            weighted_sum(t, y)
        }),
        ("upsample", |t, x| {
            let y = upsample_bilinear2x(t, x)?;
            weighted_sum(t, y)
        }),
        ("relu", |t, x| {
            let y = activation(t, x, Activation::Relu)?;
            weighted_sum(t, y)
        }),
        ("tanh", |t, x| {
            let y = activation(t, x, Activation::Tanh)?;
            weighted_sum(t, y)
        }),
    ];
    for (name, f) in unary {
        record(name.to_string(), finite_diff_check(f, &x, STEP))?;
    }

    let gamma = random(Shape::new(1, 3, 1, 1), &mut rng);
    let beta = random(Shape::new(1, 3, 1, 1), &mut rng);
    let (g1, b1) = (gamma.clone(), beta.clone());
    record(
        "batch_norm input".into(),
        finite_diff_check(
            move |t, x| {
                let (g, b) = (t.constant(g1.clone()), t.constant(b1.clone()));
                let y = batch_norm(t, x, g, b, &mut BatchNormState::new(3), Mode::Train)?;
                weighted_sum(t, y)
            },
            &x,
            STEP,
        ),
    )?;
    let (x1, b1) = (x.clone(), beta.clone());
    record(
        "batch_norm gamma".into(),
        finite_diff_check(
            move |t, g| {
                let (xi, b) = (t.constant(x1.clone()), t.constant(b1.clone()));
                let y = batch_norm(t, xi, g, b, &mut BatchNormState::new(3), Mode::Train)?;
                weighted_sum(t, y)
            },
            &gamma,
            STEP,
        ),
    )?;
    let x1 = x.clone();
    record(
        "batch_norm beta".into(),
        finite_diff_check(
            move |t, b| {
                let (xi, g) = (t.constant(x1.clone()), t.constant(gamma.clone()));
                let y = batch_norm(t, xi, g, b, &mut BatchNormState::new(3), Mode::Train)?;
                weighted_sum(t, y)
            },
            &beta,
            STEP,
        ),
    )?;

    let target = random(Shape::new(2, 3, 6, 6), &mut rng);
    let sigma = random(Shape::new(2, 1, 6, 6), &mut rng);
    let losses: [(&str, fn(&mut Tape, NodeId, NodeId, NodeId) -> CoreResult<NodeId>); 5] = [
        ("mse", |t, p, q, _| mse_loss(t, p, q)),
        ("charbonnier", |t, p, q, _| charbonnier_loss(t, p, q, 1e-3)),
        ("edge", |t, p, q, _| edge_loss(t, p, q, 1e-3)),
        ("tv", |t, p, _, _| {
            let s = ops::scale(t, p, 1.0)?;
            tv_loss(t, s)
        }),
        ("total", |t, p, q, s| total_loss(t, p, q, s, &LossWeights::default())),
    ];
    for (name, f) in losses {
        let (q, s) = (target.clone(), sigma.clone());
        record(
            format!("{name} loss"),
            finite_diff_check(
                move |t, p| {
                    let (qi, si) = (t.constant(q.clone()), t.constant(s.clone()));
                    f(t, p, qi, si)
                },
                &x,
                STEP,
            ),
        )?;
    }
    // total loss through the level-map argument
    let (p, q) = (x.clone(), target.clone());
    record(
        "total loss sigma map".into(),
        finite_diff_check(
            move |t, s| {
                let (pi, qi) = (t.constant(p.clone()), t.constant(q.clone()));
                total_loss(t, pi, qi, s, &LossWeights::default())
            },
            &sigma,
            STEP,
        ),
    )?;

    let (coords, model_err) = model_gradient_check(STEP)?;
    record(format!("width-8 model ({coords} parameters)"), Ok(model_err))?;

    let (name, err) = worst.iter().max_by(|a, b| a.1.total_cmp(&b.1)).cloned().unwrap();
    Ok(format!("{} checks, worst {err:.2e} ({name})", worst.len()))
}

/// End-to-end check of the width-8 model on about 1% of its parameters.
fn model_gradient_check(step: f64) -> Result<(usize, f64), String> {
    let e = |e: dcbd_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let base = Model::new(ModelConfig::new(1, 8).with_seed(4)).map_err(e)?;
    let x = Tensor::from_fn(Shape::new(2, 1, 8, 8), |_, _, _, _| rng.gen::<f64>());
    let target = Tensor::from_fn(Shape::new(2, 1, 8, 8), |_, _, _, _| rng.gen::<f64>());
    let loss_of = |model: &Model| -> CoreResult<(Tape, NodeId, Vec<NodeId>)> {
        let mut model = model.clone();
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let out = model.forward(&mut tape, xi, Mode::Train)?;
        let ti = tape.constant(target.clone());
        let mse = mse_loss(&mut tape, out.denoised, ti)?;
        let tv = tv_loss(&mut tape, out.sigma_map)?;
        let loss = ops::add(&mut tape, mse, tv)?;
        Ok((tape, loss, out.params))
    };
    let (tape, loss, params) = loss_of(&base).map_err(e)?;
    let grads = tape.backward(loss).map_err(e)?;
    let mut worst = 0.0f64;
    let mut coords = 0;
    let sizes: Vec<usize> = base.parameters().iter().map(|(_, t)| t.len()).collect();
    for (pi, &len) in sizes.iter().enumerate() {
        let analytic = grads.get(params[pi]).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(params[pi])));
        for _ in 0..(len / 100).max(1) {
            let j = rng.gen_range(0..len);
            let eval = |delta: f64| -> CoreResult<f64> {
                let mut m = base.clone();
                m.parameters_mut()[pi].data_mut()[j] += delta;
                let (t, l, _) = loss_of(&m)?;
                t.value(l).item()
            };
            let numeric = (eval(step).map_err(e)? - eval(-step).map_err(e)?) / (2.0 * step);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
            coords += 1;
        }
    }
    Ok((coords, worst))
}

fn loss_constants() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random(Shape::new(2, 3, 8, 8), &mut rng);
    let mut tape = Tape::new();
    let a = tape.leaf(p.clone());
    let b = tape.constant(p);
    let sigma = tape.constant(Tensor::full(Shape::new(2, 1, 8, 8), 0.37));
    let c = charbonnier_loss(&mut tape, a, b, 1e-3).map_err(e)?;
    let ed = edge_loss(&mut tape, a, b, 1e-3).map_err(e)?;
    let t = total_loss(&mut tape, a, b, sigma, &LossWeights::default()).map_err(e)?;
    let (c, ed, t) = (tape.value(c).data()[0], tape.value(ed).data()[0], tape.value(t).data()[0]);
    check(c == 1e-3, format!("charbonnier {c:e}"))?;
    check(ed == 1e-3, format!("edge {ed:e}"))?;
    check((t - 1.1e-3).abs() <= 1e-12, format!("total {t:e}"))?;
    Ok(format!("charbonnier={c:e} edge={ed:e} total={t:e}"))
}

fn noise_synthesis() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let p = peaks_field(256, 256);
    let m = noise_level_map(&p, 50.0).map_err(e)?;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    check(lo == 0.0 && hi == 50.0, format!("map range [{lo}, {hi}]"))?;

    let mut oracle_err = 0.0f64;
    for y in 0..256 {
        for x in 0..256 {
            let (mm, nn) = (-3.0 + 6.0 * x as f64 / 255.0, -3.0 + 6.0 * y as f64 / 255.0);
            oracle_err = oracle_err.max((p.at(0, 0, y, x) - peaks(mm, nn)).abs());
        }
    }
    check(oracle_err <= 1e-12, format!("peaks oracle error {oracle_err:e}"))?;

    let clean = Tensor::full(Shape::new(1, 1, 256, 256), 0.5);
    let m25 = Tensor::full(Shape::new(1, 1, 256, 256), 25.0);
    let (noisy, _) = spatially_variant_awgn(&clean, &m25, &mut GaussianSampler::new(4)).map_err(e)?;
    let r: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| (a - b) * 255.0).collect();
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    check((std - 25.0).abs() / 25.0 < 0.02, format!("std {std}"))?;

    let z0 = Tensor::zeros(Shape::new(1, 1, 250, 400));
    let (z, _) = spatially_variant_awgn(&z0, &Tensor::full(Shape::new(1, 1, 250, 400), 255.0), &mut GaussianSampler::new(5))
        .map_err(e)?;
    let normal = Normal::new(0.0, 1.0).unwrap();
    let ks = ks_statistic(z.data().to_vec(), |v| normal.cdf(v));
    check(ks < 0.01, format!("KS {ks}"))?;
    Ok(format!("map [0, 50]; std {std:.3} (25); peaks error {oracle_err:.1e}; KS {ks:.4} at 1e5"))
}

fn metric_oracles() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let a = Image::filled(1, 32, 32, 100.0).unwrap();
    let b = Image::filled(1, 32, 32, 110.0).unwrap();
    let v = psnr(&a, &b, 255.0).map_err(e)?;
    check((v - 28.131).abs() <= 1e-3, format!("psnr {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let img = Image::from_fn(3, 32, 32, |_, _, _| rng.gen::<f64>()).unwrap();
    let same = ssim(&img, &img.clone(), 1.0).map_err(e)?;
    check(same == 1.0, format!("ssim identical {same}"))?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = Image::from_fn(1, 32, 32, |_, _, _| rng.gen::<f64>()).unwrap();
        let b = Image::from_fn(1, 32, 32, |_, y, x| (a.at(0, y, x) + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0)).unwrap();
        worst = worst.max((ssim(&a, &b, 1.0).map_err(e)? - ssim_loops(&a, &b)).abs());
    }
    check(worst <= 1e-10, format!("ssim oracle error {worst:e}"))?;
    Ok(format!("psnr {v:.4} dB; ssim(x,x)=1; ssim oracle error {worst:.1e}"))
}

fn parameter_count() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let gray = Model::new(ModelConfig::grayscale()).map_err(e)?.num_params();
    let color = Model::new(ModelConfig::color()).map_err(e)?.num_params();
    let rel = |n: usize, r: f64| (n as f64 - r) / r;
    check(rel(gray, 1_004_000.0).abs() <= 0.1, format!("gray {gray}"))?;
    check(rel(color, 1_013_000.0).abs() <= 0.1, format!("color {color}"))?;
    Ok(format!(
        "gray {gray} ({:+.2}% vs 1004K), color {color} ({:+.2}% vs 1013K)",
        100.0 * rel(gray, 1_004_000.0),
        100.0 * rel(color, 1_013_000.0)
    ))
}

fn desk_scale_learning() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let start = Instant::now();
    let train: Vec<_> = (0..20).map(|i| (format!("train{i}"), texture_image(i, 96, 96))).collect();
    let held_out: Vec<_> = (0..4).map(|i| (format!("held{i}"), texture_image(1000 + i, 96, 96))).collect();
    let cfg = DatasetConfig {
        channels: 1,
        patch: 64,
        batch: 8,
        patches_per_image: 8,
        noise: NoisePolicy::UniformRange { max: 75.0 },
        augment: true,
        seed: 1,
    };
    let dataset = Dataset::from_images(train, cfg).map_err(e)?;
    let iterations = 2000;
    let mut config = TrainConfig::new(ModelConfig::new(1, 16).with_seed(1), iterations);
    config.schedule = Schedule::Cosine { lr0: 1e-3, lr_min: 1e-5, total: iterations };
    config.precision = Precision::F32;

    let mut trainer = Trainer::new(config.clone()).map_err(e)?;
    for _ in 0..iterations {
        trainer.step(&dataset).map_err(e)?;
    }
    let report = evaluate(trainer.model(), &held_out, NoiseSpec::uniform(25.0, 7)).map_err(e)?;
    let gain = report.psnr_db - report.noisy_psnr_db;

    for (skip, bn) in [(true, true), (true, false), (false, true), (false, false)] {
        let mut c = config.clone();
        c.model = c.model.with_ablation(skip, bn);
        c.iterations = 20;
        let mut t = Trainer::new(c).map_err(e)?;
        for _ in 0..20 {
            let s = t.step(&dataset).map_err(e)?;
            check(s.loss.is_finite(), format!("ablation skip={skip} bn={bn}: loss {}", s.loss))?;
        }
        let (den, sigma) = t.model().infer(&dataset.batch_at(0).map_err(e)?.noisy).map_err(e)?;
        check(
            den.is_finite() && sigma.is_finite() && den.shape().dims() == [8, 1, 64, 64],
            format!("ablation skip={skip} bn={bn}: bad output {}", den.shape()),
        )?;
    }
    let summary = format!(
        "noisy {:.2} dB -> denoised {:.2} dB (gain {gain:.2} dB); 4 ablations ok; {:.0}s",
        report.noisy_psnr_db,
        report.psnr_db,
        start.elapsed().as_secs_f64()
    );
    check(gain >= 3.0, summary.clone())?;
    Ok(summary)
}

fn determinism_and_persistence() -> Outcome {
    let e = |e: dcbd_core::Error| e.to_string();
    let images: Vec<_> = (0..4).map(|i| (format!("d{i}"), texture_image(50 + i, 24, 24))).collect();
    let cfg = DatasetConfig { patch: 16, batch: 4, patches_per_image: 2, seed: 3, ..DatasetConfig::default() };
    let dataset = Dataset::from_images(images, cfg).map_err(e)?;
    let mut config = TrainConfig::new(ModelConfig::new(1, 8).with_seed(3), 10);
    config.schedule = Schedule::cosine(10);

    let train = |from: Option<&dcbd_core::checkpoint::Checkpoint>, until: u64| -> CoreResult<Trainer> {
        let mut t = match from {
            Some(c) => Trainer::resume(config.clone(), c)?,
            None => Trainer::new(config.clone())?,
        };
        while t.iteration() < until {
            t.step(&dataset)?;
        }
        Ok(t)
    };
    let a = train(None, 10).map_err(e)?.checkpoint(&dataset).to_bytes().map_err(e)?;
    let b = train(None, 10).map_err(e)?.checkpoint(&dataset).to_bytes().map_err(e)?;
    check(a == b, "two fixed-seed runs differ".into())?;

    let dir = tempfile::tempdir().map_err(|x| x.to_string())?;
    let path = dir.path().join("mid.ckpt");
    train(None, 4).map_err(e)?.checkpoint(&dataset).save(&path).map_err(e)?;
    let mid = dcbd_core::checkpoint::Checkpoint::load(&path).map_err(e)?;
    let resumed = train(Some(&mid), 10).map_err(e)?.checkpoint(&dataset).to_bytes().map_err(e)?;
    check(resumed == a, "resumed run differs from uninterrupted run".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (c, h, w) in [(1, 17, 9), (3, 8, 13), (1, 1, 1)] {
        let img = Image::from_fn(c, h, w, |_, _, _| rng.gen_range(0..=255u8) as f64 / 255.0).unwrap();
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes).map_err(e)?;
        check(back == img && encode_pnm(&back) == bytes, format!("codec round trip {c}x{h}x{w}"))?;
    }
    Ok(format!("two runs identical; resume at 4 of 10 identical ({} checkpoint bytes); codec exact", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("receptive fields", receptive_fields),
        ("gradient integrity", gradient_integrity),
        ("loss constants", loss_constants),
        ("noise synthesis", noise_synthesis),
        ("metric oracles", metric_oracles),
        ("parameter count", parameter_count),
        ("desk-scale learning", desk_scale_learning),
        ("determinism and persistence", determinism_and_persistence),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        match run() {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
