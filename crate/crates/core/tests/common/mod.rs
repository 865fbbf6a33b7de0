//! Reference implementations shared by the integration suites.
#![allow(dead_code)]

use dcbd_core::image::Image;
use dcbd_core::metrics::gaussian_window;
use dcbd_core::nn::ConvGeometry;
use dcbd_core::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

pub fn conv_loops(x: &Tensor, w: &Tensor, b: &[f64], g: ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let oh = g.output_len(xs.h).unwrap();
    let ow = g.output_len(xs.w).unwrap();
    Tensor::from_fn(Shape::new(xs.n, ws.n, oh, ow), |n, o, y, xx| {
        let mut acc = b[o];
        for c in 0..xs.c {
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let iy = (y * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let ix = (xx * g.stride + kx * g.dilation) as isize - g.padding as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < xs.h && (ix as usize) < xs.w {
                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Full 11x11 window evaluation at every valid position.
pub fn ssim_loops(a: &Image, b: &Image) -> f64 {
    let taps = gaussian_window(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..a.channels {
        for y in 0..=a.height - 11 {
            for x in 0..=a.width - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let wgt = taps[i] * taps[j];
                        let (va, vb) = (a.at(c, y + i, x + j), b.at(c, y + i, x + j));
                        ma += wgt * va;
                        mb += wgt * vb;
                        saa += wgt * va * va;
                        sbb += wgt * vb * vb;
                        sab += wgt * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn ks_statistic(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Random synthetic texture: oriented gratings over a few flat regions with
/// sharp edges, values in [0, 1].
pub fn texture_image(seed: u64, h: usize, w: usize) -> Image {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.05..0.4);
            (angle.cos() * freq, angle.sin() * freq, rng.gen_range(0.0..6.3), rng.gen_range(0.05..0.15))
        })
        .collect();
    let regions: Vec<(f64, f64, f64)> = (0..4)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(0.2..0.8)))
        .collect();
    Image::from_fn(1, h, w, |_, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let base = regions
            .iter()
            .min_by(|a, b| ((a.0 - yf).powi(2) + (a.1 - xf).powi(2)).total_cmp(&((b.0 - yf).powi(2) + (b.1 - xf).powi(2))))
            .unwrap()
            .2;
        let wave: f64 = waves.iter().map(|(ky, kx, ph, amp)| amp * (ky * yf + kx * xf + ph).sin()).sum();
        (base + wave).clamp(0.0, 1.0)
    })
    .unwrap()
}
