//! Full-reference quality metrics: PSNR and SSIM.

use std::fmt;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::Shape(format!(
            "metric operands differ: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)`; `f64::INFINITY` when the images are identical.
/// Values are compared as stored, so pass `peak = 1.0` for [0, 1] images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    if !(peak > 0.0) {
        return Err(Error::Range(format!("peak must be positive, got {peak}")));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-region separable filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &taps);
    let mu_b = filter_valid(b, h, w, &taps);
    let e_aa = filter_valid(&aa, h, w, &taps);
    let e_bb = filter_valid(&bb, h, w, &taps);
    let e_ab = filter_valid(&ab, h, w, &taps);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / mu_a.len() as f64
}

/// Mean SSIM over valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {}x{}",
            a.height, a.width
        )));
    }
    if a.data == b.data {
        return Ok(1.0);
    }
    let sum: f64 = (0..a.channels).map(|c| ssim_plane(a.plane(c), b.plane(c), a.height, a.width, peak)).sum();
    Ok(sum / a.channels as f64)
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub noisy_psnr: f64,
    pub noisy_ssim: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image breakdown plus dataset means (denoised vs clean).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub noisy_psnr_db: f64,
    pub noisy_ssim: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        MetricReport {
            psnr_db: mean(|m| m.psnr),
            ssim: mean(|m| m.ssim),
            noisy_psnr_db: mean(|m| m.noisy_psnr),
            noisy_ssim: mean(|m| m.noisy_ssim),
            per_image,
        }
    }

    /// One `key=value` record per image plus a final `mean` record.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for m in &self.per_image {
            out.push_str(&format!(
                "image={} noisy_psnr={} noisy_ssim={:.6} psnr={} ssim={:.6}\n",
                m.name,
                fmt_db(m.noisy_psnr),
                m.noisy_ssim,
                fmt_db(m.psnr),
                m.ssim
            ));
        }
        out.push_str(&format!(
            "image=mean noisy_psnr={} noisy_ssim={:.6} psnr={} ssim={:.6}\n",
            fmt_db(self.noisy_psnr_db),
            self.noisy_ssim,
            fmt_db(self.psnr_db),
            self.ssim
        ));
        out
    }
}

/// dB value with `inf` for identical images.
pub fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.per_image.iter().map(|m| m.name.len()).max().unwrap_or(0).max(5);
        writeln!(f, "{:<width$}  {:>11}  {:>10}  {:>11}  {:>10}", "image", "noisy PSNR", "noisy SSIM", "PSNR", "SSIM")?;
        for m in &self.per_image {
            writeln!(
                f,
                "{:<width$}  {:>11}  {:>10.4}  {:>11}  {:>10.4}",
                m.name,
                fmt_db(m.noisy_psnr),
                m.noisy_ssim,
                fmt_db(m.psnr),
                m.ssim
            )?;
        }
        write!(
            f,
            "{:<width$}  {:>11}  {:>10.4}  {:>11}  {:>10.4}",
            "mean",
            fmt_db(self.noisy_psnr_db),
            self.noisy_ssim,
            fmt_db(self.psnr_db),
            self.ssim
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Image {
        Image::from_fn(1, h, w, |_, y, x| f(y, x)).unwrap()
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = gray(4, 4, |y, x| (y + x) as f64);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_constant_difference_ten() {
        let a = gray(8, 8, |y, x| (y * 8 + x) as f64);
        let b = gray(8, 8, |y, x| (y * 8 + x) as f64 + 10.0);
        let v = psnr(&a, &b, 255.0).unwrap();
        assert!((v - 28.1308).abs() < 1e-3, "{v}");
        assert_eq!(v, psnr(&b, &a, 255.0).unwrap());
    }

    #[test]
    fn psnr_shape_mismatch() {
        assert!(psnr(&gray(2, 2, |_, _| 0.0), &gray(2, 3, |_, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_identity_and_offset() {
        let a = gray(16, 16, |y, x| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let b = gray(16, 16, |y, x| a.at(0, y, x) + 0.5);
        assert!(ssim(&a, &b, 1.0).unwrap() < 1.0);
    }

    #[test]
    fn ssim_too_small() {
        let a = gray(10, 20, |_, _| 0.0);
        assert!(matches!(ssim(&a, &a, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let w = gaussian_window(11, 1.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(w[i], w[10 - i]);
        }
    }

    #[test]
    fn report_means_and_records() {
        let m = |name: &str, p| ImageMetrics { name: name.into(), noisy_psnr: 20.0, noisy_ssim: 0.5, psnr: p, ssim: 0.8 };
        let r = MetricReport::from_images(vec![m("a", 30.0), m("b", 32.0)]);
        assert_eq!(r.psnr_db, 31.0);
        assert_eq!(r.to_records().lines().count(), 3);
        assert!(r.to_string().contains("mean"));
    }
}
