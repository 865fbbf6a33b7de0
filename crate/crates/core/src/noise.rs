//! Additive white Gaussian noise: spatially invariant over sigma in [0, 75]
//! and spatially variant noise shaped by the normalized "peaks" surface.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Upper end of the training noise range, on the 8-bit scale.
pub const SIGMA_MAX: f64 = 75.0;

/// Noise model applied to a clean image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// Constant sigma on the 8-bit scale.
    Uniform { sigma: f64 },
    /// Peaks-shaped level map scaled to `[0, lambda]`.
    Variant { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn uniform(sigma: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Uniform { sigma }, seed }
    }

    pub fn variant(lambda: f64, seed: u64) -> Self {
        NoiseSpec { kind: NoiseKind::Variant { lambda }, seed }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            NoiseKind::Uniform { sigma } => check_sigma(sigma),
            NoiseKind::Variant { lambda } if !(lambda >= 0.0) || !lambda.is_finite() => {
                Err(Error::Range(format!("lambda must be a finite value >= 0, got {lambda}")))
            }
            NoiseKind::Variant { .. } => Ok(()),
        }
    }

    /// Noisy version of `clean` (`n x c x h x w`, values in [0, 1]) and its
    /// `1 x 1 x h x w` level map in 8-bit sigma units. `stream` selects an
    /// independent generator so different images get different noise.
    pub fn apply(&self, clean: &Tensor, stream: u64) -> Result<(Tensor, Tensor)> {
        self.validate()?;
        let mut sampler = GaussianSampler::split(self.seed, stream);
        match self.kind {
            NoiseKind::Uniform { sigma } => uniform_awgn(clean, sigma, &mut sampler),
            NoiseKind::Variant { lambda } => {
                let s = clean.shape();
                let p = peaks_field(s.h, s.w);
                let m = noise_level_map(&p, lambda)?;
                spatially_variant_awgn(clean, &m, &mut sampler)
            }
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..=SIGMA_MAX).contains(&sigma) {
        return Err(Error::Range(format!("sigma {sigma} outside the noise range [0, {SIGMA_MAX}]")));
    }
    Ok(())
}

/// Standard normal draws from a seeded ChaCha8 stream via Box-Muller.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianSampler {
    pub fn new(seed: u64) -> Self {
        GaussianSampler { rng: ChaCha8Rng::seed_from_u64(seed), spare: None }
    }

    /// Independent generator for sub-task `stream` of `seed`.
    pub fn split(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        GaussianSampler { rng, spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1 = 1.0 - self.rng.gen::<f64>();
        let u2 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Square sampling domain for the peaks surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeaksDomain {
    pub min: f64,
    pub max: f64,
}

impl Default for PeaksDomain {
    fn default() -> Self {
        PeaksDomain { min: -3.0, max: 3.0 }
    }
}

/// The peaks surface at horizontal coordinate `m` and vertical coordinate `n`.
pub fn peaks(m: f64, n: f64) -> f64 {
    3.0 * (1.0 - m).powi(2) * (-m * m - (n + 1.0).powi(2)).exp()
        - 10.0 * (m / 5.0 - m.powi(3) - n.powi(5)) * (-m * m - n * n).exp()
        - (-(m + 1.0).powi(2) - n * n).exp() / 3.0
}

fn grid(len: usize, i: usize, domain: PeaksDomain) -> f64 {
    if len == 1 {
        return 0.5 * (domain.min + domain.max);
    }
    domain.min + (domain.max - domain.min) * i as f64 / (len - 1) as f64
}

pub fn peaks_field(h: usize, w: usize) -> Tensor {
    peaks_field_in(h, w, PeaksDomain::default())
}

/// Peaks surface on a uniform `h x w` grid; columns sweep `m`, rows sweep `n`.
pub fn peaks_field_in(h: usize, w: usize, domain: PeaksDomain) -> Tensor {
    Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| peaks(grid(w, x, domain), grid(h, y, domain)))
}

/// `lambda * (p - min p) / (max p - min p)`.
pub fn noise_level_map(p: &Tensor, lambda: f64) -> Result<Tensor> {
    let (lo, hi) = p
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Err(Error::Numeric("noise_level_map: distribution is constant".into()));
    }
    let span = hi - lo;
    Ok(p.map(|v| lambda * ((v - lo) / span)))
}

/// `clean + (M * D) / 255` with `D ~ N(0, 1)` per element. `m` is a
/// `1 x 1 x h x w` map shared by every sample and channel.
pub fn spatially_variant_awgn(clean: &Tensor, m: &Tensor, sampler: &mut GaussianSampler) -> Result<(Tensor, Tensor)> {
    let s = clean.shape();
    let ms = m.shape();
    if ms.n != 1 || ms.c != 1 || ms.h != s.h || ms.w != s.w {
        return Err(Error::Shape(format!("noise map {ms} does not fit image {s}")));
    }
    let plane = s.plane();
    let md = m.data();
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let sigma = md[i % plane];
            let z = sampler.sample();
            x + sigma * z / 255.0
        })
        .collect();
    Ok((Tensor::new(s, data)?, m.clone()))
}

/// Constant-level AWGN, `sigma` on the 8-bit scale in [0, 75].
pub fn uniform_awgn(clean: &Tensor, sigma: f64, sampler: &mut GaussianSampler) -> Result<(Tensor, Tensor)> {
    check_sigma(sigma)?;
    let s = clean.shape();
    let m = Tensor::full(Shape::new(1, 1, s.h, s.w), sigma);
    spatially_variant_awgn(clean, &m, sampler)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_origin() {
        let expected = 8.0 / 3.0 * (-1.0f64).exp();
        assert!((peaks(0.0, 0.0) - expected).abs() < 1e-15);
        assert!((expected - 0.98101).abs() < 1e-5);
    }

    #[test]
    fn peaks_first_term_vanishes_at_m_one() {
        for n in [-2.0, -0.5, 0.0, 1.3] {
            let rest = -10.0 * (0.2 - 1.0 - f64::powi(n, 5)) * (-1.0 - n * n).exp() - (-4.0 - n * n).exp() / 3.0;
            assert!((peaks(1.0, n) - rest).abs() < 1e-14);
        }
    }

    #[test]
    fn level_map_bounds() {
        let p = peaks_field(37, 53);
        let m = noise_level_map(&p, 50.0).unwrap();
        let min = m.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 50.0);
        let argmax = p.data().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(m.data()[argmax], 50.0);
        assert!(noise_level_map(&p, 0.0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn level_map_degenerate() {
        assert!(matches!(noise_level_map(&Tensor::full(Shape::new(1, 1, 3, 3), 2.0), 1.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn zero_noise_is_identity() {
        let clean = Tensor::from_fn(Shape::new(1, 3, 5, 7), |_, c, y, x| (c + y + x) as f64 / 15.0);
        let (noisy, m) = uniform_awgn(&clean, 0.0, &mut GaussianSampler::new(1)).unwrap();
        assert_eq!(noisy, clean);
        assert!(m.data().iter().all(|&v| v == 0.0));
        let zero = Tensor::zeros(Shape::new(1, 1, 5, 7));
        let (noisy, _) = spatially_variant_awgn(&clean, &zero, &mut GaussianSampler::new(1)).unwrap();
        assert_eq!(noisy, clean);
    }

    #[test]
    fn sigma_out_of_range() {
        let clean = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(matches!(uniform_awgn(&clean, 80.0, &mut GaussianSampler::new(1)), Err(Error::Range(_))));
        assert!(matches!(uniform_awgn(&clean, -1.0, &mut GaussianSampler::new(1)), Err(Error::Range(_))));
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let clean = Tensor::zeros(Shape::new(2, 1, 8, 8));
        let a = uniform_awgn(&clean, 25.0, &mut GaussianSampler::new(42)).unwrap();
        let b = uniform_awgn(&clean, 25.0, &mut GaussianSampler::new(42)).unwrap();
        let c = uniform_awgn(&clean, 25.0, &mut GaussianSampler::new(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, c.0);
        let s1 = NoiseSpec::uniform(10.0, 9).apply(&clean, 0).unwrap();
        let s2 = NoiseSpec::uniform(10.0, 9).apply(&clean, 1).unwrap();
        assert_ne!(s1.0, s2.0);
    }

    #[test]
    fn map_shape_must_fit() {
        let clean = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let m = Tensor::zeros(Shape::new(1, 1, 4, 5));
        assert!(matches!(spatially_variant_awgn(&clean, &m, &mut GaussianSampler::new(0)), Err(Error::Shape(_))));
    }
}
