//! Test-time noise strategies used by the robustness sweep.
//!
//! - `noise1`: `N(0, 1) * 0.01` added to every element.
//! - `noise2`: `N(0, 1) * 0.1` added to every element.
//! - `noise3`: `N(0, 1) * sigma` added inside one random square block covering
//!   5% of the pixel area (side `round(sqrt(0.05 * H * W))`).
//! - `noise4`: `N(0, 1) * sigma` added at every channel of `round(0.05 * H * W)`
//!   pixel positions drawn without replacement.
//!
//! `sigma` defaults to 0.1 for noise3/noise4. Results are not clamped.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Noise1,
    Noise2,
    Noise3,
    Noise4,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::Noise1, NoiseKind::Noise2, NoiseKind::Noise3, NoiseKind::Noise4];

    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Noise1 => "noise1",
            NoiseKind::Noise2 => "noise2",
            NoiseKind::Noise3 => "noise3",
            NoiseKind::Noise4 => "noise4",
        }
    }

    pub fn default_sigma(&self) -> f64 {
        match self {
            NoiseKind::Noise1 => 0.01,
            NoiseKind::Noise2 | NoiseKind::Noise3 | NoiseKind::Noise4 => 0.1,
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown noise kind {s:?} (expected noise1..noise4)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sigma: f64,
    /// Share of the pixel area perturbed by noise3/noise4.
    pub fraction: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, seed: u64) -> Self {
        NoiseSpec {
            kind,
            sigma: kind.default_sigma(),
            fraction: 0.05,
            seed,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    /// Parses `noiseN` or `noiseN:sigma`.
    pub fn parse(s: &str, seed: u64) -> Result<Self> {
        let (kind, sigma) = match s.split_once(':') {
            Some((k, sigma)) => (
                k.parse::<NoiseKind>()?,
                Some(sigma.parse::<f64>().map_err(|_| Error::invalid(format!("bad noise strength in {s:?}")))?),
            ),
            None => (s.parse::<NoiseKind>()?, None),
        };
        let spec = NoiseSpec::new(kind, seed);
        match sigma {
            Some(sigma) if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(Error::invalid(format!("noise strength must be finite and non-negative, got {sigma}")))
            }
            Some(sigma) => Ok(spec.with_sigma(sigma)),
            None => Ok(spec),
        }
    }

    /// `noiseN` when sigma is the default, `noiseN:sigma` otherwise.
    pub fn label(&self) -> String {
        if self.sigma == self.kind.default_sigma() {
            self.kind.name().to_string()
        } else {
            format!("{}:{}", self.kind.name(), self.sigma)
        }
    }

    /// The generator for image number `index`: one ChaCha stream per image,
    /// so results do not depend on evaluation order.
    pub fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }
}

/// Side of the square noise3 block.
pub fn block_side(h: usize, w: usize, fraction: f64) -> usize {
    let side = (fraction * (h * w) as f64).sqrt().round() as usize;
    side.clamp(1, h.min(w))
}

/// Number of pixel positions perturbed by noise4.
pub fn pixel_count(h: usize, w: usize, fraction: f64) -> usize {
    ((fraction * (h * w) as f64).round() as usize).min(h * w)
}

/// Applies `spec` to the `[H, W, C]` image number `index`.
pub fn apply_noise(img: &Tensor, spec: &NoiseSpec, index: u64) -> Result<Tensor> {
    let [h, w, c] = img.hwc()?;
    let mut rng = spec.rng_for(index);
    let mut out = img.clone();
    let sigma = spec.sigma;
    let perturb = |data: &mut [f64], rng: &mut ChaCha8Rng| {
        for v in data {
            let z: f64 = rng.sample(StandardNormal);
            *v += z * sigma;
        }
    };
    match spec.kind {
        NoiseKind::Noise1 | NoiseKind::Noise2 => perturb(out.data_mut(), &mut rng),
        NoiseKind::Noise3 => {
            let side = block_side(h, w, spec.fraction);
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            for r in top..top + side {
                let start = (r * w + left) * c;
                perturb(&mut out.data_mut()[start..start + side * c], &mut rng);
            }
        }
        NoiseKind::Noise4 => {
            let count = pixel_count(h, w, spec.fraction);
            let mut positions = sample(&mut rng, h * w, count).into_vec();
            positions.sort_unstable();
            for pos in positions {
                perturb(&mut out.data_mut()[pos * c..(pos + 1) * c], &mut rng);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, c: usize) -> Tensor {
        Tensor::from_fn([h, w, c], |i| (i % 17) as f64 / 17.0).unwrap()
    }

    fn changed_pixels(a: &Tensor, b: &Tensor) -> Vec<usize> {
        let [_, _, c] = a.hwc().unwrap();
        (0..a.len() / c)
            .filter(|&p| (0..c).any(|d| a.data()[p * c + d] != b.data()[p * c + d]))
            .collect()
    }

    #[test]
    fn zero_strength_is_identity() {
        let img = image(8, 8, 3);
        for kind in NoiseKind::ALL {
            let spec = NoiseSpec::new(kind, 3).with_sigma(0.0);
            assert_eq!(apply_noise(&img, &spec, 0).unwrap(), img);
        }
    }

    #[test]
    fn deterministic_per_seed_and_index() {
        let img = image(8, 8, 3);
        for kind in NoiseKind::ALL {
            let spec = NoiseSpec::new(kind, 11);
            assert_eq!(apply_noise(&img, &spec, 5).unwrap(), apply_noise(&img, &spec, 5).unwrap());
            assert_ne!(apply_noise(&img, &spec, 5).unwrap(), apply_noise(&img, &spec, 6).unwrap());
        }
    }

    #[test]
    fn noise1_noise2_touch_every_element() {
        let img = image(6, 5, 3);
        for kind in [NoiseKind::Noise1, NoiseKind::Noise2] {
            let out = apply_noise(&img, &NoiseSpec::new(kind, 1), 0).unwrap();
            assert!(out.data().iter().zip(img.data()).all(|(a, b)| a != b));
        }
    }

    #[test]
    fn noise1_mean_abs_matches_half_normal() {
        // E|N(0, 1) * 0.01| = 0.01 * sqrt(2 / pi)
        let expected = 0.01 * (2.0 / std::f64::consts::PI).sqrt();
        let img = Tensor::full([32, 32, 3], 0.5).unwrap();
        let spec = NoiseSpec::new(NoiseKind::Noise1, 42);
        let mut total = 0.0;
        for i in 0..100 {
            let out = apply_noise(&img, &spec, i).unwrap();
            total += out.data().iter().map(|v| (v - 0.5).abs()).sum::<f64>() / out.len() as f64;
        }
        let mean = total / 100.0;
        assert!((mean - expected).abs() < 0.2 * expected, "mean |delta| {mean}, expected {expected}");
    }

    #[test]
    fn noise3_changes_exactly_one_square_block() {
        let img = image(32, 32, 3);
        assert_eq!(block_side(32, 32, 0.05), 7);
        assert_eq!(block_side(28, 28, 0.05), 6);
        for i in 0..20 {
            let out = apply_noise(&img, &NoiseSpec::new(NoiseKind::Noise3, 9), i).unwrap();
            let changed = changed_pixels(&img, &out);
            assert_eq!(changed.len(), 49);
            let rows: Vec<usize> = changed.iter().map(|p| p / 32).collect();
            let cols: Vec<usize> = changed.iter().map(|p| p % 32).collect();
            assert_eq!(rows.iter().max().unwrap() - rows.iter().min().unwrap(), 6);
            assert_eq!(cols.iter().max().unwrap() - cols.iter().min().unwrap(), 6);
        }
    }

    #[test]
    fn noise4_changes_exactly_51_positions() {
        let img = image(32, 32, 3);
        assert_eq!(pixel_count(32, 32, 0.05), 51);
        let out = apply_noise(&img, &NoiseSpec::new(NoiseKind::Noise4, 2), 0).unwrap();
        let changed = changed_pixels(&img, &out);
        assert_eq!(changed.len(), 51);
        // all channels of each chosen pixel move
        for p in changed {
            assert!((0..3).all(|d| out.data()[p * 3 + d] != img.data()[p * 3 + d]));
        }
    }

    #[test]
    fn parse_specs() {
        let s = NoiseSpec::parse("noise2", 1).unwrap();
        assert_eq!((s.kind, s.sigma), (NoiseKind::Noise2, 0.1));
        assert_eq!(s.label(), "noise2");
        let s = NoiseSpec::parse("Noise3:0.25", 1).unwrap();
        assert_eq!((s.kind, s.sigma), (NoiseKind::Noise3, 0.25));
        assert_eq!(s.label(), "noise3:0.25");
        assert!(NoiseSpec::parse("noise5", 1).is_err());
        assert!(NoiseSpec::parse("noise1:-1", 1).is_err());
        assert!(NoiseSpec::parse("noise1:x", 1).is_err());
    }
}
