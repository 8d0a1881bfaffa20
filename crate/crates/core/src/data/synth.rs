use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_box, AnnotatedSample, Corpus, OracleMeta, SplitIndices};
use crate::error::{Error, Result};
use crate::image::Image;

pub const TRAIN_FRACTION: f64 = 0.72;
pub const VAL_FRACTION: f64 = 0.14;

/// Stream reserved for the split shuffle; samples use their index.
const SPLIT_STREAM: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub height: usize,
    pub width: usize,
    pub annotators: usize,
    pub p_miss: f64,
    pub threshold_spread: f64,
    pub noise_sigma: f64,
    pub box_jitter: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 200,
            height: 64,
            width: 64,
            annotators: 4,
            p_miss: 0.1,
            threshold_spread: 0.7,
            noise_sigma: 0.05,
            box_jitter: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(msg));
        if self.n_samples < 1 {
            return bad(format!("n_samples must be at least 1, got {}", self.n_samples));
        }
        if self.height < 4 || self.width < 4 {
            return bad(format!("image must be at least 4x4, got {}x{}", self.height, self.width));
        }
        if self.annotators < 1 {
            return bad("annotators must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.p_miss) {
            return bad(format!("p_miss must lie in [0, 1), got {}", self.p_miss));
        }
        if !(0.0..1.0).contains(&self.threshold_spread) {
            return bad(format!("threshold_spread must lie in [0, 1), got {}", self.threshold_spread));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and non-negative, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

/// Rotated anisotropic Gaussian intensity profile with peak 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub sigma_y: f64,
    pub sigma_x: f64,
    pub theta: f64,
    pub background: f64,
    pub contrast: f64,
}

impl Blob {
    /// Noiseless profile in (0, 1], row-major.
    pub fn profile(&self, height: usize, width: usize) -> Vec<f64> {
        let (s, c) = self.theta.sin_cos();
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                let dy = y as f64 - self.cy;
                let dx = x as f64 - self.cx;
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let q = (u / self.sigma_x).powi(2) + (v / self.sigma_y).powi(2);
                out.push((-0.5 * q).exp());
            }
        }
        out
    }

    fn sample<R: Rng>(height: usize, width: usize, rng: &mut R) -> Self {
        let side = height.min(width) as f64;
        Self {
            cy: rng.gen_range(0.3..0.7) * (height as f64 - 1.0),
            cx: rng.gen_range(0.3..0.7) * (width as f64 - 1.0),
            sigma_y: rng.gen_range(0.07..0.13) * side,
            sigma_x: rng.gen_range(0.07..0.13) * side,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            background: rng.gen_range(0.1..0.25),
            contrast: rng.gen_range(0.45..0.7),
        }
    }
}

/// Rounds to the 16-bit grid used by the on-disk format.
pub(crate) fn quantize16(v: f64) -> f64 {
    dequantize16(encode16(v))
}

pub(crate) fn encode16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

pub(crate) fn dequantize16(q: u16) -> f64 {
    q as f64 / 65535.0
}

fn sample_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gen_sample(cfg: &SynthConfig, seed: u64, index: usize) -> Result<AnnotatedSample> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = sample_stream(seed, index as u64);
    let blob = Blob::sample(h, w, &mut rng);
    let thresholds: Vec<f64> =
        (0..cfg.annotators).map(|_| 0.5 + cfg.threshold_spread * (rng.gen::<f64>() - 0.5)).collect();
    let missed: Vec<bool> = (0..cfg.annotators).map(|_| rng.gen::<f64>() < cfg.p_miss).collect();

    let profile = blob.profile(h, w);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let pixels = profile
        .iter()
        .map(|&b| {
            let n = if cfg.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            quantize16(blob.background + blob.contrast * b + n)
        })
        .collect();
    let image = Image::new(h, w, pixels)?;

    let oracle = OracleMeta { blob, thresholds, missed };
    let annotations = oracle.masks(h, w);
    let (box_prompt, box_fallback) = derive_box(&annotations, cfg.box_jitter, &mut rng)?;
    Ok(AnnotatedSample {
        id: format!("s{index:05}"),
        image,
        box_prompt,
        annotations,
        oracle: Some(oracle),
        box_fallback,
    })
}

/// Generates `cfg.n_samples` samples from independent per-index streams of
/// `seed` and partitions them 72/14/14.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let samples = (0..cfg.n_samples).map(|i| gen_sample(cfg, seed, i)).collect::<Result<Vec<_>>>()?;
    let splits =
        SplitIndices::partition(cfg.n_samples, TRAIN_FRACTION, VAL_FRACTION, &mut sample_stream(seed, SPLIT_STREAM));
    Ok(Corpus {
        height: cfg.height,
        width: cfg.width,
        annotators: cfg.annotators,
        seed: Some(seed),
        generator: Some(cfg.clone()),
        samples,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::image::BinaryMask;
    use proptest::prelude::*;

    fn nested_by_threshold(masks: &[BinaryMask], thresholds: &[f64]) -> bool {
        for (a, ta) in masks.iter().zip(thresholds) {
            for (b, tb) in masks.iter().zip(thresholds) {
                if ta <= tb && !b.is_subset_of(a) {
                    return false;
                }
            }
        }
        true
    }

    fn small(n: usize) -> SynthConfig {
        SynthConfig { n_samples: n, height: 32, width: 32, ..SynthConfig::default() }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic(&small(12), 5).unwrap();
        let b = gen_synthetic(&small(12), 5).unwrap();
        assert_eq!(a, b);
        let c = gen_synthetic(&small(12), 6).unwrap();
        assert_ne!(a.samples[0].image, c.samples[0].image);
    }

    #[test]
    fn zero_spread_no_miss_gives_identical_masks() {
        let cfg = SynthConfig { threshold_spread: 0.0, p_miss: 0.0, ..small(30) };
        for s in gen_synthetic(&cfg, 1).unwrap().samples {
            assert!(s.annotations.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn masks_are_nested_by_threshold() {
        let cfg = SynthConfig { p_miss: 0.0, threshold_spread: 0.8, ..small(100) };
        let corpus = gen_synthetic(&cfg, 2).unwrap();
        let mut strict = 0;
        for s in &corpus.samples {
            let o = s.oracle.as_ref().unwrap();
            assert!(nested_by_threshold(&s.annotations, &o.thresholds));
            strict += s.annotations.windows(2).filter(|w| w[0] != w[1]).count();
        }
        assert!(strict > 0);
    }

    #[test]
    fn oracle_reproduces_masks() {
        let corpus = gen_synthetic(&small(50), 3).unwrap();
        for s in &corpus.samples {
            assert_eq!(s.oracle.as_ref().unwrap().masks(32, 32), s.annotations);
        }
    }

    #[test]
    fn misses_produce_empty_masks() {
        let cfg = SynthConfig { p_miss: 0.5, ..small(40) };
        let corpus = gen_synthetic(&cfg, 4).unwrap();
        let mut n_missed = 0;
        for s in &corpus.samples {
            let o = s.oracle.as_ref().unwrap();
            for (m, &missed) in s.annotations.iter().zip(&o.missed) {
                if missed {
                    assert!(m.is_empty());
                    n_missed += 1;
                }
            }
        }
        assert!(n_missed > 0);
    }

    #[test]
    fn default_split_proportions() {
        let corpus = gen_synthetic(&SynthConfig { n_samples: 200, height: 16, width: 16, ..Default::default() }, 0)
            .unwrap();
        let s = &corpus.splits;
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (144, 28, 28));
        for split in Split::ALL {
            assert_eq!(corpus.dataset(split).unwrap().len(), s.get(split).len());
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            SynthConfig { n_samples: 0, ..small(1) },
            SynthConfig { p_miss: 1.0, ..small(1) },
            SynthConfig { p_miss: -0.1, ..small(1) },
            SynthConfig { threshold_spread: 1.0, ..small(1) },
            SynthConfig { noise_sigma: f64::NAN, ..small(1) },
            SynthConfig { annotators: 0, ..small(1) },
        ] {
            assert!(matches!(gen_synthetic(&cfg, 0), Err(Error::Validation(_))));
        }
    }

    #[test]
    fn n_samples_message() {
        let err = gen_synthetic(&small(0), 0).unwrap_err();
        assert!(err.to_string().contains("n_samples"));
    }

    #[test]
    fn quantization_is_idempotent() {
        for v in [0.0, 1.0, 0.123456789, 0.5, 0.99999] {
            assert_eq!(quantize16(quantize16(v)), quantize16(v));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(4))]

        #[test]
        fn every_generated_sample_is_valid(seed in any::<u64>(), spread in 0.0..0.95f64, p_miss in 0.0..0.9f64) {
            let cfg = SynthConfig {
                n_samples: 250, height: 16, width: 16, p_miss, threshold_spread: spread, ..Default::default()
            };
            let corpus = gen_synthetic(&cfg, seed).unwrap();
            for s in &corpus.samples {
                prop_assert!(s.validate().is_ok());
                prop_assert_eq!(s.annotations.len(), 4);
                prop_assert!(s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
                prop_assert_eq!(s.box_fallback, s.annotations.iter().all(|m| m.is_empty()));
            }
        }
    }
}
