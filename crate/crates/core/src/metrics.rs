//! Overlap metrics, generalized energy distance, paired t-test and dataset
//! evaluation reports.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::model::{ModelParams, Sampler};

pub const DEFAULT_SAMPLES: usize = 16;

fn overlap(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    a.same_shape(b)?;
    let mut inter = 0;
    let (mut na, mut nb) = (0, 0);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

/// `|a ∩ b| / |a ∪ b|`, with `iou(∅, ∅) = 1`.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    let union = na + nb - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2 |a ∩ b| / (|a| + |b|)`, with `dsc(∅, ∅) = 1`.
pub fn dsc(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (inter, na, nb) = overlap(a, b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 })
}

/// `1 - iou(a, b)`.
pub fn distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    Ok(1.0 - iou(a, b)?)
}

fn mean_distance(xs: &[BinaryMask], ys: &[BinaryMask]) -> Result<f64> {
    let mut sum = 0.0;
    for x in xs {
        for y in ys {
            sum += distance(x, y)?;
        }
    }
    Ok(sum / (xs.len() * ys.len()) as f64)
}

/// Squared generalized energy distance with `d = 1 - IoU`; every
/// expectation runs over all ordered pairs, including `i = j`.
pub fn ged_squared(samples: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if samples.is_empty() || gts.is_empty() {
        return Err(Error::Validation("ged_squared needs non-empty sample and annotation sets".into()));
    }
    let cross = mean_distance(samples, gts)?;
    let within_s = mean_distance(samples, samples)?;
    let within_y = mean_distance(gts, gts)?;
    Ok(2.0 * cross - within_s - within_y)
}

/// Mean `d(s, s')` over distinct pairs; zero for a single sample.
pub fn mean_pairwise_distance(samples: &[BinaryMask]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += distance(&samples[i], &samples[j])?;
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// One-tailed paired t-test of `mean(a - b) > 0`. Returns `(t, p)` with
/// `p = P(T_{n-1} > t)`; identical inputs give `(0, 0.5)`.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Validation(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("paired t-test input".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let t = if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    if t == 0.0 {
        return Ok((0.0, 0.5));
    }
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    let p = if t.is_infinite() { if t > 0.0 { 0.0 } else { 1.0 } } else { dist.sf(t) };
    Ok((t, p))
}

/// How the M masks per image are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Latents drawn from the prior.
    Prior,
    /// Latent fixed at the prior mean; all draws coincide.
    PriorMean,
    /// Latent at the prior mean, decoder dropout active per draw.
    Dropout,
}

impl SamplingMode {
    pub fn name(self) -> &'static str {
        match self {
            SamplingMode::Prior => "prior",
            SamplingMode::PriorMean => "prior-mean",
            SamplingMode::Dropout => "dropout",
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(SamplingMode::Prior),
            "prior-mean" => Ok(SamplingMode::PriorMean),
            "dropout" => Ok(SamplingMode::Dropout),
            other => Err(Error::Validation(format!("unknown sampling mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub ged2: f64,
    pub dsc: f64,
    pub iou: f64,
    /// Mean `d(s, s')` over distinct pairs of the M draws.
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub ged2: f64,
    pub dsc: f64,
    pub iou: f64,
    pub diversity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
}

/// One-tailed tests that the evaluated model beats the baseline: lower GED²,
/// higher DSC and IoU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_name: String,
    pub baseline: Aggregates,
    pub ged2: TTest,
    pub dsc: TTest,
    pub iou: TTest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: SamplingMode,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
    pub samples: Vec<SampleMetrics>,
    pub aggregates: Aggregates,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl MetricsReport {
    pub fn from_samples(mode: SamplingMode, m: usize, seed: u64, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("report needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let aggregates = Aggregates {
            ged2: mean(|s| s.ged2),
            dsc: mean(|s| s.dsc),
            iou: mean(|s| s.iou),
            diversity: mean(|s| s.diversity),
        };
        Ok(Self { mode, m, seed, samples, aggregates, comparison: None })
    }

    fn column(&self, f: fn(&SampleMetrics) -> f64) -> Vec<f64> {
        self.samples.iter().map(f).collect()
    }

    /// Attaches paired tests against `baseline`, which must cover the same
    /// samples in the same order.
    pub fn compare(&mut self, baseline: &MetricsReport, name: &str) -> Result<()> {
        if self.samples.len() != baseline.samples.len()
            || self.samples.iter().zip(&baseline.samples).any(|(a, b)| a.id != b.id)
        {
            return Err(Error::Validation("baseline report covers different samples".into()));
        }
        let test = |a: Vec<f64>, b: Vec<f64>| -> Result<TTest> {
            let (t_stat, p_value) = paired_t_one_tailed(&a, &b)?;
            Ok(TTest { t_stat, p_value })
        };
        self.comparison = Some(Comparison {
            baseline_name: name.to_string(),
            baseline: baseline.aggregates.clone(),
            ged2: test(baseline.column(|s| s.ged2), self.column(|s| s.ged2))?,
            dsc: test(self.column(|s| s.dsc), baseline.column(|s| s.dsc))?,
            iou: test(self.column(|s| s.iou), baseline.column(|s| s.iou))?,
        });
        Ok(())
    }
}

/// Per-sample rng stream so results do not depend on evaluation order.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws `m` masks per sample in `mode`, scoring GED² against the
/// annotations and the prior-mean prediction by DSC/IoU averaged over
/// annotators.
pub fn evaluate(params: &ModelParams, ds: &Dataset, m: usize, seed: u64, mode: SamplingMode) -> Result<MetricsReport> {
    if m < 2 {
        return Err(Error::Validation(format!("GED needs M >= 2 samples per image, got {m}")));
    }
    ds.validate()?;
    let mut rows = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples.iter().enumerate() {
        let sampler = Sampler::new(params, &s.image, &s.box_prompt)?;
        let central = sampler.central()?.to_mask();
        let mut rng = sample_rng(seed, i);
        let draws = match mode {
            SamplingMode::Prior => (0..m).map(|_| sampler.sample_prior(&mut rng)).collect::<Result<Vec<_>>>()?,
            SamplingMode::PriorMean => vec![central.clone(); m],
            SamplingMode::Dropout => (0..m).map(|_| sampler.sample_dropout(&mut rng)).collect::<Result<Vec<_>>>()?,
        };
        let a = s.annotations.len() as f64;
        let mut d_sum = 0.0;
        let mut i_sum = 0.0;
        for y in &s.annotations {
            d_sum += dsc(&central, y)?;
            i_sum += iou(&central, y)?;
        }
        rows.push(SampleMetrics {
            id: s.id.clone(),
            ged2: ged_squared(&draws, &s.annotations)?,
            dsc: d_sum / a,
            iou: i_sum / a,
            diversity: mean_pairwise_distance(&draws)?,
        });
    }
    MetricsReport::from_samples(mode, m, seed, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let bits = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        BinaryMask::new(h, w, bits).unwrap()
    }

    #[test]
    fn iou_and_dsc_examples() {
        let a = mask(&["##..", "##..", "....", "...."]);
        let b = mask(&["..##", "..##", "....", "...."]);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |a ∩ c| = 2, |a ∪ c| = 6
        let c = mask(&[".#..", ".#..", ".#..", ".#.."]);
        assert!((iou(&a, &c).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((dsc(&a, &c).unwrap() - 0.5).abs() < 1e-15);
        let e = BinaryMask::empty(4, 4);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &a).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::empty(3, 4)).is_err());
    }

    #[test]
    fn ged_examples() {
        let a = mask(&["##..", "##..", "....", "...."]);
        let b = mask(&["..##", "..##", "....", "...."]);
        assert_eq!(ged_squared(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        assert_eq!(ged_squared(&[a.clone()], &[b.clone()]).unwrap(), 2.0);
        // d(a, h) = 0.5
        let h = mask(&["##..", "....", "....", "...."]);
        assert_eq!(distance(&a, &h).unwrap(), 0.5);
        assert_eq!(ged_squared(&[a.clone(), h.clone()], &[a.clone(), h.clone()]).unwrap(), 0.0);
        assert!(ged_squared(&[], &[a.clone()]).is_err());
        assert!(ged_squared(&[a], &[]).is_err());
    }

    #[test]
    fn t_test_reference() {
        let (t, p) = paired_t_one_tailed(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        let oracle = 0.5 * (1.0 - t / (2.0 + t * t).sqrt());
        assert!((t - 3.4641).abs() < 1e-3);
        assert!((p - 0.0371).abs() < 1e-3);
        assert!((p - oracle).abs() < 1e-10);
        let same = [0.3, 0.7, 0.1];
        assert_eq!(paired_t_one_tailed(&same, &same).unwrap(), (0.0, 0.5));
        let (tn, pn) = paired_t_one_tailed(&[0.0; 3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tn, -t);
        assert!((pn - (1.0 - p)).abs() < 1e-12);
        assert!(matches!(paired_t_one_tailed(&[1.0], &[0.0]), Err(Error::Validation(_))));
        assert!(paired_t_one_tailed(&[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn p_value_decreases_with_t() {
        let mut last = 1.0;
        for k in 1..40 {
            let shift = k as f64 * 0.1;
            let a: Vec<f64> = [0.2, -0.1, 0.4, 0.0, 0.3].iter().map(|v| v + shift).collect();
            let (_, p) = paired_t_one_tailed(&a, &[0.0; 5]).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn report_aggregates_are_means() {
        let rows = (0..5)
            .map(|i| SampleMetrics {
                id: format!("s{i}"),
                ged2: i as f64 * 0.1,
                dsc: 1.0 - i as f64 * 0.05,
                iou: 0.5,
                diversity: 0.0,
            })
            .collect();
        let r = MetricsReport::from_samples(SamplingMode::Prior, 4, 1, rows).unwrap();
        assert!((r.aggregates.ged2 - 0.2).abs() < 1e-15);
        assert!((r.aggregates.dsc - 0.9).abs() < 1e-15);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.get("M").is_some() && json.get("seed").is_some());
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(prop::bool::weighted(0.3), 16).prop_map(|b| BinaryMask::new(4, 4, b).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn distance_axioms(a in arb_mask(), b in arb_mask()) {
            let d = distance(&a, &b).unwrap();
            prop_assert_eq!(d, distance(&b, &a).unwrap());
            prop_assert_eq!(distance(&a, &a).unwrap(), 0.0);
            prop_assert!((0.0..=1.0).contains(&d));
            let i = iou(&a, &b).unwrap();
            prop_assert!((dsc(&a, &b).unwrap() - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        }

        #[test]
        fn ged_of_a_set_with_itself_is_zero(s in prop::collection::vec(arb_mask(), 1..6)) {
            prop_assert!(ged_squared(&s, &s).unwrap().abs() < 1e-12);
            let same = vec![s[0].clone(); s.len()];
            prop_assert_eq!(ged_squared(&same, &same).unwrap(), 0.0);
        }
    }
}
