//! Multi-annotator samples, the synthetic ambiguous-lesion generator and the
//! dataset directory format.

mod io;
mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use io::{load_dataset, load_image_png, save_dataset, save_mask_png, MANIFEST_FILE, SCHEMA_VERSION};
pub use synth::{gen_synthetic, Blob, SynthConfig};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, BoxPrompt, Image};

/// Generator ground truth for one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    pub blob: Blob,
    /// Per-annotator threshold on the noiseless blob profile.
    pub thresholds: Vec<f64>,
    /// Per-annotator "no lesion" event.
    pub missed: Vec<bool>,
}

impl OracleMeta {
    /// Recomputes the annotator masks from the recorded ground truth.
    pub fn masks(&self, height: usize, width: usize) -> Vec<BinaryMask> {
        let profile = self.blob.profile(height, width);
        self.thresholds
            .iter()
            .zip(&self.missed)
            .map(|(&tau, &missed)| {
                if missed {
                    BinaryMask::empty(height, width)
                } else {
                    let bits = profile.iter().map(|&v| v >= tau).collect();
                    BinaryMask::new(height, width, bits).expect("profile size")
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub id: String,
    pub image: Image,
    pub box_prompt: BoxPrompt,
    pub annotations: Vec<BinaryMask>,
    pub oracle: Option<OracleMeta>,
    /// Set when the annotation union was empty and the default box was used.
    pub box_fallback: bool,
}

impl AnnotatedSample {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        if self.annotations.is_empty() {
            return Err(Error::Validation(format!("sample {} has no annotations", self.id)));
        }
        for m in &self.annotations {
            if m.height() != h || m.width() != w {
                return Err(Error::Dimension(format!(
                    "sample {}: {}x{} mask on a {h}x{w} image",
                    self.id,
                    m.height(),
                    m.width()
                )));
            }
        }
        self.box_prompt.validate(h, w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split {other:?}"))),
        }
    }
}

/// Samples of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn new(split: Split, samples: Vec<AnnotatedSample>) -> Result<Self> {
        let ds = Self { split, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::Validation(format!("{} split is empty", self.split.name())))?;
        let (h, w, a) = (first.image.height(), first.image.width(), first.annotations.len());
        for s in &self.samples {
            s.validate()?;
            if s.image.height() != h || s.image.width() != w || s.annotations.len() != a {
                return Err(Error::Validation(format!(
                    "sample {} does not share the dataset shape {h}x{w} with {a} annotators",
                    s.id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Sample indices per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Shuffled partition with `train_frac` and `val_frac`, remainder to test.
    pub fn partition<R: Rng>(n: usize, train_frac: f64, val_frac: f64, rng: &mut R) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_train = ((n as f64 * train_frac).round() as usize).min(n);
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Self { train, val, test }
    }
}

/// All samples of a dataset directory with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub height: usize,
    pub width: usize,
    pub annotators: usize,
    pub seed: Option<u64>,
    pub generator: Option<SynthConfig>,
    pub samples: Vec<AnnotatedSample>,
    pub splits: SplitIndices,
}

impl Corpus {
    pub fn dataset(&self, split: Split) -> Result<Dataset> {
        let samples = self.splits.get(split).iter().map(|&i| self.samples[i].clone()).collect();
        Dataset::new(split, samples)
    }

    pub fn find(&self, id: &str) -> Option<&AnnotatedSample> {
        self.samples.iter().find(|s| s.id == id)
    }
}

/// Tight box around the union of `annotations`, each side jittered by a
/// uniform integer in `[-jitter, jitter]` and clamped to the image. An empty
/// union yields the centred half-size box and `true`.
pub fn derive_box<R: Rng + ?Sized>(
    annotations: &[BinaryMask],
    jitter: usize,
    rng: &mut R,
) -> Result<(BoxPrompt, bool)> {
    let first = annotations
        .first()
        .ok_or_else(|| Error::Validation("derive_box needs at least one mask".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut union = first.clone();
    for m in &annotations[1..] {
        union = union.union(m)?;
    }
    let Some((x1, y1, x2, y2)) = union.bounding_box() else {
        let bx = BoxPrompt::new(w / 4, h / 4, w / 4 + (w / 2).max(1), h / 4 + (h / 2).max(1));
        return Ok((bx, true));
    };
    let j = jitter as i64;
    let mut shift = |v: usize| -> i64 { v as i64 + if j > 0 { rng.gen_range(-j..=j) } else { 0 } };
    let (x1, y1, x2, y2) = (shift(x1), shift(y1), shift(x2), shift(y2));
    let (x1, x2) = clamp_side(x1, x2, w);
    let (y1, y2) = clamp_side(y1, y2, h);
    Ok((BoxPrompt::new(x1, y1, x2, y2), false))
}

fn clamp_side(lo: i64, hi: i64, size: usize) -> (usize, usize) {
    let size = size as i64;
    let lo = lo.clamp(0, size - 1);
    let mut hi = hi.clamp(1, size);
    if hi <= lo {
        hi = lo + 1;
    }
    (lo as usize, hi as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_of_single_pixel() {
        let mut m = BinaryMask::empty(32, 32);
        m.set(12, 10, true);
        let (bx, fallback) = derive_box(&[m], 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(bx, BoxPrompt::new(10, 12, 11, 13));
        assert!(!fallback);
    }

    #[test]
    fn box_of_nested_masks_is_the_largest() {
        let mut big = BinaryMask::empty(20, 20);
        let mut small = BinaryMask::empty(20, 20);
        for y in 4..15 {
            for x in 3..12 {
                big.set(y, x, true);
                if (6..10).contains(&y) && (5..9).contains(&x) {
                    small.set(y, x, true);
                }
            }
        }
        let (bx, _) = derive_box(&[small, big.clone()], 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (x1, y1, x2, y2) = big.bounding_box().unwrap();
        assert_eq!(bx, BoxPrompt::new(x1, y1, x2, y2));
    }

    #[test]
    fn jittered_box_is_reproducible_and_bounded() {
        let mut m = BinaryMask::empty(64, 64);
        for y in 20..30 {
            for x in 1..40 {
                m.set(y, x, true);
            }
        }
        for seed in 0..50 {
            let (a, _) = derive_box(&[m.clone()], 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let (b, _) = derive_box(&[m.clone()], 3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            a.validate(64, 64).unwrap();
            assert!(a.x1 <= 4 && a.y1.abs_diff(20) <= 3 && a.x2.abs_diff(40) <= 3 && a.y2.abs_diff(30) <= 3);
        }
    }

    #[test]
    fn empty_union_falls_back_to_centred_box() {
        let (bx, fallback) =
            derive_box(&[BinaryMask::empty(64, 64), BinaryMask::empty(64, 64)], 2, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        assert!(fallback);
        assert_eq!(bx, BoxPrompt::new(16, 16, 48, 48));
    }

    #[test]
    fn partition_is_disjoint_and_covering() {
        let s = SplitIndices::partition(200, 0.72, 0.14, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (144, 28, 28));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }
}
