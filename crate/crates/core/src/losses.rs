//! Variational training objective: BCE + Dice reconstruction plus a
//! beta-weighted KL between posterior and prior.

use serde::{Deserialize, Serialize};

use crate::distributions::{kl_diag, GaussianDiag};
use crate::error::{Error, Result};
use crate::image::BinaryMask;

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before logs.
pub const PROB_CLIP: f64 = 1e-7;
/// Default Dice smoothing term.
pub const DICE_EPS: f64 = 1e-6;
/// KL weight used for training unless overridden.
pub const DEFAULT_BETA: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn new(bce: f64, dice: f64, kl: f64, beta: f64) -> Self {
        let recon = bce + dice;
        Self { bce, dice, recon, kl, total: recon + beta * kl, beta }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [("bce", self.bce), ("dice", self.dice), ("kl", self.kl), ("total", self.total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(name, _)| name)
    }
}

fn check_len(y: &BinaryMask, yhat: &[f64]) -> Result<()> {
    if y.bits().len() != yhat.len() {
        return Err(Error::Dimension(format!(
            "mask has {} pixels, prediction has {}",
            y.bits().len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// Mean binary cross-entropy between a binary mask and probabilities.
pub fn bce_loss(y: &BinaryMask, yhat: &[f64]) -> Result<f64> {
    check_len(y, yhat)?;
    Ok(bce_values(&y.as_f64(), yhat))
}

/// Soft Dice loss with smoothing `eps`.
pub fn dice_loss(y: &BinaryMask, yhat: &[f64], eps: f64) -> Result<f64> {
    check_len(y, yhat)?;
    Ok(dice_values(&y.as_f64(), yhat, eps))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Full objective for one example: `sigmoid(logits)` against `y`, plus
/// `beta * KL(q || p)`.
pub fn total_loss(
    y: &BinaryMask,
    logits: &[f64],
    q: &GaussianDiag,
    p: &GaussianDiag,
    beta: f64,
) -> Result<LossBreakdown> {
    if !(beta >= 0.0) {
        return Err(Error::Validation(format!("beta must be non-negative, got {beta}")));
    }
    check_len(y, logits)?;
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
    let target = y.as_f64();
    let bce = bce_values(&target, &probs);
    let dice = dice_values(&target, &probs, DICE_EPS);
    let kl = kl_diag(q, p)?;
    let out = LossBreakdown::new(bce, dice, kl, beta);
    if let Some(c) = out.non_finite_component() {
        return Err(Error::Numeric(format!("loss component {c} is not finite")));
    }
    Ok(out)
}

pub(crate) fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
}

pub(crate) fn bce_values(target: &[f64], probs: &[f64]) -> f64 {
    let n = target.len() as f64;
    let sum: f64 = target
        .iter()
        .zip(probs)
        .map(|(&t, &p)| {
            let p = clip_prob(p);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    -sum / n
}

/// Accumulates `upstream * dBCE/dp` into `grad`. Clipped entries get zero.
pub(crate) fn bce_grad(target: &[f64], probs: &[f64], upstream: f64, grad: &mut [f64]) {
    let n = target.len() as f64;
    for ((g, &t), &p) in grad.iter_mut().zip(target).zip(probs) {
        if p > PROB_CLIP && p < 1.0 - PROB_CLIP {
            *g -= upstream * (t / p - (1.0 - t) / (1.0 - p)) / n;
        }
    }
}

pub(crate) fn dice_values(target: &[f64], probs: &[f64], eps: f64) -> f64 {
    let (inter, sum_t, sum_p) = dice_sums(target, probs);
    1.0 - (2.0 * inter + eps) / (sum_t + sum_p + eps)
}

fn dice_sums(target: &[f64], probs: &[f64]) -> (f64, f64, f64) {
    let mut inter = 0.0;
    let mut sum_t = 0.0;
    let mut sum_p = 0.0;
    for (&t, &p) in target.iter().zip(probs) {
        inter += t * p;
        sum_t += t;
        sum_p += p;
    }
    (inter, sum_t, sum_p)
}

/// Accumulates `upstream * dDice/dp` into `grad`.
pub(crate) fn dice_grad(target: &[f64], probs: &[f64], eps: f64, upstream: f64, grad: &mut [f64]) {
    let (inter, sum_t, sum_p) = dice_sums(target, probs);
    let num = 2.0 * inter + eps;
    let den = sum_t + sum_p + eps;
    let den2 = den * den;
    for (g, &t) in grad.iter_mut().zip(target) {
        *g -= upstream * (2.0 * t * den - num) / den2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(bits: &[u8]) -> BinaryMask {
        BinaryMask::new(1, bits.len(), bits.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn bce_examples() {
        let y = mask(&[1, 0, 1, 1, 0]);
        let perfect: Vec<f64> = y.as_f64().iter().map(|&v| clip_prob(v)).collect();
        assert!(bce_loss(&y, &perfect).unwrap() <= 1e-6);
        let half = vec![0.5; 5];
        assert!((bce_loss(&y, &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let two = mask(&[1, 0]);
        let v = bce_loss(&two, &[0.8, 0.4]).unwrap();
        assert!((v - 0.366_984_587_540_100_2).abs() < 1e-9, "{v}");
    }

    #[test]
    fn dice_examples() {
        let y = mask(&[1, 1, 0, 0, 1]);
        assert!(dice_loss(&y, &y.as_f64(), DICE_EPS).unwrap().abs() < 1e-6);
        let disjoint = mask(&[0, 0, 1, 1, 0]);
        assert!((dice_loss(&y, &disjoint.as_f64(), DICE_EPS).unwrap() - 1.0).abs() < 1e-6);
        // |y| = 4, |yhat| = 4, overlap 2.
        let a = mask(&[1, 1, 1, 1, 0, 0, 0, 0]);
        let b = mask(&[0, 0, 1, 1, 1, 1, 0, 0]);
        assert!((dice_loss(&a, &b.as_f64(), DICE_EPS).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn total_loss_composition() {
        let q = GaussianDiag::new(vec![0.2, -0.1], vec![0.1, 0.3]).unwrap();
        let y = mask(&[1, 0, 1]);
        let perfect_logits = [40.0, -40.0, 40.0];
        let out = total_loss(&y, &perfect_logits, &q, &q, DEFAULT_BETA).unwrap();
        assert!(out.total.abs() < 1e-5, "{out:?}");

        let b = LossBreakdown::new(0.4, 0.6, 0.1, 10.0);
        assert!((b.total - 2.0).abs() < 1e-12);

        let p = GaussianDiag::new(vec![0.0, 0.5], vec![0.0, -0.2]).unwrap();
        let logits = [0.3, -1.2, 2.0];
        let out = total_loss(&y, &logits, &q, &p, 3.0).unwrap();
        let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l)).collect();
        let bce = bce_loss(&y, &probs).unwrap();
        let dice = dice_loss(&y, &probs, DICE_EPS).unwrap();
        let kl = kl_diag(&q, &p).unwrap();
        assert_eq!(out.recon, bce + dice);
        assert_eq!(out.total, bce + dice + 3.0 * kl);
        let zero_beta = total_loss(&y, &logits, &q, &p, 0.0).unwrap();
        assert_eq!(zero_beta.total, zero_beta.recon);
    }

    #[test]
    fn shape_and_beta_errors() {
        let y = mask(&[1, 0]);
        assert!(matches!(bce_loss(&y, &[0.5]), Err(Error::Dimension(_))));
        assert!(matches!(dice_loss(&y, &[0.5], DICE_EPS), Err(Error::Dimension(_))));
        let q = GaussianDiag::standard(1).unwrap();
        assert!(total_loss(&y, &[0.0, 0.0], &q, &q, -1.0).is_err());
    }

    #[test]
    fn loss_gradients_match_central_differences() {
        let target = [1.0, 0.0, 1.0, 0.0, 1.0];
        let probs = [0.7, 0.2, 0.4, 0.55, 0.9];
        let mut g_bce = [0.0; 5];
        let mut g_dice = [0.0; 5];
        bce_grad(&target, &probs, 1.0, &mut g_bce);
        dice_grad(&target, &probs, DICE_EPS, 1.0, &mut g_dice);
        for i in 0..5 {
            let mut hi = probs;
            let mut lo = probs;
            hi[i] += 1e-6;
            lo[i] -= 1e-6;
            let fd_bce = (bce_values(&target, &hi) - bce_values(&target, &lo)) / 2e-6;
            let fd_dice = (dice_values(&target, &hi, DICE_EPS) - dice_values(&target, &lo, DICE_EPS)) / 2e-6;
            assert!((fd_bce - g_bce[i]).abs() < 1e-7);
            assert!((fd_dice - g_dice[i]).abs() < 1e-7);
        }
    }

    proptest! {
        #[test]
        fn losses_are_bounded_and_permutation_invariant(
            pairs in proptest::collection::vec((any::<bool>(), 0.0f64..1.0), 1..40),
            rot in 0usize..40,
        ) {
            let bits: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let probs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let y = BinaryMask::new(1, bits.len(), bits.clone()).unwrap();
            let bce = bce_loss(&y, &probs).unwrap();
            let dice = dice_loss(&y, &probs, DICE_EPS).unwrap();
            prop_assert!(bce >= 0.0);
            prop_assert!(dice >= -1e-9 && dice <= 1.0 + 1e-12);

            let k = rot % bits.len();
            let mut rbits = bits.clone();
            let mut rprobs = probs.clone();
            rbits.rotate_left(k);
            rprobs.rotate_left(k);
            let ry = BinaryMask::new(1, rbits.len(), rbits).unwrap();
            prop_assert!((bce_loss(&ry, &rprobs).unwrap() - bce).abs() < 1e-12);
            prop_assert!((dice_loss(&ry, &rprobs, DICE_EPS).unwrap() - dice).abs() < 1e-12);
        }
    }
}
