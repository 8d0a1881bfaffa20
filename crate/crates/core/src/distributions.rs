//! Diagonal Gaussian latent algebra.
//!
//! Variances are carried as log-variances so that the heads producing them
//! can output unconstrained values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal Gaussian `N(mu, diag(exp(log_var)))` over the latent space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDiag {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl GaussianDiag {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::Dimension("latent dimension must be at least 1".into()));
        }
        if mu.len() != log_var.len() {
            return Err(Error::Dimension(format!(
                "mu has length {} but log_var has length {}",
                mu.len(),
                log_var.len()
            )));
        }
        if !mu.iter().chain(&log_var).all(|v| v.is_finite()) {
            return Err(Error::Numeric("gaussian parameters must be finite".into()));
        }
        Ok(Self { mu, log_var })
    }

    /// Standard normal of dimension `dim`.
    pub fn standard(dim: usize) -> Result<Self> {
        Self::new(vec![0.0; dim], vec![0.0; dim])
    }

    /// Splits a head output laid out as `[mu; log_var]`.
    pub fn from_stacked(stacked: &[f64]) -> Result<Self> {
        if stacked.len() % 2 != 0 {
            return Err(Error::Dimension(format!(
                "stacked gaussian output has odd length {}",
                stacked.len()
            )));
        }
        let (mu, lv) = stacked.split_at(stacked.len() / 2);
        Self::new(mu.to_vec(), lv.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Reparameterized draw `mu + exp(log_var / 2) * noise`.
pub fn sample_reparam(q: &GaussianDiag, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(Error::Dimension(format!(
            "noise has length {} but the latent dimension is {}",
            noise.len(),
            q.dim()
        )));
    }
    Ok(q.mu
        .iter()
        .zip(&q.log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Closed-form `KL(q || p)` for diagonal Gaussians.
pub fn kl_diag(q: &GaussianDiag, p: &GaussianDiag) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Dimension(format!(
            "kl between latent dimensions {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let kl = kl_terms(&q.mu, &q.log_var, &p.mu, &p.log_var);
    if !kl.is_finite() {
        return Err(Error::Numeric(format!("kl divergence evaluated to {kl}")));
    }
    Ok(kl)
}

pub(crate) fn kl_terms(mu_q: &[f64], lv_q: &[f64], mu_p: &[f64], lv_p: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..mu_q.len() {
        let diff = mu_q[i] - mu_p[i];
        let ratio = (lv_q[i] - lv_p[i]).exp();
        acc += ratio + diff * diff * (-lv_p[i]).exp() - 1.0 + lv_p[i] - lv_q[i];
    }
    0.5 * acc
}

/// Partial derivatives of [`kl_terms`] scaled by `upstream`, accumulated into
/// the four gradient slices in argument order.
pub(crate) fn kl_terms_grad(
    mu_q: &[f64],
    lv_q: &[f64],
    mu_p: &[f64],
    lv_p: &[f64],
    upstream: f64,
    grads: [&mut [f64]; 4],
) {
    let [g_mq, g_lq, g_mp, g_lp] = grads;
    for i in 0..mu_q.len() {
        let diff = mu_q[i] - mu_p[i];
        let inv_var_p = (-lv_p[i]).exp();
        let ratio = (lv_q[i] - lv_p[i]).exp();
        g_mq[i] += upstream * diff * inv_var_p;
        g_mp[i] -= upstream * diff * inv_var_p;
        g_lq[i] += upstream * 0.5 * (ratio - 1.0);
        g_lp[i] += upstream * 0.5 * (1.0 - ratio - diff * diff * inv_var_p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g(mu: &[f64], lv: &[f64]) -> GaussianDiag {
        GaussianDiag::new(mu.to_vec(), lv.to_vec()).unwrap()
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(sample_reparam(&g(&[3.0], &[0.0]), &[0.0]).unwrap(), vec![3.0]);
        assert_eq!(
            sample_reparam(&g(&[0.0, 0.0], &[0.0, 0.0]), &[1.5, -2.0]).unwrap(),
            vec![1.5, -2.0]
        );
        let z = sample_reparam(&g(&[1.0], &[4f64.ln()]), &[0.5]).unwrap();
        assert!((z[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn reparam_rejects_length_mismatch() {
        let q = g(&[0.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(sample_reparam(&q, &[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn kl_examples() {
        let q = g(&[0.3, -1.2], &[0.4, -0.7]);
        assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        assert!((kl_diag(&g(&[1.0], &[0.0]), &g(&[0.0], &[0.0])).unwrap() - 0.5).abs() < 1e-15);
        // 0.5 * (4 - 1 - ln 4)
        let kl = kl_diag(&g(&[0.0], &[4f64.ln()]), &g(&[0.0], &[0.0])).unwrap();
        assert!((kl - 0.806_852_819_440_054_7).abs() < 1e-12);
    }

    #[test]
    fn kl_rejects_bad_inputs() {
        let a = g(&[0.0], &[0.0]);
        let b = g(&[0.0, 1.0], &[0.0, 0.0]);
        assert!(matches!(kl_diag(&a, &b), Err(Error::Dimension(_))));
        assert!(GaussianDiag::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(GaussianDiag::new(vec![], vec![]).is_err());
        // Finite parameters whose KL overflows.
        let wide = g(&[0.0], &[800.0]);
        let narrow = g(&[0.0], &[-800.0]);
        assert!(matches!(kl_diag(&wide, &narrow), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_gradient_matches_central_differences() {
        let v = [0.3, -0.4, -0.2, 0.5];
        let f = |x: &[f64; 4]| kl_terms(&[x[0]], &[x[1]], &[x[2]], &[x[3]]);
        let mut grads = [[0.0]; 4];
        {
            let [a, b, c, d] = &mut grads;
            kl_terms_grad(&[v[0]], &[v[1]], &[v[2]], &[v[3]], 1.0, [a, b, c, d]);
        }
        for i in 0..4 {
            let mut hi = v;
            let mut lo = v;
            hi[i] += 1e-5;
            lo[i] -= 1e-5;
            let fd = (f(&hi) - f(&lo)) / 2e-5;
            assert!((fd - grads[i][0]).abs() < 1e-8, "component {i}");
        }
    }

    fn gaussian_pair() -> impl Strategy<Value = (GaussianDiag, GaussianDiag)> {
        (1usize..=8).prop_flat_map(|l| {
            let v = || proptest::collection::vec(-3.0f64..3.0, l);
            (v(), v(), v(), v()).prop_map(|(a, b, c, d)| (g(&a, &b), g(&c, &d)))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn kl_is_nonnegative((q, p) in gaussian_pair()) {
            prop_assert!(kl_diag(&q, &p).unwrap() >= -1e-9);
            prop_assert_eq!(kl_diag(&q, &q).unwrap(), 0.0);
        }

        #[test]
        fn reparam_is_pure((q, _p) in gaussian_pair(), seed in 0u64..1000) {
            let noise: Vec<f64> = (0..q.dim()).map(|i| ((seed + i as u64) as f64).sin()).collect();
            let a = sample_reparam(&q, &noise).unwrap();
            let b = sample_reparam(&q, &noise).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
