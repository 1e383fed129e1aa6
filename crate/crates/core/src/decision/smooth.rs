//! Smooth posterior sampling: π = E[ρ(sᵀβ̃)] with β̃ drawn from the
//! advantage-block posterior.

use std::f64::consts::PI;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use super::profile::RhoParams;
use crate::error::{Error, Result};
use crate::linalg::quad_form;

pub const GAUSS_HERMITE_NODES: usize = 100;

/// Generalized logistic link with asymptotes `l_min` and `l_max`.
pub fn rho(x: f64, params: &RhoParams) -> f64 {
    let denom = (1.0 + params.c * (-params.b * x).exp()).powf(params.k);
    params.l_min + (params.l_max - params.l_min) / denom
}

/// Nodes and weights for ∫ e^{−x²} f(x) dx, generated by Newton iteration on
/// the orthonormal Hermite recurrence.
fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0_f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes rescaled for a standard normal: E[f(Z)] ≈ Σ wᵢ f(zᵢ).
fn standard_normal_rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_hermite(GAUSS_HERMITE_NODES);
        let z = x.iter().map(|xi| xi * std::f64::consts::SQRT_2).collect();
        let wn = w.iter().map(|wi| wi / PI.sqrt()).collect();
        (z, wn)
    })
}

/// E[ρ(X)] for X ~ N(mean, var).
pub fn expected_rho(mean: f64, var: f64, params: &RhoParams) -> f64 {
    if var <= 0.0 {
        return rho(mean, params);
    }
    let sd = var.sqrt();
    let (z, w) = standard_normal_rule();
    let total: f64 = z.iter().zip(w).map(|(zi, wi)| wi * rho(mean + sd * zi, params)).sum();
    total.clamp(params.l_min, params.l_max)
}

/// Outcome of a smooth-probability evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothProbability {
    pub prob: f64,
    /// Set when sᵀΣs came out negative and was clamped to zero.
    pub clamped_variance: Option<f64>,
}

/// Reduces the multivariate expectation to one dimension: sᵀβ̃ is normal
/// with mean sᵀμ and variance sᵀΣs.
pub fn smooth_probability(
    mu_beta: &DVector<f64>,
    sigma_beta: &DMatrix<f64>,
    s: &DVector<f64>,
    params: &RhoParams,
) -> Result<SmoothProbability> {
    let n = mu_beta.len();
    if sigma_beta.shape() != (n, n) || s.len() != n {
        return Err(Error::rejected(format!(
            "advantage dimensions disagree: mean {n}, covariance {:?}, features {}",
            sigma_beta.shape(),
            s.len()
        )));
    }
    let mean = s.dot(mu_beta);
    let raw_var = quad_form(s, sigma_beta);
    if !mean.is_finite() || !raw_var.is_finite() {
        return Err(Error::Numerical {
            message: "non-finite advantage moments".into(),
            min_eigenvalue: f64::NAN,
        });
    }
    let (var, clamped_variance) = if raw_var < 0.0 { (0.0, Some(raw_var)) } else { (raw_var, None) };
    Ok(SmoothProbability {
        prob: expected_rho(mean, var, params),
        clamped_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_limits_and_midpoint() {
        let p = RhoParams::default();
        assert!((rho(-1e3, &p) - 0.2).abs() < 1e-12);
        assert!((rho(1e3, &p) - 0.8).abs() < 1e-12);
        assert_eq!(rho(0.0, &p), 0.5);
        for b in [0.1, 1.0, 7.0] {
            assert!((rho(0.0, &RhoParams { b, ..p }) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn quadrature_integrates_normal_moments() {
        let (z, w) = standard_normal_rule();
        let m0: f64 = w.iter().sum();
        let m2: f64 = z.iter().zip(w).map(|(z, w)| w * z * z).sum();
        let m4: f64 = z.iter().zip(w).map(|(z, w)| w * z.powi(4)).sum();
        assert!((m0 - 1.0).abs() < 1e-12);
        assert!((m2 - 1.0).abs() < 1e-11);
        assert!((m4 - 3.0).abs() < 1e-10);
    }

    #[test]
    fn degenerate_variance_is_point_mass() {
        let p = RhoParams::default();
        let mu = DVector::from_vec(vec![0.7, -0.2]);
        let sigma = DMatrix::zeros(2, 2);
        let s = DVector::from_vec(vec![1.0, 1.0]);
        let out = smooth_probability(&mu, &sigma, &s, &p).unwrap();
        assert_eq!(out.prob, rho(0.5, &p));
        assert!(out.clamped_variance.is_none());
    }

    #[test]
    fn negative_variance_is_clamped() {
        let p = RhoParams::default();
        let mu = DVector::from_vec(vec![0.3]);
        let sigma = DMatrix::from_element(1, 1, -1e-9);
        let s = DVector::from_vec(vec![1.0]);
        let out = smooth_probability(&mu, &sigma, &s, &p).unwrap();
        assert_eq!(out.prob, rho(0.3, &p));
        assert_eq!(out.clamped_variance, Some(-1e-9));
    }

    #[test]
    fn symmetric_case_is_one_half() {
        let p = RhoParams::default();
        for var in [0.01, 1.0, 100.0, 1e4] {
            assert!((expected_rho(0.0, var, &p) - 0.5).abs() < 1e-12);
        }
    }
}
