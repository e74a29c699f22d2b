//! Privacy-parameter types, Gaussian/Laplace mechanisms, and the CAPE
//! privacy calibration.
//!
//! The CAPE guarantee couples (epsilon, delta) through the moments of a
//! Gaussian log-likelihood-ratio variable z; `cape_moments` produces those
//! moments and `cape_delta` evaluates the tail bound. `conventional_delta`
//! is the matched-utility baseline: the weakest delta the conventional
//! distributed scheme must accept to reach pooled-level aggregate noise.

use crate::error::{CapeError, Result};
use ndarray::{ArrayBase, DataMut, Dimension};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// An (epsilon, delta) differential-privacy budget.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: f64,
}

impl PrivacyBudget {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(CapeError::InvalidParameter(format!(
                "epsilon must be positive and finite, got {epsilon}"
            )));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(CapeError::InvalidParameter(format!(
                "delta must lie in (0,1), got {delta}"
            )));
        }
        Ok(Self { epsilon, delta })
    }
}

/// Standard deviation of additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, serde::Serialize, serde::Deserialize)]
pub struct NoiseScale {
    pub tau: f64,
}

impl NoiseScale {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(CapeError::InvalidParameter(format!(
                "tau must be nonnegative and finite, got {tau}"
            )));
        }
        Ok(Self { tau })
    }
}

/// L_p sensitivity of a released function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sensitivity {
    pub value: f64,
    pub norm_order: u8,
}

impl Sensitivity {
    pub fn l2(value: f64) -> Result<Self> {
        Self::new(value, 2)
    }

    pub fn l1(value: f64) -> Result<Self> {
        Self::new(value, 1)
    }

    fn new(value: f64, norm_order: u8) -> Result<Self> {
        if !(value >= 0.0) || !value.is_finite() {
            return Err(CapeError::InvalidParameter(format!(
                "sensitivity must be nonnegative and finite, got {value}"
            )));
        }
        Ok(Self { value, norm_order })
    }
}

/// Moments of the Gaussian log-likelihood-ratio variable behind the CAPE
/// guarantee. `sigma_z_sq == 2 * mu_z` holds by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapeMoments {
    pub mu_z: f64,
    pub sigma_z_sq: f64,
}

impl CapeMoments {
    pub fn sigma_z(&self) -> f64 {
        self.sigma_z_sq.sqrt()
    }
}

/// A delta guarantee. `log_delta` is exact even where `delta` underflows;
/// `vacuous` marks points where the bound is >= 1 and carries no guarantee.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeltaBound {
    pub delta: f64,
    pub log_delta: f64,
    pub vacuous: bool,
}

impl DeltaBound {
    fn from_log(log_delta: f64) -> Self {
        let vacuous = log_delta >= 0.0;
        let delta = if vacuous { 1.0 } else { log_delta.exp() };
        Self { delta, log_delta, vacuous }
    }
}

pub fn max_colluders(s: usize) -> usize {
    // ceil(S/3) - 1
    (s + 2) / 3 - 1
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// log of the standard normal density.
fn log_phi(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Minimal Gaussian-mechanism noise scale for an L2 sensitivity:
/// tau = (Delta / epsilon) * sqrt(2 ln(1.25/delta)).
pub fn gaussian_tau(sensitivity: Sensitivity, budget: PrivacyBudget) -> Result<NoiseScale> {
    if sensitivity.norm_order != 2 {
        return Err(CapeError::InvalidParameter(
            "gaussian mechanism requires an L2 sensitivity".into(),
        ));
    }
    if !(sensitivity.value > 0.0) {
        return Err(CapeError::InvalidParameter(
            "sensitivity must be positive for calibration".into(),
        ));
    }
    let tau = sensitivity.value / budget.epsilon * (2.0 * (1.25 / budget.delta).ln()).sqrt();
    NoiseScale::new(tau)
}

/// Add i.i.d. N(0, tau^2) noise to every element. tau = 0 returns the input
/// unchanged.
pub fn gaussian_perturb<S, D, R>(value: &mut ArrayBase<S, D>, tau: NoiseScale, rng: &mut R)
where
    S: DataMut<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    if tau.tau == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, tau.tau).expect("valid scale");
    value.map_inplace(|v| *v += normal.sample(rng));
}

/// Add i.i.d. Laplace(0, b) noise to every element (variance 2 b^2).
pub fn laplace_perturb<S, D, R>(value: &mut ArrayBase<S, D>, scale_b: f64, rng: &mut R)
where
    S: DataMut<Elem = f64>,
    D: Dimension,
    R: Rng + ?Sized,
{
    assert!(scale_b > 0.0, "laplace scale must be positive");
    value.map_inplace(|v| *v += sample_laplace(scale_b, rng));
}

/// Inverse-CDF Laplace sampling.
pub fn sample_laplace<R: Rng + ?Sized>(scale_b: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(-0.5..0.5);
    -scale_b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Moments (mu_z, sigma_z^2) of the CAPE log-likelihood ratio for S sites of
/// which S_C collude, per-site noise scale tau, and N total samples.
pub fn cape_moments(s: usize, s_c: usize, tau: NoiseScale, n: usize) -> Result<CapeMoments> {
    if s < 3 {
        return Err(CapeError::InvalidParameter(format!("need S >= 3 sites, got {s}")));
    }
    let max_s_c = max_colluders(s);
    if s_c > max_s_c {
        return Err(CapeError::CollusionBound { s, s_c, max_s_c });
    }
    if !(tau.tau > 0.0) {
        return Err(CapeError::InvalidParameter("cape_moments requires tau > 0".into()));
    }
    if n < s {
        return Err(CapeError::InvalidParameter(format!(
            "need N >= S samples, got N = {n}, S = {s}"
        )));
    }
    let sf = s as f64;
    let scf = s_c as f64;
    let nf = n as f64;
    let lead = sf.powi(3) / (2.0 * tau.tau * tau.tau * nf * nf * (1.0 + sf));
    let first = (sf - scf + 2.0) / (sf - scf);
    let second = if s_c == 0 {
        0.0
    } else {
        (9.0 / (sf - scf)) * scf * scf / (sf * (1.0 + sf) - 3.0 * scf * scf)
    };
    let mu_z = lead * (first + second);
    Ok(CapeMoments { mu_z, sigma_z_sq: 2.0 * mu_z })
}

/// The CAPE tail bound delta = 2 (sigma_z / (eps - mu_z)) phi((eps - mu_z) / sigma_z).
///
/// Evaluated in log space so sweep grids can reach deltas far below f64
/// underflow. Errors if epsilon <= mu_z, naming the minimum feasible epsilon.
pub fn cape_delta(epsilon: f64, moments: CapeMoments) -> Result<DeltaBound> {
    if epsilon <= moments.mu_z {
        return Err(CapeError::CalibrationInfeasible { epsilon, mu_z: moments.mu_z });
    }
    let sigma = moments.sigma_z();
    let x = (epsilon - moments.mu_z) / sigma;
    let log_delta = std::f64::consts::LN_2 + sigma.ln() - (epsilon - moments.mu_z).ln() + log_phi(x);
    Ok(DeltaBound::from_log(log_delta))
}

/// Smallest delta the conventional distributed scheme can guarantee while
/// matching the pooled aggregate noise variance achieved by CAPE at per-site
/// scale tau_s.
///
/// CAPE's aggregate variance is tau_s^2 / S^2; the conventional scheme's is
/// tau_c^2 / S, so matching forces tau_c = tau_s / sqrt(S), and inverting the
/// Gaussian-mechanism relation at sensitivity S/N gives
/// delta_conv = 1.25 exp(-(tau_c eps N / S)^2 / 2).
pub fn conventional_delta(epsilon: f64, s: usize, n: usize, tau_s: NoiseScale) -> Result<DeltaBound> {
    if !(epsilon > 0.0) || s == 0 || n == 0 || !(tau_s.tau > 0.0) {
        return Err(CapeError::InvalidParameter(
            "conventional_delta requires positive epsilon, S, N, tau_s".into(),
        ));
    }
    let sf = s as f64;
    let tau_c = tau_s.tau / sf.sqrt();
    let arg = tau_c * epsilon * (n as f64) / sf;
    let log_delta = 1.25f64.ln() - arg * arg / 2.0;
    Ok(DeltaBound::from_log(log_delta))
}
