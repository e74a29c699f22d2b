//! Polynomial (degree-2) representation of regression losses, per-degree
//! Frobenius sensitivities, and the improved functional mechanism: the loss
//! is expanded into coefficient arrays, the arrays are noised, and the
//! noised surrogate is minimized downstream. A uniform-L1 Laplace baseline
//! ("dpfm") is included for comparison.

use crate::error::{CapeError, Result};
use crate::privacy::{gaussian_tau, sample_laplace, PrivacyBudget, Sensitivity};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LinearRegression,
    LogisticRegression,
}

/// Which loss is being expanded; carries the input-domain contract
/// (every ||x_n||_2 <= 1; y in [-1,1] for linear, y in {0,1} for logistic).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
}

impl LossSpec {
    pub fn linear() -> Self {
        Self { kind: LossKind::LinearRegression }
    }

    pub fn logistic() -> Self {
        Self { kind: LossKind::LogisticRegression }
    }

    /// Reject (not clip) samples outside the declared domain; returns the
    /// indices of offending rows.
    pub fn validate(&self, x: &Array2<f64>, y: &Array1<f64>) -> Result<()> {
        if x.nrows() != y.len() {
            return Err(CapeError::DimensionMismatch(format!(
                "{} rows vs {} responses",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(CapeError::EmptyData("no samples".into()));
        }
        let tol = 1e-9;
        let mut rejected = Vec::new();
        for (n, row) in x.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            let y_ok = match self.kind {
                LossKind::LinearRegression => (-1.0 - tol..=1.0 + tol).contains(&y[n]),
                LossKind::LogisticRegression => y[n] == 0.0 || y[n] == 1.0,
            };
            if norm > 1.0 + tol || !y_ok {
                rejected.push(n);
            }
        }
        if rejected.is_empty() {
            Ok(())
        } else {
            Err(CapeError::BoundViolation(format!(
                "{} samples outside the loss domain (rows {:?}...)",
                rejected.len(),
                &rejected[..rejected.len().min(10)]
            )))
        }
    }
}

/// Degree-wise coefficient arrays of the quadratic expansion:
/// scalar l0, D-vector l1, D x D matrix l2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coeffs {
    pub l0: f64,
    pub l1: Array1<f64>,
    pub l2: Array2<f64>,
}

impl Coeffs {
    pub fn dim(&self) -> usize {
        self.l1.len()
    }

    pub fn zeros(d: usize) -> Self {
        Self { l0: 0.0, l1: Array1::zeros(d), l2: Array2::zeros((d, d)) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Exact,
    GaussianFm,
    LaplaceDpfm,
    CapeFm,
    Conv,
}

/// Noised (or exact) objective coefficients; all downstream evaluation and
/// minimization reads only this struct, never raw data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerturbedObjective {
    pub coeffs: Coeffs,
    pub provenance: Provenance,
}

/// Linear regression f_D(w) = (1/N)||y - Xw||^2 expanded as
/// l0 = ||y||^2/N, l1 = -(2/N) X^T y, l2 = X^T X / N.
pub fn build_coeffs_linear(x: &Array2<f64>, y: &Array1<f64>) -> Result<Coeffs> {
    LossSpec::linear().validate(x, y)?;
    let n = x.nrows() as f64;
    Ok(Coeffs {
        l0: y.dot(y) / n,
        l1: x.t().dot(y) * (-2.0 / n),
        l2: x.t().dot(x) / n,
    })
}

/// Order-2 Taylor surrogate of the logistic loss around w = 0:
/// l0 = ln 2, l1 = X^T (1/2 - y) / N, l2 = X^T X / (8N).
pub fn build_coeffs_logistic(x: &Array2<f64>, y: &Array1<f64>) -> Result<Coeffs> {
    LossSpec::logistic().validate(x, y)?;
    let n = x.nrows() as f64;
    let half_minus_y = y.mapv(|v| 0.5 - v);
    Ok(Coeffs {
        l0: std::f64::consts::LN_2,
        l1: x.t().dot(&half_minus_y) / n,
        l2: x.t().dot(x) / (8.0 * n),
    })
}

/// Closed-form per-degree L2 (Frobenius) sensitivities of the coefficient
/// arrays between neighboring datasets of size N.
pub fn sensitivity_table(spec: &LossSpec, n: usize) -> [f64; 3] {
    let nf = n as f64;
    match spec.kind {
        LossKind::LinearRegression => [1.0 / nf, 4.0 / nf, SQRT_2 / nf],
        LossKind::LogisticRegression => [0.0, 1.0 / nf, SQRT_2 / (8.0 * nf)],
    }
}

/// Uniform L1 sensitivity used by the original functional mechanism's
/// Laplace noise: 2(D+1)^2/N for linear, (D^2/4 + 3D)/N for logistic.
pub fn dpfm_baseline_sensitivity(spec: &LossSpec, n: usize, d: usize) -> f64 {
    let (nf, df) = (n as f64, d as f64);
    match spec.kind {
        LossKind::LinearRegression => 2.0 * (df + 1.0).powi(2) / nf,
        LossKind::LogisticRegression => (df * df / 4.0 + 3.0 * df) / nf,
    }
}

/// Gaussian-mechanism noise scales per degree for one release of the
/// coefficient arrays; a zero sensitivity yields a zero scale (no noise).
pub fn fm_taus(spec: &LossSpec, n: usize, budget: PrivacyBudget) -> Result<[f64; 3]> {
    let sens = sensitivity_table(spec, n);
    let mut taus = [0.0; 3];
    for (t, &s) in taus.iter_mut().zip(&sens) {
        if s > 0.0 {
            *t = gaussian_tau(Sensitivity::l2(s)?, budget)?.tau;
        }
    }
    Ok(taus)
}

/// Add i.i.d. N(0, tau_j^2) noise per entry of each degree-j array.
/// tau_j = 0 leaves that degree exact.
pub fn perturb_with_taus<R: Rng + ?Sized>(
    coeffs: &Coeffs,
    taus: [f64; 3],
    provenance: Provenance,
    rng: &mut R,
) -> PerturbedObjective {
    let mut out = coeffs.clone();
    if taus[0] > 0.0 {
        let d = Normal::new(0.0, taus[0]).expect("valid tau");
        out.l0 += d.sample(rng);
    }
    if taus[1] > 0.0 {
        let d = Normal::new(0.0, taus[1]).expect("valid tau");
        out.l1.map_inplace(|v| *v += d.sample(rng));
    }
    if taus[2] > 0.0 {
        let d = Normal::new(0.0, taus[2]).expect("valid tau");
        out.l2.map_inplace(|v| *v += d.sample(rng));
    }
    PerturbedObjective { coeffs: out, provenance }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mechanism {
    GaussianFm,
    LaplaceDpfm,
}

/// One private release of the coefficient arrays under `budget`.
///
/// GaussianFm calibrates per-degree tau_j from the Frobenius sensitivities;
/// LaplaceDpfm adds Laplace(scale = uniform-L1-sensitivity / epsilon) to
/// every entry of every degree, as the original functional mechanism does.
pub fn perturb_objective<R: Rng + ?Sized>(
    coeffs: &Coeffs,
    spec: &LossSpec,
    n: usize,
    budget: PrivacyBudget,
    mechanism: Mechanism,
    rng: &mut R,
) -> Result<PerturbedObjective> {
    match mechanism {
        Mechanism::GaussianFm => {
            let taus = fm_taus(spec, n, budget)?;
            Ok(perturb_with_taus(coeffs, taus, Provenance::GaussianFm, rng))
        }
        Mechanism::LaplaceDpfm => {
            let scale = dpfm_baseline_sensitivity(spec, n, coeffs.dim()) / budget.epsilon;
            let mut out = coeffs.clone();
            out.l0 += sample_laplace(scale, rng);
            out.l1.map_inplace(|v| *v += sample_laplace(scale, rng));
            out.l2.map_inplace(|v| *v += sample_laplace(scale, rng));
            Ok(PerturbedObjective { coeffs: out, provenance: Provenance::LaplaceDpfm })
        }
    }
}

/// f_hat(w) = l0 + l1 . w + w^T l2 w.
pub fn evaluate_objective(obj: &PerturbedObjective, w: &Array1<f64>) -> Result<f64> {
    let c = &obj.coeffs;
    if w.len() != c.dim() {
        return Err(CapeError::DimensionMismatch(format!(
            "w has dim {}, objective has dim {}",
            w.len(),
            c.dim()
        )));
    }
    Ok(c.l0 + c.l1.dot(w) + w.dot(&c.l2.dot(w)))
}

/// Gradient of the quadratic surrogate: l1 + (l2 + l2^T) w.
pub fn objective_gradient(obj: &PerturbedObjective, w: &Array1<f64>) -> Result<Array1<f64>> {
    let c = &obj.coeffs;
    if w.len() != c.dim() {
        return Err(CapeError::DimensionMismatch(format!(
            "w has dim {}, objective has dim {}",
            w.len(),
            c.dim()
        )));
    }
    Ok(&c.l1 + &c.l2.dot(w) + &c.l2.t().dot(w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn random_instance(
        n: usize,
        d: usize,
        seed: u64,
        binary_y: bool,
    ) -> (Array2<f64>, Array1<f64>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = Array2::<f64>::zeros((n, d));
        for mut row in x.rows_mut() {
            for v in row.iter_mut() {
                *v = normal.sample(&mut rng);
            }
            let norm = row.dot(&row).sqrt();
            if norm > 1.0 {
                row.map_inplace(|v| *v /= norm * 1.0000001);
            }
        }
        let y = if binary_y {
            Array1::from_iter((0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }))
        } else {
            Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)))
        };
        (x, y)
    }

    #[test]
    fn linear_zero_data_gives_zero_coeffs() {
        let x = Array2::zeros((5, 3));
        let y = Array1::zeros(5);
        let c = build_coeffs_linear(&x, &y).unwrap();
        assert_eq!(c.l0, 0.0);
        assert!(c.l1.iter().all(|&v| v == 0.0));
        assert!(c.l2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_single_sample_hand_expansion() {
        let x = ndarray::arr2(&[[1.0, 0.0]]);
        let y = ndarray::arr1(&[1.0]);
        let c = build_coeffs_linear(&x, &y).unwrap();
        assert_eq!(c.l0, 1.0);
        assert_eq!(c.l1, ndarray::arr1(&[-2.0, 0.0]));
        assert_eq!(c.l2, ndarray::arr2(&[[1.0, 0.0], [0.0, 0.0]]));
    }

    #[test]
    fn linear_representation_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, 1.0).unwrap();
        for trial in 0..100u64 {
            let (x, y) = random_instance(40, 6, 100 + trial, false);
            let c = build_coeffs_linear(&x, &y).unwrap();
            let obj = PerturbedObjective { coeffs: c, provenance: Provenance::Exact };
            let w = Array1::from_iter((0..6).map(|_| normal.sample(&mut rng)));
            let resid = &y - &x.dot(&w);
            let direct = resid.dot(&resid) / x.nrows() as f64;
            let via = evaluate_objective(&obj, &w).unwrap();
            assert_relative_eq!(via, direct, max_relative = 1e-10, epsilon = 1e-12);
        }
    }

    #[test]
    fn logistic_surrogate_anchor_and_hand_values() {
        let (x, y) = random_instance(30, 4, 7, true);
        let c = build_coeffs_logistic(&x, &y).unwrap();
        let obj = PerturbedObjective { coeffs: c, provenance: Provenance::Exact };
        let at_zero = evaluate_objective(&obj, &Array1::zeros(4)).unwrap();
        assert_relative_eq!(at_zero, std::f64::consts::LN_2, max_relative = 1e-12);

        let x1 = ndarray::arr2(&[[1.0]]);
        let y1 = ndarray::arr1(&[1.0]);
        let c = build_coeffs_logistic(&x1, &y1).unwrap();
        assert_relative_eq!(c.l1[0], -0.5, max_relative = 1e-12);
        assert_relative_eq!(c.l2[(0, 0)], 0.125, max_relative = 1e-12);
    }

    #[test]
    fn logistic_gradient_matches_true_loss_at_zero() {
        // first-order Taylor match: grad of surrogate at w=0 equals grad of
        // the true logistic loss at w=0, checked by central differences
        let (x, y) = random_instance(25, 3, 13, true);
        let n = x.nrows() as f64;
        let c = build_coeffs_logistic(&x, &y).unwrap();
        let obj = PerturbedObjective { coeffs: c, provenance: Provenance::Exact };
        let true_loss = |w: &Array1<f64>| -> f64 {
            let z = x.dot(w);
            z.iter()
                .zip(y.iter())
                .map(|(&zi, &yi)| {
                    let p = 1.0 / (1.0 + (-zi).exp());
                    -yi * p.ln() - (1.0 - yi) * (1.0 - p).ln()
                })
                .sum::<f64>()
                / n
        };
        let h = 1e-6;
        let g = objective_gradient(&obj, &Array1::zeros(3)).unwrap();
        for d in 0..3 {
            let mut wp = Array1::zeros(3);
            wp[d] = h;
            let mut wm = Array1::zeros(3);
            wm[d] = -h;
            let fd = (true_loss(&wp) - true_loss(&wm)) / (2.0 * h);
            assert_relative_eq!(g[d], fd, max_relative = 1e-5, epsilon = 1e-8);
        }
    }

    #[test]
    fn sensitivity_table_frozen_values() {
        let lin = sensitivity_table(&LossSpec::linear(), 100);
        assert_eq!(lin[0], 0.01);
        assert_eq!(lin[1], 0.04);
        assert_relative_eq!(lin[2], SQRT_2 / 100.0, max_relative = 1e-15);
        let log = sensitivity_table(&LossSpec::logistic(), 100);
        assert_eq!(log[0], 0.0);
        assert_eq!(log[1], 0.01);
        assert_relative_eq!(log[2], SQRT_2 / 800.0, max_relative = 1e-15);
    }

    #[test]
    fn dpfm_sensitivity_frozen_values_and_growth() {
        assert_relative_eq!(
            dpfm_baseline_sensitivity(&LossSpec::linear(), 1000, 20),
            0.882,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            dpfm_baseline_sensitivity(&LossSpec::logistic(), 1000, 20),
            0.16,
            max_relative = 1e-12
        );
        // ratio to Delta_2 grows quadratically in D
        let spec = LossSpec::linear();
        let ratio = |d: usize| {
            dpfm_baseline_sensitivity(&spec, 1000, d) / sensitivity_table(&spec, 1000)[2]
        };
        let r = ratio(64) / ratio(2);
        let expect = (65.0f64 / 3.0).powi(2);
        assert_relative_eq!(r, expect, max_relative = 1e-12);
    }

    #[test]
    fn neighboring_brute_force_respects_bounds() {
        // swap one sample between datasets, compare coefficient arrays
        let trials = 1000;
        for (spec, binary) in [(LossSpec::linear(), false), (LossSpec::logistic(), true)] {
            let n = 30;
            let sens = sensitivity_table(&spec, n);
            let mut max_d = [0.0f64; 3];
            for trial in 0..trials {
                let (mut x, mut y) = random_instance(n, 4, 2000 + trial, binary);
                let build = |x: &Array2<f64>, y: &Array1<f64>| match spec.kind {
                    LossKind::LinearRegression => build_coeffs_linear(x, y).unwrap(),
                    LossKind::LogisticRegression => build_coeffs_logistic(x, y).unwrap(),
                };
                let c1 = build(&x, &y);
                let (x2, y2) = random_instance(1, 4, 9000 + trial, binary);
                x.row_mut(n - 1).assign(&x2.row(0));
                y[n - 1] = y2[0];
                let c2 = build(&x, &y);
                max_d[0] = max_d[0].max((c1.l0 - c2.l0).abs());
                let d1 = &c1.l1 - &c2.l1;
                max_d[1] = max_d[1].max(d1.dot(&d1).sqrt());
                let d2 = &c1.l2 - &c2.l2;
                max_d[2] = max_d[2].max(d2.iter().map(|v| v * v).sum::<f64>().sqrt());
            }
            for j in 0..3 {
                assert!(
                    max_d[j] <= sens[j] * (1.0 + 1e-9),
                    "degree {j}: {} > {}",
                    max_d[j],
                    sens[j]
                );
            }
            if spec.kind == LossKind::LogisticRegression {
                assert_eq!(max_d[0], 0.0);
            }
        }
    }

    #[test]
    fn adversarial_witnesses_reach_bounds() {
        let n = 50;
        let d = 3;
        // linear degree 1: replace (e1, y=1) by (e1, y=-1)
        let base = |y_last: f64, x_last: &[f64]| {
            let mut x = Array2::<f64>::zeros((n, d));
            let mut y = Array1::zeros(n);
            for (j, &v) in x_last.iter().enumerate() {
                x[(n - 1, j)] = v;
            }
            y[n - 1] = y_last;
            (x, y)
        };
        let (xa, ya) = base(1.0, &[1.0, 0.0, 0.0]);
        let (xb, yb) = base(-1.0, &[1.0, 0.0, 0.0]);
        let ca = build_coeffs_linear(&xa, &ya).unwrap();
        let cb = build_coeffs_linear(&xb, &yb).unwrap();
        let diff = &ca.l1 - &cb.l1;
        let sens = sensitivity_table(&LossSpec::linear(), n);
        assert!(diff.dot(&diff).sqrt() >= 0.95 * sens[1]);

        // degree 2 witness (both losses): x = e1 vs x' = e2
        let (xa, ya) = base(0.0, &[1.0, 0.0, 0.0]);
        let (xb, yb) = base(0.0, &[0.0, 1.0, 0.0]);
        let ca = build_coeffs_linear(&xa, &ya).unwrap();
        let cb = build_coeffs_linear(&xb, &yb).unwrap();
        let d2 = &ca.l2 - &cb.l2;
        let fro = d2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(fro >= 0.95 * sens[2]);
    }

    #[test]
    fn rank_two_frobenius_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let d = 6;
        for _ in 0..100_000 {
            let mut u: Array1<f64> = Array1::from_iter((0..d).map(|_| normal.sample(&mut rng)));
            let mut v: Array1<f64> = Array1::from_iter((0..d).map(|_| normal.sample(&mut rng)));
            u /= u.dot(&u).sqrt();
            v /= v.dot(&v).sqrt();
            // ||uu^T - vv^T||_F^2 = 2 - 2 (u.v)^2
            let fro_sq = 2.0 - 2.0 * u.dot(&v).powi(2);
            assert!(fro_sq.sqrt() <= SQRT_2 + 1e-12);
        }
    }

    #[test]
    fn perturb_noise_free_is_identity() {
        let (x, y) = random_instance(20, 3, 5, false);
        let c = build_coeffs_linear(&x, &y).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let p = perturb_with_taus(&c, [0.0; 3], Provenance::GaussianFm, &mut rng);
        assert_eq!(p.coeffs, c);
    }

    #[test]
    fn logistic_degree_zero_never_noised() {
        let (x, y) = random_instance(20, 3, 8, true);
        let c = build_coeffs_logistic(&x, &y).unwrap();
        let budget = PrivacyBudget::new(0.1, 1e-5).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        for _ in 0..50 {
            let p = perturb_objective(
                &c,
                &LossSpec::logistic(),
                x.nrows(),
                budget,
                Mechanism::GaussianFm,
                &mut rng,
            )
            .unwrap();
            assert_eq!(p.coeffs.l0, std::f64::consts::LN_2);
        }
    }

    #[test]
    fn gaussian_perturbation_variance() {
        let c = Coeffs::zeros(4);
        let spec = LossSpec::linear();
        let n = 100;
        let budget = PrivacyBudget::new(1.0, 0.01).unwrap();
        let taus = fm_taus(&spec, n, budget).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let trials = 10_000;
        let mut sum_sq = 0.0;
        for _ in 0..trials {
            let p = perturb_with_taus(&c, taus, Provenance::GaussianFm, &mut rng);
            sum_sq += p.coeffs.l2[(1, 2)].powi(2);
        }
        let var = sum_sq / trials as f64;
        assert!(
            (var - taus[2] * taus[2]).abs() <= 0.03 * taus[2] * taus[2],
            "var {var} vs tau^2 {}",
            taus[2] * taus[2]
        );
    }

    #[test]
    fn evaluation_edges() {
        let (x, y) = random_instance(10, 3, 3, false);
        let c = build_coeffs_linear(&x, &y).unwrap();
        let l0 = c.l0;
        let obj = PerturbedObjective { coeffs: c, provenance: Provenance::Exact };
        assert_eq!(evaluate_objective(&obj, &Array1::zeros(3)).unwrap(), l0);
        assert!(matches!(
            evaluate_objective(&obj, &Array1::zeros(4)),
            Err(CapeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn validation_rejects_bad_rows() {
        let x = ndarray::arr2(&[[2.0, 0.0]]);
        let y = ndarray::arr1(&[0.5]);
        assert!(matches!(
            build_coeffs_linear(&x, &y),
            Err(CapeError::BoundViolation(_))
        ));
        let x = ndarray::arr2(&[[0.5, 0.0]]);
        let y = ndarray::arr1(&[0.5]);
        assert!(matches!(
            build_coeffs_logistic(&x, &y),
            Err(CapeError::BoundViolation(_))
        ));
    }
}
