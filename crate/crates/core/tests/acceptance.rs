//! End-to-end acceptance checks for the core library. Each test verifies one
//! numbered release criterion and prints `ACCEPTANCE n: PASS` on success
//! (run with `--nocapture` to see the lines).

use cape_core::cape_fm::run_capefm;
use cape_core::field::QuantizationSpec;
use cape_core::functional::{
    build_coeffs_linear, build_coeffs_logistic, dpfm_baseline_sensitivity, evaluate_objective,
    fm_taus, sensitivity_table, LossSpec, PerturbedObjective, Provenance, SQRT_2,
};
use cape_core::privacy::{cape_delta, cape_moments, gaussian_tau, max_colluders};
use cape_core::protocol::{
    communication_cost, h_ratio, h_ratio_upper_bound, run_cape_round, run_conventional_round,
    CollusionModel, Protocol, SiteView,
};
use cape_core::secure_agg::{default_threshold, generate_zero_sum_noise};
use cape_core::solvers::minimize_quadratic;
use cape_core::transcript::Transcript;
use cape_core::{NoiseScale, PrivacyBudget, Sensitivity, StreamSeed};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
}

fn make_sites(s: usize, n_s: usize, tau: NoiseScale, seed: u64) -> Vec<SiteView> {
    let master = StreamSeed::new(seed);
    (0..s)
        .map(|i| {
            let mut rng = master.stream(&[i as u64, 0xda7a]);
            let data: Vec<f64> = (0..n_s).map(|_| rng.gen_range(0.0..1.0)).collect();
            SiteView::new(i, data, tau).unwrap()
        })
        .collect()
}

/// Criterion 1: with symmetric sites the aggregate estimate carries exactly
/// the pooled-level noise variance tau_s^2 / S^2.
#[test]
fn acceptance_01_aggregate_variance_matches_pooled() {
    let s = 4;
    let n_s = 1000;
    let budget = PrivacyBudget::new(1.0, 0.01).unwrap();
    let tau = gaussian_tau(Sensitivity::l2(1.0 / n_s as f64).unwrap(), budget).unwrap();
    let sites = make_sites(s, n_s, tau, 41);
    let seed = StreamSeed::new(0xacc1);
    let t = default_threshold(s);
    let active = vec![true; s];
    let rounds = 10_000;
    let estimates: Vec<f64> = (0..rounds)
        .map(|r| {
            run_cape_round(&sites, t, &CollusionModel::none(), &active, &seed, r)
                .unwrap()
                .estimate
        })
        .collect();
    let got = variance(&estimates);
    let want = tau.tau * tau.tau / (s * s) as f64;
    let rel = (got - want).abs() / want;
    assert!(rel < 0.03, "variance off by {:.2}%: got {got:.6e}, want {want:.6e}", rel * 100.0);
    println!("ACCEPTANCE 1: PASS");
}

/// Criterion 2: the variance gain over conventional distributed noising is S.
#[test]
fn acceptance_02_gain_equals_site_count() {
    for &s in &[3usize, 5, 10] {
        let n_s = 200;
        let tau = NoiseScale::new(0.05).unwrap();
        let sites = make_sites(s, n_s, tau, 42 + s as u64);
        let seed = StreamSeed::new(0xacc2);
        let t = default_threshold(s);
        let active = vec![true; s];
        let rounds = 10_000;
        let mut cape = Vec::with_capacity(rounds);
        let mut conv = Vec::with_capacity(rounds);
        for r in 0..rounds as u64 {
            cape.push(
                run_cape_round(&sites, t, &CollusionModel::none(), &active, &seed, r)
                    .unwrap()
                    .estimate,
            );
            conv.push(run_conventional_round(&sites, &seed, r).0);
        }
        let ratio = variance(&conv) / variance(&cape);
        let sf = s as f64;
        assert!(
            ratio >= 0.95 * sf && ratio <= 1.05 * sf,
            "S={s}: gain {ratio:.3} outside [{:.2}, {:.2}]",
            0.95 * sf,
            1.05 * sf
        );
    }
    println!("ACCEPTANCE 2: PASS");
}

/// Criterion 3: the field encodings of the correlated noise sum to the zero
/// field element in every round, including rounds with a dropout above the
/// reconstruction threshold.
#[test]
fn acceptance_03_zero_sum_exact_in_field() {
    let s = 5;
    let t = default_threshold(s); // 4: one dropout still reconstructs
    let spec = QuantizationSpec::production(1.0);
    let seed = StreamSeed::new(0xacc3);
    let all_active = vec![true; s];
    let mut with_dropout = vec![true; s];
    with_dropout[s - 1] = false;
    for r in 0..100_000u64 {
        let active = if r % 2 == 0 { &all_active } else { &with_dropout };
        let mut transcript = Transcript::new();
        let zs =
            generate_zero_sum_noise(0.5, s, t, 1, &spec, &seed, r, active, &mut transcript)
                .unwrap();
        let field = spec.field;
        let mut total = 0u64;
        for enc in zs.field_encodings.iter().flatten() {
            total = field.add(total, enc.elems[0]);
        }
        assert_eq!(total, 0, "round {r}: field sum {total} != 0");
        let real: f64 = zs.per_site.iter().flatten().map(|v| v[0]).sum();
        assert!(real.abs() < 1e-6, "round {r}: real sum {real}");
    }
    println!("ACCEPTANCE 3: PASS");
}

/// Criterion 4: the privacy-loss moments satisfy sigma_z^2 = 2 mu_z on a
/// 1000+ point parameter grid, and a 10^7-draw Monte-Carlo tail estimate
/// stays below the closed-form delta bound.
#[test]
fn acceptance_04_privacy_loss_moment_identity_and_tail() {
    let tau_grid = [0.01, 0.03, 0.1, 0.3, 0.5, 1.0, 3.0, 10.0];
    let n_grid = [100usize, 300, 1000, 5000, 10000];
    let mut points = 0;
    for s in 3..=12usize {
        for s_c in 0..=max_colluders(s) {
            for &tau in &tau_grid {
                for &n in &n_grid {
                    let m = cape_moments(s, s_c, NoiseScale::new(tau).unwrap(), n).unwrap();
                    assert_eq!(m.sigma_z_sq, 2.0 * m.mu_z, "identity broken at S={s} S_C={s_c}");
                    assert!(m.mu_z > 0.0);
                    points += 1;
                }
            }
        }
    }
    assert!(points >= 1000, "grid too small: {points}");

    // Monte-Carlo tail check at three parameter points, epsilon set three
    // standard deviations into the tail so both sides are exercised.
    let mc_points = [(4usize, 1usize, 1.0f64, 100usize), (10, 3, 0.5, 300), (6, 1, 0.2, 200)];
    let seed = StreamSeed::new(0xacc4);
    for (idx, &(s, s_c, tau, n)) in mc_points.iter().enumerate() {
        let m = cape_moments(s, s_c, NoiseScale::new(tau).unwrap(), n).unwrap();
        let eps = m.mu_z + 3.0 * m.sigma_z();
        let bound = cape_delta(eps, m).unwrap();
        assert!(!bound.vacuous);
        let normal = Normal::new(m.mu_z, m.sigma_z()).unwrap();
        let mut rng = seed.stream(&[idx as u64]);
        let draws = 10_000_000usize;
        let exceed = (0..draws)
            .filter(|_| normal.sample(&mut rng).abs() > eps)
            .count();
        let p_hat = exceed as f64 / draws as f64;
        assert!(
            p_hat <= bound.delta,
            "tail {p_hat:.4e} exceeds bound {:.4e} at point {idx}",
            bound.delta
        );
    }
    println!("ACCEPTANCE 4: PASS");
}

fn random_instance(
    rng: &mut impl Rng,
    n: usize,
    d: usize,
    logistic: bool,
) -> (Array2<f64>, Array1<f64>) {
    let mut x = Array2::<f64>::zeros((n, d));
    for mut row in x.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let norm = row.dot(&row).sqrt();
        if norm > 1.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let y = if logistic {
        Array1::from_iter((0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }))
    } else {
        Array1::from_iter((0..n).map(|_| rng.gen_range(-1.0..1.0)))
    };
    (x, y)
}

fn coeff_diffs(spec: &LossSpec, x: &Array2<f64>, y: &Array1<f64>, x2: &Array2<f64>, y2: &Array1<f64>) -> [f64; 3] {
    let build = |x: &Array2<f64>, y: &Array1<f64>| match spec {
        s if *s == LossSpec::linear() => build_coeffs_linear(x, y).unwrap(),
        _ => build_coeffs_logistic(x, y).unwrap(),
    };
    let a = build(x, y);
    let b = build(x2, y2);
    let d0 = (a.l0 - b.l0).abs();
    let d1v = &a.l1 - &b.l1;
    let d1 = d1v.dot(&d1v).sqrt();
    let d2v = &a.l2 - &b.l2;
    let d2 = d2v.iter().map(|v| v * v).sum::<f64>().sqrt();
    [d0, d1, d2]
}

/// Criterion 6: brute-force neighboring-dataset coefficient changes never
/// exceed the closed-form sensitivities, the bounds are near-tight under
/// adversarial witnesses, and the logistic constant term has zero
/// sensitivity.
#[test]
fn acceptance_06_sensitivity_sound_and_tight() {
    let seed = StreamSeed::new(0xacc6);
    let mut rng = seed.stream(&[6]);
    let n = 50;
    let d = 5;
    for spec in [LossSpec::linear(), LossSpec::logistic()] {
        let logistic = spec == LossSpec::logistic();
        let bounds = sensitivity_table(&spec, n);
        let mut max_ratio = [0.0f64; 3];
        for _ in 0..10_000 {
            let (x, y) = random_instance(&mut rng, n, d, logistic);
            let (x2, y2) = {
                let (xr, yr) = random_instance(&mut rng, 1, d, logistic);
                let mut x2 = x.clone();
                let mut y2 = y.clone();
                x2.row_mut(n - 1).assign(&xr.row(0));
                y2[n - 1] = yr[0];
                (x2, y2)
            };
            let diffs = coeff_diffs(&spec, &x, &y, &x2, &y2);
            for j in 0..3 {
                if bounds[j] == 0.0 {
                    assert_eq!(diffs[j], 0.0, "degree {j} changed despite zero sensitivity");
                } else {
                    assert!(
                        diffs[j] <= bounds[j] * (1.0 + 1e-12),
                        "degree {j} diff {:.6e} > bound {:.6e}",
                        diffs[j],
                        bounds[j]
                    );
                    max_ratio[j] = max_ratio[j].max(diffs[j] / bounds[j]);
                }
            }
        }

        // adversarial witnesses: flip the last label (degree 1, linear) and
        // rotate the last row between orthogonal unit vectors (degree 2)
        let e1 = {
            let mut v = Array1::<f64>::zeros(d);
            v[0] = 1.0;
            v
        };
        let e2 = {
            let mut v = Array1::<f64>::zeros(d);
            v[1] = 1.0;
            v
        };
        let (base_x, base_y) = random_instance(&mut rng, n, d, logistic);

        if !logistic {
            let mut x = base_x.clone();
            x.row_mut(n - 1).assign(&e1);
            let mut y = base_y.clone();
            y[n - 1] = 1.0;
            let mut y2 = y.clone();
            y2[n - 1] = -1.0;
            let diffs = coeff_diffs(&spec, &x, &y, &x, &y2);
            assert!(diffs[1] >= 0.95 * bounds[1], "degree-1 witness only reaches {:.3}", diffs[1] / bounds[1]);
        }
        {
            let mut x = base_x.clone();
            x.row_mut(n - 1).assign(&e1);
            let mut y = base_y.clone();
            y[n - 1] = if logistic { 1.0 } else { 0.5 };
            let mut x2 = x.clone();
            x2.row_mut(n - 1).assign(&e2);
            let diffs = coeff_diffs(&spec, &x, &y, &x2, &y);
            assert!(diffs[2] >= 0.95 * bounds[2], "degree-2 witness only reaches {:.3}", diffs[2] / bounds[2]);
        }
        if logistic {
            assert_eq!(bounds[0], 0.0);
        }
    }
    println!("ACCEPTANCE 6: PASS");
}

/// Independent dense normal-equations solve (Gauss elimination with partial
/// pivoting), so the pipeline check does not share the library's solver.
fn solve_normal_equations(x: &Array2<f64>, y: &Array1<f64>) -> Array1<f64> {
    let d = x.ncols();
    let mut a = x.t().dot(x);
    let mut b = x.t().dot(y);
    for k in 0..d {
        let piv = (k..d).max_by(|&i, &j| a[[i, k]].abs().total_cmp(&a[[j, k]].abs())).unwrap();
        if piv != k {
            for c in 0..d {
                let tmp = a[[k, c]];
                a[[k, c]] = a[[piv, c]];
                a[[piv, c]] = tmp;
            }
            b.swap(k, piv);
        }
        for i in k + 1..d {
            let f = a[[i, k]] / a[[k, k]];
            for c in k..d {
                a[[i, c]] -= f * a[[k, c]];
            }
            b[i] -= f * b[k];
        }
    }
    let mut w = Array1::<f64>::zeros(d);
    for i in (0..d).rev() {
        let mut s = b[i];
        for c in i + 1..d {
            s -= a[[i, c]] * w[c];
        }
        w[i] = s / a[[i, i]];
    }
    w
}

/// Criterion 7: the noise-free distributed pipeline reproduces ordinary
/// least squares on random instances.
#[test]
fn acceptance_07_noise_free_pipeline_is_ols() {
    let seed = StreamSeed::new(0xacc7);
    let mut rng = seed.stream(&[7]);
    let s = 5;
    for _ in 0..50 {
        let d = rng.gen_range(2..=50usize);
        let n_s = rng.gen_range((d * 2).max(20)..=1000usize);
        let (x, y) = random_instance(&mut rng, n_s * s, d, false);
        let sites: Vec<(Array2<f64>, Array1<f64>)> = (0..s)
            .map(|i| {
                (
                    x.slice(ndarray::s![i * n_s..(i + 1) * n_s, ..]).to_owned(),
                    y.slice(ndarray::s![i * n_s..(i + 1) * n_s]).to_owned(),
                )
            })
            .collect();
        let out = run_capefm(
            &sites,
            &LossSpec::linear(),
            [0.0, 0.0, 0.0],
            default_threshold(s),
            &seed,
            0,
        )
        .unwrap();
        let w_pipeline = minimize_quadratic(&out.objective, 0.0).unwrap().w_hat;
        let w_direct = solve_normal_equations(&x, &y);
        let diff = (&w_pipeline - &w_direct).mapv(f64::abs).sum();
        let scale = w_direct.mapv(f64::abs).sum().max(1e-12);
        assert!(diff / scale < 1e-8, "relative gap {:.2e} (D={d}, N={})", diff / scale, n_s * s);
    }
    println!("ACCEPTANCE 7: PASS");
}

/// Criterion 8: the polynomial coefficient representation evaluates to the
/// empirical loss itself.
#[test]
fn acceptance_08_representation_identity() {
    let seed = StreamSeed::new(0xacc8);
    let mut rng = seed.stream(&[8]);
    for _ in 0..100 {
        let d = rng.gen_range(1..=20usize);
        let n = rng.gen_range(5..=200usize);
        let w = Array1::from_iter((0..d).map(|_| rng.gen_range(-2.0..2.0)));

        let (x, y) = random_instance(&mut rng, n, d, false);
        let obj = PerturbedObjective {
            coeffs: build_coeffs_linear(&x, &y).unwrap(),
            provenance: Provenance::Exact,
        };
        let via_coeffs = evaluate_objective(&obj, &w).unwrap();
        let direct = {
            let r = &y - &x.dot(&w);
            r.dot(&r) / n as f64
        };
        let rel = (via_coeffs - direct).abs() / direct.abs().max(1e-12);
        assert!(rel < 1e-10, "linear identity gap {rel:.2e}");

        let (x, y) = random_instance(&mut rng, n, d, true);
        let obj = PerturbedObjective {
            coeffs: build_coeffs_logistic(&x, &y).unwrap(),
            provenance: Provenance::Exact,
        };
        let via_coeffs = evaluate_objective(&obj, &w).unwrap();
        let direct = (0..n)
            .map(|i| {
                let z = x.row(i).dot(&w);
                std::f64::consts::LN_2 + (0.5 - y[i]) * z + z * z / 8.0
            })
            .sum::<f64>()
            / n as f64;
        let rel = (via_coeffs - direct).abs() / direct.abs().max(1e-12);
        assert!(rel < 1e-10, "logistic identity gap {rel:.2e}");
    }
    println!("ACCEPTANCE 8: PASS");
}

/// Criterion 9: per-degree aggregated coefficient noise variance equals the
/// pooled level tau_j^2 / S^2.
#[test]
fn acceptance_09_per_degree_aggregated_variance() {
    let s = 5;
    let d = 2;
    let n_s = 40;
    let spec = LossSpec::linear();
    let seed = StreamSeed::new(0xacc9);
    let mut rng = seed.stream(&[9]);
    let sites: Vec<(Array2<f64>, Array1<f64>)> =
        (0..s).map(|_| random_instance(&mut rng, n_s, d, false)).collect();
    let taus = [0.05f64, 0.08, 0.12];
    let rounds = 10_000u64;
    let mut l0 = Vec::with_capacity(rounds as usize);
    let mut l1: Vec<Vec<f64>> = vec![Vec::with_capacity(rounds as usize); d];
    let mut l2: Vec<Vec<f64>> = vec![Vec::with_capacity(rounds as usize); d * d];
    for r in 0..rounds {
        let out = run_capefm(&sites, &spec, taus, default_threshold(s), &seed, r).unwrap();
        let c = out.objective.coeffs;
        l0.push(c.l0);
        for (k, v) in c.l1.iter().enumerate() {
            l1[k].push(*v);
        }
        for (k, v) in c.l2.iter().enumerate() {
            l2[k].push(*v);
        }
    }
    let pooled = |tau: f64| tau * tau / (s * s) as f64;
    let mean = |vs: &[Vec<f64>]| vs.iter().map(|v| variance(v)).sum::<f64>() / vs.len() as f64;
    for (got, want, name) in [
        (variance(&l0), pooled(taus[0]), "degree 0"),
        (mean(&l1), pooled(taus[1]), "degree 1"),
        (mean(&l2), pooled(taus[2]), "degree 2"),
    ] {
        let rel = (got - want).abs() / want;
        assert!(rel < 0.05, "{name}: variance off by {:.2}% ({got:.4e} vs {want:.4e})", rel * 100.0);
    }
    println!("ACCEPTANCE 9: PASS");
}

/// Criterion 12 (closed-form part): the Laplace baseline's per-entry noise
/// standard deviation dominates the Gaussian mechanism's for every
/// dimension in 2..=64 at matched budgets, for both losses.
#[test]
fn acceptance_12_laplace_baseline_noise_dominates() {
    let n = 1000;
    let budget = PrivacyBudget::new(1.0, 1e-5).unwrap();
    for spec in [LossSpec::linear(), LossSpec::logistic()] {
        let taus = fm_taus(&spec, n, budget).unwrap();
        let gauss_sd = taus.iter().cloned().fold(0.0f64, f64::max);
        for d in 2..=64usize {
            let b = dpfm_baseline_sensitivity(&spec, n, d) / budget.epsilon;
            let laplace_sd = SQRT_2 * b;
            assert!(
                laplace_sd > gauss_sd,
                "D={d}: laplace sd {laplace_sd:.4e} <= gaussian sd {gauss_sd:.4e}"
            );
        }
    }
    println!("ACCEPTANCE 12: PASS (closed-form noise comparison)");
}

/// Criterion 13: the variance-ratio function of the site-size composition is
/// at least 1 everywhere, exactly 1 at the symmetric split, and capped by
/// the closed-form bound at the extreme composition.
#[test]
fn acceptance_13_composition_ratio_bounds() {
    let seed = StreamSeed::new(0xacc13);
    let mut rng = seed.stream(&[13]);
    let sens = |x: f64| 1.0 / x;
    for _ in 0..10_000 {
        let s = rng.gen_range(2..=12usize);
        let n = rng.gen_range(s * 2..=5000usize);
        let mut cuts: Vec<usize> = (0..s - 1).map(|_| rng.gen_range(1..n)).collect();
        cuts.sort_unstable();
        let mut parts = Vec::with_capacity(s);
        let mut last = 0;
        for &c in &cuts {
            parts.push((c - last).max(1));
            last = c;
        }
        parts.push((n - last).max(1));
        let total: usize = parts.iter().sum();
        let h = h_ratio(&parts, sens);
        assert!(h >= 1.0 - 1e-9, "H = {h} < 1 for {parts:?}");
        let bound = h_ratio_upper_bound(total, s);
        assert!(h <= bound * (1.0 + 1e-9), "H = {h} above bound {bound} for {parts:?}");
    }
    let sym = vec![500usize; 8];
    let h = h_ratio(&sym, sens);
    assert!((h - 1.0).abs() < 1e-12, "symmetric H = {h}");
    let s = 6;
    let n = 600;
    let mut extreme = vec![1usize; s];
    extreme[0] = n - s + 1;
    let h = h_ratio(&extreme, sens);
    let bound = h_ratio_upper_bound(n, s);
    assert!(h <= bound * (1.0 + 1e-12) && h >= bound * (1.0 - 1e-12), "extreme H {h} vs bound {bound}");
    println!("ACCEPTANCE 13: PASS");
}

fn affine_r2(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if syy == 0.0 {
        return 1.0; // constant response is fit exactly by an affine model
    }
    (sxy * sxy) / (sxx * syy)
}

/// Criterion 14: conventional rounds send exactly S*D scalars to the
/// aggregator; the cape per-site cost is affine in S at fixed D and affine
/// in D at fixed S across a 5x5 grid.
#[test]
fn acceptance_14_communication_accounting() {
    let s_grid = [3usize, 4, 5, 6, 8];
    let d_grid = [1usize, 2, 5, 10, 20];
    let mut cape_cost = vec![vec![0.0f64; d_grid.len()]; s_grid.len()];
    for (si, &s) in s_grid.iter().enumerate() {
        for (di, &d) in d_grid.iter().enumerate() {
            let conv = communication_cost(s, d, Protocol::Conventional).unwrap();
            assert_eq!(conv.aggregator_scalars, s * d, "conventional cost at S={s}, D={d}");
            let cape = communication_cost(s, d, Protocol::Cape).unwrap();
            cape_cost[si][di] = cape.per_site_scalars as f64;
        }
    }
    let s_axis: Vec<f64> = s_grid.iter().map(|&s| s as f64).collect();
    let d_axis: Vec<f64> = d_grid.iter().map(|&d| d as f64).collect();
    for di in 0..d_grid.len() {
        let col: Vec<f64> = (0..s_grid.len()).map(|si| cape_cost[si][di]).collect();
        let r2 = affine_r2(&s_axis, &col);
        assert!(r2 > 0.99, "cape cost vs S at D={} has R^2 = {r2:.4}", d_grid[di]);
    }
    for si in 0..s_grid.len() {
        let r2 = affine_r2(&d_axis, &cape_cost[si]);
        assert!(r2 > 0.99, "cape cost vs D at S={} has R^2 = {r2:.4}", s_grid[si]);
    }
    println!("ACCEPTANCE 14: PASS");
}
