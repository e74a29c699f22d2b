//! Distributed functional mechanism with correlated noise: each site builds
//! its local coefficient arrays, adds per-degree zero-sum noise e_j^s plus
//! local noise g_j^s (variances (1 - 1/S) tau_j^2 and tau_j^2 / S), and
//! releases the noised arrays; the aggregator averages them. Because the
//! e_j^s cancel, each aggregated entry carries variance tau_j^2 / S^2 — the
//! same as a pooled-data release — while every site release keeps full
//! marginal variance tau_j^2.

use crate::error::{CapeError, Result};
use crate::field::QuantizationSpec;
use crate::functional::{
    build_coeffs_linear, build_coeffs_logistic, perturb_objective, Coeffs, LossKind, LossSpec,
    Mechanism, PerturbedObjective, Provenance,
};
use crate::privacy::PrivacyBudget;
use crate::rng::StreamSeed;
use crate::secure_agg::generate_zero_sum_noise;
use crate::transcript::{digest_scalars, Message, MessageKind, Party, Transcript};
use ndarray::{Array1, Array2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One site's noised coefficient release for one round. Contains only
/// noised aggregates of the local data, never samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteCoeffRelease {
    pub site_id: usize,
    pub round: u64,
    pub coeffs: Coeffs,
}

#[derive(Debug)]
pub struct CapeFmOutput {
    pub objective: PerturbedObjective,
    pub releases: Vec<SiteCoeffRelease>,
    pub transcript: Transcript,
}

fn build_site_coeffs(spec: &LossSpec, x: &Array2<f64>, y: &Array1<f64>) -> Result<Coeffs> {
    match spec.kind {
        LossKind::LinearRegression => build_coeffs_linear(x, y),
        LossKind::LogisticRegression => build_coeffs_logistic(x, y),
    }
}

fn check_symmetric(sites: &[(Array2<f64>, Array1<f64>)]) -> Result<usize> {
    if sites.is_empty() {
        return Err(CapeError::EmptyData("no sites".into()));
    }
    let n0 = sites[0].0.nrows();
    let d0 = sites[0].0.ncols();
    for (x, _) in sites {
        if x.nrows() != n0 || x.ncols() != d0 {
            return Err(CapeError::InvalidParameter(
                "capeFM requires the symmetric setting: equal N_s and shared D".into(),
            ));
        }
    }
    Ok(n0)
}

fn average_coeffs(parts: &[Coeffs]) -> Coeffs {
    let s = parts.len() as f64;
    let mut acc = Coeffs::zeros(parts[0].dim());
    for c in parts {
        acc.l0 += c.l0;
        acc.l1 += &c.l1;
        acc.l2 += &c.l2;
    }
    acc.l0 /= s;
    acc.l1 /= s;
    acc.l2 /= s;
    acc
}

/// Per-degree flattened view used to route coefficients through the
/// vector-valued zero-sum generator.
fn degree_len(d: usize, j: usize) -> usize {
    match j {
        0 => 1,
        1 => d,
        _ => d * d,
    }
}

fn add_flat(coeffs: &mut Coeffs, j: usize, noise: &[f64]) {
    match j {
        0 => coeffs.l0 += noise[0],
        1 => {
            for (v, e) in coeffs.l1.iter_mut().zip(noise) {
                *v += e;
            }
        }
        _ => {
            for (v, e) in coeffs.l2.iter_mut().zip(noise) {
                *v += e;
            }
        }
    }
}

/// The distributed functional mechanism. `taus[j]` is the per-site noise
/// scale for degree j (zero skips that degree's noise entirely, as for the
/// logistic degree-0 coefficient whose sensitivity is zero).
pub fn run_capefm(
    sites: &[(Array2<f64>, Array1<f64>)],
    spec: &LossSpec,
    taus: [f64; 3],
    t: usize,
    seed: &StreamSeed,
    round: u64,
) -> Result<CapeFmOutput> {
    check_symmetric(sites)?;
    let s = sites.len();
    if s < 2 {
        return Err(CapeError::InvalidParameter("capeFM needs at least 2 sites".into()));
    }
    let d = sites[0].0.ncols();
    let max_tau = taus.iter().cloned().fold(1.0f64, f64::max);
    let qspec = QuantizationSpec::production(max_tau);
    let mut transcript = Transcript::new();
    let active = vec![true; s];

    let mut site_coeffs: Vec<Coeffs> = sites
        .iter()
        .map(|(x, y)| build_site_coeffs(spec, x, y))
        .collect::<Result<_>>()?;

    for (j, &tau_j) in taus.iter().enumerate() {
        if tau_j == 0.0 {
            continue;
        }
        // distinct sub-round id per degree keeps the noise streams disjoint
        let sub_round = round * 8 + j as u64;
        let len = degree_len(d, j);
        let zs = generate_zero_sum_noise(
            tau_j,
            s,
            t,
            len,
            &qspec,
            seed,
            sub_round,
            &active,
            &mut transcript,
        )?;
        let tau_g = tau_j / (s as f64).sqrt();
        let g_dist = Normal::new(0.0, tau_g).expect("valid tau_g");
        for (i, coeffs) in site_coeffs.iter_mut().enumerate() {
            let e = zs.per_site[i].as_ref().unwrap();
            add_flat(coeffs, j, e);
            let mut g_rng = seed.stream(&[i as u64, sub_round, 0x61]);
            let g: Vec<f64> = (0..len).map(|_| g_dist.sample(&mut g_rng)).collect();
            add_flat(coeffs, j, &g);
        }
    }

    let mut releases = Vec::with_capacity(s);
    for (i, coeffs) in site_coeffs.iter().enumerate() {
        let flat: Vec<f64> = std::iter::once(coeffs.l0)
            .chain(coeffs.l1.iter().cloned())
            .chain(coeffs.l2.iter().cloned())
            .collect();
        transcript.log(Message {
            round,
            from: Party::Site(i),
            to: Party::Aggregator,
            kind: MessageKind::Release,
            payload_digest: digest_scalars(&flat),
            scalar_count: flat.len(),
        });
        releases.push(SiteCoeffRelease { site_id: i, round, coeffs: coeffs.clone() });
    }

    let objective = PerturbedObjective {
        coeffs: average_coeffs(&site_coeffs),
        provenance: Provenance::CapeFm,
    };
    Ok(CapeFmOutput { objective, releases, transcript })
}

/// Conventional distributed functional mechanism: each site adds
/// independent full-variance N(0, tau_j^2) noise per degree; the aggregator
/// averages, leaving per-entry variance tau_j^2 / S.
pub fn run_conventional_fm(
    sites: &[(Array2<f64>, Array1<f64>)],
    spec: &LossSpec,
    taus: [f64; 3],
    seed: &StreamSeed,
    round: u64,
) -> Result<PerturbedObjective> {
    check_symmetric(sites)?;
    let mut noised = Vec::with_capacity(sites.len());
    for (i, (x, y)) in sites.iter().enumerate() {
        let coeffs = build_site_coeffs(spec, x, y)?;
        let mut rng = seed.stream(&[i as u64, round, 0xcf]);
        noised.push(
            crate::functional::perturb_with_taus(&coeffs, taus, Provenance::Conv, &mut rng)
                .coeffs,
        );
    }
    Ok(PerturbedObjective { coeffs: average_coeffs(&noised), provenance: Provenance::Conv })
}

/// Single-site baseline: the centralized improved functional mechanism run
/// on one site's data alone, at that site's (smaller) N_s.
pub fn run_local_fm(
    x: &Array2<f64>,
    y: &Array1<f64>,
    spec: &LossSpec,
    budget: PrivacyBudget,
    seed: &StreamSeed,
    round: u64,
) -> Result<PerturbedObjective> {
    let coeffs = build_site_coeffs(spec, x, y)?;
    let mut rng = seed.stream(&[0x10ca1, round]);
    perturb_objective(&coeffs, spec, x.nrows(), budget, Mechanism::GaussianFm, &mut rng)
}
