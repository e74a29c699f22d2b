//! The CAPE estimation protocol, its conventional-distributed and pooled
//! baselines, and the utility analytics: variance bookkeeping, the H(n)
//! ratio for unequal sample sizes, sensitivity-condition checks, and
//! communication-cost accounting.

use crate::error::{CapeError, Result};
use crate::field::QuantizationSpec;
use crate::privacy::{gaussian_tau, max_colluders, NoiseScale, PrivacyBudget, Sensitivity};
use crate::rng::StreamSeed;
use crate::secure_agg::generate_zero_sum_noise;
use crate::transcript::{digest_scalars, CostReport, Message, MessageKind, Party, Transcript};
use rand_distr::{Distribution, Normal};

/// One site's private state. Local data never leaves this struct; protocol
/// runs release only noised function values.
#[derive(Debug, Clone)]
pub struct SiteView {
    pub site_id: usize,
    local_data: Vec<f64>,
    pub tau_s: NoiseScale,
}

impl SiteView {
    pub fn new(site_id: usize, local_data: Vec<f64>, tau_s: NoiseScale) -> Result<Self> {
        if local_data.is_empty() {
            return Err(CapeError::EmptyData(format!("site {site_id} holds no samples")));
        }
        if local_data.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(CapeError::BoundViolation(format!(
                "site {site_id}: samples must lie in [0,1] for scalar averaging"
            )));
        }
        Ok(Self { site_id, local_data, tau_s })
    }

    pub fn n_samples(&self) -> usize {
        self.local_data.len()
    }
}

/// Local mean together with its recorded sensitivity 1/N_s.
#[derive(Debug, Clone, Copy)]
pub struct LocalAverage {
    pub value: f64,
    pub sensitivity: f64,
}

/// Arithmetic mean of a site's samples; sensitivity 1/N_s rides along.
pub fn local_function_average(view: &SiteView) -> LocalAverage {
    let n = view.n_samples() as f64;
    LocalAverage {
        value: view.local_data.iter().sum::<f64>() / n,
        sensitivity: 1.0 / n,
    }
}

/// Which sites collude with the adversary.
#[derive(Debug, Clone)]
pub struct CollusionModel {
    pub colluding_sites: Vec<usize>,
}

impl CollusionModel {
    pub fn none() -> Self {
        Self { colluding_sites: Vec::new() }
    }

    pub fn new(colluding_sites: Vec<usize>) -> Self {
        Self { colluding_sites }
    }

    pub fn s_c(&self) -> usize {
        self.colluding_sites.len()
    }

    pub fn within_bound(&self, s: usize) -> bool {
        self.s_c() <= max_colluders(s)
    }
}

/// Everything the aggregator (and hence the adversary) observes in a round:
/// released values and the broadcast noise total. No local data, no g_s.
#[derive(Debug, Clone)]
pub struct AggregatorView {
    /// Released a_hat per site; `None` for dropped sites.
    pub releases: Vec<Option<f64>>,
    /// The broadcast sum of the pre-recentering noise draws (scalar rounds).
    pub broadcast_total: f64,
}

/// Per-site values that exist only inside the simulation, retained so tests
/// can replay the adversary of the privacy analysis (colluders reveal their
/// own e_hat and g to the adversary).
#[derive(Debug, Clone, Copy)]
pub struct SiteSecret {
    pub local_mean: f64,
    /// Quantized pre-recentering draw e_hat_s.
    pub e_hat: f64,
    pub e: f64,
    pub g: f64,
}

#[derive(Debug, Clone)]
pub struct CapeRoundOutput {
    pub estimate: f64,
    pub aggregator_view: AggregatorView,
    pub site_secrets: Vec<Option<SiteSecret>>,
    pub transcript: Transcript,
    /// False when the collusion bound is violated: the round still runs but
    /// the (epsilon, delta) certification of the release does not apply.
    pub privacy_certified: bool,
    /// False when sites are asymmetric (unequal N_s or tau_s): the
    /// pooled-variance utility guarantee is void.
    pub utility_guaranteed: bool,
    pub active_count: usize,
}

/// The adversary's observation: honest releases plus the partial sum of
/// honest sites' pre-recentering draws (recoverable from the broadcast and
/// the colluders' own draws).
pub fn adversary_view(out: &CapeRoundOutput, collusion: &CollusionModel) -> (Vec<f64>, f64) {
    let honest_releases: Vec<f64> = out
        .aggregator_view
        .releases
        .iter()
        .enumerate()
        .filter(|(i, r)| r.is_some() && !collusion.colluding_sites.contains(i))
        .map(|(_, r)| r.unwrap())
        .collect();
    let colluder_ehat: f64 = collusion
        .colluding_sites
        .iter()
        .filter_map(|&i| out.site_secrets[i].map(|s| s.e_hat))
        .sum();
    (honest_releases, out.aggregator_view.broadcast_total - colluder_ehat)
}

fn check_symmetric(sites: &[SiteView]) -> bool {
    let n0 = sites[0].n_samples();
    let t0 = sites[0].tau_s.tau;
    sites.iter().all(|s| s.n_samples() == n0 && s.tau_s.tau == t0)
}

/// One round of the CAPE protocol: per-site release of
/// f(x_s) + e_s + g_s with jointly generated zero-sum e and local g of
/// variance tau_s^2 / S, averaged at the aggregator.
pub fn run_cape_round(
    sites: &[SiteView],
    t: usize,
    collusion: &CollusionModel,
    active: &[bool],
    seed: &StreamSeed,
    round: u64,
) -> Result<CapeRoundOutput> {
    let s = sites.len();
    assert_eq!(active.len(), s);
    if s < 2 {
        return Err(CapeError::InvalidParameter("CAPE needs at least 2 sites".into()));
    }
    let utility_guaranteed = check_symmetric(sites);
    let privacy_certified = collusion.within_bound(s);
    let tau = sites[0].tau_s.tau;
    let spec = QuantizationSpec::production(tau.max(1.0));
    let mut transcript = Transcript::new();

    let zs = generate_zero_sum_noise(tau, s, t, 1, &spec, seed, round, active, &mut transcript)?;
    let a = zs.active_count as f64;

    let mut releases: Vec<Option<f64>> = vec![None; s];
    let mut secrets: Vec<Option<SiteSecret>> = vec![None; s];
    let mut sum = 0.0;
    for (i, site) in sites.iter().enumerate() {
        if !active[i] {
            continue;
        }
        let e = zs.per_site[i].as_ref().unwrap()[0];
        let e_hat = e + zs.broadcast_total[0] / a;
        let tau_g = site.tau_s.tau / a.sqrt();
        let g = if tau_g == 0.0 {
            0.0
        } else {
            let mut rng = seed.stream(&[i as u64, round, 0x60]);
            Normal::new(0.0, tau_g).expect("valid tau_g").sample(&mut rng)
        };
        let local = local_function_average(site);
        let a_hat = local.value + e + g;
        transcript.log(Message {
            round,
            from: Party::Site(i),
            to: Party::Aggregator,
            kind: MessageKind::Release,
            payload_digest: digest_scalars(&[a_hat]),
            scalar_count: 1,
        });
        releases[i] = Some(a_hat);
        secrets[i] = Some(SiteSecret { local_mean: local.value, e_hat, e, g });
        sum += a_hat;
    }
    Ok(CapeRoundOutput {
        estimate: sum / a,
        aggregator_view: AggregatorView { releases, broadcast_total: zs.broadcast_total[0] },
        site_secrets: secrets,
        transcript,
        privacy_certified,
        utility_guaranteed,
        active_count: zs.active_count,
    })
}

/// Conventional distributed DP round: each site adds independent
/// N(0, tau_s^2) noise at full local sensitivity.
pub fn run_conventional_round(
    sites: &[SiteView],
    seed: &StreamSeed,
    round: u64,
) -> (f64, Transcript) {
    let mut transcript = Transcript::new();
    let mut sum = 0.0;
    for (i, site) in sites.iter().enumerate() {
        let local = local_function_average(site);
        let noise = if site.tau_s.tau == 0.0 {
            0.0
        } else {
            let mut rng = seed.stream(&[i as u64, round, 0xc0]);
            Normal::new(0.0, site.tau_s.tau).expect("valid tau").sample(&mut rng)
        };
        let a_hat = local.value + noise;
        transcript.log(Message {
            round,
            from: Party::Site(i),
            to: Party::Aggregator,
            kind: MessageKind::Release,
            payload_digest: digest_scalars(&[a_hat]),
            scalar_count: 1,
        });
        sum += a_hat;
    }
    (sum / sites.len() as f64, transcript)
}

/// Pooled-data baseline with an explicit noise scale.
pub fn run_pooled_with_tau(
    all_data: &[f64],
    tau: NoiseScale,
    seed: &StreamSeed,
    round: u64,
) -> Result<f64> {
    if all_data.is_empty() {
        return Err(CapeError::EmptyData("pooled dataset is empty".into()));
    }
    let mean = all_data.iter().sum::<f64>() / all_data.len() as f64;
    if tau.tau == 0.0 {
        return Ok(mean);
    }
    let mut rng = seed.stream(&[0x900d, round]);
    Ok(mean + Normal::new(0.0, tau.tau).expect("valid tau").sample(&mut rng))
}

/// Pooled-data Gaussian-mechanism release at sensitivity 1/N.
pub fn run_pooled(
    all_data: &[f64],
    budget: PrivacyBudget,
    seed: &StreamSeed,
    round: u64,
) -> Result<(f64, NoiseScale)> {
    if all_data.is_empty() {
        return Err(CapeError::EmptyData("pooled dataset is empty".into()));
    }
    let tau = gaussian_tau(Sensitivity::l2(1.0 / all_data.len() as f64)?, budget)?;
    Ok((run_pooled_with_tau(all_data, tau, seed, round)?, tau))
}

/// H(n) = sum_s Delta^2(N_s) / (S^3 Delta^2(N)): the ratio of CAPE's
/// aggregate noise variance to the pooled variance under sample counts n.
/// With Delta(N) = 1/N this is (N^2 / S^3) sum_s 1/N_s^2.
pub fn h_ratio<F: Fn(f64) -> f64>(n: &[usize], sensitivity_fn: F) -> f64 {
    let s = n.len() as f64;
    let total: usize = n.iter().sum();
    let num: f64 = n.iter().map(|&ns| sensitivity_fn(ns as f64).powi(2)).sum();
    num / (s.powi(3) * sensitivity_fn(total as f64).powi(2))
}

/// Upper bound on H(n) at the extreme composition [N-S+1, 1, ..., 1]
/// for Delta(N) = 1/N.
pub fn h_ratio_upper_bound(total_n: usize, s: usize) -> f64 {
    let nf = total_n as f64;
    let sf = s as f64;
    (nf * nf / sf.powi(3)) * (1.0 / (nf - sf + 1.0).powi(2) + sf - 1.0)
}

/// Whether a sensitivity function lets CAPE reach pooled-variance parity.
#[derive(Debug, Clone, Copy)]
pub struct SensitivityConditionReport {
    /// H at the symmetric composition.
    pub h_symmetric: f64,
    /// Delta(N/S) = S * Delta(N) (the convex-case condition).
    pub convex_condition_holds: bool,
    /// S^3 Delta^2(N) = sum_s Delta^2(N_s) at the symmetric point.
    pub general_condition_holds: bool,
    /// True when the function class benefits fully from CAPE (H = 1).
    pub full_benefit: bool,
}

pub fn check_sensitivity_condition<F: Fn(f64) -> f64>(
    sensitivity_fn: F,
    total_n: usize,
    s: usize,
) -> SensitivityConditionReport {
    let nf = total_n as f64;
    let sf = s as f64;
    let sym = vec![total_n / s; s];
    let h_symmetric = h_ratio(&sym, &sensitivity_fn);
    let tol = 1e-9;
    let convex_condition_holds =
        (sensitivity_fn(nf / sf) - sf * sensitivity_fn(nf)).abs() <= tol * sensitivity_fn(nf).abs() * sf;
    let lhs = sf.powi(3) * sensitivity_fn(nf).powi(2);
    let rhs: f64 = sym.iter().map(|&ns| sensitivity_fn(ns as f64).powi(2)).sum();
    let general_condition_holds = (lhs - rhs).abs() <= tol * lhs.abs().max(rhs.abs());
    SensitivityConditionReport {
        h_symmetric,
        convex_condition_holds,
        general_condition_holds,
        full_benefit: (h_symmetric - 1.0).abs() <= 1e-9,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Cape,
    Conventional,
}

/// Run one simulated round of D-dimensional aggregation and count the
/// scalars actually sent.
pub fn communication_cost(s: usize, d: usize, protocol: Protocol) -> Result<CostReport> {
    let seed = StreamSeed::new(0xc057);
    let mut transcript = Transcript::new();
    match protocol {
        Protocol::Conventional => {
            // one release of D scalars per site
            for i in 0..s {
                transcript.log(Message {
                    round: 0,
                    from: Party::Site(i),
                    to: Party::Aggregator,
                    kind: MessageKind::Release,
                    payload_digest: String::new(),
                    scalar_count: d,
                });
            }
        }
        Protocol::Cape => {
            let spec = QuantizationSpec::production(1.0);
            let t = crate::secure_agg::default_threshold(s);
            generate_zero_sum_noise(
                1.0,
                s,
                t,
                d,
                &spec,
                &seed,
                0,
                &vec![true; s],
                &mut transcript,
            )?;
            for i in 0..s {
                transcript.log(Message {
                    round: 0,
                    from: Party::Site(i),
                    to: Party::Aggregator,
                    kind: MessageKind::Release,
                    payload_digest: String::new(),
                    scalar_count: d,
                });
            }
        }
    }
    let per_site_scalars = transcript.scalars_sent_by_site(0);
    let per_site_messages = transcript.messages_sent_by_site(0);
    let aggregator_scalars = transcript.scalars_to_aggregator();
    Ok(CostReport { per_site_messages, per_site_scalars, aggregator_scalars })
}
