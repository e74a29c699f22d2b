//! Simulated secure aggregation and zero-sum correlated noise.
//!
//! The aggregator learns only the field sum of the sites' values: each site
//! Shamir-shares its quantized value to the active sites, every site sums
//! the shares it received, and the aggregator reconstructs the total from at
//! least t summed shares. Linearity of the sharing makes the summed shares
//! valid shares of the sum, so no individual value is ever reconstructed.
//!
//! Zero-sum noise follows the same sum-then-recenter procedure: each site
//! draws a private Gaussian, the sites learn only the total, and each site
//! subtracts the average. On the field grid the recentered terms sum to the
//! zero element exactly.

use crate::error::{CapeError, Result};
use crate::field::{dequantize, quantize_vec, FieldVector, QuantizationSpec};
use crate::rng::StreamSeed;
use crate::shamir::{reconstruct, share};
use crate::transcript::{digest_field, Message, MessageKind, Party, Transcript};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Default Shamir threshold: reconstruction stays impossible for the
/// maximal colluding coalition of ceil(S/3) - 1 sites.
pub fn default_threshold(s: usize) -> usize {
    (2 * s) / 3 + 1
}

/// Field sum over the active sites via simulated SecureAgg.
///
/// `values[i]` is site i's input; inactive sites contribute nothing and
/// receive nothing. Errors if fewer than `t` sites are active.
pub fn secure_sum<R: Rng + ?Sized>(
    values: &[FieldVector],
    t: usize,
    active: &[bool],
    round: u64,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<FieldVector> {
    assert_eq!(values.len(), active.len());
    let active_idx: Vec<usize> =
        (0..values.len()).filter(|&i| active[i]).collect();
    if active_idx.len() < t {
        return Err(CapeError::DropoutThreshold { active: active_idx.len(), threshold: t });
    }
    let field = values[active_idx[0]].field;
    let dim = values[active_idx[0]].dim();
    let n = active_idx.len();

    // Each active site shares its value; share k goes to the k-th active site.
    let mut summed: Vec<FieldVector> = vec![FieldVector::zeros(field, dim); n];
    for &i in &active_idx {
        let ss = share(&values[i], t, n, rng)?;
        for (k, &j) in active_idx.iter().enumerate() {
            let sh = &ss.shares[&(k + 1)];
            transcript.log(Message {
                round,
                from: Party::Site(i),
                to: Party::Site(j),
                kind: MessageKind::Share,
                payload_digest: digest_field(&sh.elems),
                scalar_count: dim,
            });
            summed[k].add_assign(sh);
        }
    }
    // Sites forward their summed shares; the aggregator reconstructs.
    for (k, &j) in active_idx.iter().enumerate() {
        transcript.log(Message {
            round,
            from: Party::Site(j),
            to: Party::Aggregator,
            kind: MessageKind::SummedShare,
            payload_digest: digest_field(&summed[k].elems),
            scalar_count: dim,
        });
    }
    let refs: Vec<(usize, &FieldVector)> =
        summed.iter().enumerate().map(|(k, v)| (k + 1, v)).collect();
    reconstruct(field, &refs[..t], t)
}

/// Per-site zero-sum noise for one round.
#[derive(Debug, Clone)]
pub struct ZeroSumNoise {
    /// Real-valued e_s per site; `None` for dropped sites.
    pub per_site: Vec<Option<Vec<f64>>>,
    /// Field encoding of each active site's noise, in units of
    /// 1/(active * scale) ticks. These sum to the zero field element.
    pub field_encodings: Vec<Option<FieldVector>>,
    /// The broadcast total of the pre-recentering draws, as reals.
    pub broadcast_total: Vec<f64>,
    pub active_count: usize,
}

/// Recenter externally supplied per-site draws into zero-sum noise.
///
/// Exposed separately from [`generate_zero_sum_noise`] so tests can force
/// the draws. `hats[i]` is `None` for dropped sites.
pub fn zero_sum_from_draws<R: Rng + ?Sized>(
    hats: &[Option<Vec<f64>>],
    t: usize,
    spec: &QuantizationSpec,
    round: u64,
    transcript: &mut Transcript,
    rng: &mut R,
) -> Result<ZeroSumNoise> {
    let s = hats.len();
    let active: Vec<bool> = hats.iter().map(|h| h.is_some()).collect();
    let active_count = active.iter().filter(|&&a| a).count();
    let dim = hats
        .iter()
        .flatten()
        .next()
        .map(|v| v.len())
        .ok_or_else(|| CapeError::EmptyData("no active sites".into()))?;

    // Quantize every active draw; keep the tick counts for exact recentering.
    let mut quantized: Vec<Option<FieldVector>> = vec![None; s];
    for i in 0..s {
        if let Some(h) = &hats[i] {
            quantized[i] = Some(quantize_vec(h, spec, rng)?);
        }
    }
    let values: Vec<FieldVector> = quantized
        .iter()
        .map(|q| q.clone().unwrap_or_else(|| FieldVector::zeros(spec.field, dim)))
        .collect();
    let total = secure_sum(&values, t, &active, round, transcript, rng)?;
    transcript.log(Message {
        round,
        from: Party::Aggregator,
        to: Party::All,
        kind: MessageKind::BroadcastSum,
        payload_digest: digest_field(&total.elems),
        scalar_count: dim,
    });

    let field = spec.field;
    let a = active_count as i128;
    let denom = active_count as f64 * spec.scale;
    let total_ticks: Vec<i128> = total.elems.iter().map(|&v| field.to_signed(v)).collect();
    let broadcast_total: Vec<f64> =
        total.elems.iter().map(|&v| dequantize(v, spec)).collect();

    let mut per_site: Vec<Option<Vec<f64>>> = vec![None; s];
    let mut encodings: Vec<Option<FieldVector>> = vec![None; s];
    for i in 0..s {
        if let Some(q) = &quantized[i] {
            let mut e = Vec::with_capacity(dim);
            let mut enc = FieldVector::zeros(field, dim);
            for d in 0..dim {
                // e_s in ticks of 1/(active * scale): integer, so the field
                // encodings sum to zero exactly
                let ticks = a * field.to_signed(q.elems[d]) - total_ticks[d];
                enc.elems[d] = field.from_signed(ticks);
                e.push(ticks as f64 / denom);
            }
            per_site[i] = Some(e);
            encodings[i] = Some(enc);
        }
    }
    Ok(ZeroSumNoise { per_site, field_encodings: encodings, broadcast_total, active_count })
}

/// Algorithm: each active site draws N(0, tau_s^2) per coordinate, the sites
/// jointly learn only the total, and each site recenters by the average.
#[allow(clippy::too_many_arguments)]
pub fn generate_zero_sum_noise(
    tau_s: f64,
    s: usize,
    t: usize,
    len: usize,
    spec: &QuantizationSpec,
    seed: &StreamSeed,
    round: u64,
    active: &[bool],
    transcript: &mut Transcript,
) -> Result<ZeroSumNoise> {
    assert_eq!(active.len(), s);
    if s < 2 {
        return Err(CapeError::InvalidParameter("zero-sum noise needs S >= 2 sites".into()));
    }
    let mut hats: Vec<Option<Vec<f64>>> = vec![None; s];
    for (i, hat) in hats.iter_mut().enumerate() {
        if active[i] {
            let mut rng = seed.stream(&[i as u64, round, 0xe5]);
            let draws = if tau_s == 0.0 {
                vec![0.0; len]
            } else {
                let normal = Normal::new(0.0, tau_s).expect("valid tau");
                (0..len).map(|_| normal.sample(&mut rng)).collect()
            };
            *hat = Some(draws);
        }
    }
    let mut shamir_rng = seed.stream(&[u64::MAX, round, 0x5a]);
    zero_sum_from_draws(&hats, t, spec, round, transcript, &mut shamir_rng)
}
