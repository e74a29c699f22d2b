//! Shamir t-out-of-n secret sharing over Z_lambda, per coordinate.

use crate::error::{CapeError, Result};
use crate::field::{Field, FieldVector};
use rand::Rng;
use std::collections::BTreeMap;

/// Shares of one secret vector, keyed by party index (1-based evaluation
/// points). Any `threshold_t` shares reconstruct; fewer reveal nothing.
#[derive(Debug, Clone)]
pub struct ShareSet {
    pub shares: BTreeMap<usize, FieldVector>,
    pub threshold_t: usize,
    pub n_parties: usize,
}

/// Split a secret vector into n shares with reconstruction threshold t.
///
/// Per coordinate: a uniformly random polynomial of degree t-1 with the
/// secret as constant term, evaluated at x = 1..n.
pub fn share<R: Rng + ?Sized>(
    secret: &FieldVector,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<ShareSet> {
    let field = secret.field;
    if t == 0 || t > n {
        return Err(CapeError::InvalidParameter(format!(
            "threshold t = {t} must satisfy 1 <= t <= n = {n}"
        )));
    }
    if n as u64 >= field.modulus {
        return Err(CapeError::InvalidParameter(format!(
            "n = {n} parties do not fit the field of size {}",
            field.modulus
        )));
    }
    let dim = secret.dim();
    let mut shares: BTreeMap<usize, FieldVector> =
        (1..=n).map(|i| (i, FieldVector::zeros(field, dim))).collect();
    let mut coeffs = vec![0u64; t];
    for (d, &s0) in secret.elems.iter().enumerate() {
        coeffs[0] = s0;
        for c in coeffs.iter_mut().skip(1) {
            *c = field.sample(rng);
        }
        for i in 1..=n {
            // Horner evaluation at x = i
            let x = i as u64;
            let mut acc = 0u64;
            for &c in coeffs.iter().rev() {
                acc = field.add(field.mul(acc, x), c);
            }
            shares.get_mut(&i).unwrap().elems[d] = acc;
        }
    }
    Ok(ShareSet { shares, threshold_t: t, n_parties: n })
}

/// Lagrange interpolation at zero from at least t (index, share) pairs.
pub fn reconstruct(
    field: Field,
    shares: &[(usize, &FieldVector)],
    t: usize,
) -> Result<FieldVector> {
    if shares.len() < t {
        return Err(CapeError::InsufficientShares { got: shares.len(), needed: t });
    }
    let used = &shares[..t];
    let dim = used[0].1.dim();
    // Lagrange basis weights at x = 0
    let mut weights = Vec::with_capacity(t);
    for (k, &(xk, _)) in used.iter().enumerate() {
        let xk = xk as u64;
        let mut num = 1u64;
        let mut den = 1u64;
        for (j, &(xj, _)) in used.iter().enumerate() {
            if j == k {
                continue;
            }
            let xj = xj as u64;
            num = field.mul(num, field.sub(0, xj));
            den = field.mul(den, field.sub(xk, xj));
        }
        weights.push(field.mul(num, field.inv(den)));
    }
    let mut out = FieldVector::zeros(field, dim);
    for d in 0..dim {
        let mut acc = 0u64;
        for (w, &(_, sv)) in weights.iter().zip(used.iter()) {
            acc = field.add(acc, field.mul(*w, sv.elems[d]));
        }
        out.elems[d] = acc;
    }
    Ok(out)
}

impl ShareSet {
    /// Reconstruct from the first t shares.
    pub fn reconstruct(&self) -> Result<FieldVector> {
        let field = self.shares.values().next().map(|v| v.field).ok_or(
            CapeError::InsufficientShares { got: 0, needed: self.threshold_t },
        )?;
        let refs: Vec<(usize, &FieldVector)> =
            self.shares.iter().map(|(&i, v)| (i, v)).collect();
        reconstruct(field, &refs, self.threshold_t)
    }
}
