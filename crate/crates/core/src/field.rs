//! Prime-field arithmetic and the stochastic real <-> field quantization
//! used by the simulated secure aggregation.
//!
//! The production modulus is the Mersenne prime 2^61 - 1; exhaustive tests
//! use a tiny field (lambda = 31) so share distributions can be enumerated.

use crate::error::{CapeError, Result};
use rand::Rng;

/// Production modulus: 2^61 - 1 (prime).
pub const MERSENNE_61: u64 = (1u64 << 61) - 1;

/// A prime field Z_lambda with runtime modulus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Field {
    pub modulus: u64,
}

impl Field {
    pub fn new(modulus: u64) -> Self {
        Self { modulus }
    }

    pub fn mersenne61() -> Self {
        Self { modulus: MERSENNE_61 }
    }

    #[inline]
    pub fn reduce_i128(&self, v: i128) -> u64 {
        let m = self.modulus as i128;
        (((v % m) + m) % m) as u64
    }

    #[inline]
    pub fn add(&self, a: u64, b: u64) -> u64 {
        let s = a as u128 + b as u128;
        (s % self.modulus as u128) as u64
    }

    #[inline]
    pub fn sub(&self, a: u64, b: u64) -> u64 {
        self.add(a, self.modulus - b % self.modulus)
    }

    #[inline]
    pub fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.modulus as u128) as u64
    }

    pub fn pow(&self, mut base: u64, mut exp: u64) -> u64 {
        let mut acc = 1u64;
        base %= self.modulus;
        while exp > 0 {
            if exp & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            exp >>= 1;
        }
        acc
    }

    /// Multiplicative inverse by Fermat's little theorem.
    pub fn inv(&self, a: u64) -> u64 {
        debug_assert!(a % self.modulus != 0, "zero has no inverse");
        self.pow(a, self.modulus - 2)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.gen_range(0..self.modulus)
    }

    /// Map a signed tick count to its field representative.
    #[inline]
    pub fn from_signed(&self, ticks: i128) -> u64 {
        self.reduce_i128(ticks)
    }

    /// Centered-residue interpretation: values above lambda/2 are negative.
    #[inline]
    pub fn to_signed(&self, v: u64) -> i128 {
        if v > self.modulus / 2 {
            v as i128 - self.modulus as i128
        } else {
            v as i128
        }
    }
}

/// A vector over Z_lambda, the secure-aggregation wire type.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldVector {
    pub field: Field,
    pub elems: Vec<u64>,
}

impl FieldVector {
    pub fn zeros(field: Field, dim: usize) -> Self {
        Self { field, elems: vec![0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.elems.len()
    }

    pub fn add_assign(&mut self, other: &FieldVector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.elems.iter_mut().zip(&other.elems) {
            *a = self.field.add(*a, *b);
        }
    }
}

/// Parameters of the stochastic real <-> field mapping.
///
/// `scale` counts field ticks per real unit; reals outside +-clip_bound are
/// rejected. The signed payload range must fit in half the field.
#[derive(Debug, Clone, Copy)]
pub struct QuantizationSpec {
    pub scale: f64,
    pub field: Field,
    pub clip_bound: f64,
}

impl QuantizationSpec {
    pub fn new(scale: f64, field: Field, clip_bound: f64) -> Result<Self> {
        if !(scale > 0.0) || !(clip_bound > 0.0) {
            return Err(CapeError::InvalidParameter(
                "quantization scale and clip bound must be positive".into(),
            ));
        }
        if scale * clip_bound >= field.modulus as f64 / 2.0 {
            return Err(CapeError::InvalidParameter(format!(
                "scale * clip_bound = {} does not fit the signed field range lambda/2 = {}",
                scale * clip_bound,
                field.modulus / 2
            )));
        }
        Ok(Self { scale, field, clip_bound })
    }

    /// Default production mapping: 2^32 ticks per unit over 2^61 - 1,
    /// clip bound sized so 6-sigma noise plus payload keeps headroom.
    pub fn production(max_tau: f64) -> Self {
        let clip = 1e6 * max_tau.max(1e-6);
        Self::new((1u64 << 32) as f64, Field::mersenne61(), clip)
            .expect("production range fits the field")
    }
}

/// Unbiased stochastic rounding of a real onto the field grid.
pub fn quantize<R: Rng + ?Sized>(x: f64, spec: &QuantizationSpec, rng: &mut R) -> Result<u64> {
    if !x.is_finite() || x.abs() > spec.clip_bound {
        return Err(CapeError::QuantizationRange { value: x, clip_bound: spec.clip_bound });
    }
    let v = x * spec.scale;
    let lo = v.floor();
    let frac = v - lo;
    let ticks = if frac > 0.0 && rng.gen::<f64>() < frac {
        lo as i128 + 1
    } else {
        lo as i128
    };
    Ok(spec.field.from_signed(ticks))
}

/// Centered-residue interpretation divided by the tick scale.
pub fn dequantize(v: u64, spec: &QuantizationSpec) -> f64 {
    spec.field.to_signed(v) as f64 / spec.scale
}

/// Quantize a real slice into a field vector.
pub fn quantize_vec<R: Rng + ?Sized>(
    xs: &[f64],
    spec: &QuantizationSpec,
    rng: &mut R,
) -> Result<FieldVector> {
    let elems = xs.iter().map(|&x| quantize(x, spec, rng)).collect::<Result<Vec<_>>>()?;
    Ok(FieldVector { field: spec.field, elems })
}
