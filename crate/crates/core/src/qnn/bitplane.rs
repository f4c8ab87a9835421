//! Bitwise inner products over fixed-point bit planes.
//!
//! An `alpha`-bit value `v = s * k / (2^alpha - 1)` (sign `s`, magnitude
//! `k < 2^alpha`) is decomposed sign–magnitude into `alpha` bit planes.
//! The inner product of two vectors is then
//! `Σ_i Σ_j 2^(i+j) <plane_i(a), plane_j(b)>` rescaled by the shared grid
//! scale, which equals the arithmetic inner product of the quantized real
//! values. Planes are packed into `u64` words so each plane pair costs a
//! handful of `and` + `popcount` operations per 64 lanes.

use crate::error::{Error, Result};
use crate::qnn::grid_scale;

const WORD_BITS: usize = 64;

fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

fn popcount_and(a: &[u64], b: &[u64]) -> i64 {
    let mut c = 0u32;
    for (x, y) in a.iter().zip(b) {
        c += (x & y).count_ones();
    }
    c as i64
}

/// Sign vector of a binary (`alpha = 1`) quantized vector, one bit per
/// lane (`1` = +1, `0` = -1).
#[derive(Debug, Clone)]
pub struct PackedSigns {
    len: usize,
    bits: Vec<u64>,
}

impl PackedSigns {
    /// Pack a vector whose entries are exactly ±1.
    pub fn pack(values: &[f64]) -> Result<Self> {
        let mut bits = vec![0u64; words_for(values.len())];
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                bits[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            } else if v != -1.0 {
                return Err(Error::InvalidFixedPoint { value: v, alpha: 1 });
            }
        }
        Ok(Self { len: values.len(), bits })
    }

    /// XNOR-popcount inner product: matches minus mismatches.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.len != other.len {
            return Err(Error::ShapeMismatch(format!(
                "binary inner product: lengths {} vs {}",
                self.len, other.len
            )));
        }
        let mut mismatches = 0i64;
        for (a, b) in self.bits.iter().zip(&other.bits) {
            mismatches += (a ^ b).count_ones() as i64;
        }
        Ok((self.len as i64 - 2 * mismatches) as f64)
    }
}

/// Sign–magnitude bit planes of an `alpha`-bit fixed-point vector.
/// `pos[i]` / `neg[i]` hold plane `i` of the positive / negative entries.
#[derive(Debug, Clone)]
pub struct PackedPlanes {
    len: usize,
    alpha: u32,
    pos: Vec<Vec<u64>>,
    neg: Vec<Vec<u64>>,
}

impl PackedPlanes {
    /// Pack a vector whose entries lie on the `alpha`-bit grid
    /// `k / (2^alpha - 1)`, `|k| <= 2^alpha - 1`.
    pub fn pack(values: &[f64], alpha: u32) -> Result<Self> {
        if alpha < 2 || alpha >= 32 {
            return Err(Error::InvalidBitwidth { alpha, v: 32 });
        }
        let scale = grid_scale(alpha);
        let words = words_for(values.len());
        let mut pos = vec![vec![0u64; words]; alpha as usize];
        let mut neg = vec![vec![0u64; words]; alpha as usize];
        for (i, &v) in values.iter().enumerate() {
            let scaled = v * scale;
            let k = scaled.round();
            if !v.is_finite() || (scaled - k).abs() > 1e-6 || k.abs() > scale {
                return Err(Error::InvalidFixedPoint { value: v, alpha });
            }
            let mag = k.abs() as u64;
            let planes = if k >= 0.0 { &mut pos } else { &mut neg };
            for (bit, plane) in planes.iter_mut().enumerate() {
                if (mag >> bit) & 1 == 1 {
                    plane[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
                }
            }
        }
        Ok(Self { len: values.len(), alpha, pos, neg })
    }

    /// Bit-plane inner product, rescaled back to the real-valued grid.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.len != other.len {
            return Err(Error::ShapeMismatch(format!(
                "bit-plane inner product: lengths {} vs {}",
                self.len, other.len
            )));
        }
        if self.alpha != other.alpha {
            return Err(Error::ShapeMismatch(format!(
                "bit-plane inner product: bitwidths {} vs {}",
                self.alpha, other.alpha
            )));
        }
        let mut acc = 0i64;
        for (i, (ap, an)) in self.pos.iter().zip(&self.neg).enumerate() {
            for (j, (bp, bn)) in other.pos.iter().zip(&other.neg).enumerate() {
                let signed = popcount_and(ap, bp) - popcount_and(ap, bn)
                    - popcount_and(an, bp)
                    + popcount_and(an, bn);
                acc += signed << (i + j);
            }
        }
        let scale = grid_scale(self.alpha);
        Ok(acc as f64 / (scale * scale))
    }
}

/// Inner product of two `alpha`-bit quantized vectors computed with
/// bitwise plane operations (`alpha > 1`). Equals the arithmetic inner
/// product of the quantized real values.
pub fn bitplane_inner_product(a: &[f64], b: &[f64], alpha: u32) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "bit-plane inner product: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    PackedPlanes::pack(a, alpha)?.dot(&PackedPlanes::pack(b, alpha)?)
}

/// XNOR-popcount inner product of two ±1 vectors.
pub fn binary_inner_product(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "binary inner product: lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    PackedSigns::pack(a)?.dot(&PackedSigns::pack(b)?)
}
