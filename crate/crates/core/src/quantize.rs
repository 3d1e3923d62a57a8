//! Fixed-point weight ladders.
//!
//! Each matrix gets its own ladder of `2^bits` magnitudes starting at the
//! smallest absolute entry and ending at the largest, spaced `delta` apart.
//! Entries snap to the nearest rung by magnitude and keep their sign, so a
//! quantized matrix holds at most `2 * 2^bits` distinct values.

use serde::{Deserialize, Serialize};

use crate::dblstm::DbLstmWeights;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAX_BITS: u32 = 16;

// Relative slack for deciding that a magnitude sits exactly halfway between rungs.
const TIE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u32,
    /// Smallest absolute entry; the first rung.
    pub w_min: f64,
    /// Largest absolute entry.
    pub w_max: f64,
    /// Rung spacing, zero when every magnitude is equal.
    pub delta: f64,
}

impl QuantSpec {
    pub fn levels(&self) -> usize {
        1usize << self.bits
    }

    /// Magnitude of rung `j`.
    pub fn state(&self, j: usize) -> f64 {
        self.w_min + j as f64 * self.delta
    }

    /// Snaps one value onto the signed ladder. Exact half-way magnitudes go to
    /// the lower rung; zero maps to `+w_min`.
    pub fn quantize_value(&self, x: f64) -> f64 {
        let sign = if x < 0.0 { -1.0 } else { 1.0 };
        if self.delta == 0.0 {
            return sign * self.w_min;
        }
        let pos = (x.abs() - self.w_min) / self.delta;
        let top = (self.levels() - 1) as f64;
        let j = (pos - 0.5 - TIE_SLACK).ceil().clamp(0.0, top);
        sign * self.state(j as usize)
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::Config(format!("quantization bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

/// Ladder bounds taken from the absolute values of `m`.
pub fn derive_spec(m: &Matrix, bits: u32) -> Result<QuantSpec> {
    check_bits(bits)?;
    if m.is_empty() {
        return Err(Error::Config("cannot quantize an empty matrix".into()));
    }
    let (w_min, w_max) =
        m.data().iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    let delta = if w_max > w_min { (w_max - w_min) / ((1u64 << bits) - 1) as f64 } else { 0.0 };
    Ok(QuantSpec { bits, w_min, w_max, delta })
}

pub fn quantize_matrix(m: &Matrix, spec: &QuantSpec) -> Matrix {
    m.map(|v| spec.quantize_value(v))
}

/// Derives a spec for `m` and snaps it in place.
pub fn quantize_in_place(m: &mut Matrix, bits: u32) -> Result<QuantSpec> {
    let spec = derive_spec(m, bits)?;
    for v in m.data_mut() {
        *v = spec.quantize_value(*v);
    }
    Ok(spec)
}

/// Quantizes each weight matrix against its own ladder; `b` is untouched.
pub fn quantize_weights(w: &DbLstmWeights, bits: u32) -> Result<DbLstmWeights> {
    let mut q = w.clone();
    for m in q.matrices_mut() {
        quantize_in_place(m, bits)?;
    }
    Ok(q)
}

/// Ladder of every named matrix, for export alongside quantized weights.
pub fn weight_specs(w: &DbLstmWeights, bits: u32) -> Result<Vec<(String, QuantSpec)>> {
    w.named_matrices().into_iter().map(|(name, m)| Ok((name, derive_spec(m, bits)?))).collect()
}
