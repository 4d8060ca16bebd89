//! Deterministic fixed-point arithmetic kernel.
//!
//! All values are signed 32-bit integers interpreted as `raw / 2^frac_bits`.
//! Every operation rounds to nearest, ties to even, and saturates at the
//! 32-bit bound instead of wrapping. Saturation is recorded in a sticky flag
//! on the context so a run can later report whether quantisation bounds were
//! hit. Only integer operations are used, so results are bit-identical on
//! any platform.

use serde::{Deserialize, Serialize};
use std::cell::Cell;

/// A fixed-point number. The binary point position lives in [`FxpCtx`], not
/// in the value itself; mixing values from contexts with different
/// `frac_bits` is a caller error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct FixedPoint {
    pub raw: i32,
}

impl FixedPoint {
    pub const ZERO: FixedPoint = FixedPoint { raw: 0 };
    pub const MAX: FixedPoint = FixedPoint { raw: i32::MAX };
    pub const MIN: FixedPoint = FixedPoint { raw: i32::MIN + 1 };

    pub fn from_raw(raw: i32) -> Self {
        FixedPoint { raw }
    }
}

/// A normalised next-token distribution: one entry per vocabulary id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbRow {
    pub entries: Vec<FixedPoint>,
}

impl ProbRow {
    /// Index of the maximum entry, ties broken towards the lowest id.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, i32)> = None;
        for (i, p) in self.entries.iter().enumerate() {
            match best {
                Some((_, b)) if p.raw <= b => {}
                _ => best = Some((i, p.raw)),
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Arithmetic context: binary point position plus the sticky saturation flag
/// for one machine run.
#[derive(Debug)]
pub struct FxpCtx {
    frac_bits: u32,
    saturated: Cell<bool>,
}

/// log2(e) scaled by 2^30, used to fold the natural-exponential softmax into
/// base-2 exponentiation.
const LOG2_E_Q30: i64 = 1_549_082_005; // round(1.4426950408889634 * 2^30)

/// Cubic coefficients for 2^f on f in [0,1), scaled by 2^30. The constant
/// term is exactly 1 and the coefficients sum to exactly 2^30, so the
/// approximation is exact at both endpoints.
const EXP2_C1_Q30: i64 = 746_706_207;
const EXP2_C2_Q30: i64 = 242_996_024;
const EXP2_C3_Q30: i64 = 84_039_593;

/// Round-to-nearest-even right shift. Works for negative values because `>>`
/// floors and the masked remainder is non-negative.
fn rne_shift(v: i128, s: u32) -> i128 {
    if s == 0 {
        return v;
    }
    let half = 1i128 << (s - 1);
    let frac = v & ((1i128 << s) - 1);
    let base = v >> s;
    if frac > half || (frac == half && (base & 1) == 1) {
        base + 1
    } else {
        base
    }
}

impl FxpCtx {
    pub fn new(frac_bits: u32) -> Self {
        assert!((1..=30).contains(&frac_bits), "frac_bits out of range");
        FxpCtx {
            frac_bits,
            saturated: Cell::new(false),
        }
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    /// 1.0 in raw units; also the per-entry resolution bound ("one quantum"
    /// means one raw unit).
    pub fn one(&self) -> FixedPoint {
        FixedPoint::from_raw(1i32 << self.frac_bits)
    }

    /// Whether any operation on this context has saturated so far.
    pub fn saturated(&self) -> bool {
        self.saturated.get()
    }

    pub fn clear_saturation(&self) {
        self.saturated.set(false);
    }

    fn clamp(&self, v: i128) -> FixedPoint {
        if v > i32::MAX as i128 {
            self.saturated.set(true);
            FixedPoint::MAX
        } else if v < (i32::MIN + 1) as i128 {
            self.saturated.set(true);
            FixedPoint::MIN
        } else {
            FixedPoint::from_raw(v as i32)
        }
    }

    pub fn from_int(&self, n: i32) -> FixedPoint {
        self.clamp((n as i128) << self.frac_bits)
    }

    pub fn to_f64(&self, x: FixedPoint) -> f64 {
        x.raw as f64 / (1u64 << self.frac_bits) as f64
    }

    pub fn from_f64(&self, v: f64) -> FixedPoint {
        let scaled = v * (1u64 << self.frac_bits) as f64;
        self.clamp(scaled.round_ties_even() as i128)
    }

    pub fn add(&self, a: FixedPoint, b: FixedPoint) -> FixedPoint {
        self.clamp(a.raw as i128 + b.raw as i128)
    }

    pub fn sub(&self, a: FixedPoint, b: FixedPoint) -> FixedPoint {
        self.clamp(a.raw as i128 - b.raw as i128)
    }

    pub fn neg(&self, a: FixedPoint) -> FixedPoint {
        self.clamp(-(a.raw as i128))
    }

    pub fn mul(&self, a: FixedPoint, b: FixedPoint) -> FixedPoint {
        let prod = a.raw as i128 * b.raw as i128;
        self.clamp(rne_shift(prod, self.frac_bits))
    }

    /// acc + a*b with a single rounding on the product.
    pub fn mul_acc(&self, acc: FixedPoint, a: FixedPoint, b: FixedPoint) -> FixedPoint {
        let prod = rne_shift(a.raw as i128 * b.raw as i128, self.frac_bits);
        self.clamp(acc.raw as i128 + prod)
    }

    /// Deterministic 2^x: integer shift for the integer part, cubic
    /// polynomial on the fractional part. Exact at representable integer
    /// powers; underflow clamps to zero, overflow saturates.
    pub fn exp2(&self, x: FixedPoint) -> FixedPoint {
        let fb = self.frac_bits;
        let n = (x.raw >> fb) as i64; // floor of x
        let fr = (x.raw as i64) - (n << fb); // 0 .. 2^fb - 1
        let f30 = fr << (30 - fb);
        // Horner in Q30.
        let mut acc = EXP2_C3_Q30;
        acc = rne_shift(acc as i128 * f30 as i128, 30) as i64;
        acc += EXP2_C2_Q30;
        acc = rne_shift(acc as i128 * f30 as i128, 30) as i64;
        acc += EXP2_C1_Q30;
        acc = rne_shift(acc as i128 * f30 as i128, 30) as i64;
        acc += 1i64 << 30; // 2^f in Q30, in [2^30, 2^31)
        let shift = 30 - fb as i64 - n;
        if shift >= 63 {
            FixedPoint::ZERO
        } else if shift > 0 {
            FixedPoint::from_raw(rne_shift(acc as i128, shift as u32) as i32)
        } else {
            self.clamp((acc as i128) << (-shift) as u32)
        }
    }

    /// Deterministic base-2 logarithm via leading-bit extraction and
    /// repeated squaring of the mantissa; accurate to the output quantum and
    /// exact at powers of two.
    pub fn log2(&self, p: FixedPoint) -> Result<FixedPoint, NumericsError> {
        if p.raw <= 0 {
            return Err(NumericsError::LogDomain { raw: p.raw });
        }
        let fb = self.frac_bits;
        let msb = 31 - (p.raw as u32).leading_zeros(); // position of leading 1
        let exp = msb as i64 - fb as i64;
        // Mantissa in [1, 2) as Q30.
        let mut m = (p.raw as u64) << (30 - msb);
        let extract = fb + 2;
        let mut bits: u64 = 0;
        for _ in 0..extract {
            m = (m * m) >> 30;
            if m >= 2u64 << 30 {
                m >>= 1;
                bits = (bits << 1) | 1;
            } else {
                bits <<= 1;
            }
        }
        let frac_part = rne_shift(bits as i128, 2) as i64;
        self.checked(
            (exp << fb) + frac_part,
        )
    }

    fn checked(&self, v: i64) -> Result<FixedPoint, NumericsError> {
        Ok(self.clamp(v as i128))
    }

    /// 1/sqrt(n) for a positive integer n, via exp2(-log2(n)/2). Exact for
    /// powers of four; used as the attention score scale.
    pub fn inv_sqrt_int(&self, n: u32) -> FixedPoint {
        assert!(n > 0);
        let l = self.log2(self.from_int(n as i32)).expect("positive");
        let half_l = FixedPoint::from_raw(rne_shift(l.raw as i128, 1) as i32);
        self.exp2(self.neg(half_l))
    }

    /// Softmax over scaled logits. The max logit is subtracted first (shift
    /// invariance is bit-exact), the natural-log-to-log2 constant is folded
    /// into the scale, and the row is renormalised so that the entries sum
    /// to exactly 1.0; the flooring residue goes to the argmax entry, which
    /// preserves the argmax.
    pub fn softmax(&self, logits: &[FixedPoint], scale: FixedPoint) -> ProbRow {
        assert!(!logits.is_empty(), "softmax over empty logits");
        let fb = self.frac_bits;
        let max = logits.iter().map(|x| x.raw).max().unwrap();
        // scale * log2(e), computed in Q30 then brought back to fb.
        let s2 = rne_shift(scale.raw as i128 * LOG2_E_Q30 as i128, 30) as i64;
        let mut weights: Vec<u64> = Vec::with_capacity(logits.len());
        for x in logits {
            let d = x.raw as i128 - max as i128; // <= 0
            let scaled = self.clamp(rne_shift(d * s2 as i128, fb));
            let w = self.exp2(scaled);
            debug_assert!(w.raw >= 0);
            weights.push(w.raw as u64);
        }
        // Residue receiver: largest weight, lowest index on ties.
        let wmax = *weights.iter().max().unwrap();
        let arg = weights.iter().position(|&w| w == wmax).unwrap();
        let sum: u128 = weights.iter().map(|&w| w as u128).sum();
        let one = 1i64 << fb;
        let mut entries: Vec<FixedPoint> = Vec::with_capacity(weights.len());
        let mut total: i64 = 0;
        for &w in &weights {
            let p = ((w as u128) << fb) / sum; // floor
            let p = p as i64;
            total += p;
            entries.push(FixedPoint::from_raw(p as i32));
        }
        let deficit = one - total;
        debug_assert!(deficit >= 0);
        entries[arg].raw += deficit as i32;
        ProbRow { entries }
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("log2 of non-positive value (raw {raw})")]
    LogDomain { raw: i32 },
}
