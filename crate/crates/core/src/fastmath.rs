//! Branch-free `exp` on `(−∞, 0]` and `ln(1+e)` on `[0, 1]`.
//!
//! Softplus evaluation dominates every shallow-network experiment. Library
//! `exp`/`ln_1p` are opaque calls the compiler cannot vectorize; these are
//! plain arithmetic on narrow domains and stay within a few ulp of them.

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const LOG2E: f64 = core::f64::consts::LOG2_E;
// adding 1.5·2⁵² rounds to an integer held in the low mantissa bits
const ROUND: f64 = 6_755_399_441_055_744.0;
// below this the result would be subnormal; exp(−708) ≈ 3e−308 is returned
const FLOOR: f64 = -708.0;

/// `eˣ` for `x ≤ 0`; inputs below −708 return `e^−708`.
#[inline(always)]
pub(crate) fn exp_nonpositive(x: f64) -> f64 {
    let x = x.max(FLOOR);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor to degree 13 (|r| ≤ ln2/2 leaves a remainder below 1e−17),
    // evaluated Estrin-style to keep the dependency chain short
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let c = |a: f64, b: f64| a + b * r;
    let q0 = c(1.0, 1.0) + r2 * c(0.5, 1.0 / 6.0);
    let q1 = c(1.0 / 24.0, 1.0 / 120.0) + r2 * c(1.0 / 720.0, 1.0 / 5_040.0);
    let q2 = c(1.0 / 40_320.0, 1.0 / 362_880.0) + r2 * c(1.0 / 3_628_800.0, 1.0 / 39_916_800.0);
    let q3 = c(1.0 / 479_001_600.0, 1.0 / 6_227_020_800.0);
    let p = (q0 + r4 * q1) + r8 * (q2 + r4 * q3);
    let k = t.to_bits().wrapping_sub(ROUND.to_bits()) as i64;
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    p * scale
}

/// `ln(1 + e)` for `0 ≤ e ≤ 1`, as `2·atanh(e / (2 + e))`.
#[inline(always)]
pub(crate) fn ln_1p_unit(e: f64) -> f64 {
    let s = e / (2.0 + e);
    let s2 = s * s;
    let s4 = s2 * s2;
    let s8 = s4 * s4;
    let s16 = s8 * s8;
    // odd reciprocals 1/(2k+1), k = 0..=17, Estrin-style in s²;
    // s ≤ 1/3, so the dropped terms are below 1e−17
    let c = |k: u32| 1.0 / f64::from(2 * k + 1);
    let pair = |k: u32| c(k) + s2 * c(k + 1);
    let quad = |k: u32| pair(k) + s4 * pair(k + 2);
    let oct = |k: u32| quad(k) + s8 * quad(k + 4);
    let p = oct(0) + s16 * (oct(8) + s16 * pair(16));
    2.0 * s * p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / b.abs()
        }
    }

    #[test]
    fn exp_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -(i as f64) * 3.5e-3;
            worst = worst.max(rel(exp_nonpositive(x), libm::exp(x)));
        }
        assert!(worst < 1e-15, "worst relative error {worst:e}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(rel(exp_nonpositive(-1e4), libm::exp(FLOOR)) < 1e-15);
    }

    #[test]
    fn ln_1p_matches_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..=100_000 {
            let e = i as f64 * 1e-5;
            worst = worst.max(rel(ln_1p_unit(e), libm::log1p(e)));
        }
        for i in 0..2_000 {
            let e = libm::exp(-(i as f64) * 0.35);
            worst = worst.max(rel(ln_1p_unit(e), libm::log1p(e)));
        }
        assert!(worst < 1e-15, "worst relative error {worst:e}");
        assert_eq!(ln_1p_unit(0.0), 0.0);
    }
}
