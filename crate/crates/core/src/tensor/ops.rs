//! Raw numeric kernels shared by the forward and backward rules.

/// `c (+)= op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is logically `m × k` and `b` is `k × n`; with `a_t` set, `a` is stored
/// as `k × m` (and likewise `b_t` means `b` is stored as `n × k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices have been checked to cover m×k, k×n and m×n
    // elements and the strides above address exactly those ranges.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits a shape around `axis` into (outer count, axis length, inner stride).
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const LOG2E: f64 = std::f64::consts::LOG2_E;
#[allow(clippy::excessive_precision)]
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
#[allow(clippy::excessive_precision)]
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
// 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// Splits `x = k ln2 + r` with `|r| <= ln2/2` and returns `(2^k, expm1(r))`.
///
/// Branch-free so that loops over it vectorize.
// max/min send NaN to the lower bound; clamp would propagate it.
#[allow(clippy::manual_clamp)]
#[inline(always)]
fn exp_parts(x: f64) -> (f64, f64) {
    let x = x.max(-708.0).min(708.0);
    let shifted = x * LOG2E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let scale = f64::from_bits(shifted.to_bits().wrapping_add(1023) << 52);
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of expm1 through r^13; truncation error < 1e-17 on |r| <= 0.347.
    let mut q = 1.0 / 6_227_020_800.0;
    q = q * r + 1.0 / 479_001_600.0;
    q = q * r + 1.0 / 39_916_800.0;
    q = q * r + 1.0 / 3_628_800.0;
    q = q * r + 1.0 / 362_880.0;
    q = q * r + 1.0 / 40_320.0;
    q = q * r + 1.0 / 5_040.0;
    q = q * r + 1.0 / 720.0;
    q = q * r + 1.0 / 120.0;
    q = q * r + 1.0 / 24.0;
    q = q * r + 1.0 / 6.0;
    q = q * r + 0.5;
    (scale, r + r * r * q)
}

#[inline(always)]
pub(crate) fn fast_exp(x: f64) -> f64 {
    let (scale, p) = exp_parts(x);
    scale + scale * p
}

#[inline(always)]
pub(crate) fn fast_expm1(x: f64) -> f64 {
    let (scale, p) = exp_parts(x);
    scale * p + (scale - 1.0)
}

#[inline(always)]
pub(crate) fn fast_tanh(x: f64) -> f64 {
    let e = fast_expm1(-2.0 * x.abs());
    (-e / (2.0 + e)).copysign(x)
}

#[inline(always)]
pub(crate) fn fast_sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + fast_exp(-x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f64, b: f64) -> f64 {
        if a == b {
            0.0
        } else {
            (a - b).abs() / a.abs().max(b.abs())
        }
    }

    #[test]
    fn exp_family_matches_libm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = [0.0f64; 4];
        for i in 0..200_000 {
            let x: f64 = match i % 3 {
                0 => rng.random_range(-1.0..1.0),
                1 => rng.random_range(-40.0..40.0),
                _ => rng.random_range(-700.0..700.0),
            };
            worst[0] = worst[0].max(rel(fast_exp(x), x.exp()));
            worst[1] = worst[1].max(rel(fast_expm1(x), x.exp_m1()));
            worst[2] = worst[2].max(rel(fast_tanh(x), x.tanh()));
            worst[3] = worst[3].max(rel(fast_sigmoid(x), sigmoid(x)));
        }
        for w in worst {
            assert!(w < 1e-14, "{worst:?}");
        }
        for x in [1e-300, 1e-20, 1e-9, -3e-7] {
            assert!(rel(fast_tanh(x), x.tanh()) < 1e-14);
            assert!(rel(fast_expm1(x), x.exp_m1()) < 1e-14);
        }
    }

    #[test]
    fn fixed_points() {
        assert_eq!(fast_tanh(0.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(fast_sigmoid(0.0), 0.5);
        assert_eq!(fast_exp(0.0), 1.0);
        assert_eq!(fast_tanh(50.0), 1.0);
        assert_eq!(fast_tanh(-50.0), -1.0);
        assert!(fast_sigmoid(-800.0) > 0.0);
    }
}
