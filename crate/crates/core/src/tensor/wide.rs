//! Division and elementary functions on double-double values. The library's
//! own are only f64-accurate and not smooth at that level, which finite
//! differences see.

use twofloat::consts::LN_2;
use twofloat::TwoFloat;

// exp(r) for |r| ≤ ln2/2 is summed at r/2^HALVINGS, then squared back
const HALVINGS: i32 = 5;
const TERMS: usize = 14;

fn scale(x: TwoFloat, k: i32) -> TwoFloat {
    // two factors so neither over- or underflows on its own
    let a = k / 2;
    x * 2f64.powi(a) * 2f64.powi(k - a)
}

/// Long division by the leading word, with exact residuals.
pub(crate) fn div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    if !q1.is_finite() || q1 == 0.0 {
        return TwoFloat::from(q1);
    }
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

pub(crate) fn exp(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    if hi.is_nan() {
        return x;
    }
    if hi < -746.0 {
        return TwoFloat::from(0.0);
    }
    if hi > 710.0 {
        return TwoFloat::from(f64::INFINITY);
    }
    let k = (hi / LN_2.hi()).round();
    let r = (x - LN_2 * k) / 2f64.powi(HALVINGS);
    let mut sum = TwoFloat::from(1.0);
    for n in (1..=TERMS).rev() {
        sum = sum * r / n as f64 + 1.0;
    }
    for _ in 0..HALVINGS {
        sum = sum * sum;
    }
    scale(sum, k as i32)
}

pub(crate) fn ln(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    if hi.is_nan() || hi < 0.0 {
        return TwoFloat::from(f64::NAN);
    }
    if hi == 0.0 {
        return TwoFloat::from(f64::NEG_INFINITY);
    }
    if hi.is_infinite() {
        return x;
    }
    // Newton on exp(y) = x, each step doubling the correct digits
    let mut y = TwoFloat::from(hi.ln());
    for _ in 0..2 {
        y = y + x * exp(-y) - 1.0;
    }
    y
}

pub(crate) fn tanh(x: TwoFloat) -> TwoFloat {
    let a = if x.hi() < 0.0 { -x } else { x };
    let t = exp(a * -2.0);
    let y = div(1.0 - t, t + 1.0);
    if x.hi() < 0.0 {
        -y
    } else {
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dd(v: f64) -> TwoFloat {
        TwoFloat::from(v)
    }

    #[test]
    fn agrees_with_f64_to_its_precision() {
        for v in [-30.0, -3.7, -0.5, -1e-6, 0.0, 1e-9, 0.25, 1.0, 2.5, 40.0] {
            let e = exp(dd(v)).hi();
            assert!((e - v.exp()).abs() <= 4.0 * f64::EPSILON * v.exp(), "{v}");
            assert!((tanh(dd(v)).hi() - v.tanh()).abs() <= 4.0 * f64::EPSILON, "{v}");
            if v > 0.0 {
                assert!(
                    (ln(dd(v)).hi() - v.ln()).abs() <= 4.0 * f64::EPSILON * v.ln().abs().max(1.0),
                    "{v}"
                );
            }
        }
    }

    #[test]
    fn beyond_f64() {
        // e and ln 2 to double-double
        let e = exp(dd(1.0));
        assert!(((e - twofloat::consts::E).hi()).abs() < 1e-30);
        assert!(((ln(dd(2.0)) - LN_2).hi()).abs() < 1e-30);
        let third = div(dd(1.0), dd(3.0));
        assert!(((third * 3.0) - 1.0).hi().abs() < 1e-31);
        let q = div(e, dd(7.0) + 1e-20);
        assert!(((q * (dd(7.0) + 1e-20)) - e).hi().abs() < 1e-30);
        // exp(a)·exp(−a) = 1 and ln(exp(a)) = a
        for v in [-7.3, -0.01, 0.3, 5.5] {
            assert!((exp(dd(v)) * exp(dd(-v)) - 1.0).hi().abs() < 1e-30);
            let back = ln(exp(dd(v))) - v;
            assert!(back.hi().abs() < 1e-30, "{v}");
        }
        // tanh(x) = (e^{2x}−1)/(e^{2x}+1) with the series near zero: x − x³/3
        let x = 1e-8;
        let t = tanh(dd(x)) - x;
        assert!((t.hi() + x * x * x / 3.0).abs() < 1e-30);
    }

    #[test]
    fn smooth_at_double_double_scale() {
        // third differences over 1e-9 steps are ~1e-27 for a smooth function
        for f in [exp as fn(TwoFloat) -> TwoFloat, tanh, |x| div(dd(1.0), x + 2.0)] {
            for x0 in [-1.7, 0.01, 0.3, 2.2] {
                let v: Vec<TwoFloat> = (0..4).map(|j| f(dd(x0) + dd(1e-9) * j as f64)).collect();
                let d3 = v[3] - v[2] * 3.0 + v[1] * 3.0 - v[0];
                assert!(d3.hi().abs() < 1e-24, "{x0}: {:e}", d3.hi());
            }
        }
    }

    #[test]
    fn limits() {
        assert_eq!(exp(dd(-800.0)).hi(), 0.0);
        assert!(exp(dd(800.0)).hi().is_infinite());
        assert!(ln(dd(-1.0)).hi().is_nan());
        assert_eq!(ln(dd(0.0)).hi(), f64::NEG_INFINITY);
        assert_eq!(tanh(dd(-400.0)).hi(), -1.0);
    }
}
