//! Globally adaptive Gauss–Kronrod (7/15) quadrature.

use crate::error::{Error, Result};

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

/// Gauss weights for the nodes XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureResult {
    pub value: f64,
    pub abs_error: f64,
    pub intervals: usize,
    pub evaluations: usize,
}

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Segment {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for (i, x) in XGK[..7].iter().enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kron += WGK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    Segment {
        a,
        b,
        value: kron * half,
        error: ((kron - gauss) * half).abs(),
    }
}

/// Integrates `f` over `[a, b]` until the summed error estimate falls below
/// `max(abs_tol, rel_tol * |value|)` or `max_intervals` is exhausted.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<QuadratureResult> {
    integrate_breaks(f, &[a, b], abs_tol, rel_tol, max_intervals)
}

/// Like [`integrate`] over `[breaks[0], breaks[last]]`, seeding the adaptive
/// scheme with one segment per consecutive pair of breakpoints.
///
/// A single 15-point rule over a long interval can miss a narrow peak entirely
/// and report a zero error; breakpoints placed at the integrand's scale avoid that.
pub fn integrate_breaks<F: Fn(f64) -> f64>(
    f: F,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_intervals: usize,
) -> Result<QuadratureResult> {
    let (Some(&a), Some(&b)) = (breaks.first(), breaks.last()) else {
        return Err(Error::Numerical("no integration bounds given".into()));
    };
    if breaks.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("integration bounds [{a}, {b}] not finite")));
    }
    let mut segments: Vec<Segment> = breaks
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| kronrod(&f, w[0], w[1]))
        .collect();
    if segments.is_empty() {
        return Ok(QuadratureResult {
            value: 0.0,
            abs_error: 0.0,
            intervals: 0,
            evaluations: 0,
        });
    }
    let mut evaluations = 15 * segments.len();
    loop {
        let value: f64 = segments.iter().map(|s| s.value).sum();
        let error: f64 = segments.iter().map(|s| s.error).sum();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "integrand is not finite on [{a}, {b}]"
            )));
        }
        if error <= abs_tol.max(rel_tol * value.abs()) {
            return Ok(QuadratureResult {
                value,
                abs_error: error,
                intervals: segments.len(),
                evaluations,
            });
        }
        if segments.len() >= max_intervals.max(breaks.len()) {
            return Err(Error::Numerical(format!(
                "quadrature on [{a}, {b}] did not converge: value {value}, error estimate {error} \
                 after {} subintervals",
                segments.len()
            )));
        }
        let (worst, _) = segments
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.error.total_cmp(&y.1.error))
            .expect("at least one segment");
        let seg = segments.swap_remove(worst);
        let mid = 0.5 * (seg.a + seg.b);
        if mid <= seg.a || mid >= seg.b {
            return Err(Error::Numerical(format!(
                "quadrature interval [{}, {}] cannot be bisected further",
                seg.a, seg.b
            )));
        }
        segments.push(kronrod(&f, seg.a, mid));
        segments.push(kronrod(&f, mid, seg.b));
        evaluations += 30;
    }
}

/// `[a, a + scale, a + 2 scale, a + 4 scale, ...]` capped at `b`.
pub fn geometric_breaks(a: f64, b: f64, scale: f64) -> Vec<f64> {
    let mut out = vec![a];
    if scale > 0.0 && scale.is_finite() {
        let mut step = scale;
        while a + step < b {
            out.push(a + step);
            step *= 2.0;
        }
    }
    out.push(b);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let r = integrate(|x| x.powi(5) - 2.0 * x * x + 1.0, -1.0, 2.0, 1e-14, 0.0, 10).unwrap();
        let exact = (64.0 - 1.0) / 6.0 - 2.0 * (8.0 + 1.0) / 3.0 + 3.0;
        assert!((r.value - exact).abs() < 1e-13);
        assert_eq!(r.intervals, 1);
    }

    #[test]
    fn peaked_integrand_converges_with_breaks() {
        let breaks = geometric_breaks(0.0, 500.0, 1.0 / 400.0);
        let r = integrate_breaks(|x| (-x * 50.0).exp(), &breaks, 1e-12, 0.0, 500).unwrap();
        assert!((r.value - 1.0 / 50.0).abs() < 1e-12);
        let r = integrate(|x| (-x * 50.0).exp(), 0.0, 2.0, 1e-12, 0.0, 500).unwrap();
        assert!((r.value - (1.0 - (-100.0f64).exp()) / 50.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_breaks_cover_the_interval() {
        assert_eq!(geometric_breaks(1.0, 10.0, 1.0), vec![1.0, 2.0, 3.0, 5.0, 9.0, 10.0]);
        assert_eq!(geometric_breaks(0.0, 1.0, 0.0), vec![0.0, 1.0]);
    }

    #[test]
    fn reversed_and_empty_intervals() {
        let r = integrate(|x| x, 1.0, 0.0, 1e-12, 0.0, 10).unwrap();
        assert!((r.value + 0.5).abs() < 1e-15);
        assert_eq!(integrate(|x| x, 3.0, 3.0, 1e-12, 0.0, 10).unwrap().value, 0.0);
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let err = integrate(|x| (1.0 / x).sin(), 1e-9, 1.0, 1e-15, 0.0, 4).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)));
    }
}
