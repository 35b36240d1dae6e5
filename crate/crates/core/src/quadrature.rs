//! Adaptive Gauss–Kronrod (7, 15) quadrature for complex-valued integrands.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Real;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// Tolerances and panel limits for [`integrate_complex`].
#[derive(Debug, Clone, Copy)]
pub struct QuadratureOptions<T> {
    /// Relative tolerance against ∫|f|.
    pub rel_tol: T,
    /// Absolute tolerance.
    pub abs_tol: T,
    /// Initial panels are no wider than this.
    pub max_panel: Option<T>,
    /// Refinement stops (with an error) below this fraction of the interval.
    pub min_panel_fraction: T,
}

impl<T: Real> Default for QuadratureOptions<T> {
    fn default() -> Self {
        Self {
            rel_tol: T::lit(1e-10),
            abs_tol: T::zero(),
            max_panel: None,
            min_panel_fraction: T::lit(1e-12),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QuadratureResult<T> {
    pub value: Complex<T>,
    pub error: T,
    /// ∫|f| over the interval, the scale the relative tolerance refers to.
    pub l1: T,
    pub evaluations: usize,
}

struct Panel<T> {
    a: T,
    b: T,
    value: Complex<T>,
    error: T,
    l1: T,
}

fn gk15<T: Real, F: FnMut(T) -> Complex<T>>(f: &mut F, a: T, b: T) -> Panel<T> {
    let half = T::lit(0.5);
    let c = (a + b) * half;
    let h = (b - a) * half;
    let fc = f(c);
    let mut kron = fc * T::lit(WGK[7]);
    let mut gauss = fc * T::lit(WG[3]);
    let mut l1 = fc.norm() * T::lit(WGK[7]);
    for j in 0..7 {
        let dx = h * T::lit(XGK[j]);
        let f1 = f(c - dx);
        let f2 = f(c + dx);
        let s = f1 + f2;
        kron += s * T::lit(WGK[j]);
        l1 += (f1.norm() + f2.norm()) * T::lit(WGK[j]);
        if j % 2 == 1 {
            gauss += s * T::lit(WG[j / 2]);
        }
    }
    let value = kron * h;
    let error = ((kron - gauss) * h).norm();
    Panel { a, b, value, error, l1: l1 * h.abs() }
}

/// Integrates `f` over `[a, b]` adaptively.
pub fn integrate_complex<T, F>(mut f: F, a: T, b: T, opts: &QuadratureOptions<T>) -> Result<QuadratureResult<T>>
where
    T: Real,
    F: FnMut(T) -> Complex<T>,
{
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Argument("integration limits must be finite".into()));
    }
    if a == b {
        return Ok(QuadratureResult { value: Complex::new(T::zero(), T::zero()), error: T::zero(), l1: T::zero(), evaluations: 0 });
    }
    let width = b - a;
    let n0 = match opts.max_panel {
        Some(h) if h > T::zero() => (width.abs() / h).ceil().to_usize().unwrap_or(1).max(1),
        _ => 1,
    };
    let min_width = width.abs() * opts.min_panel_fraction;
    let mut pending: Vec<Panel<T>> = Vec::with_capacity(n0);
    let mut evaluations = 0usize;
    for k in 0..n0 {
        let pa = a + width * T::from_usize_lossy(k) / T::from_usize_lossy(n0);
        let pb = if k + 1 == n0 { b } else { a + width * T::from_usize_lossy(k + 1) / T::from_usize_lossy(n0) };
        pending.push(gk15(&mut f, pa, pb));
        evaluations += 15;
    }
    let mut value = Complex::new(T::zero(), T::zero());
    let mut error = T::zero();
    let mut l1 = T::zero();
    // accept/split until every panel meets its share of the tolerance
    for _ in 0..200_000 {
        let total_l1: T = pending.iter().map(|p| p.l1).sum::<T>() + l1;
        let tol = opts.abs_tol.max(opts.rel_tol * total_l1);
        let mut next = Vec::new();
        for p in pending.drain(..) {
            let share = tol * ((p.b - p.a) / width).abs();
            if p.error <= share || p.error <= T::lit(50.0) * T::epsilon() * p.l1 {
                value += p.value;
                error += p.error;
                l1 += p.l1;
            } else if (p.b - p.a).abs() <= min_width {
                // integrable singularities: tiny panels may keep a small fixed share
                if p.error <= tol * T::lit(1e-3) {
                    value += p.value;
                    error += p.error;
                    l1 += p.l1;
                    continue;
                }
                return Err(Error::Quadrature(format!(
                    "panel [{:.6e}, {:.6e}] below minimum width with error {:.3e}",
                    p.a.as_f64(),
                    p.b.as_f64(),
                    p.error.as_f64()
                )));
            } else {
                let mid = (p.a + p.b) * T::lit(0.5);
                next.push(gk15(&mut f, p.a, mid));
                next.push(gk15(&mut f, mid, p.b));
                evaluations += 30;
            }
        }
        if next.is_empty() {
            return Ok(QuadratureResult { value, error, l1, evaluations });
        }
        pending = next;
    }
    Err(Error::Quadrature("refinement budget exhausted".into()))
}

/// Real-valued convenience wrapper around [`integrate_complex`].
pub fn integrate_real<T, F>(mut f: F, a: T, b: T, opts: &QuadratureOptions<T>) -> Result<T>
where
    T: Real,
    F: FnMut(T) -> T,
{
    integrate_complex(|x| Complex::new(f(x), T::zero()), a, b, opts).map(|r| r.value.re)
}
