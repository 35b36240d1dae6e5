//! Axial trap potential as a voltage-weighted superposition of electrode
//! basis functions, and extraction of local well parameters.
//!
//! Potentials are in volts. The energy of an ion of charge q is q·U, so a
//! well of curvature U″ (V/m²) has angular frequency ω = √(q U″ / m).

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spline::CubicSpline;

/// Default electrode names, left to right.
pub const DEFAULT_ELECTRODES: [&str; 5] = ["O1", "A", "X", "B", "O2"];
/// Default electrode pitch, m. Zones A and B sit two pitches apart.
pub const DEFAULT_SPACING: f64 = 185e-6;
/// Default Gaussian width of each electrode's axial potential, m.
pub const DEFAULT_WIDTH: f64 = 100e-6;
/// Number of points in the quartic-fit stencil.
pub const QUARTIC_STENCIL: usize = 33;
/// Minimum sample count accepted for tabulated basis functions.
pub const MIN_TABLE_SAMPLES: usize = 200;

/// Axial potential of one electrode at unit voltage.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisFn<T> {
    /// exp(−(z−c)²/(2w²)).
    Gaussian { center: T, width: T },
    /// Σ_k c_k (z − center)^k.
    Polynomial { center: T, coeffs: Vec<T> },
    /// Natural cubic spline through sampled values.
    Tabulated(CubicSpline<T>),
}

impl<T: Real> BasisFn<T> {
    /// Value and first two derivatives at `z`. Tabulated functions may fail
    /// outside their sample range; analytic ones never do.
    pub fn derivs(&self, z: T) -> Result<[T; 3]> {
        Ok(match self {
            BasisFn::Gaussian { center, width } => {
                let u = (z - *center) / *width;
                let g = (-(u * u) * T::lit(0.5)).exp();
                [g, -u / *width * g, (u * u - T::one()) / (*width * *width) * g]
            }
            BasisFn::Polynomial { center, coeffs } => {
                let x = z - *center;
                let mut v = [T::zero(); 3];
                // Horner for the value and both derivatives at once
                for c in coeffs.iter().rev() {
                    v[2] = v[2] * x + v[1] * T::lit(2.0);
                    v[1] = v[1] * x + v[0];
                    v[0] = v[0] * x + *c;
                }
                v
            }
            BasisFn::Tabulated(s) => [s.eval(z, 0)?, s.eval(z, 1)?, s.eval(z, 2)?],
        })
    }

    pub fn eval(&self, z: T, order: u8) -> Result<T> {
        if order > 2 {
            return Err(Error::Argument(format!("derivative order {order} not supported")));
        }
        match self {
            BasisFn::Tabulated(s) => s.eval(z, order),
            _ => Ok(self.derivs(z)?[order as usize]),
        }
    }
}

/// Ordered set of electrode basis functions over an axial domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ElectrodeBasis<T> {
    names: Vec<String>,
    fns: Vec<BasisFn<T>>,
    domain: (T, T),
    quartic_half_width: T,
}

impl<T: Real> ElectrodeBasis<T> {
    pub fn new(names: Vec<String>, fns: Vec<BasisFn<T>>, domain: (T, T)) -> Result<Self> {
        if names.is_empty() || names.len() != fns.len() {
            return Err(Error::Argument("one basis function per named electrode required".into()));
        }
        let (lo, hi) = domain;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Argument("axial domain must be a finite, non-empty interval".into()));
        }
        for (name, f) in names.iter().zip(&fns) {
            match f {
                BasisFn::Tabulated(s) => {
                    if s.len() < MIN_TABLE_SAMPLES {
                        return Err(Error::Argument(format!(
                            "electrode {name}: {} samples, at least {MIN_TABLE_SAMPLES} required",
                            s.len()
                        )));
                    }
                    let (a, b) = s.domain();
                    if a > lo || b < hi {
                        return Err(Error::Argument(format!(
                            "electrode {name}: samples cover [{:.4e}, {:.4e}] m, domain needs [{:.4e}, {:.4e}] m",
                            a.as_f64(),
                            b.as_f64(),
                            lo.as_f64(),
                            hi.as_f64()
                        )));
                    }
                }
                BasisFn::Gaussian { width, .. } if !(*width > T::zero()) => {
                    return Err(Error::Argument(format!("electrode {name}: width must be positive")));
                }
                _ => {}
            }
        }
        let quartic_half_width = (hi - lo) * T::lit(0.4 / 6.0);
        Ok(Self { names, fns, domain, quartic_half_width })
    }

    /// Five Gaussian electrodes centred at {−2d, −d, 0, d, 2d}, domain ±3d.
    pub fn gaussian(spacing: T, width: T) -> Result<Self> {
        let names = DEFAULT_ELECTRODES.iter().map(|s| s.to_string()).collect();
        let fns = (-2..=2)
            .map(|k| BasisFn::Gaussian { center: spacing * T::lit(k as f64), width })
            .collect();
        let d3 = spacing * T::lit(3.0);
        let mut b = Self::new(names, fns, (-d3, d3))?;
        b.quartic_half_width = spacing * T::lit(0.4);
        Ok(b)
    }

    pub fn default_gaussian() -> Self {
        Self::gaussian(T::lit(DEFAULT_SPACING), T::lit(DEFAULT_WIDTH)).expect("default basis is valid")
    }

    pub fn with_quartic_half_width(mut self, hw: T) -> Self {
        self.quartic_half_width = hw;
        self
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn functions(&self) -> &[BasisFn<T>] {
        &self.fns
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    pub fn domain(&self) -> (T, T) {
        self.domain
    }

    pub fn quartic_half_width(&self) -> T {
        self.quartic_half_width
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    #[inline]
    pub fn contains(&self, z: T) -> bool {
        z >= self.domain.0 && z <= self.domain.1
    }

    pub fn check_domain(&self, z: T) -> Result<()> {
        if self.contains(z) {
            Ok(())
        } else {
            Err(Error::Domain { z: z.as_f64(), min: self.domain.0.as_f64(), max: self.domain.1.as_f64() })
        }
    }

    /// Per-electrode value, slope and curvature at `z` (`out[i] = [φ_i, φ_i′, φ_i″]`).
    pub fn derivs_all(&self, z: T) -> Result<Vec<[T; 3]>> {
        self.check_domain(z)?;
        self.fns.iter().map(|f| f.derivs(z)).collect()
    }

    /// Row of φ_i^{(order)}(z) over electrodes.
    pub fn row(&self, z: T, order: u8) -> Result<Vec<T>> {
        self.check_domain(z)?;
        self.fns.iter().map(|f| f.eval(z, order)).collect()
    }

    pub fn potential(&self, voltages: Vec<T>) -> Result<AxialPotential<'_, T>> {
        AxialPotential::new(self, voltages)
    }
}

/// A basis with a voltage assigned to every electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialPotential<'a, T> {
    basis: &'a ElectrodeBasis<T>,
    voltages: Vec<T>,
}

impl<'a, T: Real> AxialPotential<'a, T> {
    pub fn new(basis: &'a ElectrodeBasis<T>, voltages: Vec<T>) -> Result<Self> {
        if voltages.len() != basis.len() {
            return Err(Error::Argument(format!(
                "{} voltages for {} electrodes",
                voltages.len(),
                basis.len()
            )));
        }
        Ok(Self { basis, voltages })
    }

    pub fn basis(&self) -> &'a ElectrodeBasis<T> {
        self.basis
    }

    pub fn voltages(&self) -> &[T] {
        &self.voltages
    }

    /// U, U′, U″ at `z`.
    pub fn derivs(&self, z: T) -> Result<[T; 3]> {
        self.basis.check_domain(z)?;
        let mut out = [T::zero(); 3];
        for (f, v) in self.basis.fns.iter().zip(&self.voltages) {
            if *v == T::zero() {
                continue;
            }
            let d = f.derivs(z)?;
            for k in 0..3 {
                out[k] += *v * d[k];
            }
        }
        Ok(out)
    }

    /// Σ_i V_i φ_i^{(order)}(z): volts, V/m or V/m².
    pub fn eval(&self, z: T, order: u8) -> Result<T> {
        if order > 2 {
            return Err(Error::Argument(format!("derivative order {order} not supported")));
        }
        Ok(self.derivs(z)?[order as usize])
    }
}

/// Free-function form of [`AxialPotential::eval`].
pub fn eval_potential<T: Real>(p: &AxialPotential<'_, T>, z: T, order: u8) -> Result<T> {
    p.eval(z, order)
}

/// Parameters of a local potential well.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WellParams<T> {
    /// Minimum position, m.
    pub z0: T,
    /// Angular frequency, rad/s.
    pub omega: T,
    /// Quadratic coefficient ½U″(z0), V/m².
    pub a: T,
    /// Quartic coefficient about z0, V/m⁴.
    pub b: T,
}

/// Result of a quadratic + quartic fit about a centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticFit<T> {
    pub a: T,
    pub b: T,
    /// RMS residual over the stencil, V.
    pub residual: T,
}

fn stencil<T: Real>(half_width: T) -> impl Iterator<Item = T> {
    let n = QUARTIC_STENCIL;
    (0..n).map(move |k| {
        half_width * (T::lit(2.0) * T::from_usize_lossy(k) / T::from_usize_lossy(n - 1) - T::one())
    })
}

/// Least-squares weights mapping stencil samples y_k onto (a, b).
///
/// Returns `(wa, wb)` with a = Σ wa_k y_k, b = Σ wb_k y_k.
fn quartic_weights<T: Real>(half_width: T) -> Result<(Vec<T>, Vec<T>)> {
    // scaled abscissae keep the normal equations well conditioned
    let xs: Vec<T> = stencil(T::one()).collect();
    let (mut s44, mut s46, mut s48) = (T::zero(), T::zero(), T::zero());
    for &x in &xs {
        let x2 = x * x;
        let x4 = x2 * x2;
        s44 += x4;
        s46 += x4 * x2;
        s48 += x4 * x4;
    }
    let det = s44 * s48 - s46 * s46;
    if !(det.abs() > T::lit(1e3) * T::epsilon() * s44 * s48) {
        return Err(Error::Fit("degenerate quartic stencil".into()));
    }
    let h2 = half_width * half_width;
    let h4 = h2 * h2;
    let mut wa = Vec::with_capacity(xs.len());
    let mut wb = Vec::with_capacity(xs.len());
    for &x in &xs {
        let x2 = x * x;
        let x4 = x2 * x2;
        wa.push((s48 * x2 - s46 * x4) / det / h2);
        wb.push((s44 * x4 - s46 * x2) / det / h4);
    }
    Ok((wa, wb))
}

/// Fits U(z) − U(center) ≈ a (z−c)² + b (z−c)⁴ over a symmetric 33-point stencil.
pub fn fit_quartic<T: Real>(p: &AxialPotential<'_, T>, center: T, half_width: T) -> Result<QuarticFit<T>> {
    if !(half_width > T::zero()) {
        return Err(Error::Argument("half_width must be positive".into()));
    }
    p.basis.check_domain(center - half_width)?;
    p.basis.check_domain(center + half_width)?;
    let (wa, wb) = quartic_weights(half_width)?;
    let u0 = p.eval(center, 0)?;
    let xs: Vec<T> = stencil(half_width).collect();
    let ys: Vec<T> = xs.iter().map(|x| p.eval(center + *x, 0).map(|u| u - u0)).collect::<Result<_>>()?;
    let a: T = wa.iter().zip(&ys).map(|(w, y)| *w * *y).sum();
    let b: T = wb.iter().zip(&ys).map(|(w, y)| *w * *y).sum();
    let ss: T = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let x2 = *x * *x;
            let r = *y - (a * x2 + b * x2 * x2);
            r * r
        })
        .sum();
    let residual = (ss / T::from_usize_lossy(xs.len())).sqrt();
    Ok(QuarticFit { a, b, residual })
}

/// Per-electrode contributions (a_i, b_i) to the quartic fit, so that for
/// voltages V the fit gives a = Σ V_i a_i and b = Σ V_i b_i.
pub fn quartic_rows<T: Real>(basis: &ElectrodeBasis<T>, center: T, half_width: T) -> Result<(Vec<T>, Vec<T>)> {
    basis.check_domain(center - half_width)?;
    basis.check_domain(center + half_width)?;
    let (wa, wb) = quartic_weights(half_width)?;
    let base = basis.row(center, 0)?;
    let mut ra = vec![T::zero(); basis.len()];
    let mut rb = vec![T::zero(); basis.len()];
    for ((x, wak), wbk) in stencil(half_width).zip(&wa).zip(&wb) {
        let row = basis.row(center + x, 0)?;
        for i in 0..basis.len() {
            let y = row[i] - base[i];
            ra[i] += *wak * y;
            rb[i] += *wbk * y;
        }
    }
    Ok((ra, rb))
}

/// Locates the well minimum near `seed_z` by safeguarded Newton iteration.
pub fn find_well<T: Real>(
    p: &AxialPotential<'_, T>,
    seed_z: T,
    constants: &PhysicalConstants<T>,
) -> Result<WellParams<T>> {
    let z0 = locate_minimum(p, seed_z)?;
    let [_, _, curv] = p.derivs(z0)?;
    let hw = p.basis.quartic_half_width();
    let (lo, hi) = p.basis.domain();
    // shrink the quartic window if the well sits close to the domain edge
    let hw = hw.min((z0 - lo).min(hi - z0) * T::lit(0.999));
    let b = fit_quartic(p, z0, hw)?.b;
    Ok(WellParams { z0, omega: constants.omega_for(curv), a: curv * T::lit(0.5), b })
}

/// Newton search for U′ = 0 with U″ > 0; falls back to bounded descent steps
/// where the curvature is not positive.
pub(crate) fn locate_minimum<T: Real>(p: &AxialPotential<'_, T>, seed_z: T) -> Result<T> {
    let (lo, hi) = p.basis.domain();
    let no_well = |reason: &str| Error::NoWell { seed: seed_z.as_f64(), reason: reason.to_string() };
    if !p.basis.contains(seed_z) {
        return Err(no_well("seed outside the axial domain"));
    }
    let width = hi - lo;
    let max_step = width * T::lit(0.02);
    let tol = T::lit(4.0) * T::epsilon() * (seed_z.abs() + width);
    let mut z = seed_z;
    for _ in 0..100 {
        let [_, g, c] = p.derivs(z)?;
        let step = if c > T::zero() {
            let s = -g / c;
            if s.abs() > max_step { max_step * s.signum() } else { s }
        } else if g == T::zero() {
            return Err(no_well("stationary point with non-positive curvature"));
        } else {
            -max_step * g.signum()
        };
        let zn = z + step;
        if !p.basis.contains(zn) {
            return Err(no_well("iteration left the axial domain"));
        }
        z = zn;
        if c > T::zero() && step.abs() <= tol {
            let [_, _, c_end] = p.derivs(z)?;
            if c_end > T::zero() {
                return Ok(z);
            }
            return Err(no_well("stationary point is not a minimum"));
        }
    }
    Err(Error::Convergence { what: "well minimum search", iterations: 100 })
}
