use crate::error::{Error, Result};
use crate::scalar::Real;

/// Natural cubic spline through strictly increasing abscissae.
///
/// Evaluation outside `[x_first, x_last]` is refused rather than extrapolated.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline<T> {
    x: Vec<T>,
    y: Vec<T>,
    /// Second derivatives at the knots.
    m: Vec<T>,
}

impl<T: Real> CubicSpline<T> {
    pub fn new(x: Vec<T>, y: Vec<T>) -> Result<Self> {
        let n = x.len();
        if n != y.len() {
            return Err(Error::Argument("spline abscissa/ordinate length mismatch".into()));
        }
        if n < 3 {
            return Err(Error::Argument("spline needs at least 3 samples".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("spline abscissae must be strictly increasing".into()));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::Argument("spline samples must be finite".into()));
        }
        // Thomas algorithm for the interior second derivatives; natural ends.
        let two = T::lit(2.0);
        let six = T::lit(6.0);
        let mut m = vec![T::zero(); n];
        let mut c_prime = vec![T::zero(); n];
        let mut d_prime = vec![T::zero(); n];
        for i in 1..n - 1 {
            let h0 = x[i] - x[i - 1];
            let h1 = x[i + 1] - x[i];
            let rhs = six * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            let diag = two * (h0 + h1);
            let lower = if i > 1 { h0 } else { T::zero() };
            let denom = diag - lower * c_prime[i - 1];
            c_prime[i] = h1 / denom;
            d_prime[i] = (rhs - lower * d_prime[i - 1]) / denom;
        }
        for i in (1..n - 1).rev() {
            let next = if i + 1 < n - 1 { m[i + 1] } else { T::zero() };
            m[i] = d_prime[i] - c_prime[i] * next;
        }
        Ok(Self { x, y, m })
    }

    pub fn domain(&self) -> (T, T) {
        (self.x[0], self.x[self.x.len() - 1])
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Value (`order` 0), first or second derivative at `z`.
    pub fn eval(&self, z: T, order: u8) -> Result<T> {
        let (lo, hi) = self.domain();
        if !(z >= lo && z <= hi) {
            return Err(Error::Domain { z: z.as_f64(), min: lo.as_f64(), max: hi.as_f64() });
        }
        let i = match self.x.binary_search_by(|v| v.partial_cmp(&z).unwrap()) {
            Ok(k) => k.min(self.x.len() - 2),
            Err(k) => k - 1,
        };
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - z) / h;
        let b = (z - self.x[i]) / h;
        let (m0, m1) = (self.m[i], self.m[i + 1]);
        let six = T::lit(6.0);
        Ok(match order {
            0 => {
                a * self.y[i]
                    + b * self.y[i + 1]
                    + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / six
            }
            1 => {
                (self.y[i + 1] - self.y[i]) / h
                    - (T::lit(3.0) * a * a - T::one()) * h * m0 / six
                    + (T::lit(3.0) * b * b - T::one()) * h * m1 / six
            }
            2 => a * m0 + b * m1,
            _ => return Err(Error::Argument(format!("derivative order {order} not supported"))),
        })
    }
}
