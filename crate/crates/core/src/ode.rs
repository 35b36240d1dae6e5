//! Embedded Runge–Kutta 5(4) integrator (Dormand–Prince) with step-size control.

use crate::error::{Error, Result};
use crate::scalar::Real;

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Difference between 5th- and embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

#[derive(Debug, Clone)]
pub struct OdeOptions<T> {
    pub rtol: T,
    /// Per-component absolute tolerance; a single entry is broadcast.
    pub atol: Vec<T>,
    pub h_max: Option<T>,
    pub max_steps: usize,
}

impl<T: Real> Default for OdeOptions<T> {
    fn default() -> Self {
        Self { rtol: T::lit(1e-10), atol: vec![T::lit(1e-13)], h_max: None, max_steps: 10_000_000 }
    }
}

/// Adaptive integrator keeping its step-size estimate across calls, so a
/// trajectory split at breakpoints does not restart from a cold guess.
#[derive(Debug, Clone)]
pub struct DormandPrince<T> {
    opts: OdeOptions<T>,
    h: Option<T>,
    pub accepted: usize,
    pub rejected: usize,
}

impl<T: Real> DormandPrince<T> {
    pub fn new(opts: OdeOptions<T>) -> Self {
        Self { opts, h: None, accepted: 0, rejected: 0 }
    }

    fn atol(&self, i: usize) -> T {
        if self.opts.atol.len() == 1 {
            self.opts.atol[0]
        } else {
            self.opts.atol[i]
        }
    }

    fn err_norm(&self, y0: &[T], y1: &[T], err: &[T]) -> T {
        let n = y0.len();
        let s: T = (0..n)
            .map(|i| {
                let sc = self.atol(i) + self.opts.rtol * y0[i].abs().max(y1[i].abs());
                let r = err[i] / sc;
                r * r
            })
            .sum();
        (s / T::from_usize_lossy(n)).sqrt()
    }

    /// Advances `y` from `t0` to exactly `t1`. `observer` sees every accepted
    /// step and may abort the integration by returning an error.
    pub fn integrate<F, O>(&mut self, mut f: F, t0: T, y: &mut [T], t1: T, mut observer: O) -> Result<()>
    where
        F: FnMut(T, &[T], &mut [T]) -> Result<()>,
        O: FnMut(T, &[T]) -> Result<()>,
    {
        let n = y.len();
        if t1 == t0 {
            return Ok(());
        }
        if !(t1 > t0) {
            return Err(Error::Argument("integration must run forward in time".into()));
        }
        if self.opts.atol.len() != 1 && self.opts.atol.len() != n {
            return Err(Error::Argument("atol length must be 1 or match the state".into()));
        }
        let span = t1 - t0;
        let mut k: Vec<Vec<T>> = vec![vec![T::zero(); n]; 7];
        let mut ytmp = vec![T::zero(); n];
        let mut ynew = vec![T::zero(); n];
        let mut errv = vec![T::zero(); n];
        let mut comp = vec![T::zero(); n];
        let mut t_comp = T::zero();
        let mut t = t0;
        f(t, y, &mut k[0])?;
        let mut h = match self.h {
            Some(h) => h,
            None => {
                // Hairer's initial step heuristic, simplified.
                let d0 = self.err_norm(y, y, y);
                let d1 = self.err_norm(y, y, &k[0]);
                if d0 < T::lit(1e-5) || d1 < T::lit(1e-5) {
                    T::lit(1e-6) * span
                } else {
                    T::lit(0.01) * d0 / d1
                }
            }
        };
        if let Some(hm) = self.opts.h_max {
            h = h.min(hm);
        }
        let min_h = T::lit(16.0) * T::epsilon() * t1.abs().max(span);
        let mut steps = 0usize;
        while t < t1 {
            steps += 1;
            if steps > self.opts.max_steps {
                return Err(Error::Convergence { what: "ODE integration", iterations: steps });
            }
            let mut last = false;
            if t + h >= t1 || (t1 - (t + h)) < min_h {
                h = (t1 - t) - t_comp;
                last = true;
            }
            for s in 1..7 {
                for i in 0..n {
                    let mut acc = T::zero();
                    for (j, kj) in k.iter().enumerate().take(s) {
                        let a = A[s][j];
                        if a != 0.0 {
                            acc += T::lit(a) * kj[i];
                        }
                    }
                    ynew[i] = h * acc;
                    ytmp[i] = y[i] + ynew[i];
                }
                let ts = t + T::lit(C[s]) * h;
                f(ts, &ytmp, &mut k[s])?;
            }
            // row 6 of A holds the 5th-order weights; ynew holds the increment
            for i in 0..n {
                let mut e = T::zero();
                for (j, kj) in k.iter().enumerate() {
                    if E[j] != 0.0 {
                        e += T::lit(E[j]) * kj[i];
                    }
                }
                errv[i] = h * e;
            }
            let en = self.err_norm(y, &ytmp, &errv);
            if !en.is_finite() {
                return Err(Error::StepSize { t: t.as_f64() });
            }
            if en <= T::one() {
                if last {
                    t = t1;
                } else {
                    let d = h + t_comp;
                    let s = t + d;
                    t_comp = d - (s - t);
                    t = s;
                }
                // compensated summation keeps round-off from accumulating
                for i in 0..n {
                    let d = ynew[i] + comp[i];
                    let s = y[i] + d;
                    comp[i] = d - (s - y[i]);
                    y[i] = s;
                }
                let (first, rest) = k.split_at_mut(1);
                first[0].copy_from_slice(&rest[5]);
                self.accepted += 1;
                observer(t, y)?;
                let fac = if en == T::zero() {
                    T::lit(5.0)
                } else {
                    (T::lit(0.9) * en.powf(T::lit(-0.2))).min(T::lit(5.0)).max(T::lit(0.2))
                };
                if !last {
                    h *= fac;
                    self.h = Some(h);
                } else {
                    self.h = Some(self.h.unwrap_or(h).max(h));
                }
            } else {
                self.rejected += 1;
                let fac = (T::lit(0.9) * en.powf(T::lit(-0.2))).max(T::lit(0.1));
                h *= fac;
                if h.abs() < min_h {
                    return Err(Error::StepSize { t: t.as_f64() });
                }
            }
            if let Some(hm) = self.opts.h_max {
                h = h.min(hm);
            }
        }
        Ok(())
    }
}
