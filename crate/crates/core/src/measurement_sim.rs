//! Sideband Rabi flopping: Fock populations, n-dependent sideband rates,
//! simulated traces and least-squares fits of thermal or coherent models.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// Hard cap on the Fock-space truncation.
pub const MAX_FOCK: usize = 400;
/// Largest probability mass a truncation may drop.
pub const TAIL_LIMIT: f64 = 1e-6;
// Truncation aims well below the limit so moments stay accurate too.
const TAIL_TARGET: f64 = 1e-10;
const TAIL_MOMENT_TARGET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Thermal,
    Coherent,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Thermal => "thermal",
            ModelKind::Coherent => "coherent",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "thermal" => Ok(ModelKind::Thermal),
            "coherent" => Ok(ModelKind::Coherent),
            _ => Err(Error::Argument(format!("unknown model '{s}', expected thermal or coherent"))),
        }
    }
}

/// Motion-adding (n → n+1) or motion-subtracting (n → n−1) sideband.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sideband {
    #[serde(rename = "MAS")]
    Mas,
    #[serde(rename = "MSS")]
    Mss,
}

impl fmt::Display for Sideband {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sideband::Mas => "MAS",
            Sideband::Mss => "MSS",
        })
    }
}

impl FromStr for Sideband {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MAS" => Ok(Sideband::Mas),
            "MSS" => Ok(Sideband::Mss),
            _ => Err(Error::Argument(format!("unknown sideband '{s}', expected MAS or MSS"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistributionKind<T> {
    Thermal { nbar: T },
    Coherent { alpha: T },
    Explicit,
}

/// Fock-state populations P_n for n = 0..=n_max.
#[derive(Debug, Clone, PartialEq)]
pub struct FockDistribution<T> {
    populations: Vec<T>,
    kind: DistributionKind<T>,
}

impl<T: Real> FockDistribution<T> {
    /// Arbitrary populations; must be non-negative with total in [1 − 1e−6, 1].
    pub fn explicit(populations: Vec<T>) -> Result<Self> {
        if populations.is_empty() {
            return Err(Error::Argument("a distribution needs at least one population".into()));
        }
        if populations.iter().any(|p| !(p.is_finite() && *p >= T::zero())) {
            return Err(Error::Argument("populations must be finite and non-negative".into()));
        }
        let total: T = populations.iter().copied().sum();
        let slack = T::lit(1e-12);
        if total > T::one() + slack || total < T::one() - T::lit(TAIL_LIMIT) {
            return Err(Error::Argument(format!("populations sum to {}, outside [1 - 1e-6, 1]", total.as_f64())));
        }
        Ok(Self { populations, kind: DistributionKind::Explicit })
    }

    pub fn populations(&self) -> &[T] {
        &self.populations
    }

    pub fn kind(&self) -> DistributionKind<T> {
        self.kind
    }

    pub fn n_max(&self) -> usize {
        self.populations.len() - 1
    }

    pub fn total(&self) -> T {
        self.populations.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.populations.iter().enumerate().map(|(n, p)| T::from_usize_lossy(n) * *p).sum()
    }
}

fn thermal_pops<T: Real>(nbar: T, n_max: usize) -> Vec<T> {
    let q = nbar / (nbar + T::one());
    let mut p = Vec::with_capacity(n_max + 1);
    let mut v = T::one() - q;
    for _ in 0..=n_max {
        p.push(v);
        v *= q;
    }
    p
}

fn poisson_pops<T: Real>(lambda: T, n_max: usize) -> Vec<T> {
    if lambda == T::zero() {
        let mut p = vec![T::zero(); n_max + 1];
        p[0] = T::one();
        return p;
    }
    let ll = lambda.ln();
    let mut lp = -lambda;
    let mut p = Vec::with_capacity(n_max + 1);
    p.push(lp.exp());
    for n in 1..=n_max {
        lp = lp + ll - T::from_usize_lossy(n).ln();
        p.push(lp.exp());
    }
    p
}

/// Smallest n_max whose dropped tail meets the targets, computed from the
/// full capped array by suffix sums.
fn truncation<T: Real>(full: &[T]) -> Result<usize> {
    let len = full.len();
    let mut mass = vec![T::zero(); len + 1];
    let mut moment = vec![T::zero(); len + 1];
    for n in (0..len).rev() {
        mass[n] = mass[n + 1] + full[n];
        moment[n] = moment[n + 1] + T::from_usize_lossy(n) * full[n];
    }
    let total = mass[0];
    // mass beyond the cap is what the cap itself drops
    let lost = (T::one() - total).max(T::zero());
    for n_max in 0..len {
        let tail = mass[n_max + 1] + lost;
        if tail < T::lit(TAIL_TARGET) && moment[n_max + 1] < T::lit(TAIL_MOMENT_TARGET) {
            return Ok(n_max);
        }
    }
    if lost < T::lit(TAIL_LIMIT) {
        return Ok(len - 1);
    }
    Err(Error::Argument(format!(
        "distribution tail {:.3e} exceeds 1e-6 at the n_max = {MAX_FOCK} cap",
        lost.as_f64()
    )))
}

fn with_n_max<T: Real>(full: Vec<T>, n_max: Option<usize>) -> Result<Vec<T>> {
    let n = match n_max {
        Some(n) => {
            if n > MAX_FOCK {
                return Err(Error::Argument(format!("n_max {n} above the cap of {MAX_FOCK}")));
            }
            let kept: T = full[..=n].iter().copied().sum();
            if kept < T::one() - T::lit(TAIL_LIMIT) {
                return Err(Error::Argument(format!(
                    "n_max = {n} drops {:.3e} of the population, more than 1e-6",
                    (T::one() - kept).as_f64()
                )));
            }
            n
        }
        None => truncation(&full)?,
    };
    let mut full = full;
    full.truncate(n + 1);
    Ok(full)
}

/// Thermal populations P_n = n̄ⁿ/(n̄+1)ⁿ⁺¹, truncated (not renormalised).
pub fn thermal_dist<T: Real>(nbar: T, n_max: Option<usize>) -> Result<FockDistribution<T>> {
    if !(nbar >= T::zero() && nbar.is_finite()) {
        return Err(Error::Argument(format!("mean occupation must be non-negative, got {}", nbar.as_f64())));
    }
    let populations = with_n_max(thermal_pops(nbar, MAX_FOCK), n_max)?;
    Ok(FockDistribution { populations, kind: DistributionKind::Thermal { nbar } })
}

/// Poisson populations of a coherent state with |α| = `alpha`.
pub fn coherent_dist<T: Real>(alpha: T, n_max: Option<usize>) -> Result<FockDistribution<T>> {
    if !(alpha >= T::zero() && alpha.is_finite()) {
        return Err(Error::Argument(format!("|alpha| must be non-negative, got {}", alpha.as_f64())));
    }
    let populations = with_n_max(poisson_pops(alpha * alpha, MAX_FOCK), n_max)?;
    Ok(FockDistribution { populations, kind: DistributionKind::Coherent { alpha } })
}

/// Generalised Laguerre polynomial L_n^(1)(x) by the three-term recurrence.
pub fn laguerre1<T: Real>(n: usize, x: T) -> T {
    let mut prev = T::one();
    if n == 0 {
        return prev;
    }
    let mut cur = T::lit(2.0) - x;
    for k in 1..n {
        let kf = T::from_usize_lossy(k);
        let next = ((T::lit(2.0) * kf + T::lit(2.0) - x) * cur - (kf + T::one()) * prev) / (kf + T::one());
        prev = cur;
        cur = next;
    }
    cur
}

/// |Ω_{n,n±1}| for carrier Rabi rate `omega0` and Lamb-Dicke parameter `eta`.
pub fn rabi_rate<T: Real>(n: usize, sideband: Sideband, omega0: T, eta: T) -> T {
    let lower = match sideband {
        Sideband::Mas => n,
        Sideband::Mss => {
            if n == 0 {
                return T::zero();
            }
            n - 1
        }
    };
    let x = eta * eta;
    let l = laguerre1(lower, x);
    (omega0 * (-x * T::lit(0.5)).exp() * eta * l / T::from_usize_lossy(lower + 1).sqrt()).abs()
}

/// Measured spin-down probability against pulse duration.
#[derive(Debug, Clone, PartialEq)]
pub struct FloppingTrace<T> {
    pub times: Vec<T>,
    pub p_down: Vec<T>,
    pub sideband: Sideband,
    pub eta: T,
    pub omega0: T,
    pub gamma: T,
}

impl<T: Real> FloppingTrace<T> {
    /// Checks ordering, lengths and the probability range.
    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.p_down.len() {
            return Err(Error::Argument("times and p_down differ in length".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("trace times must be strictly ascending".into()));
        }
        if self.p_down.iter().any(|p| !(*p >= T::zero() && *p <= T::one())) {
            return Err(Error::Argument("p_down values must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn rates<T: Real>(n_max: usize, sideband: Sideband, omega0: T, eta: T) -> Vec<T> {
    (0..=n_max).map(|n| rabi_rate(n, sideband, omega0, eta)).collect()
}

fn p_down<T: Real>(pops: &[T], rates: &[T], gamma: T, t: T) -> T {
    let s: T = pops.iter().zip(rates).map(|(p, r)| *p * (T::lit(2.0) * *r * t).cos()).sum();
    let v = T::lit(0.5) * (T::one() + (-gamma * t).exp() * s);
    v.max(T::zero()).min(T::one())
}

/// P↓(t) = ½(1 + e^{−γt} Σ P_n cos(2Ω_{n,n±1} t)).
pub fn flopping_trace<T: Real>(
    dist: &FockDistribution<T>,
    sideband: Sideband,
    omega0: T,
    eta: T,
    gamma: T,
    times: &[T],
) -> Result<FloppingTrace<T>> {
    if !(omega0 > T::zero()) || !(eta >= T::zero()) || !(gamma >= T::zero()) {
        return Err(Error::Argument("need omega0 > 0, eta >= 0 and gamma >= 0".into()));
    }
    let r = rates(dist.n_max(), sideband, omega0, eta);
    let p = times.iter().map(|t| p_down(dist.populations(), &r, gamma, *t)).collect();
    let trace = FloppingTrace { times: times.to_vec(), p_down: p, sideband, eta, omega0, gamma };
    trace.validate()?;
    Ok(trace)
}

/// Measurement noise for synthetic traces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Additive Gaussian noise, clipped to [0, 1].
    Gaussian { sigma: f64 },
    /// Each point is the fraction of `repetitions` projective measurements.
    Binomial { repetitions: u64 },
}

/// Returns a noisy copy of `trace`; identical seeds give identical output.
pub fn add_noise<T: Real>(trace: &FloppingTrace<T>, noise: Noise, seed: u64) -> Result<FloppingTrace<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = trace.clone();
    match noise {
        Noise::Gaussian { sigma } => {
            let d = Normal::new(0.0, sigma).map_err(|e| Error::Argument(format!("noise: {e}")))?;
            for p in &mut out.p_down {
                let v = p.as_f64() + d.sample(&mut rng);
                *p = T::lit(v.clamp(0.0, 1.0));
            }
        }
        Noise::Binomial { repetitions } => {
            if repetitions == 0 {
                return Err(Error::Argument("binomial noise needs at least one repetition".into()));
            }
            for p in &mut out.p_down {
                let d = Binomial::new(repetitions, p.as_f64()).map_err(|e| Error::Argument(format!("noise: {e}")))?;
                *p = T::lit(d.sample(&mut rng) as f64 / repetitions as f64);
            }
        }
    }
    Ok(out)
}

/// Parameters known from calibration when fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnownParams<T> {
    pub omega0: T,
    pub eta: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Also fit the carrier Rabi rate, starting from the known value.
    pub fit_omega0: bool,
    pub grid_points: usize,
    pub max_iterations: usize,
    pub gradient_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { fit_omega0: false, grid_points: 50, max_iterations: 200, gradient_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitResult<T> {
    pub model: ModelKind,
    pub nbar: T,
    /// 1σ; `None` when the covariance is not positive.
    pub nbar_sigma: Option<T>,
    /// |α| = √n̄ for coherent fits.
    pub alpha: Option<T>,
    pub alpha_sigma: Option<T>,
    pub gamma: T,
    pub gamma_sigma: Option<T>,
    pub omega0: T,
    pub omega0_sigma: Option<T>,
    /// Euclidean norm of the residual vector.
    pub residual: T,
    pub iterations: usize,
}

struct Model<'a, T> {
    trace: &'a FloppingTrace<T>,
    kind: ModelKind,
    eta: T,
    n_max: usize,
}

impl<T: Real> Model<'_, T> {
    fn pops(&self, nbar: T) -> Vec<T> {
        match self.kind {
            ModelKind::Thermal => thermal_pops(nbar, self.n_max),
            ModelKind::Coherent => poisson_pops(nbar, self.n_max),
        }
    }

    /// dP_n/dn̄.
    fn dpops(&self, nbar: T, p: &[T]) -> Vec<T> {
        match self.kind {
            ModelKind::Thermal => {
                let q = nbar / (nbar + T::one());
                let dq = T::one() / ((nbar + T::one()) * (nbar + T::one()));
                (0..p.len())
                    .map(|n| {
                        let dp = if n == 0 {
                            -T::one()
                        } else {
                            q.powi(n as i32 - 1) * (T::from_usize_lossy(n) * (T::one() - q) - q)
                        };
                        dp * dq
                    })
                    .collect()
            }
            ModelKind::Coherent => {
                (0..p.len()).map(|n| if n == 0 { -p[0] } else { p[n - 1] - p[n] }).collect()
            }
        }
    }

    fn residuals(&self, x: &[T]) -> Vec<T> {
        let p = self.pops(x[0]);
        let r = rates(self.n_max, self.trace.sideband, x[2], self.eta);
        self.trace
            .times
            .iter()
            .zip(&self.trace.p_down)
            .map(|(t, y)| {
                let s: T = p.iter().zip(&r).map(|(pn, rn)| *pn * (T::lit(2.0) * *rn * *t).cos()).sum();
                T::lit(0.5) * (T::one() + (-x[1] * *t).exp() * s) - *y
            })
            .collect()
    }

    /// Residuals and Jacobian rows over (n̄, γ, Ω₀).
    fn jacobian(&self, x: &[T]) -> (Vec<T>, Vec<[T; 3]>) {
        let p = self.pops(x[0]);
        let dp = self.dpops(x[0], &p);
        let r = rates(self.n_max, self.trace.sideband, x[2], self.eta);
        let mut res = Vec::with_capacity(self.trace.times.len());
        let mut jac = Vec::with_capacity(self.trace.times.len());
        let two = T::lit(2.0);
        for (t, y) in self.trace.times.iter().zip(&self.trace.p_down) {
            let env = (-x[1] * *t).exp();
            let (mut s, mut ds_dn, mut ds_dw) = (T::zero(), T::zero(), T::zero());
            for n in 0..p.len() {
                let ph = two * r[n] * *t;
                let c = ph.cos();
                s += p[n] * c;
                ds_dn += dp[n] * c;
                // rates scale linearly with Ω₀
                ds_dw -= p[n] * ph.sin() * ph / x[2];
            }
            res.push(T::lit(0.5) * (T::one() + env * s) - *y);
            jac.push([T::lit(0.5) * env * ds_dn, -T::lit(0.5) * *t * env * s, T::lit(0.5) * env * ds_dw]);
        }
        (res, jac)
    }
}

fn norm2<T: Real>(r: &[T]) -> T {
    r.iter().map(|v| *v * *v).sum()
}

fn n_max_for<T: Real>(kind: ModelKind, nbar: T) -> Result<usize> {
    let full = match kind {
        ModelKind::Thermal => thermal_pops(nbar, MAX_FOCK),
        ModelKind::Coherent => poisson_pops(nbar, MAX_FOCK),
    };
    truncation(&full)
}

/// Fits a thermal or coherent population model to a flopping trace by a
/// log-spaced grid over n̄ followed by Levenberg–Marquardt refinement.
pub fn fit_distribution<T: Real>(
    trace: &FloppingTrace<T>,
    model: ModelKind,
    known: KnownParams<T>,
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    trace.validate()?;
    if trace.times.len() < 20 {
        return Err(Error::Argument(format!("need at least 20 samples, got {}", trace.times.len())));
    }
    if !(known.omega0 > T::zero() && known.eta > T::zero()) {
        return Err(Error::Argument("known omega0 and eta must be positive".into()));
    }
    let span = trace.times[trace.times.len() - 1] - trace.times[0];
    let w01 = rabi_rate(0, Sideband::Mas, known.omega0, known.eta);
    // P↓ oscillates at 2Ω, so one flopping period is π/Ω
    if span * w01 < T::lit(2.0) * T::PI() {
        return Err(Error::Argument("trace must span at least two flopping periods".into()));
    }

    // coarse grid: n̄ log-spaced, γ from a few multiples of 1/span
    let (lo, hi) = (T::lit(1e-3), T::lit(25.0));
    let ng = opts.grid_points.max(2);
    let gammas: Vec<T> = [0.0, 0.1, 0.3, 1.0, 3.0].iter().map(|g| T::lit(*g) / span).collect();
    let mut best = (T::infinity(), lo, T::zero());
    for k in 0..ng {
        let nbar = lo * (hi / lo).powf(T::from_usize_lossy(k) / T::from_usize_lossy(ng - 1));
        let m = Model { trace, kind: model, eta: known.eta, n_max: n_max_for(model, nbar)? };
        for g in &gammas {
            let c = norm2(&m.residuals(&[nbar, *g, known.omega0]));
            if c < best.0 {
                best = (c, nbar, *g);
            }
        }
    }
    let (_, grid_nbar, grid_gamma) = best;

    let free: Vec<usize> = if opts.fit_omega0 { vec![0, 1, 2] } else { vec![0, 1] };
    let mut x = [grid_nbar, grid_gamma, known.omega0];
    let mut cap = n_max_for(model, grid_nbar * T::lit(1.5) + T::one()).unwrap_or(MAX_FOCK);
    for _ in 0..4 {
        let m = Model { trace, kind: model, eta: known.eta, n_max: cap };
        let (xs, iterations) = levenberg_marquardt(&m, x, &free, opts).map_err(|e| {
            Error::Fit(format!("{e}; best grid point nbar = {}, gamma = {}", grid_nbar.as_f64(), grid_gamma.as_f64()))
        })?;
        x = xs;
        let need = n_max_for(model, x[0])?;
        if need > cap && cap < MAX_FOCK {
            cap = (need * 2).min(MAX_FOCK);
            continue;
        }
        let (res, jac) = m.jacobian(&x);
        let rss = norm2(&res);
        let dof = trace.times.len().saturating_sub(free.len()).max(1);
        let s2 = rss / T::from_usize_lossy(dof);
        let sig = covariance_sigmas(&jac, &free, s2);
        let mut sigma = [None; 3];
        for (i, f) in free.iter().enumerate() {
            sigma[*f] = sig.as_ref().and_then(|s| s[i]);
        }
        let (alpha, alpha_sigma) = match model {
            ModelKind::Coherent => {
                let a = x[0].sqrt();
                let s = if a > T::zero() { sigma[0].map(|s| s / (T::lit(2.0) * a)) } else { None };
                (Some(a), s)
            }
            ModelKind::Thermal => (None, None),
        };
        return Ok(FitResult {
            model,
            nbar: x[0],
            nbar_sigma: sigma[0],
            alpha,
            alpha_sigma,
            gamma: x[1],
            gamma_sigma: sigma[1],
            omega0: x[2],
            omega0_sigma: sigma[2],
            residual: rss.sqrt(),
            iterations,
        });
    }
    Err(Error::Fit(format!(
        "Fock truncation did not settle; best grid point nbar = {}, gamma = {}",
        grid_nbar.as_f64(),
        grid_gamma.as_f64()
    )))
}

fn covariance_sigmas<T: Real>(jac: &[[T; 3]], free: &[usize], s2: T) -> Option<Vec<Option<T>>> {
    let k = free.len();
    let mut rows = vec![vec![T::zero(); k]; k];
    for row in jac {
        for a in 0..k {
            for b in 0..k {
                rows[a][b] += row[free[a]] * row[free[b]];
            }
        }
    }
    let jtj = Matrix::from_rows(&rows);
    let mut out = Vec::with_capacity(k);
    for a in 0..k {
        let mut e = vec![T::zero(); k];
        e[a] = T::one();
        let col = jtj.solve(&e, T::lit(1e-15))?;
        let v = col[a] * s2;
        out.push(if v >= T::zero() && v.is_finite() { Some(v.sqrt()) } else { None });
    }
    Some(out)
}

fn levenberg_marquardt<T: Real>(
    m: &Model<'_, T>,
    mut x: [T; 3],
    free: &[usize],
    opts: &FitOptions,
) -> Result<([T; 3], usize)> {
    let mut lambda = T::lit(1e-3);
    let (mut res, mut jac) = m.jacobian(&x);
    let mut cost = norm2(&res);
    let tol = T::lit(opts.gradient_tol);
    for it in 0..opts.max_iterations {
        let mut g = [T::zero(); 3];
        for (r, row) in res.iter().zip(&jac) {
            for a in free {
                g[*a] += row[*a] * *r;
            }
        }
        // n̄ and γ sit on a bound at zero; a gradient pushing outward is inactive
        let active: Vec<usize> =
            free.iter().copied().filter(|a| !(*a < 2 && x[*a] == T::zero() && g[*a] > T::zero())).collect();
        let k = active.len();
        let scale = |a: usize| x[a].abs().max(T::lit(1e-3) * (T::one() + x[a].abs()));
        let gn = active.iter().map(|a| (g[*a] * scale(*a)).powi(2)).sum::<T>().sqrt();
        if gn < tol || k == 0 {
            return Ok((x, it));
        }
        let mut jtj = vec![vec![T::zero(); k]; k];
        for row in &jac {
            for a in 0..k {
                for b in 0..k {
                    jtj[a][b] += row[active[a]] * row[active[b]];
                }
            }
        }
        let mut accepted = false;
        for _ in 0..40 {
            let mut a_mat = jtj.clone();
            for a in 0..k {
                a_mat[a][a] += lambda * jtj[a][a].max(T::lit(1e-300));
            }
            let rhs: Vec<T> = active.iter().map(|a| -g[*a]).collect();
            let step = match Matrix::from_rows(&a_mat).solve(&rhs, T::lit(1e-18)) {
                Some(s) => s,
                None => {
                    lambda *= T::lit(10.0);
                    continue;
                }
            };
            let mut xn = x;
            for a in 0..k {
                xn[active[a]] += step[a];
            }
            xn[0] = xn[0].max(T::zero());
            xn[1] = xn[1].max(T::zero());
            if xn[2] <= T::zero() {
                lambda *= T::lit(10.0);
                continue;
            }
            let rn = m.residuals(&xn);
            let cn = norm2(&rn);
            if cn <= cost {
                let moved = active.iter().any(|a| xn[*a] != x[*a]);
                let stalled = !moved || cost - cn <= T::epsilon() * T::lit(4.0) * cost;
                x = xn;
                cost = cn;
                lambda = (lambda * T::lit(0.3)).max(T::lit(1e-12));
                let (r2, j2) = m.jacobian(&x);
                res = r2;
                jac = j2;
                if stalled {
                    // no further decrease is representable
                    return Ok((x, it + 1));
                }
                accepted = true;
                break;
            }
            lambda *= T::lit(10.0);
        }
        if !accepted {
            // every damped step fails to lower the cost: a numerical minimum
            return Ok((x, it + 1));
        }
    }
    Err(Error::Convergence { what: "Levenberg-Marquardt fit", iterations: opts.max_iterations })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thermal_closed_forms() {
        let d = thermal_dist(0.0_f64, None).unwrap();
        assert_eq!(d.populations()[0], 1.0);
        let d = thermal_dist(1.0_f64, None).unwrap();
        assert!((d.populations()[0] - 0.5).abs() < 1e-15);
        assert!((d.populations()[1] - 0.25).abs() < 1e-15);
        for nbar in [0.19_f64, 1.0, 6.4, 10.0] {
            let d = thermal_dist(nbar, None).unwrap();
            assert!((d.mean() - nbar).abs() < 1e-6, "nbar {nbar}: {}", d.mean());
            assert!(d.total() <= 1.0 + 1e-12 && d.total() >= 1.0 - 1e-6);
        }
        assert!(thermal_dist(-0.1_f64, None).is_err());
    }

    #[test]
    fn coherent_means() {
        assert_eq!(coherent_dist(0.0_f64, None).unwrap().populations(), &[1.0]);
        let d = coherent_dist(2.53_f64, None).unwrap();
        assert!((d.mean() - 2.53 * 2.53).abs() < 1e-6);
        assert!((d.mean() - 6.4).abs() < 0.005);
        assert!((coherent_dist(1.38_f64, None).unwrap().mean() - 1.9).abs() < 0.005);
    }

    #[test]
    fn explicit_n_max_must_hold_the_mass() {
        assert!(thermal_dist(5.0_f64, Some(10)).is_err());
        assert_eq!(thermal_dist(0.01_f64, Some(10)).unwrap().n_max(), 10);
    }

    #[test]
    fn laguerre_small_orders() {
        let x = 0.37_f64;
        assert!((laguerre1(1, x) - (2.0 - x)).abs() < 1e-15);
        assert!((laguerre1(2, x) - (x * x / 2.0 - 3.0 * x + 3.0)).abs() < 1e-14);
    }

    #[test]
    fn ground_state_rates() {
        let eta = 0.479_f64;
        let w = rabi_rate(0, Sideband::Mas, 1.0, eta);
        assert!((w - eta * (-eta * eta / 2.0).exp()).abs() < 1e-15);
        assert_eq!(rabi_rate(0, Sideband::Mss, 1.0, eta), 0.0);
        assert_eq!(rabi_rate(4, Sideband::Mss, 1.0, eta), rabi_rate(3, Sideband::Mas, 1.0, eta));
    }

    #[test]
    fn trace_limits() {
        let d = thermal_dist(0.5_f64, None).unwrap();
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 1e-6).collect();
        let tr = flopping_trace(&d, Sideband::Mas, 2e5, 0.48, 0.0, &t).unwrap();
        assert!((tr.p_down[0] - 1.0).abs() < 1e-9);
        let g = flopping_trace(&d, Sideband::Mas, 2e5, 0.48, 1e12, &t).unwrap();
        assert!(g.p_down[1..].iter().all(|p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn noise_is_seeded() {
        let d = thermal_dist(0.5_f64, None).unwrap();
        let t: Vec<f64> = (0..30).map(|k| k as f64 * 1e-6).collect();
        let tr = flopping_trace(&d, Sideband::Mas, 2e5, 0.48, 0.0, &t).unwrap();
        let a = add_noise(&tr, Noise::Binomial { repetitions: 100 }, 7).unwrap();
        let b = add_noise(&tr, Noise::Binomial { repetitions: 100 }, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.p_down.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
