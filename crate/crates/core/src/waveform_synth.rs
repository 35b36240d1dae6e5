//! Electrode waveforms: constrained voltage solves, transport along a
//! prescribed well trajectory, and two-stage separation ramps timed under an
//! adiabaticity bound.

use num_complex::Complex;

use crate::constants::PhysicalConstants;
use crate::crystal_modes::{self, spectrum_from_hessian, VoltagePath};
use crate::error::{Error, Result};
use crate::linalg::{dot, min_norm_correction};
use crate::quadrature::{integrate_complex, QuadratureOptions};
use crate::scalar::Real;
use crate::trap_model::{fit_quartic, locate_minimum, quartic_rows, ElectrodeBasis, DEFAULT_SPACING};

/// DAC update period, s (50 MHz).
pub const DEFAULT_DAC_PERIOD: f64 = 20e-9;
/// Default electrode voltage limit, V.
pub const DEFAULT_VOLTAGE_LIMIT: f64 = 10.0;

/// Electrode voltages on a uniform DAC grid starting at t = 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageWaveform<T> {
    names: Vec<String>,
    dac_period: T,
    samples: Vec<Vec<T>>,
}

impl<T: Real> VoltageWaveform<T> {
    pub fn new(names: Vec<String>, dac_period: T, samples: Vec<Vec<T>>) -> Result<Self> {
        if !(dac_period > T::zero()) {
            return Err(Error::Argument("DAC period must be positive".into()));
        }
        if samples.len() < 2 {
            return Err(Error::Argument("a waveform needs at least two samples".into()));
        }
        if let Some(k) = samples.iter().position(|v| v.len() != names.len()) {
            return Err(Error::Argument(format!(
                "sample {k} has {} voltages for {} electrodes",
                samples[k].len(),
                names.len()
            )));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Argument("waveform contains non-finite voltages".into()));
        }
        Ok(Self { names, dac_period, samples })
    }

    /// A waveform holding `voltages` for `n_intervals` DAC periods.
    pub fn constant(names: Vec<String>, dac_period: T, voltages: Vec<T>, n_intervals: usize) -> Result<Self> {
        Self::new(names, dac_period, vec![voltages; n_intervals.max(1) + 1])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dac_period(&self) -> T {
        self.dac_period
    }

    pub fn samples(&self) -> &[Vec<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Number of DAC intervals, one fewer than the sample count.
    pub fn intervals(&self) -> usize {
        self.samples.len() - 1
    }

    pub fn time(&self, k: usize) -> T {
        self.dac_period * T::from_usize_lossy(k)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.samples.len()).map(|k| self.time(k)).collect()
    }

    pub fn duration(&self) -> T {
        self.time(self.intervals())
    }

    pub fn first(&self) -> &[T] {
        &self.samples[0]
    }

    pub fn last(&self) -> &[T] {
        &self.samples[self.samples.len() - 1]
    }

    /// Interval index and fraction for time `t`, clamped to the waveform.
    pub fn locate(&self, t: T) -> (usize, T) {
        let x = (t / self.dac_period).max(T::zero());
        let n = self.intervals();
        let k = x.floor().to_usize().unwrap_or(n).min(n - 1);
        let f = (x - T::from_usize_lossy(k)).min(T::one()).max(T::zero());
        (k, f)
    }

    /// Linear interpolation between samples; held constant outside.
    pub fn voltages_at(&self, t: T) -> Vec<T> {
        let (k, f) = self.locate(t);
        self.samples[k].iter().zip(&self.samples[k + 1]).map(|(a, b)| *a + f * (*b - *a)).collect()
    }

    /// Largest single-electrode change between consecutive samples, V.
    pub fn max_step(&self) -> T {
        self.samples
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (*b - *a).abs()))
            .fold(T::zero(), |m, x| m.max(x))
    }

    pub fn check_bounds(&self, bounds: &VoltageBounds<T>) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        for v in &self.samples {
            for (name, x) in self.names.iter().zip(v) {
                if !bounds.contains(*x) && !bad.contains(name) {
                    bad.push(name.clone());
                }
            }
        }
        if bad.is_empty() { Ok(()) } else { Err(Error::Bounds { electrodes: bad }) }
    }

    /// Appends `other`, whose first sample must equal this waveform's last.
    pub fn concat(mut self, other: &Self) -> Result<Self> {
        if other.names != self.names || other.dac_period != self.dac_period {
            return Err(Error::Argument("waveforms differ in electrodes or DAC period".into()));
        }
        self.samples.extend(other.samples.iter().skip(1).cloned());
        Ok(self)
    }
}

/// Electrode voltage limits, V.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoltageBounds<T> {
    pub min: T,
    pub max: T,
}

impl<T: Real> Default for VoltageBounds<T> {
    fn default() -> Self {
        Self { min: T::lit(-DEFAULT_VOLTAGE_LIMIT), max: T::lit(DEFAULT_VOLTAGE_LIMIT) }
    }
}

impl<T: Real> VoltageBounds<T> {
    pub fn contains(&self, v: T) -> bool {
        v >= self.min && v <= self.max
    }

    pub fn check(&self, names: &[String], v: &[T]) -> Result<()> {
        let bad: Vec<String> =
            names.iter().zip(v).filter(|(_, x)| !self.contains(**x)).map(|(n, _)| n.clone()).collect();
        if bad.is_empty() { Ok(()) } else { Err(Error::Bounds { electrodes: bad }) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Constant velocity with sudden start and stop.
    ConstantVelocity,
    /// z_s + Δz·sin²(πt/2t_T).
    SineSquared,
    /// Quintic minimum-jerk ramp z_s + Δz(10τ³ − 15τ⁴ + 6τ⁵).
    MinJerk,
}

impl std::str::FromStr for ProfileKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" | "constant-velocity" => Ok(Self::ConstantVelocity),
            "sine_squared" | "sine-squared" => Ok(Self::SineSquared),
            "min_jerk" | "min-jerk" | "min_jerk_poly5" => Ok(Self::MinJerk),
            _ => Err(Error::Argument(format!("unknown profile kind {s:?}"))),
        }
    }
}

/// Well-centre trajectory z₀(t) from `z_start` to `z_end` over `duration`.
/// Outside [0, duration] the centre is at rest at the nearer endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportProfile<T> {
    pub kind: ProfileKind,
    pub z_start: T,
    pub z_end: T,
    pub duration: T,
}

impl<T: Real> TransportProfile<T> {
    pub fn new(kind: ProfileKind, z_start: T, z_end: T, duration: T) -> Result<Self> {
        if !(duration > T::zero()) || !duration.is_finite() {
            return Err(Error::Argument("transport duration must be positive".into()));
        }
        if !z_start.is_finite() || !z_end.is_finite() {
            return Err(Error::Argument("transport endpoints must be finite".into()));
        }
        Ok(Self { kind, z_start, z_end, duration })
    }

    pub fn distance(&self) -> T {
        self.z_end - self.z_start
    }

    /// [z₀, ż₀, z̈₀] at time t. At the corners of the constant-velocity
    /// profile the right-hand limit of the velocity is returned.
    pub fn kinematics(&self, t: T) -> [T; 3] {
        let dz = self.distance();
        let tt = self.duration;
        if t < T::zero() {
            return [self.z_start, T::zero(), T::zero()];
        }
        if t >= tt {
            return [self.z_end, T::zero(), T::zero()];
        }
        let tau = t / tt;
        let pi = T::PI();
        match self.kind {
            ProfileKind::ConstantVelocity => [self.z_start + dz * tau, dz / tt, T::zero()],
            ProfileKind::SineSquared => {
                let s = (pi * tau * T::lit(0.5)).sin();
                [
                    self.z_start + dz * s * s,
                    dz * pi / (T::lit(2.0) * tt) * (pi * tau).sin(),
                    dz * pi * pi / (T::lit(2.0) * tt * tt) * (pi * tau).cos(),
                ]
            }
            ProfileKind::MinJerk => {
                let t2 = tau * tau;
                let t3 = t2 * tau;
                let p = T::lit(10.0) * t3 - T::lit(15.0) * t3 * tau + T::lit(6.0) * t3 * t2;
                let v = T::lit(30.0) * t2 * (T::one() - tau) * (T::one() - tau);
                let a = T::lit(60.0) * tau * (T::one() - tau) * (T::one() - T::lit(2.0) * tau);
                [self.z_start + dz * p, dz * v / tt, dz * a / (tt * tt)]
            }
        }
    }

    pub fn position(&self, t: T) -> T {
        self.kinematics(t)[0]
    }

    pub fn velocity(&self, t: T) -> T {
        self.kinematics(t)[1]
    }

    /// Velocity jumps (left, right) at the profile corners, if any.
    pub fn velocity_jumps(&self) -> Vec<(T, T, T)> {
        match self.kind {
            ProfileKind::ConstantVelocity => {
                let v = self.distance() / self.duration;
                vec![(T::zero(), T::zero(), v), (self.duration, v, T::zero())]
            }
            _ => Vec::new(),
        }
    }
}

/// Constraint set for [`solve_voltages`].
#[derive(Debug, Clone, PartialEq)]
pub enum VoltageTarget<T> {
    /// One harmonic well: U′(z0) = 0, U″(z0) = mω²/q.
    Well { z0: T, omega: T },
    /// Several wells, each given as (z0, ω).
    Wells(Vec<(T, T)>),
    /// Zero field at `center` and fitted quartic coefficients (a, b) about it.
    Quartic { center: T, a: T, b: T },
}

/// Voltages closest to `v_ref` in the 2-norm that satisfy `target` exactly.
///
/// Nothing is clipped: a solution outside `bounds` is an error naming the
/// offending electrodes.
pub fn solve_voltages<T: Real>(
    basis: &ElectrodeBasis<T>,
    target: &VoltageTarget<T>,
    v_ref: &[T],
    bounds: &VoltageBounds<T>,
    constants: &PhysicalConstants<T>,
) -> Result<Vec<T>> {
    if v_ref.len() != basis.len() {
        return Err(Error::Argument(format!("v_ref has {} entries for {} electrodes", v_ref.len(), basis.len())));
    }
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let add_well = |z0: T, omega: T, rows: &mut Vec<Vec<T>>, rhs: &mut Vec<T>| -> Result<()> {
        if !(omega > T::zero()) {
            return Err(Error::Argument("target frequency must be positive".into()));
        }
        rows.push(basis.row(z0, 1)?);
        rhs.push(T::zero());
        rows.push(basis.row(z0, 2)?);
        rhs.push(constants.curvature_for(omega));
        Ok(())
    };
    match target {
        VoltageTarget::Well { z0, omega } => add_well(*z0, *omega, &mut rows, &mut rhs)?,
        VoltageTarget::Wells(ws) => {
            for (z0, omega) in ws {
                add_well(*z0, *omega, &mut rows, &mut rhs)?;
            }
        }
        VoltageTarget::Quartic { center, a, b } => {
            let (ra, rb) = quartic_rows(basis, *center, basis.quartic_half_width())?;
            rows.push(basis.row(*center, 1)?);
            rhs.push(T::zero());
            rows.push(ra);
            rhs.push(*a);
            rows.push(rb);
            rhs.push(*b);
        }
    }
    if rows.len() > basis.len() {
        return Err(Error::Infeasible(format!("{} constraints for {} electrodes", rows.len(), basis.len())));
    }
    let v = min_norm_correction(&rows, &rhs, v_ref)
        .ok_or_else(|| Error::Infeasible("constraint rows are linearly dependent".into()))?;
    // dependent rows that slipped past the pivot test show up as residuals
    let tol = T::lit(1e-8).max(T::lit(256.0) * T::epsilon());
    for (r, b) in rows.iter().zip(&rhs) {
        let scale = r.iter().fold(T::zero(), |m, x| m.max(x.abs())) * (v.iter().fold(T::zero(), |m, x| m.max(x.abs())) + T::one());
        if (dot(r, &v) - *b).abs() > tol * (scale + b.abs()) {
            return Err(Error::Infeasible("constraints cannot be met simultaneously".into()));
        }
    }
    bounds.check(basis.names(), &v)?;
    Ok(v)
}

/// Options shared by the waveform synthesizers.
#[derive(Debug, Clone, Copy)]
pub struct SynthOptions<T> {
    pub dac_period: T,
    pub bounds: VoltageBounds<T>,
    /// Largest allowed single-electrode step between DAC samples, V.
    pub max_dac_step: T,
}

impl<T: Real> Default for SynthOptions<T> {
    fn default() -> Self {
        Self { dac_period: T::lit(DEFAULT_DAC_PERIOD), bounds: VoltageBounds::default(), max_dac_step: T::lit(1.0) }
    }
}

/// Number of DAC intervals needed to cover `duration`.
pub fn dac_intervals<T: Real>(duration: T, dac_period: T) -> usize {
    let x = duration / dac_period;
    // tolerate representation error in exact multiples
    let k = (x - T::lit(1e-9) * x.max(T::one())).ceil();
    k.to_usize().unwrap_or(1).max(1)
}

/// Constant-curvature transport: a well of frequency `omega` whose centre
/// follows `profile`, solved at `n_steps + 1` equally spaced times with each
/// solution warm-starting the next, then linearly resampled onto the DAC grid.
///
/// The grid has `ceil(t_T / dac_period)` intervals and one more sample.
pub fn synth_transport<T: Real>(
    basis: &ElectrodeBasis<T>,
    profile: &TransportProfile<T>,
    omega: T,
    n_steps: usize,
    v_ref: &[T],
    opts: &SynthOptions<T>,
    constants: &PhysicalConstants<T>,
) -> Result<VoltageWaveform<T>> {
    if n_steps == 0 {
        return Err(Error::Argument("n_steps must be positive".into()));
    }
    let tt = profile.duration;
    let mut knots: Vec<Vec<T>> = Vec::with_capacity(n_steps + 1);
    let mut prev = v_ref.to_vec();
    for j in 0..=n_steps {
        let t = tt * T::from_usize_lossy(j) / T::from_usize_lossy(n_steps);
        let z0 = profile.position(t);
        basis.check_domain(z0)?;
        let v = solve_voltages(basis, &VoltageTarget::Well { z0, omega }, &prev, &opts.bounds, constants)?;
        prev.clone_from(&v);
        knots.push(v);
    }
    let n = dac_intervals(tt, opts.dac_period);
    let samples = (0..=n)
        .map(|k| {
            let t = (opts.dac_period * T::from_usize_lossy(k)).min(tt);
            let x = t / tt * T::from_usize_lossy(n_steps);
            let j = x.floor().to_usize().unwrap_or(n_steps).min(n_steps - 1);
            let f = (x - T::from_usize_lossy(j)).min(T::one());
            knots[j].iter().zip(&knots[j + 1]).map(|(a, b)| *a + f * (*b - *a)).collect()
        })
        .collect();
    let wf = VoltageWaveform::new(basis.names().to_vec(), opts.dac_period, samples)?;
    let step = wf.max_step();
    if step > opts.max_dac_step {
        return Err(Error::Infeasible(format!(
            "DAC step of {:.3e} V exceeds the slew bound {:.3e} V",
            step.as_f64(),
            opts.max_dac_step.as_f64()
        )));
    }
    Ok(wf)
}

/// ∫₀^{t_T} ż₀(t) e^{iωt} dt. Its magnitude sets the residual excitation of a
/// transport in a harmonic well of frequency ω.
pub fn spectral_criterion<T: Real>(profile: &TransportProfile<T>, omega: T) -> Result<Complex<T>> {
    if !(omega > T::zero()) {
        return Err(Error::Argument("omega must be positive".into()));
    }
    let opts = QuadratureOptions {
        rel_tol: T::lit(1e-12),
        max_panel: Some(T::TAU() / omega / T::lit(50.0)),
        ..Default::default()
    };
    let r = integrate_complex(
        |t| Complex::from_polar(profile.velocity(t), omega * t),
        T::zero(),
        profile.duration,
        &opts,
    )?;
    Ok(r.value)
}

/// The trap frequency nearest to `omega` at which [`spectral_criterion`]
/// vanishes. All supported profiles have velocities symmetric about t_T/2,
/// so e^{−iωt_T/2}·F(ω) is real and its zeros are sign changes.
pub fn nearest_spectral_zero<T: Real>(profile: &TransportProfile<T>, omega: T) -> Result<T> {
    if !(omega > T::zero()) {
        return Err(Error::Argument("omega must be positive".into()));
    }
    let tt = profile.duration;
    let g = |w: T| -> Result<T> {
        let f = spectral_criterion(profile, w)?;
        Ok((f * Complex::from_polar(T::one(), -w * tt * T::lit(0.5))).re)
    };
    let spacing = T::TAU() / tt;
    let lo = (omega - T::lit(2.0) * spacing).max(spacing * T::lit(0.25));
    let hi = omega + T::lit(2.0) * spacing;
    let n = 64;
    let mut best: Option<T> = None;
    let mut wa = lo;
    let mut ga = g(wa)?;
    for k in 1..=n {
        let wb = lo + (hi - lo) * T::from_usize_lossy(k) / T::from_usize_lossy(n);
        let gb = g(wb)?;
        if ga == T::zero() || ga.signum() != gb.signum() {
            let (mut a, mut b, mut fa) = (wa, wb, ga);
            if ga != T::zero() {
                for _ in 0..200 {
                    let m = (a + b) * T::lit(0.5);
                    let fm = g(m)?;
                    if fm == T::zero() || (b - a) <= T::lit(4.0) * T::epsilon() * m {
                        a = m;
                        b = m;
                        break;
                    }
                    if fm.signum() == fa.signum() {
                        a = m;
                        fa = fm;
                    } else {
                        b = m;
                    }
                }
            }
            let root = (a + b) * T::lit(0.5);
            if best.is_none_or(|r| (root - omega).abs() < (r - omega).abs()) {
                best = Some(root);
            }
        }
        wa = wb;
        ga = gb;
    }
    best.ok_or(Error::Convergence { what: "spectral zero search", iterations: n })
}

/// Options for [`reparametrize_adiabatic`].
#[derive(Debug, Clone, Copy)]
pub struct AdiabaticOptions<T> {
    pub dac_period: T,
    /// Path resolution: number of intervals the s-range is split into.
    pub grid_intervals: usize,
    /// Voltage slew limit, V/s, used where the mode frequencies do not change.
    pub max_slew: T,
    pub max_duration: T,
    /// Length ℓ for the well-motion term: ion equilibria may move at most
    /// eps·ω·ℓ per second. Only used when positions are supplied.
    pub displacement_scale: T,
    /// Width of the smooth rate ramp at a tapered end, in units of
    /// 1/(eps·ω) with ω the lowest mode there; zero disables tapering.
    pub taper: T,
}

impl<T: Real> Default for AdiabaticOptions<T> {
    fn default() -> Self {
        Self {
            dac_period: T::lit(DEFAULT_DAC_PERIOD),
            grid_intervals: 2048,
            max_slew: T::lit(1e8),
            max_duration: T::lit(1e-3),
            displacement_scale: T::lit(1e-5),
            taper: T::one(),
        }
    }
}

/// Time parametrisation s(t) of a voltage path on the DAC grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdiabaticSchedule<T> {
    /// Path parameter at each DAC sample, first and last at the range ends.
    pub s: Vec<T>,
    /// Mode frequencies at each DAC sample, ascending per sample.
    pub frequencies: Vec<Vec<T>>,
    /// Continuous schedule length, s; the DAC realisation rounds it up.
    pub duration: T,
    pub dac_period: T,
    pub eps: T,
    /// Largest |Δω|/(ω_k ω_{k+1} Δt) over DAC steps and modes.
    pub certificate: T,
}

impl<T: Real> AdiabaticSchedule<T> {
    pub fn dac_duration(&self) -> T {
        self.dac_period * T::from_usize_lossy(self.s.len() - 1)
    }
}

/// Safety factor between the scheduled rate and the bound, absorbing the
/// interpolation error of the path grid.
const SCHEDULE_MARGIN: f64 = 1e-3;
const FLAT_FREQUENCY: f64 = 1e-12;

/// Time-parametrises a voltage path so that every mode frequency obeys
/// (1/ω²)|dω/dt| ≤ `eps`.
///
/// Equivalently |d(1/ω)/dt| ≤ eps, so the shortest schedule spends
/// |Δ(1/ω)|/eps on each path interval (the largest over modes) and the total
/// duration is the total variation of 1/ω divided by eps. Intervals where no
/// frequency changes advance at the voltage slew limit instead. DAC samples
/// are placed at equal increments of that cost, and the bound is then
/// certified on the samples themselves with frequencies recomputed by
/// `mode_freq`.
pub fn reparametrize_adiabatic<T: Real>(
    path: &dyn Fn(T) -> Vec<T>,
    mode_freq: &mut dyn FnMut(T) -> Result<Vec<T>>,
    s_range: (T, T),
    eps: T,
    opts: &AdiabaticOptions<T>,
) -> Result<AdiabaticSchedule<T>> {
    schedule(path, &mut |s| Ok((mode_freq(s)?, Vec::new())), s_range, eps, opts, (false, false))
}

/// Cost-time reached after wall time `t` when the rate ramps in over `a`,
/// runs at unit speed, and ramps out over `b`; `d` is the full duration.
fn warp<T: Real>(t: T, a: T, b: T, d: T) -> T {
    let pi = T::PI();
    let half = T::lit(0.5);
    let ramp = |u: T, w: T| if w > T::zero() { u * half - w / (T::lit(2.0) * pi) * (pi * u / w).sin() } else { T::zero() };
    let total = d - (a + b) * half;
    if t <= a {
        ramp(t, a)
    } else if t >= d - b {
        total - ramp(d - t, b)
    } else {
        t - a * half
    }
}

/// As [`reparametrize_adiabatic`], with `modes` also returning the ion
/// equilibrium positions so the well motion is bounded by the same eps.
pub(crate) fn schedule<T: Real>(
    path: &dyn Fn(T) -> Vec<T>,
    modes: &mut dyn FnMut(T) -> Result<(Vec<T>, Vec<T>)>,
    s_range: (T, T),
    eps: T,
    opts: &AdiabaticOptions<T>,
    tapers: (bool, bool),
) -> Result<AdiabaticSchedule<T>> {
    if !(eps > T::zero()) || !(eps < T::one()) {
        return Err(Error::Argument(format!("adiabaticity bound must lie in (0, 1), got {}", eps.as_f64())));
    }
    let (s0, s1) = s_range;
    if !(s1 > s0) {
        return Err(Error::Argument("empty path range".into()));
    }
    let dt = opts.dac_period;
    let mut grid = opts.grid_intervals.max(16);
    for _attempt in 0..4 {
        let node = |j: usize| s0 + (s1 - s0) * T::from_usize_lossy(j) / T::from_usize_lossy(grid);
        let mut inv: Vec<Vec<T>> = Vec::with_capacity(grid + 1);
        let mut volts: Vec<Vec<T>> = Vec::with_capacity(grid + 1);
        let mut pos: Vec<(T, Vec<T>)> = Vec::with_capacity(grid + 1);
        for j in 0..=grid {
            let s = node(j);
            let (w, z) = modes(s)?;
            if w.iter().any(|x| !(*x > T::zero())) {
                return Err(Error::Argument(format!("non-positive mode frequency at s = {}", s.as_f64())));
            }
            inv.push(w.iter().map(|x| x.recip()).collect());
            pos.push((w[0], z));
            volts.push(path(s));
        }
        let eff = eps * (T::one() - T::lit(SCHEDULE_MARGIN));
        let mut cost = vec![T::zero(); grid + 1];
        for j in 0..grid {
            let mut du = T::zero();
            let mut flat = true;
            for (a, b) in inv[j].iter().zip(&inv[j + 1]) {
                let d = (*b - *a).abs();
                du = du.max(d);
                if d > T::lit(FLAT_FREQUENCY) * a.max(*b) {
                    flat = false;
                }
            }
            let dz = pos[j].1.iter().zip(&pos[j + 1].1).fold(T::zero(), |m, (a, b)| m.max((*b - *a).abs()));
            if dz > T::zero() {
                flat = false;
            }
            let c = if flat {
                let dv = volts[j].iter().zip(&volts[j + 1]).fold(T::zero(), |m, (a, b)| m.max((*b - *a).abs()));
                dv / opts.max_slew
            } else {
                let w = pos[j].0.min(pos[j + 1].0);
                du.max(dz / (w * opts.displacement_scale)) / eff
            };
            cost[j + 1] = cost[j] + c;
        }
        let total = cost[grid];
        let width = |on: bool, w: T| if on { opts.taper / (eff * w) } else { T::zero() };
        let mut ta = width(tapers.0, pos[0].0);
        let mut tb = width(tapers.1, pos[grid].0);
        if (ta + tb) * T::lit(0.5) > total {
            let f = total / ((ta + tb) * T::lit(0.5));
            ta *= f;
            tb *= f;
        }
        let duration = total + (ta + tb) * T::lit(0.5);
        if duration > opts.max_duration {
            return Err(Error::Duration { needed: duration.as_f64(), max: opts.max_duration.as_f64() });
        }
        let n = dac_intervals(duration, dt);
        let mut s_samples = Vec::with_capacity(n + 1);
        let mut j = 0;
        for k in 0..=n {
            if k == n {
                s_samples.push(s1);
                break;
            }
            let target = warp(duration * T::from_usize_lossy(k) / T::from_usize_lossy(n), ta, tb, duration);
            while j + 1 < grid && cost[j + 1] < target {
                j += 1;
            }
            let span = cost[j + 1] - cost[j];
            let f = if span > T::zero() { ((target - cost[j]) / span).min(T::one()).max(T::zero()) } else { T::zero() };
            s_samples.push(node(j) + f * (node(j + 1) - node(j)));
        }
        let frequencies: Vec<Vec<T>> = s_samples.iter().map(|s| Ok(modes(*s)?.0)).collect::<Result<_>>()?;
        let mut cert = T::zero();
        for w in frequencies.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                cert = cert.max((*b - *a).abs() / (*a * *b * dt));
            }
        }
        if cert <= eps * (T::one() + T::lit(1e-6)) {
            return Ok(AdiabaticSchedule { s: s_samples, frequencies, duration, dac_period: dt, eps, certificate: cert });
        }
        log::debug!("adiabatic certificate {} above {}; refining path grid", cert.as_f64(), eps.as_f64());
        grid *= 4;
    }
    Err(Error::Convergence { what: "adiabatic reparametrisation", iterations: 4 })
}

/// Linear voltage path between separation endpoints with asymmetry controls.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationRamp<T> {
    /// Single well centred at z = 0.
    pub v_start: Vec<T>,
    /// Double well.
    pub v_end: Vec<T>,
    /// Adiabaticity bound up to the frequency minimum.
    pub eps1: T,
    /// Adiabaticity bound after the frequency minimum.
    pub eps2: T,
    /// Extra voltage on O2, ramped in linearly with s.
    pub o2_ramp: T,
    /// Extra voltage on X, ramped in linearly with s.
    pub x_tune: T,
    /// Extra +½·value on A and −½·value on B, ramped in linearly with s.
    pub ab_differential: T,
    /// Static offset on O2 held along the whole path.
    pub o2_offset: T,
}

impl<T: Real> SeparationRamp<T> {
    pub fn new(v_start: Vec<T>, v_end: Vec<T>) -> Self {
        Self {
            v_start,
            v_end,
            eps1: T::lit(0.025),
            eps2: T::lit(0.015),
            o2_ramp: T::zero(),
            x_tune: T::zero(),
            ab_differential: T::zero(),
            o2_offset: T::zero(),
        }
    }

    pub fn validate(&self, basis: &ElectrodeBasis<T>) -> Result<()> {
        if self.v_start.len() != basis.len() || self.v_end.len() != basis.len() {
            return Err(Error::Argument("separation endpoints must have one voltage per electrode".into()));
        }
        for (name, e) in [("eps1", self.eps1), ("eps2", self.eps2)] {
            if !(e > T::zero() && e < T::one()) {
                return Err(Error::Argument(format!("{name} must lie in (0, 1)")));
            }
        }
        let need = |name: &str, used: bool| -> Result<()> {
            if used && basis.index_of(name).is_none() {
                return Err(Error::Argument(format!("asymmetry control needs an electrode named {name}")));
            }
            Ok(())
        };
        need("O2", self.o2_ramp != T::zero() || self.o2_offset != T::zero())?;
        need("X", self.x_tune != T::zero())?;
        need("A", self.ab_differential != T::zero())?;
        need("B", self.ab_differential != T::zero())?;
        Ok(())
    }
}

/// Endpoint design for the default separation: a harmonic single well with
/// no quartic term at z = 0, and two equal wells at ±`well_offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparationDesign<T> {
    pub omega_start: T,
    pub omega_end: T,
    pub well_offset: T,
    pub v_ref_start: Vec<T>,
    pub v_ref_end: Vec<T>,
}

fn symmetrized(v: [f64; 5]) -> Vec<f64> {
    (0..5).map(|i| 0.5 * (v[i] + v[4 - i])).collect()
}

impl<T: Real> Default for SeparationDesign<T> {
    fn default() -> Self {
        let start = symmetrized([2.433, -0.3763, -1.7089, -0.3831, 2.473]);
        let end = symmetrized([4.441, -5.252, -0.649, -5.411, 5.952]);
        Self {
            omega_start: T::TAU() * T::lit(2.6e6),
            omega_end: T::TAU() * T::lit(2.8e6),
            well_offset: T::lit(DEFAULT_SPACING),
            v_ref_start: start.into_iter().map(T::lit).collect(),
            v_ref_end: end.into_iter().map(T::lit).collect(),
        }
    }
}

impl<T: Real> SeparationDesign<T> {
    pub fn build(
        &self,
        basis: &ElectrodeBasis<T>,
        bounds: &VoltageBounds<T>,
        constants: &PhysicalConstants<T>,
    ) -> Result<SeparationRamp<T>> {
        let a = constants.curvature_for(self.omega_start) * T::lit(0.5);
        let v_start = solve_voltages(
            basis,
            &VoltageTarget::Quartic { center: T::zero(), a, b: T::zero() },
            &self.v_ref_start,
            bounds,
            constants,
        )?;
        let d = self.well_offset;
        let v_end = solve_voltages(
            basis,
            &VoltageTarget::Wells(vec![(-d, self.omega_end), (d, self.omega_end)]),
            &self.v_ref_end,
            bounds,
            constants,
        )?;
        Ok(SeparationRamp::new(v_start, v_end))
    }
}

/// A [`SeparationRamp`] bound to its electrode basis.
#[derive(Debug, Clone)]
pub struct SeparationPath<'a, T> {
    basis: &'a ElectrodeBasis<T>,
    ramp: SeparationRamp<T>,
    control: Vec<T>,
    offset: Vec<T>,
}

impl<'a, T: Real> SeparationPath<'a, T> {
    pub fn new(basis: &'a ElectrodeBasis<T>, ramp: SeparationRamp<T>) -> Result<Self> {
        ramp.validate(basis)?;
        let n = basis.len();
        let mut control = vec![T::zero(); n];
        let mut offset = vec![T::zero(); n];
        if let Some(i) = basis.index_of("O2") {
            control[i] += ramp.o2_ramp;
            offset[i] += ramp.o2_offset;
        }
        if let Some(i) = basis.index_of("X") {
            control[i] += ramp.x_tune;
        }
        if let (Some(a), Some(b)) = (basis.index_of("A"), basis.index_of("B")) {
            control[a] += ramp.ab_differential * T::lit(0.5);
            control[b] -= ramp.ab_differential * T::lit(0.5);
        }
        Ok(Self { basis, ramp, control, offset })
    }

    pub fn ramp(&self) -> &SeparationRamp<T> {
        &self.ramp
    }
}

impl<T: Real> VoltagePath<T> for SeparationPath<'_, T> {
    fn basis(&self) -> &ElectrodeBasis<T> {
        self.basis
    }

    fn voltages_at(&self, s: T) -> Vec<T> {
        let r = &self.ramp;
        (0..self.basis.len())
            .map(|i| {
                (T::one() - s) * r.v_start[i] + s * r.v_end[i] + s * self.control[i] + self.offset[i]
            })
            .collect()
    }
}

/// Equilibria of an N-ion crystal tracked along a voltage path on a fixed
/// grid; queries between grid points relax from the nearest tracked node.
pub(crate) struct PathCrystal<'p, T> {
    path: &'p dyn VoltagePath<T>,
    constants: PhysicalConstants<T>,
    nodes: Vec<Vec<T>>,
}

impl<'p, T: Real> PathCrystal<'p, T> {
    pub fn track(
        path: &'p dyn VoltagePath<T>,
        n_ions: usize,
        intervals: usize,
        seed_spacing: T,
        constants: &PhysicalConstants<T>,
    ) -> Result<Self> {
        let basis = path.basis();
        let start = basis.potential(path.voltages_at(T::zero()))?;
        let centre = locate_minimum(&start, T::zero())?;
        let half = T::from_usize_lossy(n_ions - 1) * T::lit(0.5);
        let mut z: Vec<T> =
            (0..n_ions).map(|i| centre + (T::from_usize_lossy(i) - half) * seed_spacing).collect();
        let mut nodes = Vec::with_capacity(intervals + 1);
        for j in 0..=intervals {
            let s = T::from_usize_lossy(j) / T::from_usize_lossy(intervals);
            let pot = basis.potential(path.voltages_at(s))?;
            z = crystal_modes::track(&pot, &z, constants)?;
            nodes.push(z.clone());
        }
        Ok(Self { path, constants: *constants, nodes })
    }

    fn node_for(&self, s: T) -> &[T] {
        let n = self.nodes.len() - 1;
        let x = (s.max(T::zero()).min(T::one()) * T::from_usize_lossy(n)).round();
        &self.nodes[x.to_usize().unwrap_or(0).min(n)]
    }

    /// Mode frequencies at s, ascending.
    pub fn frequencies(&self, s: T) -> Result<Vec<T>> {
        let pot = self.path.basis().potential(self.path.voltages_at(s))?;
        let z = crystal_modes::track(&pot, self.node_for(s), &self.constants)?;
        let e = crystal_modes::crystal_energy(&pot, &z, self.constants.coulomb_volts())?;
        Ok(spectrum_from_hessian(&e.hessian, &self.constants)?.frequencies)
    }

    /// Mode frequencies (ascending) and equilibrium positions at s.
    pub fn modes(&self, s: T) -> Result<(Vec<T>, Vec<T>)> {
        let pot = self.path.basis().potential(self.path.voltages_at(s))?;
        let z = crystal_modes::track(&pot, self.node_for(s), &self.constants)?;
        let e = crystal_modes::crystal_energy(&pot, &z, self.constants.coulomb_volts())?;
        Ok((spectrum_from_hessian(&e.hessian, &self.constants)?.frequencies, z))
    }
}

/// Options for [`synth_separation`].
#[derive(Debug, Clone, Copy)]
pub struct SeparationOptions<T> {
    pub synth: SynthOptions<T>,
    pub adiabatic: AdiabaticOptions<T>,
    /// Tracking grid for the crystal along the path.
    pub track_intervals: usize,
    pub seed_spacing: T,
    /// Centre of the quartic fit used for the topology check, m.
    pub wedge_center: T,
}

impl<T: Real> Default for SeparationOptions<T> {
    fn default() -> Self {
        Self {
            synth: SynthOptions::default(),
            adiabatic: AdiabaticOptions::default(),
            track_intervals: 512,
            seed_spacing: T::lit(3e-6),
            wedge_center: T::zero(),
        }
    }
}

/// One adiabatic stage of a separation.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport<T> {
    pub s_range: (T, T),
    pub eps: T,
    /// Continuous schedule length, s.
    pub duration: T,
    /// Length on the DAC grid, s.
    pub dac_duration: T,
    pub certificate: T,
}

/// Sign change of the quadratic coefficient along the path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WedgeCrossing<T> {
    pub s: T,
    /// Quartic coefficient at the crossing, V/m⁴.
    pub b: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeparationResult<T> {
    pub waveform: VoltageWaveform<T>,
    /// Path parameter at every DAC sample.
    pub s: Vec<T>,
    /// Mode frequencies at every DAC sample, ascending per sample.
    pub frequencies: Vec<Vec<T>>,
    /// Path parameter where the lowest mode frequency is smallest.
    pub stage_boundary: T,
    pub min_frequency: T,
    pub stages: [StageReport<T>; 2],
    pub crossing: WedgeCrossing<T>,
}

impl<T: Real> SeparationResult<T> {
    pub fn duration(&self) -> T {
        self.waveform.duration()
    }
}

/// Locates the sign change of a along the path. Voltages are linear in s,
/// and so is a; b is checked at the crossing.
pub fn wedge_crossing<T: Real>(path: &dyn VoltagePath<T>, center: T) -> Result<WedgeCrossing<T>> {
    let basis = path.basis();
    let (ra, rb) = quartic_rows(basis, center, basis.quartic_half_width())?;
    let a = |s: T| dot(&ra, &path.voltages_at(s));
    let (a0, a1) = (a(T::zero()), a(T::one()));
    if !(a0 > T::zero()) || !(a1 < T::zero()) {
        return Err(Error::Topology(format!(
            "quadratic coefficient does not change sign from positive to negative (a(0) = {:.3e}, a(1) = {:.3e} V/m²)",
            a0.as_f64(),
            a1.as_f64()
        )));
    }
    let s = a0 / (a0 - a1);
    let b = dot(&rb, &path.voltages_at(s));
    if !(b > T::zero()) {
        return Err(Error::Topology(format!("quartic coefficient {:.3e} V/m⁴ is not positive where a vanishes", b.as_f64())));
    }
    Ok(WedgeCrossing { s, b })
}

/// Argmin of the lowest tracked mode frequency: grid scan, then golden section.
fn frequency_minimum<T: Real>(crystal: &PathCrystal<'_, T>, grid: usize) -> Result<(T, T)> {
    let lowest = |s: T| -> Result<T> { Ok(crystal.frequencies(s)?[0]) };
    let mut best = (T::zero(), T::infinity());
    let mut best_j = 0;
    for j in 0..=grid {
        let s = T::from_usize_lossy(j) / T::from_usize_lossy(grid);
        let w = lowest(s)?;
        if w < best.1 {
            best = (s, w);
            best_j = j;
        }
    }
    let h = T::one() / T::from_usize_lossy(grid);
    let (mut a, mut b) = (
        (T::from_usize_lossy(best_j) * h - h).max(T::zero()),
        (T::from_usize_lossy(best_j) * h + h).min(T::one()),
    );
    let g = T::lit(0.618_033_988_749_894_9);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (lowest(c)?, lowest(d)?);
    for _ in 0..100 {
        if (b - a) < T::lit(1e-10) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = lowest(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = lowest(d)?;
        }
    }
    let s = (a + b) * T::lit(0.5);
    let w = lowest(s)?;
    if w < best.1 { Ok((s, w)) } else { Ok(best) }
}

/// Two-stage separation waveform for `n_ions` ions.
///
/// The voltages follow the linear path of `ramp`. Stage 1 runs from the
/// single well to the minimum of the lowest mode frequency under `eps1`,
/// stage 2 from there to the double well under `eps2`. Along the path the
/// quadratic coefficient at the wedge centre must change sign while the
/// quartic coefficient is positive.
pub fn synth_separation<T: Real>(
    basis: &ElectrodeBasis<T>,
    ramp: &SeparationRamp<T>,
    n_ions: usize,
    opts: &SeparationOptions<T>,
    constants: &PhysicalConstants<T>,
) -> Result<SeparationResult<T>> {
    if n_ions == 0 {
        return Err(Error::Argument("n_ions must be positive".into()));
    }
    let path = SeparationPath::new(basis, ramp.clone())?;
    let crossing = wedge_crossing(&path, opts.wedge_center)?;
    for s in [T::zero(), T::one()] {
        opts.synth.bounds.check(basis.names(), &path.voltages_at(s))?;
    }
    let crystal = PathCrystal::track(&path, n_ions, opts.track_intervals, opts.seed_spacing, constants)?;
    let (boundary, min_frequency) = frequency_minimum(&crystal, opts.track_intervals.min(256))?;
    if !(boundary > T::zero() && boundary < T::one()) {
        return Err(Error::Topology("lowest mode frequency has no interior minimum along the path".into()));
    }
    let volts = |s: T| path.voltages_at(s);
    let mut modes = |s: T| crystal.modes(s);
    let mut aopts = opts.adiabatic;
    aopts.dac_period = opts.synth.dac_period;
    let st1 = schedule(&volts, &mut modes, (T::zero(), boundary), ramp.eps1, &aopts, (true, false))?;
    aopts.max_duration -= st1.duration;
    let st2 = schedule(&volts, &mut modes, (boundary, T::one()), ramp.eps2, &aopts, (false, true))?;
    let mut s = st1.s.clone();
    s.extend(st2.s.iter().skip(1).cloned());
    let mut frequencies = st1.frequencies.clone();
    frequencies.extend(st2.frequencies.iter().skip(1).cloned());
    let samples: Vec<Vec<T>> = s.iter().map(|x| path.voltages_at(*x)).collect();
    let waveform = VoltageWaveform::new(basis.names().to_vec(), opts.synth.dac_period, samples)?;
    waveform.check_bounds(&opts.synth.bounds)?;
    let report = |st: &AdiabaticSchedule<T>, range: (T, T)| StageReport {
        s_range: range,
        eps: st.eps,
        duration: st.duration,
        dac_duration: st.dac_duration(),
        certificate: st.certificate,
    };
    Ok(SeparationResult {
        waveform,
        s,
        frequencies,
        stage_boundary: boundary,
        min_frequency,
        stages: [report(&st1, (T::zero(), boundary)), report(&st2, (boundary, T::one()))],
        crossing,
    })
}

/// Quartic coefficients (a, b) about `center` for each voltage set.
pub fn quartic_along<T: Real>(basis: &ElectrodeBasis<T>, voltages: &[Vec<T>], center: T) -> Result<Vec<(T, T)>> {
    voltages
        .iter()
        .map(|v| {
            let p = basis.potential(v.clone())?;
            let f = fit_quartic(&p, center, basis.quartic_half_width())?;
            Ok((f.a, f.b))
        })
        .collect()
}
