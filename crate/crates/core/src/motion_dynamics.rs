//! Motional excitation: coherent displacements from transport, classical
//! trajectories of one or more ions, projection onto normal modes,
//! compensating field pulses and a squeezing estimate.
//!
//! For a well of frequency ω the coherent amplitude of a classical state is
//! α = √(mω/2ħ)·(δz + i·δż/ω), where δz and δż are measured from the well
//! minimum in its co-moving frame.

use num_complex::Complex;

use crate::constants::PhysicalConstants;
use crate::crystal_modes::{self, IonCrystal, ModeSpectrum};
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::ode::{DormandPrince, OdeOptions};
use crate::quadrature::{integrate_complex, QuadratureOptions};
use crate::scalar::Real;
use crate::trap_model::{AxialPotential, BasisFn, ElectrodeBasis};
use crate::waveform_synth::{TransportProfile, VoltageWaveform};

/// Reference frame an amplitude is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    /// Frame of the instantaneous well minimum.
    CoMoving,
    /// Laboratory frame, valid for a static potential.
    Lab,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoherentAmplitude<T> {
    pub alpha: Complex<T>,
    pub mode_index: usize,
    /// Frequency of the mode the amplitude refers to, rad/s.
    pub omega: T,
    pub frame: Frame,
}

impl<T: Real> CoherentAmplitude<T> {
    pub fn new(alpha: Complex<T>, omega: T) -> Self {
        Self { alpha, mode_index: 0, omega, frame: Frame::CoMoving }
    }

    /// Mean occupation |α|².
    pub fn nbar(&self) -> T {
        self.alpha.norm_sqr()
    }
}

/// Positions (m) and velocities (m/s) of all ions at time t (s).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState<T> {
    pub t: T,
    pub positions: Vec<T>,
    pub velocities: Vec<T>,
}

impl<T: Real> TrajectoryState<T> {
    pub fn at_rest(t: T, positions: Vec<T>) -> Self {
        let n = positions.len();
        Self { t, positions, velocities: vec![T::zero(); n] }
    }

    pub fn n_ions(&self) -> usize {
        self.positions.len()
    }

    fn validate(&self) -> Result<()> {
        if self.positions.is_empty() || self.positions.len() != self.velocities.len() {
            return Err(Error::Argument("state needs matching, non-empty position and velocity lists".into()));
        }
        if self.positions.iter().chain(&self.velocities).any(|x| !x.is_finite()) || !self.t.is_finite() {
            return Err(Error::Argument("state contains non-finite values".into()));
        }
        if self.positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("ion positions must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// Uniform field pulse E(t) = E₀ cos(ω(t − t_start) + φ_E) for t_start ≤ t ≤ t_start + t_E.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivePulse<T> {
    /// Field amplitude, V/m.
    pub e0: T,
    /// Pulse length, s.
    pub t_e: T,
    pub phi_e: T,
    /// Drive frequency, rad/s.
    pub omega: T,
    /// Switch-on time, s.
    pub t_start: T,
}

impl<T: Real> DrivePulse<T> {
    pub fn field(&self, t: T) -> T {
        let x = t - self.t_start;
        if x < T::zero() || x > self.t_e {
            T::zero()
        } else {
            self.e0 * (self.omega * x + self.phi_e).cos()
        }
    }
}

/// Closed form for a sudden constant-velocity transport:
/// α = √(mω/2ħ)·i(v/ω)(1 − e^{−iωt_T}).
pub fn alpha_impulsive<T: Real>(v: T, omega: T, t_t: T, constants: &PhysicalConstants<T>) -> Result<CoherentAmplitude<T>> {
    if !(omega > T::zero()) {
        return Err(Error::Argument("omega must be positive".into()));
    }
    let phase = (omega * t_t) % T::TAU();
    let one_minus = Complex::new(T::one(), T::zero()) - Complex::from_polar(T::one(), -phase);
    let alpha = Complex::new(T::zero(), constants.alpha_scale(omega) * v / omega) * one_minus;
    Ok(CoherentAmplitude::new(alpha, omega))
}

/// α(t_T) = −√(mω/2ħ)·e^{−iωt_T}∫₀^{t_T} ż₀(t)e^{iωt}dt by adaptive
/// quadrature, with panels no longer than a fiftieth of a trap period.
pub fn alpha_transport_quadrature<T: Real, F: Fn(T) -> T>(
    z0_dot: F,
    omega: T,
    t_t: T,
    constants: &PhysicalConstants<T>,
) -> Result<CoherentAmplitude<T>> {
    if !(omega > T::zero()) {
        return Err(Error::Argument("omega must be positive".into()));
    }
    if !(t_t >= T::zero()) {
        return Err(Error::Argument("transport duration must be non-negative".into()));
    }
    let opts = QuadratureOptions {
        rel_tol: T::lit(1e-12),
        max_panel: Some(T::TAU() / omega / T::lit(50.0)),
        ..Default::default()
    };
    // phases are reduced modulo 2π to keep e^{iωt} accurate over long runs
    let r = integrate_complex(|t| Complex::from_polar(z0_dot(t), (omega * t) % T::TAU()), T::zero(), t_t, &opts)?;
    let alpha = -Complex::from_polar(constants.alpha_scale(omega), -((omega * t_t) % T::TAU())) * r.value;
    Ok(CoherentAmplitude::new(alpha, omega))
}

/// [`alpha_transport_quadrature`] for a [`TransportProfile`].
pub fn alpha_for_profile<T: Real>(
    profile: &TransportProfile<T>,
    omega: T,
    constants: &PhysicalConstants<T>,
) -> Result<CoherentAmplitude<T>> {
    alpha_transport_quadrature(|t| profile.velocity(t), omega, profile.duration, constants)
}

/// Time-dependent axial drive seen by the ions.
///
/// Motion is integrated in a frame displaced by r(t); drives that follow a
/// known well trajectory use it to avoid cancellation between large lab
/// coordinates and small excursions.
pub trait AxialDrive<T: Real>: Sync {
    /// ∂U/∂z in V/m at lab position y + r(t).
    fn frame_gradient(&self, y: T, t: T) -> Result<T>;

    /// Frame reference [r, ṙ, r̈] (right-hand limits at corners).
    fn frame(&self, _t: T) -> [T; 3] {
        [T::zero(); 3]
    }

    /// ṙ(t⁺) − ṙ(t⁻).
    fn frame_velocity_jump(&self, _t: T) -> T {
        T::zero()
    }

    /// Times where the drive or frame is not smooth.
    fn breakpoints(&self) -> Vec<T>;

    /// Lab-frame region the ions must stay in, m.
    fn domain(&self) -> (T, T);

    /// Time after which the drive is static, s.
    fn end_time(&self) -> T;
}

/// Electrode voltages interpolated linearly in time between DAC samples.
pub struct WaveformDrive<'a, T> {
    waveform: &'a VoltageWaveform<T>,
    basis: &'a ElectrodeBasis<T>,
}

impl<'a, T: Real> WaveformDrive<'a, T> {
    pub fn new(waveform: &'a VoltageWaveform<T>, basis: &'a ElectrodeBasis<T>) -> Result<Self> {
        if waveform.names() != basis.names() {
            return Err(Error::Argument("waveform electrodes do not match the basis".into()));
        }
        Ok(Self { waveform, basis })
    }

    /// Potential at the end of the waveform.
    pub fn final_potential(&self) -> Result<AxialPotential<'a, T>> {
        self.basis.potential(self.waveform.last().to_vec())
    }
}

impl<T: Real> AxialDrive<T> for WaveformDrive<'_, T> {
    fn frame_gradient(&self, y: T, t: T) -> Result<T> {
        self.basis.check_domain(y)?;
        let (k, f) = self.waveform.locate(t);
        let s = self.waveform.samples();
        let mut g = T::zero();
        for (i, phi) in self.basis.functions().iter().enumerate() {
            let v = s[k][i] + f * (s[k + 1][i] - s[k][i]);
            if v != T::zero() {
                g += v * phi.derivs(y)?[1];
            }
        }
        Ok(g)
    }

    fn breakpoints(&self) -> Vec<T> {
        (1..=self.waveform.intervals()).map(|k| self.waveform.time(k)).collect()
    }

    fn domain(&self) -> (T, T) {
        self.basis.domain()
    }

    fn end_time(&self) -> T {
        self.waveform.duration()
    }
}

/// Ideal harmonic well of fixed frequency whose centre follows a profile.
#[derive(Debug, Clone, Copy)]
pub struct MovingHarmonicWell<T> {
    pub profile: TransportProfile<T>,
    pub omega: T,
    curvature: T,
    margin: T,
}

impl<T: Real> MovingHarmonicWell<T> {
    pub fn new(profile: TransportProfile<T>, omega: T, constants: &PhysicalConstants<T>) -> Result<Self> {
        if !(omega > T::zero()) {
            return Err(Error::Argument("omega must be positive".into()));
        }
        Ok(Self { profile, omega, curvature: constants.curvature_for(omega), margin: T::lit(1e-3) })
    }

    /// The well in its own frame, as a one-electrode basis at 1 V.
    pub fn frame_basis(&self) -> Result<ElectrodeBasis<T>> {
        ElectrodeBasis::new(
            vec!["well".into()],
            vec![BasisFn::Polynomial {
                center: T::zero(),
                coeffs: vec![T::zero(), T::zero(), self.curvature * T::lit(0.5)],
            }],
            (-self.margin, self.margin),
        )
    }
}

impl<T: Real> AxialDrive<T> for MovingHarmonicWell<T> {
    fn frame_gradient(&self, y: T, _t: T) -> Result<T> {
        Ok(self.curvature * y)
    }

    fn frame(&self, t: T) -> [T; 3] {
        self.profile.kinematics(t)
    }

    fn frame_velocity_jump(&self, t: T) -> T {
        self.profile
            .velocity_jumps()
            .iter()
            .filter(|(tb, _, _)| *tb == t)
            .map(|(_, l, r)| *r - *l)
            .sum()
    }

    fn breakpoints(&self) -> Vec<T> {
        vec![T::zero(), self.profile.duration]
    }

    fn domain(&self) -> (T, T) {
        let (a, b) = (self.profile.z_start, self.profile.z_end);
        (a.min(b) - self.margin, a.max(b) + self.margin)
    }

    fn end_time(&self) -> T {
        self.profile.duration
    }
}

/// Adds a uniform field pulse to another drive.
pub struct PulsedDrive<'a, T> {
    pub inner: &'a dyn AxialDrive<T>,
    pub pulse: DrivePulse<T>,
}

impl<T: Real> AxialDrive<T> for PulsedDrive<'_, T> {
    fn frame_gradient(&self, y: T, t: T) -> Result<T> {
        // U gains −E·z, so the gradient drops by E
        Ok(self.inner.frame_gradient(y, t)? - self.pulse.field(t))
    }

    fn frame(&self, t: T) -> [T; 3] {
        self.inner.frame(t)
    }

    fn frame_velocity_jump(&self, t: T) -> T {
        self.inner.frame_velocity_jump(t)
    }

    fn breakpoints(&self) -> Vec<T> {
        let mut b = self.inner.breakpoints();
        b.push(self.pulse.t_start);
        b.push(self.pulse.t_start + self.pulse.t_e);
        b
    }

    fn domain(&self) -> (T, T) {
        self.inner.domain()
    }

    fn end_time(&self) -> T {
        self.inner.end_time().max(self.pulse.t_start + self.pulse.t_e)
    }
}

/// Integration controls for [`integrate_classical`] and [`integrate_crystal`].
#[derive(Debug, Clone, Copy)]
pub struct IntegrationOptions<T> {
    pub rtol: T,
    /// Absolute position tolerance, m.
    pub atol_position: T,
    /// Converts the position tolerance to a velocity tolerance, rad/s.
    pub velocity_scale: T,
    /// Interval between recorded states; `None` records only the end.
    pub sample_interval: Option<T>,
}

impl<T: Real> Default for IntegrationOptions<T> {
    fn default() -> Self {
        Self { rtol: T::lit(1e-10), atol_position: T::lit(1e-13), velocity_scale: T::lit(1e7), sample_interval: None }
    }
}

/// Recorded trajectory. `samples` are lab-frame states; `final_frame` is the
/// last state relative to the drive's frame reference, which is what the
/// amplitude extractors expect for moving wells.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub samples: Vec<TrajectoryState<T>>,
    pub final_frame: TrajectoryState<T>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_lab(&self) -> &TrajectoryState<T> {
        &self.samples[self.samples.len() - 1]
    }
}

/// Single ion: m z̈ = −q ∂U/∂z.
pub fn integrate_classical<T: Real>(
    drive: &dyn AxialDrive<T>,
    init: &TrajectoryState<T>,
    t_end: T,
    constants: &PhysicalConstants<T>,
    opts: &IntegrationOptions<T>,
) -> Result<Trajectory<T>> {
    if init.n_ions() != 1 {
        return Err(Error::Argument("integrate_classical takes exactly one ion".into()));
    }
    integrate(drive, init, t_end, constants, opts)
}

/// N ≥ 2 ions with pairwise Coulomb repulsion.
pub fn integrate_crystal<T: Real>(
    drive: &dyn AxialDrive<T>,
    init: &TrajectoryState<T>,
    t_end: T,
    constants: &PhysicalConstants<T>,
    opts: &IntegrationOptions<T>,
) -> Result<Trajectory<T>> {
    if init.n_ions() < 2 {
        return Err(Error::Argument("integrate_crystal needs at least two ions".into()));
    }
    integrate(drive, init, t_end, constants, opts)
}

const COLLISION_DISTANCE: f64 = 1e-9;

fn integrate<T: Real>(
    drive: &dyn AxialDrive<T>,
    init: &TrajectoryState<T>,
    t_end: T,
    constants: &PhysicalConstants<T>,
    opts: &IntegrationOptions<T>,
) -> Result<Trajectory<T>> {
    init.validate()?;
    let t0 = init.t;
    if !(t_end >= t0) {
        return Err(Error::Argument("t_end precedes the initial time".into()));
    }
    let n = init.n_ions();
    let qm = constants.charge_to_mass();
    let kq = constants.coulomb_volts();
    let (lo, hi) = drive.domain();
    // state: y_1..y_n, ẏ_1..ẏ_n in the drive frame
    let f0 = drive.frame(t0);
    let mut y: Vec<T> = init.positions.iter().map(|z| *z - f0[0]).collect();
    y.extend(init.velocities.iter().map(|v| *v - f0[1]));
    let mut atol = vec![opts.atol_position; n];
    atol.extend(std::iter::repeat_n(opts.atol_position * opts.velocity_scale, n));
    // Near rest the error estimate vanishes and the step would grow past the
    // stability limit, amplifying round-off; cap it at 1/ω of the stiffest
    // ion at the start.
    let h_max = stiffest_omega(drive, &y[..n], t0, qm, kq)?.map(|w| w.recip());
    let mut solver = DormandPrince::new(OdeOptions { rtol: opts.rtol, atol, h_max, ..Default::default() });

    let rhs = |t: T, s: &[T], ds: &mut [T]| -> Result<()> {
        let fr = drive.frame(t);
        for i in 0..n {
            let z = s[i] + fr[0];
            if !(z >= lo && z <= hi) || !z.is_finite() {
                return Err(Error::Escape {
                    t: t.as_f64(),
                    z: z.as_f64(),
                    positions: s[..n].iter().map(|p| (*p + fr[0]).as_f64()).collect(),
                    velocities: s[n..].iter().map(|v| (*v + fr[1]).as_f64()).collect(),
                });
            }
            ds[i] = s[n + i];
            ds[n + i] = -qm * drive.frame_gradient(s[i], t)? - fr[2];
        }
        for i in 0..n {
            for j in i + 1..n {
                let d = s[j] - s[i];
                if d < T::lit(COLLISION_DISTANCE) {
                    return Err(Error::Collision { t: t.as_f64(), i, j });
                }
                let f = qm * kq / (d * d);
                ds[n + i] -= f;
                ds[n + j] += f;
            }
        }
        Ok(())
    };

    let lab = |t: T, s: &[T]| -> TrajectoryState<T> {
        let fr = drive.frame(t);
        TrajectoryState {
            t,
            positions: s[..n].iter().map(|p| *p + fr[0]).collect(),
            velocities: s[n..].iter().map(|v| *v + fr[1]).collect(),
        }
    };

    // stops: breakpoints, sample times and the end, strictly after t0
    let mut stops: Vec<(T, bool)> = drive.breakpoints().into_iter().filter(|b| *b > t0 && *b <= t_end).map(|b| (b, false)).collect();
    let mut samples = vec![lab(t0, &y)];
    if let Some(dt) = opts.sample_interval {
        if !(dt > T::zero()) {
            return Err(Error::Argument("sample interval must be positive".into()));
        }
        let mut k = 1usize;
        loop {
            let t = t0 + dt * T::from_usize_lossy(k);
            if t >= t_end {
                break;
            }
            stops.push((t, true));
            k += 1;
        }
    }
    stops.push((t_end, true));
    stops.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    // merge coincident stops, keeping the record flag
    let mut merged: Vec<(T, bool)> = Vec::with_capacity(stops.len());
    for (t, rec) in stops {
        match merged.last_mut() {
            Some(last) if last.0 == t => last.1 |= rec,
            _ => merged.push((t, rec)),
        }
    }
    let mut t = t0;
    for (stop, record) in merged {
        solver.integrate(&rhs, t, &mut y, stop, |_, _| Ok(()))?;
        t = stop;
        let jump = drive.frame_velocity_jump(t);
        if jump != T::zero() {
            for v in &mut y[n..] {
                *v -= jump;
            }
        }
        if record {
            samples.push(lab(t, &y));
        }
    }
    let final_frame = TrajectoryState { t, positions: y[..n].to_vec(), velocities: y[n..].to_vec() };
    Ok(Trajectory { samples, final_frame })
}

/// Largest single-ion curvature frequency (Gershgorin-style row sum) at the
/// given frame positions, or `None` where no ion sits in a confining region.
fn stiffest_omega<T: Real>(drive: &dyn AxialDrive<T>, y: &[T], t: T, qm: T, kq: T) -> Result<Option<T>> {
    let d = T::lit(1e-9);
    let mut worst = T::zero();
    for (i, yi) in y.iter().enumerate() {
        let mut k = (drive.frame_gradient(*yi + d, t)? - drive.frame_gradient(*yi - d, t)?) / (d + d);
        for (j, yj) in y.iter().enumerate() {
            if j != i {
                k += T::lit(4.0) * kq / (*yi - *yj).abs().powi(3);
            }
        }
        worst = worst.max(k);
    }
    Ok((worst > T::zero()).then(|| (worst * qm).sqrt()))
}

/// Projects a state onto normal modes: α_k = √(mω_k/2ħ)(u_k·δz + i·u_k·ż/ω_k)
/// with δz measured from `equilibrium`. Both must be in the same frame.
pub fn extract_mode_alphas<T: Real>(
    state: &TrajectoryState<T>,
    equilibrium: &IonCrystal<T>,
    spectrum: &ModeSpectrum<T>,
    constants: &PhysicalConstants<T>,
) -> Result<Vec<CoherentAmplitude<T>>> {
    let n = state.n_ions();
    if equilibrium.n_ions() != n || spectrum.frequencies.len() != n || state.velocities.len() != n {
        return Err(Error::Argument(format!(
            "state has {n} ions, equilibrium {}, spectrum {}",
            equilibrium.n_ions(),
            spectrum.frequencies.len()
        )));
    }
    let dz: Vec<T> = state.positions.iter().zip(&equilibrium.positions).map(|(a, b)| *a - *b).collect();
    Ok(spectrum
        .frequencies
        .iter()
        .zip(&spectrum.mode_vectors)
        .enumerate()
        .map(|(k, (w, u))| {
            let alpha = Complex::new(dot(u, &dz), dot(u, &state.velocities) / *w) * constants.alpha_scale(*w);
            CoherentAmplitude { alpha, mode_index: k, omega: *w, frame: Frame::Lab }
        })
        .collect())
}

/// Per-ion amplitudes for ions that end in separate wells of a static
/// potential. Each ion is referred to its own equilibrium position and to
/// the local curvature there, including the static Coulomb contribution of
/// the other ions.
pub fn extract_local_alphas<T: Real>(
    state: &TrajectoryState<T>,
    pot: &AxialPotential<'_, T>,
    constants: &PhysicalConstants<T>,
) -> Result<Vec<CoherentAmplitude<T>>> {
    let eq = crystal_modes::equilibrium_positions(pot, state.n_ions(), &state.positions, constants)?;
    let e = crystal_modes::crystal_energy(pot, &eq.positions, constants.coulomb_volts())?;
    (0..state.n_ions())
        .map(|i| {
            let w = constants.omega_for(e.hessian[(i, i)]);
            if !(w > T::zero()) {
                return Err(Error::Unstable { mode: vec![] });
            }
            let alpha = Complex::new(state.positions[i] - eq.positions[i], state.velocities[i] / w) * constants.alpha_scale(w);
            Ok(CoherentAmplitude { alpha, mode_index: i, omega: w, frame: Frame::Lab })
        })
        .collect()
}

/// ∫₀^t e^{ikt′}dt′ without cancellation for small k.
fn phase_integral<T: Real>(k: T, t: T) -> Complex<T> {
    let x = k * t * T::lit(0.5);
    let sinc = if x.abs() < T::lit(1e-4) { T::one() - x * x / T::lit(6.0) } else { x.sin() / x };
    Complex::from_polar(t * sinc, x)
}

/// α_E = (i/√(2mħω))∫₀^{t_E} qE₀cos(ω_d t + φ_E)e^{iωt}dt, evaluated in closed
/// form including the counter-rotating term. ω is the well frequency, ω_d
/// the pulse's drive frequency.
pub fn displacement_from_pulse<T: Real>(
    pulse: &DrivePulse<T>,
    well_omega: T,
    constants: &PhysicalConstants<T>,
) -> Result<CoherentAmplitude<T>> {
    if !(pulse.t_e > T::zero()) {
        return Err(Error::Argument("pulse length must be positive".into()));
    }
    if !(well_omega > T::zero()) {
        return Err(Error::Argument("well frequency must be positive".into()));
    }
    let k = pulse_coupling(well_omega, constants);
    let co = phase_integral(well_omega + pulse.omega, pulse.t_e) * Complex::from_polar(T::one(), pulse.phi_e);
    let res = phase_integral(well_omega - pulse.omega, pulse.t_e) * Complex::from_polar(T::one(), -pulse.phi_e);
    Ok(CoherentAmplitude::new(k * pulse.e0 * (co + res), well_omega))
}

/// iq/(2√(2mħω)), the amplitude per unit field·time of a resonant pulse.
fn pulse_coupling<T: Real>(omega: T, c: &PhysicalConstants<T>) -> Complex<T> {
    let denom = T::lit(2.0) * (T::lit(2.0) * c.ion_mass * c.hbar * omega).sqrt();
    Complex::new(T::zero(), c.elementary_charge / denom)
}

/// A resonant pulse whose displacement is exactly −`target`.
///
/// The pulse length is a whole number of half trap periods, which makes the
/// counter-rotating contribution vanish identically; the shortest such length
/// whose required amplitude does not exceed `max_e0` is used. The phase then
/// follows from arg α_E = arg(K) − φ_E, so rotating the target by e^{iθ}
/// changes φ_E by −θ.
pub fn compensation_pulse<T: Real>(
    target: &CoherentAmplitude<T>,
    well_omega: T,
    max_e0: T,
    max_duration: T,
    constants: &PhysicalConstants<T>,
) -> Result<DrivePulse<T>> {
    if !(target.alpha.norm() > T::zero()) {
        return Err(Error::Argument("target amplitude must be non-zero".into()));
    }
    if !(well_omega > T::zero()) || !(max_e0 > T::zero()) {
        return Err(Error::Argument("well frequency and field limit must be positive".into()));
    }
    let k = pulse_coupling(well_omega, constants);
    let half_period = T::PI() / well_omega;
    let t_min = target.alpha.norm() / (k.norm() * max_e0);
    let m = (t_min / half_period).ceil().max(T::one());
    let t_e = m * half_period;
    if t_e > max_duration {
        // the field the pulse would need if it were only max_duration long
        let needed = target.alpha.norm() / (k.norm() * max_duration);
        return Err(Error::Range { needed: needed.as_f64(), max: max_e0.as_f64() });
    }
    let e0 = target.alpha.norm() / (k.norm() * t_e);
    // K e0 t_E e^{−iφ} = −α
    let phi_e = (k / (-target.alpha)).arg();
    Ok(DrivePulse { e0, t_e, phi_e, omega: well_omega, t_start: T::zero() })
}

/// |β| from the Bogoliubov transformation generated by ẍ + ω(t)²x = 0 between
/// `t0` and `t1`. `breakpoints` mark discontinuities of ω; each piece is
/// integrated separately with ω sampled strictly inside it.
pub fn estimate_squeezing<T: Real>(
    omega_of_t: &dyn Fn(T) -> T,
    t0: T,
    t1: T,
    breakpoints: &[T],
) -> Result<T> {
    if !(t1 > t0) {
        return Err(Error::Argument("squeezing interval must be non-empty".into()));
    }
    let mut cuts: Vec<T> = breakpoints.iter().copied().filter(|b| *b > t0 && *b < t1).collect();
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    cuts.dedup();
    cuts.insert(0, t0);
    cuts.push(t1);
    let inside = |t: T, a: T, b: T| -> T {
        let d = (b - a) * T::lit(1e-12);
        omega_of_t(t.max(a + d).min(b - d))
    };
    let w1 = inside(t0, t0, cuts[1]);
    let w2 = inside(t1, cuts[cuts.len() - 2], t1);
    if !(w1 > T::zero() && w2 > T::zero()) {
        return Err(Error::Argument("omega must be positive".into()));
    }
    // two real solutions, scaled to O(1): x₁(0)=1, ẋ₁(0)=0; x₂(0)=0, ω₁ẋ₂... in units of 1/ω₁
    let mut y = vec![T::one(), T::zero(), T::zero(), T::one()];
    let mut solver = DormandPrince::new(OdeOptions { rtol: T::lit(1e-12), atol: vec![T::lit(1e-14)], ..Default::default() });
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let mut bad = false;
        solver.integrate(
            |t, s: &[T], ds: &mut [T]| {
                let om = inside(t, a, b);
                if !(om > T::zero()) {
                    bad = true;
                    return Err(Error::Argument("omega must be positive".into()));
                }
                let r = om / w1;
                // time scaled by ω₁: x″ = −(ω/ω₁)² x
                ds[0] = s[1] * w1;
                ds[1] = -r * r * s[0] * w1;
                ds[2] = s[3] * w1;
                ds[3] = -r * r * s[2] * w1;
                Ok(())
            },
            a,
            &mut y,
            b,
            |_, _| Ok(()),
        )?;
    }
    // with v = ẋ/ω₁: f = (x₁ − i x₂)/√(2ω₁), and ḟ = ω₁(v₁ − i v₂)/√(2ω₁)
    let f = Complex::new(y[0], -y[2]);
    let fd = Complex::new(y[1], -y[3]) * (w1 / w2);
    // β ∝ √(ω₂/2)(f − iḟ/ω₂), normalised by √(2ω₁)
    let beta = (f - Complex::new(T::zero(), T::one()) * fd) * (w2 / w1).sqrt() * T::lit(0.5);
    Ok(beta.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::waveform_synth::ProfileKind;

    const PI: f64 = std::f64::consts::PI;

    fn c() -> PhysicalConstants<f64> {
        PhysicalConstants::default()
    }

    #[test]
    fn impulsive_zero_at_full_periods() {
        let w = 2.0 * PI * 1.972e6;
        let a = alpha_impulsive(46.25, w, 2.0 * PI * 16.0 / w, &c()).unwrap();
        assert!(a.alpha.norm() < 1e-10);
        assert_eq!(alpha_impulsive(0.0, w, 1e-6, &c()).unwrap().alpha.norm(), 0.0);
        let half = alpha_impulsive(46.25, w, PI / w, &c()).unwrap();
        let expect = 2.0 * c().alpha_scale(w) * 46.25 / w;
        assert!((half.alpha.norm() / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_matches_closed_form() {
        let w = 2.0 * PI * 1.972e6;
        for tt in [3.1e-6, 8e-6, 0.7e-6] {
            let q = alpha_transport_quadrature(|_| 46.25, w, tt, &c()).unwrap();
            let e = alpha_impulsive(46.25, w, tt, &c()).unwrap();
            assert!((q.alpha - e.alpha).norm() <= 1e-9 * e.alpha.norm(), "{} {}", q.alpha, e.alpha);
        }
    }

    #[test]
    fn static_well_equilibrium_holds() {
        let p = TransportProfile::new(ProfileKind::SineSquared, 0.0, 0.0, 1e-6).unwrap();
        let w = 2.0 * PI * 2e6;
        let d = MovingHarmonicWell::new(p, w, &c()).unwrap();
        let tr = integrate_classical(&d, &TrajectoryState::at_rest(0.0, vec![0.0]), 100.0 * 2.0 * PI / w, &c(), &Default::default())
            .unwrap();
        assert!(tr.final_lab().positions[0].abs() < 1e-12);
    }

    /// Up-crossing time between two samples from the cubic Hermite interpolant.
    fn crossing(a: &TrajectoryState<f64>, b: &TrajectoryState<f64>) -> f64 {
        let h = b.t - a.t;
        let cubic = |u: f64| {
            let (h00, h10, h01, h11) = (
                2.0 * u.powi(3) - 3.0 * u * u + 1.0,
                u.powi(3) - 2.0 * u * u + u,
                -2.0 * u.powi(3) + 3.0 * u * u,
                u.powi(3) - u * u,
            );
            h00 * a.positions[0] + h10 * h * a.velocities[0] + h01 * b.positions[0] + h11 * h * b.velocities[0]
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..80 {
            let m = 0.5 * (lo + hi);
            if cubic(m) < 0.0 { lo = m } else { hi = m }
        }
        a.t + h * 0.5 * (lo + hi)
    }

    #[test]
    fn oscillation_frequency_and_alpha() {
        let p = TransportProfile::new(ProfileKind::SineSquared, 0.0, 0.0, 1e-6).unwrap();
        let w = 2.0 * PI * 2e6;
        let d = MovingHarmonicWell::new(p, w, &c()).unwrap();
        let x0 = 1e-7;
        let period = 2.0 * PI / w;
        let opts = IntegrationOptions { sample_interval: Some(period / 64.0), ..Default::default() };
        let tr = integrate_classical(&d, &TrajectoryState::at_rest(0.0, vec![x0]), 100.5 * period, &c(), &opts).unwrap();
        let ups: Vec<f64> = tr
            .samples
            .windows(2)
            .filter(|s| s[0].positions[0] < 0.0 && s[1].positions[0] >= 0.0)
            .map(|s| crossing(&s[0], &s[1]))
            .collect();
        let fitted = 2.0 * PI * (ups.len() - 1) as f64 / (ups[ups.len() - 1] - ups[0]);
        assert!((fitted / w - 1.0).abs() < 1e-6, "{fitted} {w}");
        let eq = IonCrystal::new(vec![0.0], c().ion_mass).unwrap();
        let spec = ModeSpectrum { frequencies: vec![w], mode_vectors: vec![vec![1.0]], labels: vec![crystal_modes::ModeLabel::Com] };
        let a = extract_mode_alphas(&TrajectoryState::at_rest(0.0, vec![x0]), &eq, &spec, &c()).unwrap();
        let expect = c().ion_mass * w * x0 * x0 / (2.0 * c().hbar);
        assert!((a[0].nbar() / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pulse_phase_flip_and_linear_growth() {
        let w = 2.0 * PI * 2e6;
        let p = DrivePulse { e0: 10.0, t_e: 3.3e-6, phi_e: 0.4, omega: w, t_start: 0.0 };
        let a = displacement_from_pulse(&p, w, &c()).unwrap().alpha;
        let b = displacement_from_pulse(&DrivePulse { phi_e: 0.4 + PI, ..p }, w, &c()).unwrap().alpha;
        assert!((a + b).norm() < 1e-12 * a.norm());
        let a2 = displacement_from_pulse(&DrivePulse { t_e: 6.6e-6, ..p }, w, &c()).unwrap().alpha;
        assert!((a2.norm() / a.norm() - 2.0).abs() < 2.0 / (w * 3.3e-6));
        assert_eq!(displacement_from_pulse(&DrivePulse { e0: 0.0, ..p }, w, &c()).unwrap().alpha.norm(), 0.0);
    }

    #[test]
    fn pulse_matches_direct_quadrature() {
        let w = 2.0 * PI * 2e6;
        let p = DrivePulse { e0: 3.0, t_e: 1.234e-6, phi_e: -0.7, omega: 1.1 * w, t_start: 0.0 };
        let k = c().elementary_charge / (2.0 * c().ion_mass * c().hbar * w).sqrt();
        let q = integrate_complex(
            |t: f64| Complex::from_polar(k * p.e0 * (p.omega * t + p.phi_e).cos(), w * t) * Complex::i(),
            0.0,
            p.t_e,
            &QuadratureOptions { rel_tol: 1e-13, max_panel: Some(1e-8), ..Default::default() },
        )
        .unwrap()
        .value;
        let a = displacement_from_pulse(&p, w, &c()).unwrap().alpha;
        assert!((a - q).norm() < 1e-10 * a.norm());
    }

    #[test]
    fn compensation_round_trip_and_phase() {
        let w = 2.0 * PI * 1.972e6;
        let t = CoherentAmplitude::new(Complex::new(1.7, 0.0), w);
        let p = compensation_pulse(&t, w, 100.0, 1e-3, &c()).unwrap();
        let a = displacement_from_pulse(&p, w, &c()).unwrap().alpha;
        assert!((a + t.alpha).norm() < 1e-9);
        let th = 0.9;
        let r = CoherentAmplitude::new(t.alpha * Complex::from_polar(1.0, th), w);
        let pr = compensation_pulse(&r, w, 100.0, 1e-3, &c()).unwrap();
        let d = (pr.phi_e - p.phi_e + th).rem_euclid(2.0 * PI);
        assert!(d.min(2.0 * PI - d) < 1e-12);
        assert!(p.e0 <= 100.0);
        assert!(matches!(compensation_pulse(&t, w, 1e-6, 1e-6, &c()), Err(Error::Range { .. })));
    }

    #[test]
    fn squeezing_sudden_and_constant() {
        let (w1, w2) = (2.0 * PI * 1e6, 2.0 * PI * 2.5e6);
        let step = |t: f64| if t < 1e-6 { w1 } else { w2 };
        let b = estimate_squeezing(&step, 0.0, 2e-6, &[1e-6]).unwrap();
        let expect = (w2 - w1) / (2.0 * (w1 * w2).sqrt());
        assert!((b - expect).abs() < 1e-8, "{b} {expect}");
        let b0 = estimate_squeezing(&|_| w1, 0.0, 5e-6, &[]).unwrap();
        assert!(b0 < 1e-9);
    }
}
