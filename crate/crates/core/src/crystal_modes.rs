//! Equilibria and normal modes of linear Coulomb crystals in an axial
//! potential, plus quasi-static prediction of how a crystal partitions when
//! a separation wedge is raised under it.

use rayon::prelude::*;

use crate::constants::PhysicalConstants;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::scalar::Real;
use crate::trap_model::{AxialPotential, ElectrodeBasis};

/// Axial ion positions, strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct IonCrystal<T> {
    pub positions: Vec<T>,
    pub mass: T,
}

impl<T: Real> IonCrystal<T> {
    pub fn new(positions: Vec<T>, mass: T) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Argument("crystal needs at least one ion".into()));
        }
        if positions.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("ion positions must be strictly increasing".into()));
        }
        Ok(Self { positions, mass })
    }

    pub fn n_ions(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeLabel {
    /// All ions in phase.
    Com,
    /// One node: neighbours split into two out-of-phase groups.
    Stretch,
    /// Higher-order mode with the given number of sign changes.
    Higher(usize),
}

impl std::fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModeLabel::Com => write!(f, "COM"),
            ModeLabel::Stretch => write!(f, "stretch"),
            ModeLabel::Higher(k) => write!(f, "mode{k}"),
        }
    }
}

/// Normal-mode frequencies (ascending) and orthonormal mode vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpectrum<T> {
    pub frequencies: Vec<T>,
    /// `mode_vectors[k]` belongs to `frequencies[k]`.
    pub mode_vectors: Vec<Vec<T>>,
    pub labels: Vec<ModeLabel>,
}

/// Convergence controls for [`equilibrium_positions`].
#[derive(Debug, Clone, Copy)]
pub struct EquilibriumOptions<T> {
    /// Force tolerance per ion, N.
    pub force_tol: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for EquilibriumOptions<T> {
    fn default() -> Self {
        Self { force_tol: T::lit(1e-18), max_iterations: 500 }
    }
}

/// Energy per unit charge (V), gradient (V/m) and Hessian (V/m²) of the
/// crystal: Σ U(z_i) + Σ_{i<j} k_e q / |z_j − z_i|.
pub(crate) struct CrystalEnergy<T> {
    pub energy: T,
    pub gradient: Vec<T>,
    pub hessian: Matrix<T>,
}

pub(crate) fn crystal_energy<T: Real>(
    pot: &AxialPotential<'_, T>,
    z: &[T],
    k_coulomb: T,
) -> Result<CrystalEnergy<T>> {
    let n = z.len();
    let mut energy = T::zero();
    let mut gradient = vec![T::zero(); n];
    let mut hessian = Matrix::zeros(n);
    for i in 0..n {
        let [u, g, c] = pot.derivs(z[i])?;
        energy += u;
        gradient[i] = g;
        hessian[(i, i)] = c;
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = z[j] - z[i];
            let inv = T::one() / d;
            let f = k_coulomb * inv * inv;
            let h = T::lit(2.0) * f * inv;
            energy += k_coulomb * inv;
            gradient[i] += f;
            gradient[j] -= f;
            hessian[(i, i)] += h;
            hessian[(j, j)] += h;
            hessian[(i, j)] -= h;
            hessian[(j, i)] -= h;
        }
    }
    Ok(CrystalEnergy { energy, gradient, hessian })
}

fn max_abs<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

/// Outcome of the unconstrained descent; stability is reported, not enforced.
pub(crate) struct Relaxed<T> {
    pub positions: Vec<T>,
    pub stable: bool,
    pub hessian: Matrix<T>,
}

/// Damped, ordering-preserving Newton descent on the crystal energy.
pub(crate) fn relax<T: Real>(
    pot: &AxialPotential<'_, T>,
    seed: &[T],
    constants: &PhysicalConstants<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<Relaxed<T>> {
    let n = seed.len();
    let k = constants.coulomb_volts();
    let grad_tol = opts.force_tol / constants.elementary_charge;
    let (lo, hi) = pot.basis().domain();
    let span = hi - lo;
    let max_step = span * T::lit(0.01);
    let step_tol = T::lit(8.0) * T::epsilon() * (span + max_abs(seed));
    let mut z = seed.to_vec();
    let mut e = crystal_energy(pot, &z, k)?;
    for _ in 0..opts.max_iterations {
        let pd = e.hessian.is_positive_definite();
        // Levenberg shift makes the step a descent direction away from minima
        let mut h = e.hessian.clone();
        if !pd {
            let eig = e.hessian.symmetric_eigen();
            let shift = -eig.values[0] * T::lit(1.5) + T::lit(1e-3) * e.hessian.max_abs();
            for i in 0..n {
                h[(i, i)] += shift;
            }
        }
        let rhs: Vec<T> = e.gradient.iter().map(|g| -*g).collect();
        let mut step = match h.solve(&rhs, T::epsilon()) {
            Some(s) => s,
            None => rhs.iter().map(|g| *g / e.hessian.max_abs().max(T::one())).collect(),
        };
        let m = max_abs(&step);
        if m > max_step {
            for s in &mut step {
                *s = *s * max_step / m;
            }
        }
        // backtrack until ordering holds, ions stay in the domain and energy does not rise
        let mut lambda = T::one();
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<T> = z.iter().zip(&step).map(|(a, s)| *a + lambda * *s).collect();
            let ordered = trial.windows(2).all(|w| w[1] > w[0]);
            let inside = trial.iter().all(|x| pot.basis().contains(*x));
            if ordered && inside {
                let et = crystal_energy(pot, &trial, k)?;
                let tol_e = T::lit(64.0) * T::epsilon() * (e.energy.abs() + T::one());
                if et.energy <= e.energy + tol_e {
                    accepted = Some((trial, et));
                    break;
                }
            }
            lambda *= T::lit(0.5);
        }
        let Some((trial, et)) = accepted else {
            // no admissible decrease: we are at the floating-point floor
            if max_abs(&e.gradient) <= grad_tol && pd {
                return Ok(Relaxed { positions: z, stable: true, hessian: e.hessian });
            }
            return Err(Error::Equilibrium("line search failed to decrease the energy".into()));
        };
        let moved = max_abs(&step) * lambda;
        z = trial;
        e = et;
        if moved <= step_tol && max_abs(&e.gradient) <= grad_tol {
            let stable = e.hessian.is_positive_definite();
            return Ok(Relaxed { positions: z, stable, hessian: e.hessian });
        }
    }
    Err(Error::Convergence { what: "crystal equilibrium", iterations: opts.max_iterations })
}

/// Equilibrium positions of `n_ions` ions, relaxed from sorted `seed` positions.
///
/// An equilibrium that is not a local minimum is reported as
/// [`Error::Unstable`] carrying the offending direction.
pub fn equilibrium_positions<T: Real>(
    pot: &AxialPotential<'_, T>,
    n_ions: usize,
    seed: &[T],
    constants: &PhysicalConstants<T>,
) -> Result<IonCrystal<T>> {
    equilibrium_with(pot, n_ions, seed, constants, &EquilibriumOptions::default())
}

pub fn equilibrium_with<T: Real>(
    pot: &AxialPotential<'_, T>,
    n_ions: usize,
    seed: &[T],
    constants: &PhysicalConstants<T>,
    opts: &EquilibriumOptions<T>,
) -> Result<IonCrystal<T>> {
    if n_ions == 0 || seed.len() != n_ions {
        return Err(Error::Argument(format!("{} seed positions for {n_ions} ions", seed.len())));
    }
    if seed.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Argument("seed positions must be strictly increasing".into()));
    }
    let r = relax(pot, seed, constants, opts)?;
    if !r.stable {
        let eig = r.hessian.symmetric_eigen();
        return Err(Error::Unstable { mode: eig.vectors[0].iter().map(|v| v.as_f64()).collect() });
    }
    IonCrystal::new(r.positions, constants.ion_mass)
}

fn label_for<T: Real>(v: &[T]) -> ModeLabel {
    let tiny = T::lit(1e-6);
    let signs: Vec<T> = v.iter().filter(|x| x.abs() > tiny).map(|x| x.signum()).collect();
    let changes = signs.windows(2).filter(|w| w[0] != w[1]).count();
    match changes {
        0 => ModeLabel::Com,
        1 => ModeLabel::Stretch,
        k => ModeLabel::Higher(k),
    }
}

/// Normal modes from the mass-scaled Hessian at an equilibrium.
pub fn mode_spectrum<T: Real>(
    pot: &AxialPotential<'_, T>,
    crystal: &IonCrystal<T>,
    constants: &PhysicalConstants<T>,
) -> Result<ModeSpectrum<T>> {
    let e = crystal_energy(pot, &crystal.positions, constants.coulomb_volts())?;
    spectrum_from_hessian(&e.hessian, constants)
}

pub(crate) fn spectrum_from_hessian<T: Real>(
    hessian: &Matrix<T>,
    constants: &PhysicalConstants<T>,
) -> Result<ModeSpectrum<T>> {
    let eig = hessian.symmetric_eigen();
    if eig.values[0] <= T::zero() {
        return Err(Error::Unstable { mode: eig.vectors[0].iter().map(|v| v.as_f64()).collect() });
    }
    let qm = constants.charge_to_mass();
    let frequencies = eig.values.iter().map(|l| (*l * qm).sqrt()).collect();
    let mode_vectors: Vec<Vec<T>> = eig
        .vectors
        .into_iter()
        .map(|mut v| {
            // fix the sign: first significant component positive
            if let Some(first) = v.iter().find(|x| x.abs() > T::lit(1e-9)) {
                if *first < T::zero() {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
            }
            v
        })
        .collect();
    let labels = mode_vectors.iter().map(|v| label_for(v)).collect();
    Ok(ModeSpectrum { frequencies, mode_vectors, labels })
}

impl<T: Real> ModeSpectrum<T> {
    /// Rebuilds the curvature matrix Σ_k ω_k² (m/q) u_k u_kᵀ (V/m²).
    pub fn reconstruct_hessian(&self, constants: &PhysicalConstants<T>) -> Matrix<T> {
        let n = self.frequencies.len();
        let mut h = Matrix::zeros(n);
        for (w, u) in self.frequencies.iter().zip(&self.mode_vectors) {
            let lam = constants.curvature_for(*w);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += lam * u[i] * u[j];
                }
            }
        }
        h
    }

    pub fn max_orthonormality_error(&self) -> T {
        let n = self.mode_vectors.len();
        let mut worst = T::zero();
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { T::one() } else { T::zero() };
                worst = worst.max((dot(&self.mode_vectors[i], &self.mode_vectors[j]) - target).abs());
            }
        }
        worst
    }
}

/// A one-parameter family of electrode voltages, s ∈ [0, 1].
pub trait VoltagePath<T: Real>: Sync {
    fn basis(&self) -> &ElectrodeBasis<T>;
    fn voltages_at(&self, s: T) -> Vec<T>;
}

/// Options for [`partition_count`].
#[derive(Debug, Clone)]
pub struct PartitionOptions<T> {
    /// Electrode receiving the static offset.
    pub offset_electrode: String,
    /// Number of quasi-static tracking intervals along the path.
    pub checkpoints: usize,
    /// Initial ion spacing used to seed the crystal at s = 0, m.
    pub seed_spacing: T,
    /// Search window for the wedge maximum, either side of the crystal centre, m.
    pub wedge_search: T,
}

impl<T: Real> Default for PartitionOptions<T> {
    fn default() -> Self {
        Self {
            offset_electrode: "O2".into(),
            checkpoints: 64,
            seed_spacing: T::lit(3e-6),
            wedge_search: T::lit(150e-6),
        }
    }
}

/// Ion counts either side of the final wedge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub left: usize,
    pub right: usize,
}

fn offset_voltages<T: Real>(path: &dyn VoltagePath<T>, idx: usize, offset: T, s: T) -> Vec<T> {
    let mut v = path.voltages_at(s);
    v[idx] += offset;
    v
}

/// Relaxes along the path, breaking symmetric saddles toward the left.
pub(crate) fn track<T: Real>(
    pot: &AxialPotential<'_, T>,
    z: &[T],
    constants: &PhysicalConstants<T>,
) -> Result<Vec<T>> {
    let opts = EquilibriumOptions::default();
    let mut r = relax(pot, z, constants, &opts)?;
    let mut nudges = 0;
    while !r.stable {
        nudges += 1;
        if nudges > 8 {
            return Err(Error::Equilibrium("could not leave an unstable configuration".into()));
        }
        let eig = r.hessian.symmetric_eigen();
        let u = &eig.vectors[0];
        // push along the soft direction so that the most displaced ion moves left
        let (imax, _) = u.iter().enumerate().fold((0, T::zero()), |acc, (i, x)| {
            if x.abs() > acc.1 { (i, x.abs()) } else { acc }
        });
        let dir = if u[imax] > T::zero() { -T::one() } else { T::one() };
        let kick = T::lit(1e-9);
        log::warn!("ion configuration at a symmetric saddle; breaking the tie toward the left");
        let seed: Vec<T> = r.positions.iter().zip(u).map(|(p, ui)| *p + dir * kick * *ui).collect();
        r = relax(pot, &seed, constants, &opts)?;
    }
    Ok(r.positions)
}

/// Finds the wedge maximum of the final potential between the outermost
/// ions, refined by golden-section search.
pub fn wedge_maximum<T: Real>(pot: &AxialPotential<'_, T>, lo: T, hi: T) -> Result<T> {
    let n = 400;
    let mut best = (lo, T::neg_infinity());
    let mut values = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let z = lo + (hi - lo) * T::from_usize_lossy(k) / T::from_usize_lossy(n);
        let u = pot.eval(z, 0)?;
        values.push((z, u));
    }
    // interior local maxima only
    let mut found = false;
    for k in 1..n {
        let (z, u) = values[k];
        if u > values[k - 1].1 && u >= values[k + 1].1 && u > best.1 {
            best = (z, u);
            found = true;
        }
    }
    if !found {
        return Err(Error::Topology("final potential has no wedge maximum between the wells".into()));
    }
    let h = (hi - lo) / T::from_usize_lossy(n);
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let g = T::lit(0.618_033_988_749_894_9);
    for _ in 0..200 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if pot.eval(c, 0)? > pot.eval(d, 0)? {
            b = d;
        } else {
            a = c;
        }
        if (b - a).abs() < T::lit(1e-15) {
            break;
        }
    }
    Ok((a + b) * T::lit(0.5))
}

/// Predicts how many ions end up left and right of the separation wedge
/// when a static `offset` (V) is added to the offset electrode.
///
/// The crystal is equilibrated at s = 0 and tracked quasi-statically through
/// `checkpoints` equally spaced points of the path. Raising the offset on the
/// right-hand electrode pushes ions left, so `left` is non-decreasing in the
/// offset. An ion sitting on the wedge maximum (within 1 nm) is counted left.
pub fn partition_count<T: Real>(
    path: &dyn VoltagePath<T>,
    n_ions: usize,
    offset: T,
    constants: &PhysicalConstants<T>,
    opts: &PartitionOptions<T>,
) -> Result<Partition> {
    if n_ions == 0 {
        return Err(Error::Argument("n_ions must be positive".into()));
    }
    let basis = path.basis();
    let idx = basis
        .index_of(&opts.offset_electrode)
        .ok_or_else(|| Error::Argument(format!("no electrode named {}", opts.offset_electrode)))?;
    let start = basis.potential(offset_voltages(path, idx, offset, T::zero()))?;
    let centre = crate::trap_model::locate_minimum(&start, T::zero())?;
    let half = T::from_usize_lossy(n_ions - 1) * T::lit(0.5);
    let mut z: Vec<T> = (0..n_ions)
        .map(|i| centre + (T::from_usize_lossy(i) - half) * opts.seed_spacing)
        .collect();
    z = track(&start, &z, constants)?;
    for k in 1..=opts.checkpoints {
        let s = T::from_usize_lossy(k) / T::from_usize_lossy(opts.checkpoints);
        let pot = basis.potential(offset_voltages(path, idx, offset, s))?;
        z = track(&pot, &z, constants)?;
    }
    let fin = basis.potential(offset_voltages(path, idx, offset, T::one()))?;
    let (dlo, dhi) = basis.domain();
    let lo = (z[0] - opts.wedge_search).max(dlo);
    let hi = (z[n_ions - 1] + opts.wedge_search).min(dhi);
    let wedge = wedge_maximum(&fin, lo.min(centre - opts.wedge_search).max(dlo), hi.max(centre + opts.wedge_search).min(dhi))?;
    let tie = T::lit(1e-9);
    let mut left = 0;
    for &p in &z {
        if (p - wedge).abs() <= tie {
            log::warn!("ion within 1 nm of the wedge maximum; counted on the left");
            left += 1;
        } else if p < wedge {
            left += 1;
        }
    }
    Ok(Partition { left, right: n_ions - left })
}

/// Linear fluorescence droop: counts = c₀·N·(1 − s·(N − 1)), floored at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluorescenceModel<T> {
    pub counts_per_ion: T,
    pub droop: T,
}

impl<T: Real> Default for FluorescenceModel<T> {
    fn default() -> Self {
        Self { counts_per_ion: T::lit(10.0), droop: T::lit(0.03) }
    }
}

impl<T: Real> FluorescenceModel<T> {
    pub fn counts(&self, n: usize) -> T {
        let n = T::from_usize_lossy(n);
        (self.counts_per_ion * n * (T::one() - self.droop * (n - T::one()).max(T::zero()))).max(T::zero())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint<T> {
    pub offset: T,
    pub left: usize,
    pub right: usize,
    pub counts: T,
}

/// [`partition_count`] over a sorted list of offsets, with the detected
/// fluorescence in the left zone. Points are evaluated in parallel.
pub fn partition_scan<T: Real>(
    path: &dyn VoltagePath<T>,
    n_ions: usize,
    offsets: &[T],
    constants: &PhysicalConstants<T>,
    opts: &PartitionOptions<T>,
    fluorescence: &FluorescenceModel<T>,
) -> Result<Vec<ScanPoint<T>>> {
    if offsets.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Argument("offsets must be sorted ascending".into()));
    }
    offsets
        .par_iter()
        .map(|&offset| {
            let p = partition_count(path, n_ions, offset, constants, opts)?;
            Ok(ScanPoint { offset, left: p.left, right: p.right, counts: fluorescence.counts(p.left) })
        })
        .collect()
}
