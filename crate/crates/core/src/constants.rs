use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Mass of ⁹Be⁺ in atomic mass units.
pub const BE9_MASS_U: f64 = 9.012_183_1;

/// SI constants used by the dynamics. Values are CODATA 2018.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants<T> {
    pub elementary_charge: T,
    pub hbar: T,
    pub vacuum_permittivity: T,
    pub ion_mass: T,
}

impl<T: Real> PhysicalConstants<T> {
    pub fn new(ion_mass: T) -> Self {
        Self {
            elementary_charge: T::lit(1.602_176_634e-19),
            hbar: T::lit(1.054_571_817e-34),
            vacuum_permittivity: T::lit(8.854_187_812_8e-12),
            ion_mass,
        }
    }

    /// Constants for an ion of the given mass in atomic mass units.
    pub fn with_mass_u(mass_u: T) -> Self {
        Self::new(mass_u * T::lit(ATOMIC_MASS_UNIT))
    }

    pub fn beryllium9() -> Self {
        Self::with_mass_u(T::lit(BE9_MASS_U))
    }

    /// Charge-to-mass ratio q/m, C/kg.
    #[inline]
    pub fn charge_to_mass(&self) -> T {
        self.elementary_charge / self.ion_mass
    }

    /// Coulomb constant times one elementary charge, k_e·q in V·m.
    ///
    /// The pair potential per unit charge between two ions at distance r is
    /// `coulomb_volts() / r` volts.
    #[inline]
    pub fn coulomb_volts(&self) -> T {
        self.elementary_charge / (T::lit(4.0) * T::PI() * self.vacuum_permittivity)
    }

    /// √(mω/2ħ), the inverse ground-state extent scaled so that α = √(mω/2ħ)(x + iv/ω).
    #[inline]
    pub fn alpha_scale(&self, omega: T) -> T {
        // split to keep f32 away from underflow in m·ħ products
        ((self.ion_mass / self.hbar) * omega * T::lit(0.5)).sqrt()
    }

    /// Curvature U″ in V/m² giving angular frequency `omega`: U″ = mω²/q.
    #[inline]
    pub fn curvature_for(&self, omega: T) -> T {
        omega * omega / self.charge_to_mass()
    }

    /// ω = √(q U″/m); zero for non-positive curvature.
    #[inline]
    pub fn omega_for(&self, curvature: T) -> T {
        if curvature > T::zero() {
            (self.charge_to_mass() * curvature).sqrt()
        } else {
            T::zero()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let all = [self.elementary_charge, self.hbar, self.vacuum_permittivity, self.ion_mass];
        if all.iter().all(|v| v.is_finite() && *v > T::zero()) {
            Ok(())
        } else {
            Err(crate::Error::Argument("physical constants must be finite and positive".into()))
        }
    }
}

impl<T: Real> Default for PhysicalConstants<T> {
    fn default() -> Self {
        Self::beryllium9()
    }
}
