//! Waveform synthesis and motional-excitation analysis for transporting and
//! separating trapped ions in a segmented linear Paul trap.
//!
//! Every numerical routine is generic over [`Real`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, the precision all documented
//! tolerances refer to.

// `!(x > 0)` style tests are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod crystal_modes;
pub mod error;
pub mod io;
pub mod linalg;
pub mod measurement_sim;
pub mod motion_dynamics;
pub mod ode;
pub mod quadrature;
pub mod scalar;
pub mod spline;
pub mod trap_model;
pub mod waveform_synth;

pub use error::{Error, ErrorClass, Result};
pub use scalar::Real;

pub type PhysicalConstants = constants::PhysicalConstants<f64>;
pub type ElectrodeBasis = trap_model::ElectrodeBasis<f64>;
pub type AxialPotential<'a> = trap_model::AxialPotential<'a, f64>;
pub type WellParams = trap_model::WellParams<f64>;
pub type QuarticFit = trap_model::QuarticFit<f64>;
pub type IonCrystal = crystal_modes::IonCrystal<f64>;
pub type ModeSpectrum = crystal_modes::ModeSpectrum<f64>;
pub type VoltageWaveform = waveform_synth::VoltageWaveform<f64>;
pub type TransportProfile = waveform_synth::TransportProfile<f64>;
pub type SeparationRamp = waveform_synth::SeparationRamp<f64>;
pub type SeparationResult = waveform_synth::SeparationResult<f64>;
pub type CoherentAmplitude = motion_dynamics::CoherentAmplitude<f64>;
pub type TrajectoryState = motion_dynamics::TrajectoryState<f64>;
pub type Trajectory = motion_dynamics::Trajectory<f64>;
pub type DrivePulse = motion_dynamics::DrivePulse<f64>;
pub type FockDistribution = measurement_sim::FockDistribution<f64>;
pub type FloppingTrace = measurement_sim::FloppingTrace<f64>;
pub type FitResult = measurement_sim::FitResult<f64>;
pub type Trap = io::Trap<f64>;
