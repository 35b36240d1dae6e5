use thiserror::Error;

/// Errors raised by the numerical routines.
///
/// Values are carried as `f64` regardless of the scalar type a routine ran in.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("position {z:.6e} m outside the axial domain [{min:.6e}, {max:.6e}] m")]
    Domain { z: f64, min: f64, max: f64 },

    #[error("no confining well near z = {seed:.6e} m: {reason}")]
    NoWell { seed: f64, reason: String },

    #[error("{what} did not converge after {iterations} iterations")]
    Convergence { what: &'static str, iterations: usize },

    #[error("least-squares fit failed: {0}")]
    Fit(String),

    #[error("crystal equilibrium failed: {0}")]
    Equilibrium(String),

    #[error("unstable configuration: negative curvature along mode {mode:?}")]
    Unstable { mode: Vec<f64> },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("constraint set is infeasible: {0}")]
    Infeasible(String),

    #[error("voltage bounds exceeded on electrodes {electrodes:?}")]
    Bounds { electrodes: Vec<String> },

    #[error("adiabatic schedule needs {needed:.3e} s, longer than the allowed {max:.3e} s")]
    Duration { needed: f64, max: f64 },

    #[error("ion escaped the axial domain at t = {t:.6e} s (z = {z:.6e} m)")]
    Escape { t: f64, z: f64, positions: Vec<f64>, velocities: Vec<f64> },

    #[error("ions {i} and {j} collided at t = {t:.6e} s")]
    Collision { t: f64, i: usize, j: usize },

    #[error("quadrature failed to reach tolerance: {0}")]
    Quadrature(String),

    #[error("required field amplitude {needed:.3e} V/m exceeds limit {max:.3e} V/m")]
    Range { needed: f64, max: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("step size underflow at t = {t:.6e}")]
    StepSize { t: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("I/O error on {path}: {msg}")]
    Io { path: String, msg: String },
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: arguments, files, formats.
    Config,
    /// Solver or integrator failed to converge.
    Numerical,
    /// The requested physics cannot be realised (topology, bounds, range).
    Infeasible,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Argument(_) | Error::Parse { .. } | Error::Io { .. } | Error::Domain { .. } => {
                ErrorClass::Config
            }
            Error::Convergence { .. }
            | Error::Fit(_)
            | Error::Equilibrium(_)
            | Error::Quadrature(_)
            | Error::StepSize { .. } => ErrorClass::Numerical,
            Error::NoWell { .. }
            | Error::Unstable { .. }
            | Error::Topology(_)
            | Error::Infeasible(_)
            | Error::Bounds { .. }
            | Error::Duration { .. }
            | Error::Escape { .. }
            | Error::Collision { .. }
            | Error::Range { .. } => ErrorClass::Infeasible,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
