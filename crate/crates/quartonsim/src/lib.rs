//! Simulator and fitting toolkit for a quarton-coupled pair of superconducting
//! transmons.
//!
//! The device consists of transmon A (single junction to ground), transmon B
//! (asymmetric two-junction SQUID to ground), and a gradiometric quarton
//! coupler between their islands: two arm junctions in parallel with a
//! three-junction series array (internal nodes `i`, `j`). Four reduced fluxes
//! thread the loops: the B-SQUID flux `phi_s`, the quarton common/differential
//! pair `phi_q_sigma` / `phi_q_delta`, and the ground-loop differential flux
//! `phi_g_delta`.
//!
//! Units used throughout: energies and frequencies in GHz (E/h) unless a field
//! name says MHz, capacitances in fF, junction areas in um^2, critical-current
//! densities in uA/um^2, bias currents in mA, fluxes in radians of reduced
//! flux (2π per flux quantum in the loop convention of the potential below).
//!
//! Module map:
//! - [`circuit`]: junction/capacitance bookkeeping, the eight-term potential,
//!   quartic expansion of the coupler branch, bias-line flux model.
//! - [`hamiltonian`]: basis construction (normal-mode oscillator or charge),
//!   classical minimum search, Kronecker-structured operators.
//! - [`eigen`]: dense and Lanczos eigensolvers with residual checks.
//! - [`spectra`]: eigenstate labeling, Kerr/cross-Kerr extraction, readout
//!   shifts, bias sweeps.
//! - [`calibration`]: resonator response, synthetic flux maps, symmetry-point
//!   search, robust line fits, flux-map calibration.
//! - [`fitting`]: bounded Nelder-Mead fits of junction parameters to measured
//!   transition tables.

pub mod calibration;
pub mod circuit;
pub mod eigen;
pub mod fitting;
pub mod hamiltonian;
pub mod spectra;

pub use calibration::{
    calibrate, calibrate_bias_scan, s21_notch, simulate_bias_scan, simulate_fluxmap, BiasScan,
    BiasScanCalibration, BiasScanConfig, BiasScanOptions, CalibrateOptions, CalibrationResult,
    FluxMap, FluxMapConfig, RecoveredRow,
};
pub use circuit::{
    BiasLineModel, BranchTerm, CircuitSpec, EnergyTable, FluxState, JunctionSpec, ReadoutParams,
};
pub use eigen::{EigenOptions, EigenSolution};
pub use fitting::{FitParameter, FitProblem, FitResult, FitTarget, Observable};
pub use hamiltonian::{BasisConfig, BasisScheme, BuiltSystem};
pub use spectra::{KerrReport, LabeledSpectrum, ReadoutShifts, SweepOptions, SweepPoint};

/// Crate-wide error type. Variants map onto the CLI exit-code classes
/// (config/parse, solver failure, non-convergence).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad input: device file, flux state, basis config, CLI parameters.
    #[error("config error: {0}")]
    Config(String),
    /// A linear-algebra or assembly step failed outright.
    #[error("solver error: {0}")]
    Solver(String),
    /// An iterative routine ran out of iterations/restarts before reaching
    /// its tolerance.
    #[error("convergence failure: {0}")]
    Convergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
