//! Desk-scale simulation and analysis of OPA-based Wigner tomography of
//! squeezed vacuum.
//!
//! The crate models a cascaded pair of optical parametric amplifiers (a
//! squeezer and a phase-sensitive measurement amplifier), generates per-pulse
//! intensity statistics, and recovers the quantum state from those statistics
//! via distribution fitting and maximum-likelihood reconstruction. Supporting
//! machinery covers joint spectral modes, split-step pump-depletion studies,
//! dispersion figures of merit, and a gated demultiplexer model.
//!
//! Conventions used throughout:
//! - vacuum quadrature variance is 1/2 (`x = (a + a†)/√2`, ħ = 1);
//! - the measurement phase φ = 0 selects the anti-squeezed (amplified)
//!   quadrature;
//! - squeezing in dB is `10·log10(V / V_vac)`;
//! - a vacuum input amplified with field gain `e^g` produces a mean photon
//!   number of `e^{2g}/4`.

pub mod cli;
pub mod fockspace;
pub mod modes;
pub mod opa;
pub mod pulseprop;
pub mod tomography;

pub(crate) mod numeric;
