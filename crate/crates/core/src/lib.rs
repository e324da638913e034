//! Voltage regulation on LV distribution feeders with locally trained ESS
//! agents.
//!
//! - [`grid`]: radial network model, backward/forward sweep and a Newton
//!   cross-check solver.
//! - [`assets`]: ESS state-of-charge dynamics and load profiles.
//! - [`thevenin`]: voltage estimation from a single smart meter.
//! - [`approx`]: small dense and attention regressors, polynomial fits.
//! - [`rl`]: environments and PPO training.
//! - [`coordination`]: online de-confliction of deployed agents.

pub mod approx;
pub mod assets;
pub mod coordination;
pub mod grid;
pub mod rl;
pub mod thevenin;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
