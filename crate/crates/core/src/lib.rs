//! Surrogate-gradient training for feedforward spiking networks with a
//! temporal-consistency regularizer on the per-timestep output distributions.

pub mod autodiff;
mod binio;
pub mod config;
pub mod data;
pub mod engine;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod snn;
