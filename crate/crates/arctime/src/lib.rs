//! Road network travel time estimation from sparse, noisy GPS probe data.
//!
//! The crate fits per-arc lognormal travel time distributions to trips whose
//! paths were never observed directly, using Markov chain Monte Carlo over
//! latent paths and arc times. Two per-arc GPS speed estimators and a
//! distance-binning baseline are included for comparison, along with a grid
//! scenario simulator, prediction routines, and a cross-validated evaluation
//! harness with multiplicative bias correction.

pub mod budge;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod local;
pub mod mcmc;
pub mod model;
pub mod network;
pub mod sim;
