//! Core library for cooperative trajectory optimization of connected
//! electric vehicles at a signal-free intersection.
//!
//! The library is organized around a spatial-domain vehicle model (kinetic
//! energy and clock time as states over a fixed distance grid), a
//! self-contained rotated-cone interior-point solver, an upper-level
//! crossing-order scheduler, and a lower-level tube-based robust MPC, plus
//! a deterministic closed-loop simulation engine that exercises all of it.
//!
//! The crate is `no_std`-compatible (requires `alloc`); IO, file formats and
//! the command line live in the companion `junction-cli` crate. Wall-clock
//! measurement is injected through [`sim::StepClock`] so the core stays free
//! of platform timers.
#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod conic;
pub mod dynamics;
mod math;
pub mod model;
pub mod rmpc;
pub mod scheduler;
pub mod sim;
pub mod tubes;
