//! Coded-aperture multiplexing for a single large ultrasound receiver.
//!
//! A binary mask with `n` apertures is stepped across the receiver face so
//! that each measurement sums a different subset of virtual elements. The
//! per-element signals are recovered by inverting the code matrix.

pub mod acoustics;
pub mod codes;
pub mod experiments;
pub mod io;
pub mod multiplex;
