//! Simulation engine for a spin-wave atomic frequency comb (AFC) optical memory
//! operated at a zero-first-order-Zeeman (ZEFOZ) field.

pub mod comb;
pub mod dd;
pub mod experiment;
pub mod harness;
pub mod numerics;
pub mod pulses;
pub mod spectra;
