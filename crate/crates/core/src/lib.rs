//! Digital twins of longitudinal patient records from a conditional Neural
//! Boltzmann Machine.

pub mod checkpoint;
pub mod datamodel;
pub mod diffcore;
pub mod evaluation;
pub mod nbm;
pub mod networks;
pub mod rng;
pub mod samples;
pub mod synth;
pub mod training;
