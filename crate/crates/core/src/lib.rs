pub mod audio;
pub mod dataset;
pub mod features;
pub mod nn;
pub mod model;
pub mod synth;
pub mod training;
pub mod cli;
pub mod evaluation;
