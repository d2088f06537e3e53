pub mod baselines;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod pgm;
pub mod seed;
pub mod tensor;
pub mod train;
