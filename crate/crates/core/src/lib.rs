pub mod counters;
pub mod ensemble;
pub mod error;
pub mod kernels;
pub mod rff;
pub mod diffnet;
pub mod models;
pub mod config;
pub mod trainer;
pub mod bench;
pub mod checks;
