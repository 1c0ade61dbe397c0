pub mod hilbert;
pub mod circuit_params;
pub mod protocol;
pub mod dynamics;
pub mod analysis;
pub mod config;
pub mod experiment;
pub mod checks;
