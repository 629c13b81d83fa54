pub mod ablate;
pub mod dataset;
pub mod eval;
pub mod localize;
pub mod train;
