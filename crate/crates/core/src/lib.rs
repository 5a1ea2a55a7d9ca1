pub mod backends;
pub mod eval;
pub mod geometry;
pub mod pipeline;
pub mod rpo;
pub mod semantic;
pub mod synth;
pub mod verify;
