pub mod blob;
pub mod cache;
pub mod calibration;
pub mod engine;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod medial;
pub mod model;
pub mod samples;
pub mod subset;
pub mod tensor;
pub mod train;
