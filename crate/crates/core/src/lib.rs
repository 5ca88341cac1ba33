pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod infill;
pub mod instruct;
pub mod metrics;
pub mod model;
pub mod spatial;
pub mod tensor;
pub mod train;
