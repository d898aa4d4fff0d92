pub mod cluster;
pub mod eval;
pub mod geo;
pub mod ggnn;
pub mod graph;
pub mod ingest;
pub mod recommend;
pub mod synth;
