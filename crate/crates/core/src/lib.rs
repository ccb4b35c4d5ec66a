pub mod geometry;
pub mod grid;
pub mod metrics;
pub mod scene;
pub mod losses;
pub mod annotation;
pub mod dataset;
pub mod toyparser;
pub mod pipeline;
pub mod cli;
