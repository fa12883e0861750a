pub mod config;
pub mod dist;
pub mod engine;
pub mod error;
pub mod formulas;
pub mod harness;
pub mod model;
pub mod pool;
pub mod profiler;
pub mod rng;
pub mod scheduler;
pub mod state;
pub mod trace;
pub mod validate;
