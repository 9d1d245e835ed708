pub mod cache;
pub mod evaluator;
pub mod fsmodel;
pub mod planner;
pub mod traceir;
pub mod tracer;
pub mod engine;
pub mod cli;
