pub mod cli;
pub mod data;
pub mod decode;
pub mod engine;
pub mod hyperband;
pub mod losses;
pub mod metrics;
pub mod predictors;
pub mod trainer;
