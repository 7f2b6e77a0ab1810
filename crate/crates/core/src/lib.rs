pub mod baselines;
pub mod cli;
pub mod crossfit;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod inference;
pub mod moments;
pub mod optim;
pub mod riesz;
pub mod simlab;
pub mod stats;
