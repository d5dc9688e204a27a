pub mod numkit;
pub mod encoder;
pub mod similarity;
pub mod losses;
pub mod pair_queue;
pub mod baselines;
pub mod data;
pub mod eval;
pub mod trainer;
pub mod gradcheck;
pub mod config;
pub mod plot;
pub mod cli;
