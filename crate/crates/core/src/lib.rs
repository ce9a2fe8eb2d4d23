pub mod config;
pub mod diagnostics;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod signal;
pub mod tame;
pub mod training;
