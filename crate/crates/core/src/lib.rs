//! Turn-level information-gain rewards for multi-turn policy optimisation on a
//! hidden-intent querying task.

pub mod advantage;
pub mod domain;
pub mod env;
pub mod infogain;
pub mod policy;
pub mod rollout;
pub mod trainer;
pub mod theory;
pub mod diagnostics;
pub mod config;
pub mod run;
