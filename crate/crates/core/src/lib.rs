//! Group-relative policy optimization with structured emotional reasoning
//! traces and reflective rewards, at desk scale.

pub mod cli;
pub mod grpo;
pub mod remote_judge;
pub mod rewards;
pub mod rng;
pub mod synthetic_env;
pub mod toy_policy;
pub mod trace_grammar;
