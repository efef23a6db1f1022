//! Deep Q-learning on belief-space POMDPs with hard- or soft-enforced
//! convexity of the learned value function over beliefs.

pub mod diffcore;
pub mod networks;
pub mod env;
pub mod convexity;
pub mod training;
pub mod evaluation;
pub mod harness;
pub mod cli;
