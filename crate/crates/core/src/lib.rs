//! Distributional and risk-sensitive deep reinforcement learning for
//! trading a single front-month futures contract.
//!
//! The crate bundles a small LSTM/dense network stack with hand-written
//! backpropagation ([`nn`]), risk functionals over return distributions
//! ([`risk`]), replay buffers ([`replay`]), a synthetic regime-switching
//! market with PCA compression ([`market`]), the episodic trading
//! environment ([`env`]), the agent family ([`agents`]), walk-forward
//! evaluation with risky-state accounting ([`eval`]) and the command-line
//! front end ([`cli`]).

pub mod agents;
pub mod cli;
pub mod env;
pub mod eval;
pub mod market;
pub mod nn;
pub mod replay;
pub mod risk;
pub mod rng;
