//! Valuation of in-context learning demonstrations.
//!
//! The crate scores each candidate demonstration by its average marginal effect on prompt
//! performance over sampled prompt permutations ([`engine`]), compares those values with the
//! usual baselines ([`baselines`]) and runs the add/remove, fairness, out-of-distribution and
//! label-noise experiments ([`harness`], [`fairness`], [`noise`]) against pluggable model
//! backends ([`backends`]).

pub mod backends;
pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod fairness;
pub mod harness;
pub mod io;
pub mod noise;
pub mod table;
pub mod types;

pub use backends::{EvalOutcome, Evaluator};
pub use engine::{compute_values, exact_values, EngineConfig, ShapleyEngine};
pub use error::{Error, Result};
pub use table::{merge_tables, update_running_mean, ValueRecord, ValueTable};
pub use types::{assemble_prompt, canonical_key, CandidatePool, Demonstration, LabeledExample, PromptSpec, TaskSpec};
