//! Antithetic multilevel particle filters for partially observed diffusions.

pub mod bench;
pub mod cli;
pub mod error;
pub mod filter;
pub mod model;
pub mod multilevel;
pub mod resample;
pub mod scheme;
pub mod streams;

pub use error::{Error, Marginal, Result};
pub use filter::{cpf_run, euler_cpf_run, pf_run, pf_run_with, ResamplePolicy, TestFunction};
pub use multilevel::{allocate_levels, amlpf_run, mlpf_baseline_run, MLConfig, MLOutput, SignedLog};
pub use model::{builtin_model, BuiltinModel, StateSpaceModel};
pub use scheme::{Discretization, Level};
pub use streams::{RunSeed, StreamKey};
