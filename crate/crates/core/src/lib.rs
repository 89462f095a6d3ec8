pub mod approx;
pub mod backend;
pub mod conv;
pub mod error;
pub mod formats;
pub mod linalg;
pub mod matrix;
pub mod mpc;
pub mod packing;
pub mod pipeline;
pub mod planner;

pub use backend::{CipherVec, HeParams, KeyId, OpCounters, SimdBackend, Simulator, C64};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use pipeline::{
    infer_plain, run_scenario, ActivationMode, Model, ModelSpec, ScenarioConfig, ScenarioResult,
};
pub use planner::{
    cost_of, plan_search, BlockPlan, BootstrapMode, Deployment, Scenario, SearchConfig,
};
