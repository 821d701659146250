//! Cost model, solvers, dataset generation, multi-task network, evaluation
//! and frame simulation for NOMA-uplink task offloading to an edge server.
//!
//! ```
//! use offload_core::{dataset, solver};
//!
//! let ds = dataset::generate(&dataset::GenConfig::new(2, 20, 7)).unwrap();
//! let s = &ds.samples[0].scenario;
//! let sol = solver::exact_enum(s, &solver::SolverConfig::default()).unwrap().unwrap();
//! assert!(sol.feasible);
//! ```

pub mod cost;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod format;
pub mod mtfnn;
pub mod rng;
pub mod sim;
pub mod solver;

pub use cost::{
    Allocation, Constraint, CostBreakdown, CostTerms, Decision, Device, Feasibility, RadioConfig, Scenario, Task,
};
pub use dataset::{Dataset, GenConfig, Sample};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use mtfnn::{MtfnnArch, MtfnnModel, TrainConfig};
pub use sim::{FrameRecord, Policy, PolicySpec, SimConfig, SimTrace};
pub use solver::{Method, Solution, SolutionRow, SolverConfig};
