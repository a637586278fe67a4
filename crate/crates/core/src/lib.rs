//! Width- and resolution-slimmable convolutional networks: weight-shared
//! subnets, post-training normalization statistics, an analytic cost model,
//! joint sandwich training and budget-driven configuration lookup.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flops;
pub mod io;
mod kernels;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod params;
pub mod planner;
pub mod spec;
pub mod subnet;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use data::{Batch, Dataset, DatasetSource, ResolutionSet, Split};
pub use error::{Error, Result};
pub use flops::{layer_cost, network_cost, CostReport};
pub use norm::{calibrate, BnStatsBank, NormMode};
pub use params::ParamStore;
pub use spec::{LayerKind, LayerSpec, SlimmableModelSpec, SubnetConfig, WidthMultiplier};
pub use subnet::{materialize_subnet, SubnetView};
pub use tensor::Tensor;
pub use trainer::{TrainMode, TrainSchedule, TrainStepPlan};
pub use planner::{QueryTable, TableRow};
