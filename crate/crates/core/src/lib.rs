//! Phantom parallelism and tensor parallelism for fully connected networks,
//! run on a simulated multi-rank communicator with exact FLOP and modeled
//! communication accounting.

pub mod checkpoint;
pub mod collectives;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod phantom;
pub mod reference;
pub mod rng;
pub mod tensor_parallel;
pub mod training;

pub use collectives::{CollectiveKind, CommCostModel, CommRecord, ExecMode, RankComm, World};
pub use error::{Error, Result};
pub use linalg::{Activation, Flops, Matrix};
pub use phantom::{PhantomConfig, PhantomModel};
pub use reference::DenseFFN;
pub use tensor_parallel::TpModel;
pub use training::{gen_dataset, train, Mode, TrainConfig, TrainResult};
pub use energy::{CostReport, EnergyRates};
