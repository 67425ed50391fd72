//! Certified training against universal adversarial perturbations.
//!
//! Small dense ReLU networks are trained with interval bounds taken around
//! adversarial points of *other* inputs in the batch, which targets the
//! perturbations that can hurt several inputs at once. The crate also ships
//! an exhaustive grid oracle used to check the counting inequalities behind
//! that objective, plus batch-wise certification of UAP accuracy.
//!
//! ```
//! use citrus_core::{init_weights, Arch, Tensor};
//!
//! let net = init_weights(&Arch(vec![2, 8, 2]), 0).unwrap();
//! let logits = net.forward(&Tensor::vector(vec![0.5, -0.5])).unwrap();
//! assert_eq!(logits.shape(), &[2]);
//! ```

pub mod attack;
pub mod campaign;
pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod interval;
pub mod losses;
pub mod network;
pub mod objective;
pub mod optim;
pub mod oracle;
pub mod tensor;
pub mod trainer;

pub use attack::AttackConfig;
pub use config::RunConfig;
pub use data::{DataRange, Dataset, Sample};
pub use error::{Error, Result};
pub use interval::IntervalTensor;
pub use network::{init_weights, Arch, Layer, Network};
pub use objective::{LossKind, Objective, ObjectiveRegistry};
pub use tensor::Tensor;
pub use trainer::{train, TrainConfig};
