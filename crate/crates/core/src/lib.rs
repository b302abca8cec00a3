//! Robust training by finding and enhancing weak subnets.
//!
//! A maskable residual classifier ([`model`]) exposes subnets made of a subset
//! of paths per block and channel groups per layer ([`subnet`]). A recurrent
//! policy ([`controller`]) learns to emit subnets with low accuracy, and the
//! trainer ([`train`]) distills the full network into those subnets while
//! training it. [`adversarial`], [`corruption`] and [`analysis`] provide the
//! evaluation harnesses.

pub mod adversarial;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod controller;
pub mod corruption;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod subnet;
pub mod topology;
pub mod train;

pub use controller::{ControllerPolicy, PolicyState};
pub use error::{Error, Result};
pub use model::{ForwardOptions, ForwardPass, Gradients, MaskableModel, Mode};
pub use rng::SeedTree;
pub use subnet::{sample_uniform_subnet, selection_count, subnet_from_l1, SubnetSpec};
pub use topology::{BlockTopology, InputShape, LayerId, LayerKind, LayerTopology, ModelTopology, PathTopology};
