//! Reverse-mode autodiff and the gated encoder-decoder network used for
//! learned dipole inversion, with masked-L1 RMSprop training.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod kernels;
pub mod net;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{NnError, Result};
pub use graph::{Graph, NodeId};
pub use infer::infer;
pub use net::{Census, Net, NetConfig};
pub use optim::RmsPropConfig;
pub use params::ParamStore;
pub use tensor::Tensor;
pub use train::{TrainConfig, Trainer};
