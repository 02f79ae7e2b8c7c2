//! Dense tensors, reverse-mode gradients, the traversability network and
//! its optimizer.

mod adam;
mod conv;
mod graph;
mod net;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{BatchStats, Graph, Var};
pub use net::{BnRunning, BnUpdate, HeadOutput, Inference, Mode, NetworkConfig, TravNet};
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use tensor::Tensor;
