//! Dense f64 tensors with tape-based reverse-mode differentiation.

mod checkpoint;
mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod rng;
mod tensor;

pub(crate) use checkpoint::Cursor;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{finite_diff_check, finite_diff_check_params, GradCheckReport};
pub use graph::{sigmoid, Graph, NodeId};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use rng::SeededRng;
pub use tensor::Tensor;
