//! Reverse-mode automatic differentiation over small dense tensors.

mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with, GradCheckOptions, GradCheckReport,
    ParamCheck,
};
pub use graph::{sigmoid, Gradients, Graph, Var};
pub use params::{Param, ParamStore};
pub use tensor::{Tensor, MAX_RANK};
