//! Differentiable-computation substrate: dense tensors over f32/f64, a closed
//! operator set with reverse-mode gradients on a tape, and a bias-corrected
//! Adam optimizer.
//!
//! Training runs in 32-bit; gradient checks run the same generic code in
//! 64-bit, where central finite differences are meaningful. Forward passes are
//! deterministic: the same inputs produce bit-identical outputs regardless of
//! thread count.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use params::{ParamBinder, Params};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use io::{load_checkpoint, read_tensor, save_checkpoint, write_tensor, CheckpointMeta};
