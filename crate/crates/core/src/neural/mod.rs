//! Dense `f64` tensors, a reverse-mode tape, the encoder-decoder network and
//! Adam.

pub mod adam;
pub mod checkpoint;
pub mod net;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, OptimState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{forward, Descriptor, NetworkParams};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
