//! On-disk artifacts: npy tensors here, configs in [`crate::config`] and
//! traces in [`crate::trace`].

mod npy;

pub use npy::{read_from, read_tensor, write_tensor, write_to, TensorFile};
