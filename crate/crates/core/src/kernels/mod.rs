//! Raw numeric kernels on flat buffers. The graph layer wraps these.

pub mod conv;
pub mod matmul;
pub mod resize;
