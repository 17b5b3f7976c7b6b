//! Raw forward/backward kernels on plain tensors. The tape in
//! [`crate::autodiff`] wraps these; tests compare them against loop oracles.

pub mod conv;
pub mod pool;

pub use conv::{conv3d, conv3d_backward, conv3d_rows, conv3d_rows_backward, rows_reached, Conv3dGrads, ConvGeometry};
pub use pool::{pool, pool_backward, PoolKind, PoolOutput};

/// Output length of a windowed operation along one axis, or `None` when the
/// kernel does not fit into the padded extent.
pub fn window_len(extent: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > extent + 2 * pad {
        None
    } else {
        Some((extent + 2 * pad - kernel) / stride + 1)
    }
}
