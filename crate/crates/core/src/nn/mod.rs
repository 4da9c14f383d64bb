//! Minimal f32 neural-network stack for residual 1-D CNNs.

mod gemm;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod weights;

pub use layers::{BatchNorm1d, BnStats, Conv1d, Dropout, Layer, Linear, Mode, ResidualBlock, Slot};
pub use network::{Architecture, Backprop, Network};
pub use tensor::Tensor;

/// Index of the largest entry, lowest index on ties.
pub fn argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
