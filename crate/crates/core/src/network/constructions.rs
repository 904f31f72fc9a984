//! Hand-built single-channel networks with known optima, used as oracles.
//!
//! Each takes a `[rows, cols, 1]` input. A 1x1 identity convolution and a ReLU
//! make the input itself the feature map at layer [`FEATURE_LAYER`].

use std::collections::BTreeMap;

use super::{HeadKind, LayerSpec, NetworkModel};
use crate::error::Result;
use crate::tensor::Tensor;

/// Index of the feature map (the ReLU after the identity convolution).
pub const FEATURE_LAYER: usize = 1;

fn identity_trunk() -> (Vec<LayerSpec>, Vec<Vec<Tensor>>) {
    (
        vec![LayerSpec::conv(1, 1, 1, 0), LayerSpec::Relu],
        vec![vec![Tensor::ones(&[1, 1, 1, 1]), Tensor::zeros(&[1])], vec![]],
    )
}

fn assemble(
    rows: usize,
    cols: usize,
    mut layers: Vec<LayerSpec>,
    mut weights: Vec<Vec<Tensor>>,
    tail: Vec<(LayerSpec, Vec<Tensor>)>,
    head: HeadKind,
) -> Result<NetworkModel> {
    for (l, w) in tail {
        layers.push(l);
        weights.push(w);
    }
    NetworkModel::from_parts(vec![rows, cols, 1], None, layers, weights, head, BTreeMap::new())
}

/// `NT(x) = sum_ij A_ij`, a single logit.
pub fn spatial_sum(rows: usize, cols: usize) -> Result<NetworkModel> {
    let (layers, weights) = identity_trunk();
    let n = (rows * cols) as f64;
    assemble(
        rows,
        cols,
        layers,
        weights,
        vec![
            (LayerSpec::Gap, vec![]),
            (
                LayerSpec::Dense { out_dim: 1 },
                vec![Tensor::full(&[1, 1], n), Tensor::zeros(&[1])],
            ),
        ],
        HeadKind::Logits(1),
    )
}

/// Two logits: the sum of the (rectified, filtered) feature map over the
/// left half of the columns, and over the right half.
pub fn two_halves(rows: usize, cols: usize) -> Result<NetworkModel> {
    let (layers, weights) = identity_trunk();
    let mut w = Tensor::zeros(&[2, rows * cols]);
    for r in 0..rows {
        for c in 0..cols {
            let class = usize::from(c >= cols / 2);
            w.set(&[class, r * cols + c], 1.0);
        }
    }
    assemble(
        rows,
        cols,
        layers,
        weights,
        vec![
            // Rectifying after the filter makes negative filter cells useless.
            (LayerSpec::Relu, vec![]),
            (LayerSpec::Flatten, vec![]),
            (LayerSpec::Dense { out_dim: 2 }, vec![w, Tensor::zeros(&[2])]),
        ],
        HeadKind::Logits(2),
    )
}

/// A one-dimensional embedding `-GAP(A)`: every positive image lands in the
/// negative half-line.
pub fn sign_flip(rows: usize, cols: usize) -> Result<NetworkModel> {
    let (layers, weights) = identity_trunk();
    assemble(
        rows,
        cols,
        layers,
        weights,
        vec![
            (LayerSpec::Gap, vec![]),
            (
                LayerSpec::Dense { out_dim: 1 },
                vec![Tensor::full(&[1, 1], -1.0), Tensor::zeros(&[1])],
            ),
        ],
        HeadKind::Embedding(1),
    )
}

/// A single logit equal to `scale * A[row, col]`.
pub fn hot_cell(rows: usize, cols: usize, row: usize, col: usize, scale: f64) -> Result<NetworkModel> {
    let (layers, weights) = identity_trunk();
    let mut w = Tensor::zeros(&[1, rows * cols]);
    w.set(&[0, row * cols + col], scale);
    assemble(
        rows,
        cols,
        layers,
        weights,
        vec![
            (LayerSpec::Flatten, vec![]),
            (LayerSpec::Dense { out_dim: 1 }, vec![w, Tensor::zeros(&[1])]),
        ],
        HeadKind::Logits(1),
    )
}

/// Wraps a `[rows, cols]` grid as a single-channel input.
pub fn as_input(grid: &Tensor) -> Result<Tensor> {
    let s = grid.shape();
    grid.reshape(vec![s[0], s[1], 1])
}
