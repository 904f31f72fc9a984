//! Gradient-weighted class activation maps and CAM.

use crate::attention::{heatmap_from_grid, CafResult, Constraint, Heatmap};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::network::{HeadKind, LayerSpec, NetworkModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaliencySource {
    GradCam,
    GradCamAbs,
    Cam,
    L2Caf,
    SoftmaxCaf,
    GaussianCaf,
}

/// A nonnegative `[rows, cols]` map at feature-map resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    grid: Tensor,
    source: SaliencySource,
}

impl SaliencyMap {
    pub fn new(grid: Tensor, source: SaliencySource) -> Result<Self> {
        if grid.rank() != 2 {
            return Err(Error::shape("saliency map", format!("expected [rows, cols], got {:?}", grid.shape())));
        }
        if grid.data().iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("saliency maps are nonnegative"));
        }
        Ok(SaliencyMap { grid, source })
    }

    /// Wraps the saliency grid of a filter optimization.
    pub fn from_caf(result: &CafResult) -> Result<Self> {
        let source = match result.constraint {
            Constraint::L2 => SaliencySource::L2Caf,
            Constraint::Softmax => SaliencySource::SoftmaxCaf,
            Constraint::Gaussian => SaliencySource::GaussianCaf,
        };
        Self::new(result.saliency()?, source)
    }

    pub fn grid(&self) -> &Tensor {
        &self.grid
    }

    pub fn source(&self) -> SaliencySource {
        self.source
    }

    /// True when every entry is zero.
    pub fn is_zero(&self) -> bool {
        self.grid.data().iter().all(|&v| v == 0.0)
    }

    /// Resizes to `target` and rescales to `[0, 1]`.
    pub fn to_heatmap(&self, target: (usize, usize)) -> Result<Heatmap> {
        heatmap_from_grid(&self.grid, target)
    }
}

/// Which scalar is differentiated to get channel weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// One logit.
    Class(usize),
    /// Sum of the raw embedding components.
    EmbeddingSum,
    /// Mean of the raw embedding components.
    EmbeddingMean,
}

/// How the weighted channel sum is made nonnegative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rectify {
    Relu,
    Abs,
}

/// Feature map `A` at `at_layer` and the channel weights
/// `alpha_k = mean_ij d(target)/dA_ijk`.
pub fn channel_weights(model: &NetworkModel, x: &Tensor, at_layer: usize, target: GradTarget) -> Result<(Tensor, Vec<f64>)> {
    let shape = model.layer_shape(at_layer);
    if shape.len() != 3 {
        return Err(Error::Incompatible(format!("layer {at_layer} output {shape:?} is not spatial")));
    }
    let (_, trace) = model.forward(x)?;
    let a = trace.get(at_layer).expect("layer in trace").clone();
    let stop = model.raw_output_layer();
    let mut tape = Tape::new();
    let a_node = tape.variable(a.clone());
    let out = model.tail_on_tape(&mut tape, at_layer, a_node, stop, None)?;
    let scalar = match target {
        GradTarget::Class(c) => {
            if c >= tape.value(out).len() {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
            tape.select(out, c)?
        }
        GradTarget::EmbeddingSum => tape.sum(out)?,
        GradTarget::EmbeddingMean => {
            let n = tape.value(out).len() as f64;
            let s = tape.sum(out)?;
            tape.scale(s, 1.0 / n)?
        }
    };
    let grad = tape.backward(scalar)?.wrt(a_node);
    let (h, w, k) = (shape[0], shape[1], shape[2]);
    let mut alpha = vec![0.0; k];
    for (i, g) in grad.data().iter().enumerate() {
        alpha[i % k] += g;
    }
    for v in &mut alpha {
        *v /= (h * w) as f64;
    }
    Ok((a, alpha))
}

/// `sum_k alpha_k A_k` before rectification.
pub fn weighted_channel_sum(a: &Tensor, alpha: &[f64]) -> Tensor {
    let (h, w, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let data = a
        .data()
        .chunks(k)
        .map(|cell| cell.iter().zip(alpha).map(|(v, al)| v * al).sum())
        .collect();
    Tensor::from_parts(vec![h, w], data)
}

fn rectify(m: &Tensor, mode: Rectify) -> Tensor {
    match mode {
        Rectify::Relu => m.map(|v| v.max(0.0)),
        Rectify::Abs => m.map(f64::abs),
    }
}

/// Class-discriminative Grad-CAM on a logits head.
pub fn grad_cam(model: &NetworkModel, x: &Tensor, at_layer: usize, class: usize) -> Result<SaliencyMap> {
    if !model.head().is_logits() {
        return Err(Error::Incompatible(
            "grad-cam needs a logits head; use the retrieval variant for embeddings".into(),
        ));
    }
    let (a, alpha) = channel_weights(model, x, at_layer, GradTarget::Class(class))?;
    SaliencyMap::new(rectify(&weighted_channel_sum(&a, &alpha), Rectify::Relu), SaliencySource::GradCam)
}

/// Grad-CAM for an embedding head, differentiating the sum (or mean) of the
/// raw embedding. `Rectify::Abs` keeps evidence that pushes the embedding
/// negative.
pub fn grad_cam_retrieval(
    model: &NetworkModel,
    x: &Tensor,
    at_layer: usize,
    mode: Rectify,
    target: GradTarget,
) -> Result<SaliencyMap> {
    if model.head().is_logits() {
        return Err(Error::Incompatible("retrieval grad-cam needs an embedding head".into()));
    }
    if matches!(target, GradTarget::Class(_)) {
        return Err(Error::invalid("retrieval grad-cam differentiates an embedding reduction"));
    }
    let (a, alpha) = channel_weights(model, x, at_layer, target)?;
    let source = match mode {
        Rectify::Relu => SaliencySource::GradCam,
        Rectify::Abs => SaliencySource::GradCamAbs,
    };
    SaliencyMap::new(rectify(&weighted_channel_sum(&a, &alpha), mode), source)
}

/// CAM for a trunk ending in `features -> GAP -> Dense(logits)`.
pub fn cam(model: &NetworkModel, x: &Tensor, class: usize) -> Result<SaliencyMap> {
    let n = match model.head() {
        HeadKind::Logits(n) => n,
        HeadKind::Embedding(_) => return Err(Error::Incompatible("cam needs a logits head".into())),
    };
    if class >= n {
        return Err(Error::invalid(format!("class {class} out of range for {n} classes")));
    }
    let layers = model.layers();
    let last = layers.len() - 1;
    let feature = model.feature_layer()?;
    let fits = last >= 2
        && feature == last - 2
        && matches!(layers[last - 1], LayerSpec::Gap)
        && matches!(layers[last], LayerSpec::Dense { .. });
    if !fits {
        return Err(Error::Incompatible("cam needs a conv trunk followed by GAP and one dense layer".into()));
    }
    let (_, trace) = model.forward(x)?;
    let a = trace.get(feature).expect("feature layer in trace");
    let w = &model.weights()[last][0];
    let k = a.shape()[2];
    let row = &w.data()[class * k..(class + 1) * k];
    SaliencyMap::new(rectify(&weighted_channel_sum(a, row), Rectify::Relu), SaliencySource::Cam)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::constructions::{self as cons, FEATURE_LAYER};

    #[test]
    fn gap_net_gives_relu_of_input_over_area() {
        let model = cons::spatial_sum(3, 4).unwrap();
        let grid = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect()).unwrap();
        let x = cons::as_input(&grid).unwrap();
        let (_, alpha) = channel_weights(&model, &x, FEATURE_LAYER, GradTarget::Class(0)).unwrap();
        // The dense weight is the area, so d(logit)/dA is exactly 1 everywhere.
        assert_eq!(alpha, vec![1.0]);
        let m = grad_cam(&model, &x, FEATURE_LAYER, 0).unwrap();
        assert!(m.grid().bitwise_eq(&grid));
    }

    #[test]
    fn sign_flip_kills_vanilla_but_not_abs() {
        let model = cons::sign_flip(4, 4).unwrap();
        let grid = Tensor::new(vec![4, 4], (1..=16).map(f64::from).collect()).unwrap();
        let x = cons::as_input(&grid).unwrap();
        let vanilla = grad_cam_retrieval(&model, &x, FEATURE_LAYER, Rectify::Relu, GradTarget::EmbeddingSum).unwrap();
        let abs = grad_cam_retrieval(&model, &x, FEATURE_LAYER, Rectify::Abs, GradTarget::EmbeddingSum).unwrap();
        assert!(vanilla.is_zero());
        let expected = grid.scale(1.0 / 16.0);
        for (a, b) in abs.grid().data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(grad_cam(&model, &x, FEATURE_LAYER, 0).is_err());
    }

    #[test]
    fn cam_selects_channel_and_rejects_other_shapes() {
        let model = cons::spatial_sum(3, 3).unwrap();
        let grid = Tensor::full(&[3, 3], 0.5);
        let x = cons::as_input(&grid).unwrap();
        let m = cam(&model, &x, 0).unwrap();
        assert!(m.grid().bitwise_eq(&Tensor::full(&[3, 3], 4.5)));
        let halves = cons::two_halves(3, 4).unwrap();
        assert!(cam(&halves, &Tensor::ones(&[3, 4, 1]), 0).is_err());
    }
}
