//! Toy CNNs: layer specs, shape checking, forward passes with activation
//! traces, and the filter insertion hook used by the attention optimizers.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::ops;
use crate::rng::{rng_for, streams};
use crate::tensor::Tensor;

pub mod constructions;
pub mod presets;
pub mod serialize;
pub mod train;

pub use presets::Preset;
pub use serialize::{load_model, save_model};
pub use train::{train_classifier, train_retrieval, RetrievalLoss, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        out_channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Gap,
    Flatten,
    Dense {
        out_dim: usize,
    },
    /// Projects a vector onto the unit sphere.
    EmbedNormalize,
    /// Fuses per-frame feature vectors with a gated recurrent cell.
    RecurrentFuse {
        hidden_dim: usize,
    },
}

impl LayerSpec {
    pub fn conv(kernel: usize, out_channels: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            kernel_h: kernel,
            kernel_w: kernel,
            out_channels,
            stride,
            padding,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::Gap => "gap",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::EmbedNormalize => "embed_normalize",
            LayerSpec::RecurrentFuse { .. } => "recurrent_fuse",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "size", rename_all = "snake_case")]
pub enum HeadKind {
    Logits(usize),
    Embedding(usize),
}

impl HeadKind {
    pub fn size(self) -> usize {
        match self {
            HeadKind::Logits(n) | HeadKind::Embedding(n) => n,
        }
    }

    pub fn is_logits(self) -> bool {
        matches!(self, HeadKind::Logits(_))
    }
}

/// Output shape of every layer. For sequence models, layers before the
/// recurrent fuse report their per-frame shape.
pub fn infer_shapes(
    input_shape: &[usize],
    frames: Option<usize>,
    layers: &[LayerSpec],
    head: HeadKind,
) -> Result<Vec<Vec<usize>>> {
    let bad = |detail: String| Err(Error::shape("network", detail));
    if input_shape.len() != 3 || input_shape.contains(&0) {
        return bad(format!("input shape must be [h, w, c] with positive dims, got {input_shape:?}"));
    }
    if layers.is_empty() {
        return bad("network has no layers".into());
    }
    let fuse_count = layers
        .iter()
        .filter(|l| matches!(l, LayerSpec::RecurrentFuse { .. }))
        .count();
    match (frames, fuse_count) {
        (None, 0) => {}
        (Some(t), 1) if t >= 1 => {}
        (Some(0), _) => return bad("sequence length must be at least 1".into()),
        (Some(_), _) => return bad("sequence models need exactly one recurrent_fuse layer".into()),
        (None, _) => return bad("recurrent_fuse requires a sequence input".into()),
    }

    let mut cur = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        cur = match *layer {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                out_channels,
                stride,
                padding,
            } => {
                if cur.len() != 3 {
                    return bad(format!("layer {i} conv needs a spatial input, got {cur:?}"));
                }
                if kernel_h == 0 || kernel_w == 0 || out_channels == 0 || stride == 0 {
                    return bad(format!("layer {i} conv has a zero kernel/channel/stride"));
                }
                match (
                    ops::conv_output_dim(cur[0], kernel_h, stride, padding),
                    ops::conv_output_dim(cur[1], kernel_w, stride, padding),
                ) {
                    (Some(h), Some(w)) => vec![h, w, out_channels],
                    _ => return bad(format!("layer {i} conv kernel larger than padded input {cur:?}")),
                }
            }
            LayerSpec::Relu => cur,
            LayerSpec::Gap => {
                if cur.len() != 3 {
                    return bad(format!("layer {i} gap needs a spatial input, got {cur:?}"));
                }
                vec![cur[2]]
            }
            LayerSpec::Flatten => vec![cur.iter().product()],
            LayerSpec::Dense { out_dim } => {
                if cur.len() != 1 {
                    return bad(format!("layer {i} dense needs a vector input, got {cur:?}"));
                }
                if out_dim == 0 {
                    return bad(format!("layer {i} dense has zero outputs"));
                }
                vec![out_dim]
            }
            LayerSpec::EmbedNormalize => {
                if cur.len() != 1 {
                    return bad(format!("layer {i} embed_normalize needs a vector input, got {cur:?}"));
                }
                cur
            }
            LayerSpec::RecurrentFuse { hidden_dim } => {
                if cur.len() != 1 {
                    return bad(format!("layer {i} recurrent_fuse needs per-frame vectors, got {cur:?}"));
                }
                if hidden_dim == 0 {
                    return bad(format!("layer {i} recurrent_fuse has zero hidden units"));
                }
                vec![hidden_dim]
            }
        };
        shapes.push(cur.clone());
    }
    if cur.len() != 1 || cur[0] != head.size() {
        return bad(format!("final output {cur:?} does not match head {head:?}"));
    }
    Ok(shapes)
}

fn weight_shapes(layer: &LayerSpec, in_shape: &[usize], out_shape: &[usize]) -> Vec<Vec<usize>> {
    match *layer {
        LayerSpec::Conv {
            kernel_h,
            kernel_w,
            out_channels,
            ..
        } => vec![vec![kernel_h, kernel_w, in_shape[2], out_channels], vec![out_channels]],
        LayerSpec::Dense { out_dim } => vec![vec![out_dim, in_shape[0]], vec![out_dim]],
        LayerSpec::RecurrentFuse { hidden_dim } => {
            let z = in_shape[0] + hidden_dim;
            vec![
                vec![hidden_dim, z],
                vec![hidden_dim],
                vec![hidden_dim, z],
                vec![hidden_dim],
            ]
        }
        _ => {
            let _ = out_shape;
            vec![]
        }
    }
}

/// Per-layer outputs of one forward pass. For sequence models, per-frame
/// layers are stacked along a leading frame axis.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    layers: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn get(&self, layer: usize) -> Option<&Tensor> {
        self.layers.get(layer)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output(&self) -> &Tensor {
        self.layers.last().expect("trace of a non-empty network")
    }
}

/// Activations flowing between layers: one value, or one per frame until the
/// recurrent fuse.
#[derive(Clone, Debug)]
pub enum Flow<V> {
    Single(V),
    Frames(Vec<V>),
}

/// Where to multiply a feature map by a spatial filter during a tape run.
#[derive(Clone, Copy, Debug)]
pub struct FilterHook {
    pub layer: usize,
    /// The already-constrained filter view, shape `[h, w]`.
    pub filter: NodeId,
    /// For sequence models, restrict the filter to one frame; `None` filters every frame.
    pub frame: Option<usize>,
}

trait Exec {
    type V: Clone;
    fn conv(&mut self, layer: usize, x: &Self::V, stride: usize, padding: usize) -> Result<Self::V>;
    fn relu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gap(&mut self, x: &Self::V) -> Result<Self::V>;
    fn flatten(&mut self, x: &Self::V) -> Result<Self::V>;
    fn dense(&mut self, layer: usize, x: &Self::V) -> Result<Self::V>;
    fn normalize(&mut self, x: &Self::V) -> Result<Self::V>;
    fn zeros(&mut self, n: usize) -> Self::V;
    fn cell(&mut self, layer: usize, x: &Self::V, h: &Self::V) -> Result<Self::V>;
    fn filter(&mut self, x: &Self::V, f: &Self::V) -> Result<Self::V>;
}

struct PlainExec<'a> {
    weights: &'a [Vec<Tensor>],
}

impl Exec for PlainExec<'_> {
    type V = Tensor;

    fn conv(&mut self, layer: usize, x: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let w = &self.weights[layer];
        ops::add_channel_bias(&ops::conv2d(x, &w[0], stride, padding)?, &w[1])
    }
    fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        Ok(ops::relu(x))
    }
    fn gap(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::global_average_pool(x)
    }
    fn flatten(&mut self, x: &Tensor) -> Result<Tensor> {
        x.reshape(vec![x.len()])
    }
    fn dense(&mut self, layer: usize, x: &Tensor) -> Result<Tensor> {
        let w = &self.weights[layer];
        ops::dense(&w[0], x, &w[1])
    }
    fn normalize(&mut self, x: &Tensor) -> Result<Tensor> {
        ops::l2_normalize(x)
    }
    fn zeros(&mut self, n: usize) -> Tensor {
        Tensor::zeros(&[n])
    }
    fn cell(&mut self, layer: usize, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        // Same arithmetic as the tape op, evaluated on a scratch tape.
        let w = &self.weights[layer];
        let mut t = Tape::new();
        let ids = [x, h, &w[0], &w[1], &w[2], &w[3]].map(|v| t.constant(v.clone()));
        let out = t.gated_cell(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])?;
        Ok(t.value(out).clone())
    }
    fn filter(&mut self, x: &Tensor, f: &Tensor) -> Result<Tensor> {
        ops::spatial_multiply(x, f)
    }
}

/// Weight nodes of a model on a tape, indexed like `NetworkModel::weights`.
pub type ParamNodes = Vec<Vec<NodeId>>;

struct TapeExec<'a, 't> {
    weights: &'a [Vec<Tensor>],
    tape: &'t mut Tape,
    params: Vec<Vec<Option<NodeId>>>,
}

impl<'a, 't> TapeExec<'a, 't> {
    fn new(model: &'a NetworkModel, tape: &'t mut Tape, params: Option<&ParamNodes>) -> Self {
        let params = match params {
            Some(p) => p.iter().map(|l| l.iter().copied().map(Some).collect()).collect(),
            None => model.weights.iter().map(|l| vec![None; l.len()]).collect(),
        };
        TapeExec {
            weights: &model.weights,
            tape,
            params,
        }
    }

    /// Weight node for (layer, slot), pushed as a constant on first use.
    fn param(&mut self, layer: usize, slot: usize) -> NodeId {
        if let Some(id) = self.params[layer][slot] {
            return id;
        }
        let id = self.tape.constant(self.weights[layer][slot].clone());
        self.params[layer][slot] = Some(id);
        id
    }
}

impl Exec for TapeExec<'_, '_> {
    type V = NodeId;

    fn conv(&mut self, layer: usize, x: &NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let k = self.param(layer, 0);
        let b = self.param(layer, 1);
        self.tape.conv2d(*x, k, Some(b), stride, padding)
    }
    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        self.tape.relu(*x)
    }
    fn gap(&mut self, x: &NodeId) -> Result<NodeId> {
        self.tape.global_average_pool(*x)
    }
    fn flatten(&mut self, x: &NodeId) -> Result<NodeId> {
        self.tape.flatten(*x)
    }
    fn dense(&mut self, layer: usize, x: &NodeId) -> Result<NodeId> {
        let w = self.param(layer, 0);
        let b = self.param(layer, 1);
        self.tape.dense(w, *x, b)
    }
    fn normalize(&mut self, x: &NodeId) -> Result<NodeId> {
        self.tape.l2_normalize(*x)
    }
    fn zeros(&mut self, n: usize) -> NodeId {
        self.tape.constant(Tensor::zeros(&[n]))
    }
    fn cell(&mut self, layer: usize, x: &NodeId, h: &NodeId) -> Result<NodeId> {
        let p: Vec<NodeId> = (0..4).map(|s| self.param(layer, s)).collect();
        self.tape.gated_cell(*x, *h, p[0], p[1], p[2], p[3])
    }
    fn filter(&mut self, x: &NodeId, f: &NodeId) -> Result<NodeId> {
        self.tape.spatial_multiply(*x, *f)
    }
}

/// A toy network: layer specs, weights, head kind and named endpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkModel {
    input_shape: Vec<usize>,
    frames: Option<usize>,
    layers: Vec<LayerSpec>,
    weights: Vec<Vec<Tensor>>,
    head: HeadKind,
    endpoints: BTreeMap<String, usize>,
    shapes: Vec<Vec<usize>>,
}

impl NetworkModel {
    /// Builds a shape-checked network with seeded fan-in uniform weights
    /// (`U[-s, s]`, `s = sqrt(1 / fan_in)`) and zero biases.
    pub fn new(
        input_shape: Vec<usize>,
        frames: Option<usize>,
        layers: Vec<LayerSpec>,
        head: HeadKind,
        seed: u64,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, frames, &layers, head)?;
        let mut rng = rng_for(seed, streams::INIT);
        let mut weights = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = if i == 0 { &input_shape } else { &shapes[i - 1] };
            let mut tensors = Vec::new();
            for (slot, shape) in weight_shapes(layer, in_shape, &shapes[i]).into_iter().enumerate() {
                // Even slots hold weight matrices/kernels, odd slots biases.
                if slot % 2 == 1 {
                    tensors.push(Tensor::zeros(&shape));
                    continue;
                }
                let fan_in: usize = match layer {
                    LayerSpec::Conv { .. } => shape[..3].iter().product(),
                    _ => shape[1],
                };
                let s = (1.0 / fan_in as f64).sqrt();
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-s..=s)).collect();
                tensors.push(Tensor::from_parts(shape, data));
            }
            weights.push(tensors);
        }
        Self::from_parts(input_shape, frames, layers, weights, head, BTreeMap::new())
    }

    /// Assembles a model from explicit weights, validating every shape.
    /// Default endpoints are added to `endpoints` when absent.
    pub fn from_parts(
        input_shape: Vec<usize>,
        frames: Option<usize>,
        layers: Vec<LayerSpec>,
        weights: Vec<Vec<Tensor>>,
        head: HeadKind,
        endpoints: BTreeMap<String, usize>,
    ) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, frames, &layers, head)?;
        if weights.len() != layers.len() {
            return Err(Error::shape(
                "network",
                format!("{} weight groups for {} layers", weights.len(), layers.len()),
            ));
        }
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = if i == 0 { &input_shape } else { &shapes[i - 1] };
            let expected = weight_shapes(layer, in_shape, &shapes[i]);
            let got: Vec<Vec<usize>> = weights[i].iter().map(|t| t.shape().to_vec()).collect();
            if expected != got {
                return Err(Error::shape(
                    "network",
                    format!("layer {i} ({}) expects weights {expected:?}, got {got:?}", layer.name()),
                ));
            }
        }
        let mut model = NetworkModel {
            input_shape,
            frames,
            layers,
            weights,
            head,
            endpoints: BTreeMap::new(),
            shapes,
        };
        for (name, idx) in model.default_endpoints() {
            model.endpoints.insert(name, idx);
        }
        for (name, idx) in endpoints {
            model.set_endpoint(&name, idx)?;
        }
        Ok(model)
    }

    fn default_endpoints(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        if let Some(f) = self.last_spatial_layer() {
            out.push(("features".to_string(), f));
        }
        let raw = self.raw_output_layer();
        let head_name = if self.head.is_logits() { "logits" } else { "embedding" };
        out.push((head_name.to_string(), raw));
        out.push(("output".to_string(), self.layers.len() - 1));
        out
    }

    /// Names a layer. Spatial endpoints must be preceded by a convolution.
    pub fn set_endpoint(&mut self, name: &str, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::invalid(format!("endpoint {name} refers to missing layer {layer}")));
        }
        if self.shapes[layer].len() == 3 && !self.has_conv_at_or_before(layer) {
            return Err(Error::invalid(format!(
                "endpoint {name} at layer {layer} has no convolution before it"
            )));
        }
        self.endpoints.insert(name.to_string(), layer);
        Ok(())
    }

    fn has_conv_at_or_before(&self, layer: usize) -> bool {
        self.layers[..=layer]
            .iter()
            .any(|l| matches!(l, LayerSpec::Conv { .. }))
    }

    /// Last layer producing a spatial map that follows a convolution.
    fn last_spatial_layer(&self) -> Option<usize> {
        (0..self.layers.len())
            .rev()
            .find(|&i| self.shapes[i].len() == 3 && self.has_conv_at_or_before(i))
    }

    pub fn endpoint(&self, name: &str) -> Option<usize> {
        self.endpoints.get(name).copied()
    }

    pub fn endpoints(&self) -> &BTreeMap<String, usize> {
        &self.endpoints
    }

    /// Default filter insertion point: the last convolutional feature map.
    pub fn feature_layer(&self) -> Result<usize> {
        self.endpoint("features")
            .ok_or_else(|| Error::Incompatible("network has no convolutional feature map".into()))
    }

    /// Last layer before a trailing `EmbedNormalize`: the raw logits or embedding.
    pub fn raw_output_layer(&self) -> usize {
        let last = self.layers.len() - 1;
        if matches!(self.layers[last], LayerSpec::EmbedNormalize) && last > 0 {
            last - 1
        } else {
            last
        }
    }

    pub fn output_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Expected shape of a full input tensor (with the frame axis for sequence models).
    pub fn full_input_shape(&self) -> Vec<usize> {
        match self.frames {
            Some(t) => {
                let mut s = vec![t];
                s.extend_from_slice(&self.input_shape);
                s
            }
            None => self.input_shape.clone(),
        }
    }

    pub fn frames(&self) -> Option<usize> {
        self.frames
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Vec<Tensor>] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Vec<Tensor>] {
        &mut self.weights
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    /// Output shape of `layer` (per frame for layers before a recurrent fuse).
    pub fn layer_shape(&self, layer: usize) -> &[usize] {
        &self.shapes[layer]
    }

    /// Index of the recurrent fuse layer, if any.
    pub fn fuse_layer(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, LayerSpec::RecurrentFuse { .. }))
    }

    /// True when `layer` runs once per frame.
    pub fn is_per_frame(&self, layer: usize) -> bool {
        self.fuse_layer().is_some_and(|f| layer < f)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let expected = self.full_input_shape();
        if x.shape() != expected.as_slice() {
            return Err(Error::shape(
                "forward",
                format!("input {:?} does not match model input {expected:?}", x.shape()),
            ));
        }
        Ok(())
    }

    /// Splits a layer-`after` activation (or the input when `after` is `None`) into a flow.
    fn flow_from(&self, after: Option<usize>, value: &Tensor) -> Flow<Tensor> {
        let per_frame = match after {
            None => self.frames.is_some(),
            Some(l) => self.is_per_frame(l),
        };
        if per_frame {
            Flow::Frames(value.unstack())
        } else {
            Flow::Single(value.clone())
        }
    }

    fn run<E: Exec>(
        &self,
        exec: &mut E,
        start: usize,
        mut state: Flow<E::V>,
        hook: Option<(usize, E::V, Option<usize>)>,
        stop: usize,
        mut on_layer: impl FnMut(usize, &Flow<E::V>),
    ) -> Result<Flow<E::V>> {
        let map = |state: Flow<E::V>, f: &mut dyn FnMut(&E::V) -> Result<E::V>| -> Result<Flow<E::V>> {
            Ok(match state {
                Flow::Single(v) => Flow::Single(f(&v)?),
                Flow::Frames(vs) => Flow::Frames(vs.iter().map(&mut *f).collect::<Result<_>>()?),
            })
        };
        for i in start..=stop {
            state = match &self.layers[i] {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (s, p) = (*stride, *padding);
                    map(state, &mut |v| exec.conv(i, v, s, p))?
                }
                LayerSpec::Relu => map(state, &mut |v| exec.relu(v))?,
                LayerSpec::Gap => map(state, &mut |v| exec.gap(v))?,
                LayerSpec::Flatten => map(state, &mut |v| exec.flatten(v))?,
                LayerSpec::Dense { .. } => map(state, &mut |v| exec.dense(i, v))?,
                LayerSpec::EmbedNormalize => map(state, &mut |v| exec.normalize(v))?,
                LayerSpec::RecurrentFuse { hidden_dim } => {
                    let Flow::Frames(frames) = state else {
                        return Err(Error::shape("recurrent_fuse", "expected per-frame activations"));
                    };
                    let mut h = exec.zeros(*hidden_dim);
                    for x in &frames {
                        h = exec.cell(i, x, &h)?;
                    }
                    Flow::Single(h)
                }
            };
            if let Some((layer, f, frame)) = &hook {
                if *layer == i {
                    state = match (state, frame) {
                        (Flow::Single(v), _) => Flow::Single(exec.filter(&v, f)?),
                        (Flow::Frames(vs), None) => {
                            Flow::Frames(vs.iter().map(|v| exec.filter(v, f)).collect::<Result<_>>()?)
                        }
                        (Flow::Frames(mut vs), Some(t)) => {
                            let t = *t;
                            if t >= vs.len() {
                                return Err(Error::invalid(format!("frame {t} out of range")));
                            }
                            vs[t] = exec.filter(&vs[t], f)?;
                            Flow::Frames(vs)
                        }
                    };
                }
            }
            on_layer(i, &state);
        }
        Ok(state)
    }

    fn collapse(flow: Flow<Tensor>) -> Result<Tensor> {
        match flow {
            Flow::Single(v) => Ok(v),
            Flow::Frames(vs) => Tensor::stack(&vs),
        }
    }

    /// Plain forward pass: the network output and every layer's activation.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(x)?;
        let mut exec = PlainExec {
            weights: &self.weights,
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut err = None;
        let out = self.run(
            &mut exec,
            0,
            self.flow_from(None, x),
            None,
            self.layers.len() - 1,
            |_, state| match state {
                Flow::Single(v) => layers.push(v.clone()),
                Flow::Frames(vs) => match Tensor::stack(vs) {
                    Ok(t) => layers.push(t),
                    Err(e) => err = Some(e),
                },
            },
        )?;
        if let Some(e) = err {
            return Err(e);
        }
        Ok((Self::collapse(out)?, ActivationTrace { layers }))
    }

    /// Network output only.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.0)
    }

    /// Runs layers `after + 1 ..= stop` on the activation of layer `after`.
    pub fn forward_from(&self, after: usize, value: &Tensor, stop: usize) -> Result<Tensor> {
        if after >= stop || stop >= self.layers.len() {
            return Err(Error::invalid(format!("cannot run layers {after}..={stop}")));
        }
        let mut exec = PlainExec {
            weights: &self.weights,
        };
        let out = self.run(&mut exec, after + 1, self.flow_from(Some(after), value), None, stop, |_, _| {})?;
        Self::collapse(out)
    }

    fn check_filter_layer(&self, layer: usize, filter_shape: &[usize]) -> Result<()> {
        let s = self
            .shapes
            .get(layer)
            .ok_or_else(|| Error::invalid(format!("no layer {layer}")))?;
        if s.len() != 3 {
            return Err(Error::Incompatible(format!(
                "layer {layer} output {s:?} is not a spatial feature map"
            )));
        }
        if !self.has_conv_at_or_before(layer) {
            return Err(Error::Incompatible(format!("no convolution before layer {layer}")));
        }
        if filter_shape != [s[0], s[1]] {
            return Err(Error::shape(
                "filtered_forward",
                format!("filter {filter_shape:?} does not match feature map {s:?}"),
            ));
        }
        Ok(())
    }

    /// `FT(x, f)`: the network output when the activation of `at_layer` is
    /// multiplied by `f / ||f||₂`. The source is either the raw input or the
    /// cached activation of `at_layer`; both give bitwise identical results.
    pub fn filtered_forward(&self, source: FilterSource<'_>, at_layer: usize, raw_filter: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.constant(raw_filter.clone());
        let view = tape.l2_normalize(f)?;
        let out = self.filtered_on_tape(
            &mut tape,
            source,
            FilterHook {
                layer: at_layer,
                filter: view,
                frame: None,
            },
            self.layers.len() - 1,
        )?;
        Ok(tape.value(out).clone())
    }

    /// Records a filtered run up to `stop` on `tape` and returns the output node.
    pub fn filtered_on_tape(&self, tape: &mut Tape, source: FilterSource<'_>, hook: FilterHook, stop: usize) -> Result<NodeId> {
        let fshape = tape.value(hook.filter).shape().to_vec();
        self.check_filter_layer(hook.layer, &fshape)?;
        if stop <= hook.layer || stop >= self.layers.len() {
            return Err(Error::invalid(format!(
                "endpoint layer {stop} must come after filter layer {}",
                hook.layer
            )));
        }
        if let (Some(t), Some(frames)) = (hook.frame, self.frames) {
            if t >= frames {
                return Err(Error::invalid(format!("frame {t} out of range for {frames} frames")));
            }
        }
        let mut exec = TapeExec::new(self, tape, None);
        let hook_v = (hook.layer, hook.filter, hook.frame);
        let out = match source {
            FilterSource::Input(x) => {
                self.check_input(x)?;
                let init = Self::constants(exec.tape, self.flow_from(None, x));
                self.run(&mut exec, 0, init, Some(hook_v), stop, |_, _| {})?
            }
            FilterSource::Cached(v) => {
                let mut expected = self.shapes[hook.layer].clone();
                if self.is_per_frame(hook.layer) {
                    expected.insert(0, self.frames.unwrap_or(1));
                }
                if v.shape() != expected.as_slice() {
                    return Err(Error::shape(
                        "filtered_forward",
                        format!("cached activation {:?} does not match layer shape {expected:?}", v.shape()),
                    ));
                }
                let init = Self::constants(exec.tape, self.flow_from(Some(hook.layer), v));
                // Apply the filter to the cached activation, then continue.
                let filtered = self.apply_hook(&mut exec, init, hook_v)?;
                if stop == hook.layer {
                    filtered
                } else {
                    self.run(&mut exec, hook.layer + 1, filtered, None, stop, |_, _| {})?
                }
            }
        };
        match out {
            Flow::Single(v) => Ok(v),
            Flow::Frames(_) => Err(Error::invalid("endpoint is a per-frame layer; pick a layer after the recurrent fuse")),
        }
    }

    fn apply_hook<E: Exec>(&self, exec: &mut E, state: Flow<E::V>, hook: (usize, E::V, Option<usize>)) -> Result<Flow<E::V>> {
        let (_, f, frame) = hook;
        Ok(match (state, frame) {
            (Flow::Single(v), _) => Flow::Single(exec.filter(&v, &f)?),
            (Flow::Frames(vs), None) => Flow::Frames(vs.iter().map(|v| exec.filter(v, &f)).collect::<Result<_>>()?),
            (Flow::Frames(mut vs), Some(t)) => {
                vs[t] = exec.filter(&vs[t], &f)?;
                Flow::Frames(vs)
            }
        })
    }

    fn constants(tape: &mut Tape, flow: Flow<Tensor>) -> Flow<NodeId> {
        match flow {
            Flow::Single(v) => Flow::Single(tape.constant(v)),
            Flow::Frames(vs) => Flow::Frames(vs.into_iter().map(|v| tape.constant(v)).collect()),
        }
    }

    /// Records layers `after + 1 ..= stop` on a tape starting from a single
    /// activation node (no frame axis). Weights are constants unless `params` is given.
    pub fn tail_on_tape(&self, tape: &mut Tape, after: usize, value: NodeId, stop: usize, params: Option<&ParamNodes>) -> Result<NodeId> {
        if self.is_per_frame(after) {
            return Err(Error::Incompatible("tail runs start after the recurrent fuse or on single-frame models".into()));
        }
        let mut exec = TapeExec::new(self, tape, params);
        match self.run(&mut exec, after + 1, Flow::Single(value), None, stop, |_, _| {})? {
            Flow::Single(v) => Ok(v),
            Flow::Frames(_) => Err(Error::invalid("tail ended on a per-frame layer")),
        }
    }

    /// Pushes every weight tensor as a tape leaf.
    pub fn params_on_tape(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        self.weights
            .iter()
            .map(|l| {
                l.iter()
                    .map(|w| if trainable { tape.variable(w.clone()) } else { tape.constant(w.clone()) })
                    .collect()
            })
            .collect()
    }

    /// Forward pass on a tape from the raw input through layer `stop`.
    pub fn forward_on_tape(&self, tape: &mut Tape, x: &Tensor, params: Option<&ParamNodes>, stop: usize) -> Result<NodeId> {
        self.check_input(x)?;
        if stop >= self.layers.len() {
            return Err(Error::invalid(format!("no layer {stop}")));
        }
        let mut exec = TapeExec::new(self, tape, params);
        let init = Self::constants(exec.tape, self.flow_from(None, x));
        match self.run(&mut exec, 0, init, None, stop, |_, _| {})? {
            Flow::Single(v) => Ok(v),
            Flow::Frames(_) => Err(Error::invalid("network ended on a per-frame layer")),
        }
    }

    /// Index of the dense layer producing the logits, for head-targeted operations.
    pub fn logits_layer(&self) -> Result<usize> {
        if !self.head.is_logits() {
            return Err(Error::Incompatible("model has an embedding head, not logits".into()));
        }
        let last = self.raw_output_layer();
        match self.layers[last] {
            LayerSpec::Dense { .. } => Ok(last),
            _ => Err(Error::Incompatible("logits are not produced by a dense layer".into())),
        }
    }

    /// Resamples weights from `U[-0.1, 0.1]`: the logits layer only, or every tensor.
    pub fn randomize(&self, scope: RandomizeScope, seed: u64) -> Result<NetworkModel> {
        let targets: Vec<usize> = match scope {
            RandomizeScope::LogitsLayer => vec![self.logits_layer()?],
            RandomizeScope::AllLayers => (0..self.layers.len()).collect(),
        };
        let mut out = self.clone();
        let mut rng = rng_for(seed, streams::RANDOMIZE);
        for layer in targets {
            for w in &mut out.weights[layer] {
                for v in w.data_mut() {
                    *v = rng.random_range(-0.1..=0.1);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomizeScope {
    LogitsLayer,
    AllLayers,
}

/// Input to a filtered run.
#[derive(Clone, Copy, Debug)]
pub enum FilterSource<'a> {
    /// The raw network input `x`; every layer is executed.
    Input(&'a Tensor),
    /// The cached activation `V(x)` of the filter layer.
    Cached(&'a Tensor),
}
