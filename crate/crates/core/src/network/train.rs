//! Toy training loops: plain SGD, deterministic given a seed.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{LayerSpec, NetworkModel};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{self, MiniBatch, RankingLoss, TripletConfig};
use crate::rng::{derive_seed, rng_for, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.05,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RetrievalLoss {
    Triplet { margin: f64 },
    NPair,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on a fixed monitoring batch before and after training.
    pub monitor_initial: f64,
    pub monitor_final: f64,
}

fn check_dataset(model: &NetworkModel, images: &[Tensor], labels: &[usize]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("dataset is empty"));
    }
    if images.len() != labels.len() {
        return Err(Error::invalid(format!("{} images for {} labels", images.len(), labels.len())));
    }
    let expected = model.full_input_shape();
    if let Some(bad) = images.iter().find(|x| x.shape() != expected.as_slice()) {
        return Err(Error::shape(
            "train",
            format!("image {:?} does not match model input {expected:?}", bad.shape()),
        ));
    }
    Ok(())
}

fn sgd_step(model: &mut NetworkModel, grads: &[Vec<Tensor>], scale: f64) {
    for (layer, g_layer) in model.weights_mut().iter_mut().zip(grads) {
        for (w, g) in layer.iter_mut().zip(g_layer) {
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= scale * gv;
            }
        }
    }
}

fn zero_grads(model: &NetworkModel) -> Vec<Vec<Tensor>> {
    model
        .weights()
        .iter()
        .map(|l| l.iter().map(|w| Tensor::zeros(w.shape())).collect())
        .collect()
}

/// Mean softmax cross-entropy over samples `idx`.
fn classifier_loss(model: &NetworkModel, images: &[Tensor], labels: &[usize], idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in idx {
        let logits = model.predict(&images[i])?;
        total += crate::ops::log_sum_exp(logits.data()) - logits.data()[labels[i]];
    }
    Ok(total / idx.len() as f64)
}

/// Mini-batch SGD on softmax cross-entropy. Per-sample gradients are summed
/// in index order, so results do not depend on scheduling.
pub fn train_classifier(
    model: &NetworkModel,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(NetworkModel, TrainReport)> {
    cfg.validate()?;
    let n_classes = match model.head() {
        super::HeadKind::Logits(n) => n,
        super::HeadKind::Embedding(_) => {
            return Err(Error::Incompatible("classifier training needs a logits head".into()))
        }
    };
    check_dataset(model, images, labels)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
    }

    let mut model = model.clone();
    let monitor = monitor_indices(images.len(), cfg.seed, 64);
    let mut report = TrainReport {
        monitor_initial: classifier_loss(&model, images, labels, &monitor)?,
        ..TrainReport::default()
    };
    let stop = model.output_layer();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(derive_seed(cfg.seed, epoch as u64), streams::SHUFFLE);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = zero_grads(&model);
            for &i in chunk {
                let mut tape = Tape::new();
                let params = model.params_on_tape(&mut tape, true);
                let logits = model.forward_on_tape(&mut tape, &images[i], Some(&params), stop)?;
                let loss = tape.cross_entropy(logits, labels[i])?;
                epoch_loss += tape.value(loss).item();
                let g = tape.backward(loss)?;
                accumulate(&mut grads, &params, &g);
            }
            sgd_step(&mut model, &grads, cfg.lr / chunk.len() as f64);
        }
        report.epoch_losses.push(epoch_loss / images.len() as f64);
    }
    report.monitor_final = classifier_loss(&model, images, labels, &monitor)?;
    Ok((model, report))
}

fn accumulate(grads: &mut [Vec<Tensor>], params: &super::ParamNodes, g: &crate::autodiff::Gradients) {
    for (gl, pl) in grads.iter_mut().zip(params) {
        for (acc, &id) in gl.iter_mut().zip(pl) {
            acc.add_assign(&g.wrt(id));
        }
    }
}

fn monitor_indices(n: usize, seed: u64, size: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, streams::MONITOR));
    idx.truncate(size.min(n));
    idx
}

/// Groups sample indices by class label, classes in ascending order.
fn by_class(labels: &[usize]) -> Vec<Vec<usize>> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        groups[l].push(i);
    }
    groups.retain(|g| !g.is_empty());
    groups
}

/// Draws one retrieval batch: `per_class` samples from each of up to
/// `classes` randomly chosen classes (without replacement within a class).
fn draw_batch(groups: &[Vec<usize>], classes: usize, per_class: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut chosen: Vec<usize> = (0..groups.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(classes);
    chosen.sort_unstable();
    let mut out = Vec::new();
    for c in chosen {
        let mut members = groups[c].clone();
        members.shuffle(rng);
        out.extend(members.into_iter().take(per_class));
    }
    out
}

/// Layer whose output is scored by the ranking loss: the normalized embedding
/// for triplet training, the raw embedding for N-pair training.
fn loss_layer(model: &NetworkModel, loss: RetrievalLoss) -> usize {
    match loss {
        RetrievalLoss::Triplet { .. } => model.output_layer(),
        RetrievalLoss::NPair => model.raw_output_layer(),
    }
}

fn ranking(loss: RetrievalLoss) -> Result<RankingLoss> {
    Ok(match loss {
        RetrievalLoss::Triplet { margin } => RankingLoss::Triplet(TripletConfig::new(margin)?),
        RetrievalLoss::NPair => RankingLoss::NPair,
    })
}

fn embed(model: &NetworkModel, x: &Tensor, layer: usize) -> Result<Tensor> {
    let (_, trace) = model.forward(x)?;
    Ok(trace.get(layer).expect("layer in range").clone())
}

fn retrieval_batch_loss(
    model: &NetworkModel,
    images: &[Tensor],
    labels: &[usize],
    batch: &[usize],
    layer: usize,
    loss: RankingLoss,
) -> Result<f64> {
    let embs = batch.iter().map(|&i| embed(model, &images[i], layer)).collect::<Result<_>>()?;
    let mb = MiniBatch::new(embs, batch.iter().map(|&i| labels[i]).collect())?;
    losses::batch_loss(&mb, loss)
}

/// SGD on a ranking loss. Triplet mode requires the model to end in
/// `EmbedNormalize`; N-pair mode scores the embedding before any normalization.
///
/// Each step runs in three phases: embed the batch, differentiate the batch
/// loss with respect to the embeddings, then backpropagate each sample's
/// embedding gradient through the network.
pub fn train_retrieval(
    model: &NetworkModel,
    images: &[Tensor],
    labels: &[usize],
    loss: RetrievalLoss,
    cfg: &TrainConfig,
) -> Result<(NetworkModel, TrainReport)> {
    cfg.validate()?;
    if model.head().is_logits() {
        return Err(Error::Incompatible("retrieval training needs an embedding head".into()));
    }
    check_dataset(model, images, labels)?;
    let ends_normalized = matches!(model.layers().last(), Some(LayerSpec::EmbedNormalize));
    if matches!(loss, RetrievalLoss::Triplet { .. }) && !ends_normalized {
        return Err(Error::Incompatible("triplet training expects a normalized embedding output".into()));
    }
    let rank = ranking(loss)?;
    let groups = by_class(labels);
    if groups.len() < 2 {
        return Err(Error::invalid("retrieval training needs at least two classes"));
    }
    let (classes, per_class) = match loss {
        RetrievalLoss::NPair => {
            if let Some(g) = groups.iter().find(|g| g.len() < 2) {
                return Err(Error::invalid(format!(
                    "class of sample {} has fewer than 2 samples; cannot build N-pair batches",
                    g[0]
                )));
            }
            ((cfg.batch_size / 2).clamp(2, groups.len()), 2)
        }
        RetrievalLoss::Triplet { .. } => {
            let k = 4.min(groups.iter().map(Vec::len).min().unwrap_or(1)).max(1);
            ((cfg.batch_size / k).clamp(2, groups.len()), k)
        }
    };
    let layer = loss_layer(model, loss);

    let mut model = model.clone();
    let monitor = draw_batch(&groups, classes, per_class, &mut rng_for(cfg.seed, streams::MONITOR));
    let mut report = TrainReport {
        monitor_initial: retrieval_batch_loss(&model, images, labels, &monitor, layer, rank)?,
        ..TrainReport::default()
    };
    let steps = (images.len() / (classes * per_class)).max(1);
    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(derive_seed(cfg.seed, epoch as u64), streams::SHUFFLE);
        let mut epoch_loss = 0.0;
        for _ in 0..steps {
            let batch = draw_batch(&groups, classes, per_class, &mut rng);
            let batch_labels: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();

            let embs: Vec<Tensor> = batch.iter().map(|&i| embed(&model, &images[i], layer)).collect::<Result<_>>()?;
            let mut loss_tape = Tape::new();
            let nodes: Vec<_> = embs.into_iter().map(|e| loss_tape.variable(e)).collect();
            let total = losses::batch_loss_on_tape(&mut loss_tape, &nodes, &batch_labels, rank)?;
            epoch_loss += loss_tape.value(total).item();
            let upstream = loss_tape.backward(total)?;

            let mut grads = zero_grads(&model);
            for (k, &i) in batch.iter().enumerate() {
                let g_emb = upstream.wrt(nodes[k]);
                if g_emb.data().iter().all(|&v| v == 0.0) {
                    continue;
                }
                let mut tape = Tape::new();
                let params = model.params_on_tape(&mut tape, true);
                let out = model.forward_on_tape(&mut tape, &images[i], Some(&params), layer)?;
                let g_node = tape.constant(g_emb);
                let surrogate = tape.dot(out, g_node)?;
                let g = tape.backward(surrogate)?;
                accumulate(&mut grads, &params, &g);
            }
            sgd_step(&mut model, &grads, cfg.lr);
        }
        report.epoch_losses.push(epoch_loss / steps as f64);
    }
    report.monitor_final = retrieval_batch_loss(&model, images, labels, &monitor, layer, rank)?;
    Ok((model, report))
}
