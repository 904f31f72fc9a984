//! Ranking losses for retrieval training: triplet with semi-hard negative
//! mining, and N-pair.

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletConfig {
    margin: f64,
}

impl TripletConfig {
    pub fn new(margin: f64) -> Result<Self> {
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::invalid(format!("margin must be finite and >= 0, got {margin}")));
        }
        Ok(TripletConfig { margin })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig {
            margin: DEFAULT_MARGIN,
        }
    }
}

/// Embeddings with their class labels.
#[derive(Clone, Debug)]
pub struct MiniBatch {
    embeddings: Vec<Tensor>,
    labels: Vec<usize>,
}

impl MiniBatch {
    pub fn new(embeddings: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("mini-batch is empty"));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} embeddings for {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::shape("mini-batch", "embeddings differ in dimension"));
        }
        Ok(MiniBatch { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn embeddings(&self) -> &[Tensor] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        euclidean(&self.embeddings[i], &self.embeddings[j])
    }
}

pub fn euclidean(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Hinge `max(0, d_ap - d_an + m)`.
pub fn triplet_loss(d_ap: f64, d_an: f64, cfg: TripletConfig) -> Result<f64> {
    if d_ap < 0.0 || d_an < 0.0 || !d_ap.is_finite() || !d_an.is_finite() {
        return Err(Error::invalid(format!("distances must be finite and >= 0, got {d_ap}, {d_an}")));
    }
    Ok((d_ap - d_an + cfg.margin).max(0.0))
}

/// Negatives with `d_ap < d_an < d_ap + m`. When none qualify, the single
/// hardest negative (smallest `d_an`, lowest index on ties) is returned.
pub fn semi_hard_negatives(batch: &MiniBatch, anchor: usize, positive: usize, cfg: TripletConfig) -> Result<Vec<usize>> {
    let n = batch.len();
    if anchor >= n || positive >= n {
        return Err(Error::invalid(format!("pair ({anchor}, {positive}) outside batch of {n}")));
    }
    let label = batch.labels[anchor];
    if batch.labels[positive] != label {
        return Err(Error::invalid("positive has a different label than the anchor"));
    }
    let d_ap = batch.distance(anchor, positive);
    let negatives: Vec<(usize, f64)> = (0..n)
        .filter(|&i| batch.labels[i] != label)
        .map(|i| (i, batch.distance(anchor, i)))
        .collect();
    if negatives.is_empty() {
        return Err(Error::invalid("batch has no negatives for this anchor"));
    }
    let semi: Vec<usize> = negatives
        .iter()
        .filter(|&&(_, d)| d_ap < d && d < d_ap + cfg.margin)
        .map(|&(i, _)| i)
        .collect();
    if !semi.is_empty() {
        return Ok(semi);
    }
    let mut hardest = negatives[0];
    for &(i, d) in &negatives[1..] {
        if d < hardest.1 {
            hardest = (i, d);
        }
    }
    Ok(vec![hardest.0])
}

/// All mined `(anchor, positive, negative)` triplets of a batch: every ordered
/// same-class pair combined with its semi-hard (or fallback) negatives.
pub fn mine_triplets(batch: &MiniBatch, cfg: TripletConfig) -> Result<Vec<(usize, usize, usize)>> {
    let mut out = Vec::new();
    for a in 0..batch.len() {
        for p in 0..batch.len() {
            if a == p || batch.labels[a] != batch.labels[p] {
                continue;
            }
            for n in semi_hard_negatives(batch, a, p, cfg)? {
                out.push((a, p, n));
            }
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("batch yields no anchor-positive pairs"));
    }
    Ok(out)
}

/// Mean triplet loss over all mined triplets of the batch.
pub fn triplet_batch_loss(batch: &MiniBatch, cfg: TripletConfig) -> Result<f64> {
    let triplets = mine_triplets(batch, cfg)?;
    let mut total = 0.0;
    for &(a, p, n) in &triplets {
        total += triplet_loss(batch.distance(a, p), batch.distance(a, n), cfg)?;
    }
    Ok(total / triplets.len() as f64)
}

/// One N-pair term: `-log(exp(a.p) / (exp(a.p) + sum_n exp(a.n)))`, computed
/// with max subtraction.
pub fn npair_term(anchor: &Tensor, positive: &Tensor, negatives: &[&Tensor]) -> Result<f64> {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(anchor.dot(positive)?);
    for n in negatives {
        logits.push(anchor.dot(n)?);
    }
    Ok(ops::log_sum_exp(&logits) - logits[0])
}

/// Anchor, positive and negative indices for an N-pair batch holding exactly
/// two samples per class. The first sample of each class is the anchor; its
/// negatives are the `b - 2` samples of other classes, in batch order.
pub fn npair_structure(labels: &[usize]) -> Result<Vec<(usize, usize, Vec<usize>)>> {
    let mut seen: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        match seen.iter_mut().find(|(c, _)| *c == l) {
            Some((_, idx)) => idx.push(i),
            None => seen.push((l, vec![i])),
        }
    }
    if seen.len() < 2 {
        return Err(Error::invalid("N-pair batch needs at least two classes"));
    }
    if let Some((c, idx)) = seen.iter().find(|(_, idx)| idx.len() != 2) {
        return Err(Error::invalid(format!(
            "N-pair batch needs exactly one pair per class; class {c} has {} samples",
            idx.len()
        )));
    }
    Ok(seen
        .iter()
        .map(|(c, idx)| {
            let negs = (0..labels.len()).filter(|&i| labels[i] != *c).collect();
            (idx[0], idx[1], negs)
        })
        .collect())
}

/// Mean N-pair loss over the anchors of the batch.
pub fn npair_loss(batch: &MiniBatch) -> Result<f64> {
    let structure = npair_structure(&batch.labels)?;
    let mut total = 0.0;
    for (a, p, negs) in &structure {
        let negs: Vec<&Tensor> = negs.iter().map(|&n| &batch.embeddings[n]).collect();
        total += npair_term(&batch.embeddings[*a], &batch.embeddings[*p], &negs)?;
    }
    Ok(total / structure.len() as f64)
}

/// Which ranking loss a batch is scored with.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankingLoss {
    Triplet(TripletConfig),
    NPair,
}

/// Records the batch loss over embedding nodes on `tape`. Triplet mining uses
/// the current embedding values and is not differentiated.
pub fn batch_loss_on_tape(tape: &mut Tape, embeddings: &[NodeId], labels: &[usize], loss: RankingLoss) -> Result<NodeId> {
    let values: Vec<Tensor> = embeddings.iter().map(|&e| tape.value(e).clone()).collect();
    let batch = MiniBatch::new(values, labels.to_vec())?;
    let mut terms = Vec::new();
    match loss {
        RankingLoss::Triplet(cfg) => {
            for (a, p, n) in mine_triplets(&batch, cfg)? {
                let d_ap = tape.distance(embeddings[a], embeddings[p])?;
                let d_an = tape.distance(embeddings[a], embeddings[n])?;
                let diff = tape.sub(d_ap, d_an)?;
                let shifted = tape.add_scalar(diff, cfg.margin)?;
                terms.push(tape.relu(shifted)?);
            }
        }
        RankingLoss::NPair => {
            for (a, p, negs) in npair_structure(labels)? {
                let mut logits = vec![tape.dot(embeddings[a], embeddings[p])?];
                for n in negs {
                    logits.push(tape.dot(embeddings[a], embeddings[n])?);
                }
                let joined = tape.concat(&logits)?;
                terms.push(tape.cross_entropy(joined, 0)?);
            }
        }
    }
    let count = terms.len() as f64;
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / count)
}

/// Batch loss without a tape.
pub fn batch_loss(batch: &MiniBatch, loss: RankingLoss) -> Result<f64> {
    match loss {
        RankingLoss::Triplet(cfg) => triplet_batch_loss(batch, cfg),
        RankingLoss::NPair => npair_loss(batch),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f64]) -> Tensor {
        Tensor::vector(x.to_vec()).unwrap()
    }

    #[test]
    fn triplet_examples() {
        let cfg = TripletConfig::default();
        assert_eq!(triplet_loss(0.1, 0.5, cfg).unwrap(), 0.0);
        assert_eq!(triplet_loss(0.3, 0.3, TripletConfig::new(0.0).unwrap()).unwrap(), 0.0);
        assert!((triplet_loss(0.5, 0.4, cfg).unwrap() - 0.3).abs() < 1e-15);
        assert!(triplet_loss(-0.1, 0.4, cfg).is_err());
        assert!(TripletConfig::new(-1.0).is_err());
    }

    #[test]
    fn semi_hard_interval_and_fallback() {
        // Anchor at 0, positive at 0.3, negatives at 0.35, 0.45, 0.55 on a line.
        let batch = MiniBatch::new(
            vec![v(&[0.0]), v(&[0.3]), v(&[0.35]), v(&[0.45]), v(&[0.55])],
            vec![0, 0, 1, 1, 2],
        )
        .unwrap();
        let cfg = TripletConfig::default();
        assert_eq!(semi_hard_negatives(&batch, 0, 1, cfg).unwrap(), vec![2, 3]);

        let far = MiniBatch::new(vec![v(&[0.0]), v(&[0.1]), v(&[2.0]), v(&[1.5])], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(semi_hard_negatives(&far, 0, 1, cfg).unwrap(), vec![3]);

        let inside = MiniBatch::new(vec![v(&[0.0]), v(&[0.3]), v(&[0.1])], vec![0, 0, 1]).unwrap();
        assert_eq!(semi_hard_negatives(&inside, 0, 1, cfg).unwrap(), vec![2]);

        let none = MiniBatch::new(vec![v(&[0.0]), v(&[0.3])], vec![0, 0]).unwrap();
        assert!(semi_hard_negatives(&none, 0, 1, cfg).is_err());
    }

    #[test]
    fn npair_uniform_logits_give_log_count() {
        let a = v(&[1.0, 0.0]);
        let same = v(&[0.5, 3.0]);
        let l = npair_term(&a, &same, &[&same, &same, &same]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let big = v(&[1000.0, 0.0]);
        let l = npair_term(&a, &big, &[&v(&[-1.0, 0.0])]).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn npair_structure_counts_and_rejects_duplicates() {
        let s = npair_structure(&[0, 1, 0, 2, 1, 2]).unwrap();
        assert_eq!(s.len(), 3);
        for (a, p, negs) in &s {
            assert_ne!(a, p);
            assert_eq!(negs.len(), 4);
        }
        assert!(npair_structure(&[0, 0, 0, 1, 1, 1]).is_err());
        assert!(npair_structure(&[0, 0]).is_err());
    }
}
