//! Recall@1, k-means++ clustering and normalized mutual information.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for, streams};
use crate::tensor::Tensor;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of each sample's nearest other sample; ties go to the lower index.
pub fn nearest_neighbors(embeddings: &[Tensor]) -> Result<Vec<usize>> {
    if embeddings.len() < 2 {
        return Err(Error::invalid("nearest neighbors need at least two samples"));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::shape("nearest_neighbors", "embeddings differ in dimension"));
    }
    Ok((0..embeddings.len())
        .map(|i| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (j, e) in embeddings.iter().enumerate() {
                if j == i {
                    continue;
                }
                let d = sq_dist(embeddings[i].data(), e.data());
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of samples whose nearest neighbor shares their label.
pub fn recall_at_1(embeddings: &[Tensor], labels: &[usize]) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    let nn = nearest_neighbors(embeddings)?;
    let hits = nn.iter().enumerate().filter(|&(i, &j)| labels[i] == labels[j]).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub inertia: f64,
}

pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;

fn kmeans_once(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> KMeansResult {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centers.push(points[next].to_vec());
        let c = centers.last().expect("just pushed");
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, c));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> (Vec<usize>, f64) {
        let mut inertia = 0.0;
        let a = points
            .iter()
            .map(|p| {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (j, c) in centers.iter().enumerate() {
                    let d = sq_dist(p, c);
                    if d < best_d {
                        best_d = d;
                        best = j;
                    }
                }
                inertia += best_d;
                best
            })
            .collect();
        (a, inertia)
    };
    let (mut assignments, mut inertia) = assign(&centers);
    for _ in 0..KMEANS_MAX_ITERS {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for j in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let (next, next_inertia) = assign(&centers);
        inertia = next_inertia;
        if next == assignments {
            break;
        }
        assignments = next;
    }
    KMeansResult {
        assignments,
        centers,
        inertia,
    }
}

/// k-means with k-means++ seeding; the best of ten seeded restarts by inertia.
pub fn kmeans(points: &[Tensor], k: usize, seed: u64) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::invalid("k-means needs at least one point"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::invalid(format!("k = {k} must lie in 1..={}", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("kmeans", "points differ in dimension"));
    }
    let views: Vec<&[f64]> = points.iter().map(Tensor::data).collect();
    let mut best: Option<KMeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = rng_for(derive_seed(seed, restart as u64), streams::KMEANS);
        let r = kmeans_once(&views, k, &mut rng);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Entropies and mutual information (natural log) of two partitions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClusteringEval {
    pub mutual_information: f64,
    pub h_true: f64,
    pub h_pred: f64,
    pub nmi: f64,
}

fn counts(labels: &[usize]) -> HashMap<usize, usize> {
    let mut m = HashMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

fn entropy(counts: &HashMap<usize, usize>, n: f64) -> f64 {
    let mut keys: Vec<_> = counts.keys().copied().collect();
    keys.sort_unstable();
    -keys
        .iter()
        .map(|k| {
            let p = counts[k] as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// True when both labelings induce the same set partition.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

/// `I / sqrt(H_true * H_pred)`. When either entropy is zero the score is 1
/// for identical partitions and 0 otherwise.
pub fn nmi(labels_true: &[usize], labels_pred: &[usize]) -> Result<ClusteringEval> {
    if labels_true.is_empty() || labels_true.len() != labels_pred.len() {
        return Err(Error::invalid("nmi needs two nonempty labelings of equal length"));
    }
    let n = labels_true.len() as f64;
    let ct = counts(labels_true);
    let cp = counts(labels_pred);
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    for (&a, &b) in labels_true.iter().zip(labels_pred) {
        *joint.entry((a, b)).or_insert(0) += 1;
    }
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .iter()
        .map(|&(a, b)| {
            let pab = joint[&(a, b)] as f64 / n;
            let pa = ct[&a] as f64 / n;
            let pb = cp[&b] as f64 / n;
            pab * (pab / (pa * pb)).ln()
        })
        .sum();
    let (h_true, h_pred) = (entropy(&ct, n), entropy(&cp, n));
    let nmi = if h_true <= 0.0 || h_pred <= 0.0 {
        if same_partition(labels_true, labels_pred) {
            1.0
        } else {
            0.0
        }
    } else {
        (mi / (h_true * h_pred).sqrt()).clamp(0.0, 1.0)
    };
    Ok(ClusteringEval {
        mutual_information: mi,
        h_true,
        h_pred,
        nmi,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Vec<Tensor> {
        v.iter().map(|p| Tensor::vector(p.to_vec()).unwrap()).collect()
    }

    #[test]
    fn recall_examples() {
        let e = pts(&[[0.0, 0.0], [0.0, 0.0], [9.0, 9.0], [9.0, 9.0]]);
        assert_eq!(recall_at_1(&e, &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(recall_at_1(&e, &[0, 1, 2, 3]).unwrap(), 0.0);
        // Equidistant neighbors: the lower index wins.
        let line = pts(&[[0.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]);
        assert_eq!(nearest_neighbors(&line).unwrap()[0], 1);
    }

    #[test]
    fn nmi_examples() {
        assert_eq!(nmi(&[0, 0, 1, 1], &[0, 0, 1, 1]).unwrap().nmi, 1.0);
        assert!((nmi(&[0, 0, 1, 1, 2], &[5, 5, 3, 3, 7]).unwrap().nmi - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0], &[1, 1, 1]).unwrap().nmi, 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[1, 2, 1]).unwrap().nmi, 0.0);
        assert!(nmi(&[], &[]).is_err());
    }

    #[test]
    fn kmeans_separates_blobs() {
        let e = pts(&[[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0], [-10.0, 5.0], [-10.0, 5.1]]);
        let r = kmeans(&e, 3, 1).unwrap();
        assert_eq!(nmi(&[0, 0, 1, 1, 2, 2], &r.assignments).unwrap().nmi, 1.0);
        assert_eq!(r, kmeans(&e, 3, 1).unwrap());
        assert!(kmeans(&e, 7, 1).is_err());
    }
}
