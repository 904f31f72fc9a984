//! Exhaustive reference implementations of the scoring metrics and ranking
//! losses. Each `check_*` draws random small instances and counts
//! disagreements with the library.

use std::collections::{BTreeMap, BTreeSet};

use l2caf_core::evaluation::{self, BoundingBox, Mask};
use l2caf_core::losses::{self, MiniBatch, TripletConfig};
use l2caf_core::Tensor;
use rand::Rng;

use super::rng;

pub struct OracleReport {
    pub instances: usize,
    pub mismatches: usize,
}

impl OracleReport {
    fn tally(results: impl IntoIterator<Item = bool>) -> Self {
        let mut r = OracleReport {
            instances: 0,
            mismatches: 0,
        };
        for ok in results {
            r.instances += 1;
            r.mismatches += usize::from(!ok);
        }
        r
    }
}

fn random_box(r: &mut impl Rng, size: usize) -> BoundingBox {
    let x0 = r.random_range(0..size - 1);
    let y0 = r.random_range(0..size - 1);
    let x1 = r.random_range(x0 + 1..=size);
    let y1 = r.random_range(y0 + 1..=size);
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

fn inside(b: &BoundingBox, x: usize, y: usize) -> bool {
    x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max
}

/// IoU by counting pixels of a 12x12 canvas.
pub fn check_iou(n: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    OracleReport::tally((0..n).map(|_| {
        let (a, b) = (random_box(&mut r, 12), random_box(&mut r, 12));
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..12 {
            for x in 0..12 {
                let (ia, ib) = (inside(&a, x, y), inside(&b, x, y));
                inter += usize::from(ia && ib);
                union += usize::from(ia || ib);
            }
        }
        let expected = inter as f64 / union as f64;
        (evaluation::iou(&a, &b) - expected).abs() <= 1e-12
    }))
}

/// Components by repeated min-label propagation to a fixed point; the largest
/// wins, ties go to the component whose first raster cell comes first.
fn oracle_largest_box(rows: usize, cols: usize, cells: &[bool]) -> Option<BoundingBox> {
    let mut label: Vec<Option<usize>> = (0..rows * cols).map(|i| cells[i].then_some(i)).collect();
    loop {
        let mut changed = false;
        for y in 0..rows {
            for x in 0..cols {
                let Some(mut l) = label[y * cols + x] else { continue };
                for ny in y.saturating_sub(1)..=(y + 1).min(rows - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(cols - 1) {
                        if let Some(o) = label[ny * cols + nx] {
                            l = l.min(o);
                        }
                    }
                }
                if Some(l) != label[y * cols + x] {
                    label[y * cols + x] = Some(l);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    // The min label of a component is the raster index of its first cell.
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, l) in label.iter().enumerate() {
        if let Some(l) = l {
            groups.entry(*l).or_default().push((i / cols, i % cols));
        }
    }
    let best = groups
        .values()
        .fold(None::<&Vec<(usize, usize)>>, |acc, g| match acc {
            Some(b) if b.len() >= g.len() => Some(b),
            _ => Some(g),
        })?;
    let ys = best.iter().map(|c| c.0);
    let xs = best.iter().map(|c| c.1);
    Some(
        BoundingBox::new(
            xs.clone().min().unwrap(),
            ys.clone().min().unwrap(),
            xs.max().unwrap() + 1,
            ys.max().unwrap() + 1,
        )
        .unwrap(),
    )
}

pub fn check_components(n: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    OracleReport::tally((0..n).map(|_| {
        let rows = r.random_range(1..9);
        let cols = r.random_range(1..9);
        let density = r.random_range(0.1..0.7);
        let cells: Vec<bool> = (0..rows * cols).map(|_| r.random::<f64>() < density).collect();
        let mask = Mask::new(rows, cols, cells.clone()).unwrap();
        let got = evaluation::largest_component_box(&mask).ok();
        got == oracle_largest_box(rows, cols, &cells)
    }))
}

/// Recall@1 by sorting every candidate `(distance, index)` pair.
pub fn check_recall(n: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    OracleReport::tally((0..n).map(|_| {
        let count = r.random_range(2..9);
        let dim = r.random_range(1..4);
        // Small integer coordinates force plenty of distance ties.
        let pts: Vec<Tensor> = (0..count)
            .map(|_| Tensor::vector((0..dim).map(|_| f64::from(r.random_range(0..3u8))).collect()).unwrap())
            .collect();
        let labels: Vec<usize> = (0..count).map(|_| r.random_range(0..3)).collect();
        let mut hits = 0;
        for i in 0..count {
            let mut cands: Vec<(f64, usize)> = (0..count)
                .filter(|&j| j != i)
                .map(|j| (losses::euclidean(&pts[i], &pts[j]), j))
                .collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            hits += usize::from(labels[cands[0].1] == labels[i]);
        }
        let expected = hits as f64 / count as f64;
        let got = evaluation::recall_at_1(&pts, &labels).unwrap();
        (got - expected).abs() <= 1e-12
    }))
}

fn random_batch(r: &mut impl Rng, count: usize, classes: usize) -> (Vec<Tensor>, Vec<usize>) {
    let dim = r.random_range(1..4);
    let embs = (0..count)
        .map(|_| Tensor::vector((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    let labels = (0..count).map(|_| r.random_range(0..classes)).collect();
    (embs, labels)
}

/// Semi-hard mining by enumerating all index triples.
pub fn check_triplets(n: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    let mut checked = Vec::new();
    while checked.len() < n {
        let count = r.random_range(3..8);
        let (embs, labels) = random_batch(&mut r, count, 3);
        let margin = r.random_range(0.05..0.8);
        let cfg = TripletConfig::new(margin).unwrap();
        let d = |i: usize, j: usize| losses::euclidean(&embs[i], &embs[j]);
        let mut expected = BTreeSet::new();
        let mut missing_negatives = false;
        for a in 0..count {
            for p in 0..count {
                if a == p || labels[a] != labels[p] {
                    continue;
                }
                let negs: Vec<usize> = (0..count).filter(|&k| labels[k] != labels[a]).collect();
                if negs.is_empty() {
                    missing_negatives = true;
                    continue;
                }
                let semi: Vec<usize> = negs
                    .iter()
                    .copied()
                    .filter(|&k| d(a, p) < d(a, k) && d(a, k) < d(a, p) + margin)
                    .collect();
                if semi.is_empty() {
                    let hardest = negs
                        .iter()
                        .copied()
                        .min_by(|&x, &y| d(a, x).total_cmp(&d(a, y)).then(x.cmp(&y)))
                        .unwrap();
                    expected.insert((a, p, hardest));
                } else {
                    expected.extend(semi.into_iter().map(|k| (a, p, k)));
                }
            }
        }
        let batch = MiniBatch::new(embs.clone(), labels.clone()).unwrap();
        let got = losses::mine_triplets(&batch, cfg);
        if expected.is_empty() || missing_negatives {
            checked.push(got.is_err());
            continue;
        }
        let Ok(got) = got else {
            checked.push(false);
            continue;
        };
        let got_set: BTreeSet<_> = got.iter().copied().collect();
        let mean = expected
            .iter()
            .map(|&(a, p, k)| (d(a, p) - d(a, k) + margin).max(0.0))
            .sum::<f64>()
            / expected.len() as f64;
        let loss = losses::triplet_batch_loss(&batch, cfg).unwrap();
        checked.push(got_set == expected && got.len() == expected.len() && (loss - mean).abs() <= 1e-12);
    }
    OracleReport::tally(checked)
}

/// N-pair loss from its definition, without max subtraction.
pub fn check_npair(n: usize, seed: u64) -> OracleReport {
    let mut r = rng(seed);
    OracleReport::tally((0..n).map(|_| {
        let classes = r.random_range(2..5);
        let mut labels: Vec<usize> = (0..classes).flat_map(|c| [c, c]).collect();
        // A random order still holds exactly one pair per class.
        for i in (1..labels.len()).rev() {
            labels.swap(i, r.random_range(0..=i));
        }
        let dim = r.random_range(1..4);
        let embs: Vec<Tensor> = labels
            .iter()
            .map(|_| Tensor::vector((0..dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let b = labels.len();
        let mut total = 0.0;
        let mut negatives_ok = true;
        for c in 0..classes {
            let idx: Vec<usize> = (0..b).filter(|&i| labels[i] == c).collect();
            let (a, p) = (idx[0], idx[1]);
            let negs: Vec<usize> = (0..b).filter(|&i| labels[i] != c).collect();
            negatives_ok &= negs.len() == b - 2;
            let dot = |i: usize, j: usize| embs[i].dot(&embs[j]).unwrap();
            let num = dot(a, p).exp();
            let den = num + negs.iter().map(|&k| dot(a, k).exp()).sum::<f64>();
            total += -(num / den).ln();
        }
        let expected = total / classes as f64;
        let batch = MiniBatch::new(embs, labels.clone()).unwrap();
        let got = losses::npair_loss(&batch).unwrap();
        let structure = losses::npair_structure(&labels).unwrap();
        negatives_ok && structure.iter().all(|s| s.2.len() == b - 2) && (got - expected).abs() <= 1e-12
    }))
}
