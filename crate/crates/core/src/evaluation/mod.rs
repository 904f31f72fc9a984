//! Localization scoring (threshold, largest component, box, IoU) and
//! retrieval metrics.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::attention::Heatmap;
use crate::error::{Error, Result};

pub mod retrieval;

pub use retrieval::{kmeans, nearest_neighbors, nmi, recall_at_1, ClusteringEval, KMeansResult};

pub const DEFAULT_THETA: f64 = 0.2;
pub const IOU_HIT: f64 = 0.5;

/// Pixel box `[x_min, x_max) x [y_min, y_max)`, with `x` the column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "empty box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    /// Box center in pixel coordinates `(x, y)`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) as f64 / 2.0,
            (self.y_min + self.y_max) as f64 / 2.0,
        )
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let h = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Binary `[rows, cols]` mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    cells: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, cells: Vec<bool>) -> Result<Self> {
        if rows * cols != cells.len() || rows == 0 || cols == 0 {
            return Err(Error::shape("mask", format!("{rows}x{cols} with {} cells", cells.len())));
        }
        Ok(Mask { rows, cols, cells })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.cols + col]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Cells at or above `theta_frac * max`. An all-zero heatmap gives an empty mask.
pub fn threshold_heatmap(h: &Heatmap, theta_frac: f64) -> Result<Mask> {
    if !(theta_frac > 0.0 && theta_frac < 1.0) {
        return Err(Error::invalid(format!("theta_frac must lie in (0, 1), got {theta_frac}")));
    }
    let max = h.grid().max();
    let cells = if h.is_zero() || max <= 0.0 {
        vec![false; h.grid().len()]
    } else {
        let cut = theta_frac * max;
        h.grid().data().iter().map(|&v| v >= cut).collect()
    };
    Mask::new(h.rows(), h.cols(), cells)
}

/// A connected region: its first cell in raster order, then all its cells, as `(row, col)`.
pub type Component = ((usize, usize), Vec<(usize, usize)>);

/// 8-connected components in raster order of their first cells.
pub fn components(mask: &Mask) -> Vec<Component> {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if !mask.get(r, c) || seen[r * cols + c] {
                continue;
            }
            let mut cells = Vec::new();
            let mut queue = VecDeque::from([(r, c)]);
            seen[r * cols + c] = true;
            while let Some((y, x)) = queue.pop_front() {
                cells.push((y, x));
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        if ny < 0 || nx < 0 || ny >= rows as isize || nx >= cols as isize {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if mask.get(ny, nx) && !seen[ny * cols + nx] {
                            seen[ny * cols + nx] = true;
                            queue.push_back((ny, nx));
                        }
                    }
                }
            }
            out.push(((r, c), cells));
        }
    }
    out
}

/// Tight box around the largest 8-connected component. Equal sizes go to
/// the component whose first cell comes first in raster order.
pub fn largest_component_box(mask: &Mask) -> Result<BoundingBox> {
    let comps = components(mask);
    let mut best: Option<&Vec<(usize, usize)>> = None;
    for (_, cells) in &comps {
        if best.is_none_or(|b| cells.len() > b.len()) {
            best = Some(cells);
        }
    }
    let cells = best.ok_or(Error::EmptyMask)?;
    let y_min = cells.iter().map(|c| c.0).min().expect("nonempty");
    let y_max = cells.iter().map(|c| c.0).max().expect("nonempty") + 1;
    let x_min = cells.iter().map(|c| c.1).min().expect("nonempty");
    let x_max = cells.iter().map(|c| c.1).max().expect("nonempty") + 1;
    BoundingBox::new(x_min, y_min, x_max, y_max)
}

/// Threshold, pick the largest component, and box it; `None` on an empty mask.
pub fn estimate_box(h: &Heatmap, theta_frac: f64) -> Result<Option<BoundingBox>> {
    let mask = threshold_heatmap(h, theta_frac)?;
    match largest_component_box(&mask) {
        Ok(b) => Ok(Some(b)),
        Err(Error::EmptyMask) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Localization outcome for one image and method.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub image_id: String,
    pub method: String,
    pub prediction_correct: bool,
    pub estimated: Option<BoundingBox>,
    pub ground_truth: BoundingBox,
    pub iou: f64,
    pub loc_hit: bool,
}

impl EvalRecord {
    /// A hit needs a correct prediction and IoU of at least 0.5. A missing
    /// box scores IoU 0.
    pub fn new(
        image_id: impl Into<String>,
        method: impl Into<String>,
        prediction_correct: bool,
        estimated: Option<BoundingBox>,
        ground_truth: BoundingBox,
    ) -> Self {
        let iou = estimated.map_or(0.0, |b| iou(&b, &ground_truth));
        EvalRecord {
            image_id: image_id.into(),
            method: method.into(),
            prediction_correct,
            estimated,
            ground_truth,
            iou,
            loc_hit: prediction_correct && iou >= IOU_HIT,
        }
    }

    /// Top-k rule: each predicted class carries the box from its own heatmap;
    /// the record hits if any correctly predicted class has IoU >= 0.5.
    pub fn top_k(
        image_id: impl Into<String>,
        method: impl Into<String>,
        predictions: &[(usize, Option<BoundingBox>)],
        true_class: usize,
        ground_truth: BoundingBox,
    ) -> Self {
        let matching = predictions.iter().find(|(c, _)| *c == true_class);
        match matching {
            Some(&(_, estimated)) => Self::new(image_id, method, true, estimated, ground_truth),
            None => {
                let estimated = predictions.first().and_then(|p| p.1);
                Self::new(image_id, method, false, estimated, ground_truth)
            }
        }
    }
}

/// Fraction of records that are localization hits.
pub fn localization_accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("no records to score"));
    }
    Ok(records.iter().filter(|r| r.loc_hit).count() as f64 / records.len() as f64)
}

#[derive(Serialize)]
struct CsvRow<'a> {
    image_id: &'a str,
    method: &'a str,
    prediction_correct: bool,
    iou: String,
    loc_hit: bool,
}

/// Writes records as RFC-4180 CSV with a header row.
pub fn write_records_csv<W: Write>(out: W, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| Error::io("<csv>", std::io::Error::other(e));
    if records.is_empty() {
        w.write_record(["image_id", "method", "prediction_correct", "iou", "loc_hit"])
            .map_err(to_io)?;
    }
    for r in records {
        w.serialize(CsvRow {
            image_id: &r.image_id,
            method: &r.method,
            prediction_correct: r.prediction_correct,
            iou: format!("{:.6}", r.iou),
            loc_hit: r.loc_hit,
        })
        .map_err(to_io)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Ranks starting at 1; tied values share the mean of their ranks.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
/// Returns 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid("spearman needs two sequences of equal length >= 2"));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Monotone transforms do not matter.
        assert!((spearman(&[0.1, 0.5, 0.2, 0.9], &[1.0, 125.0, 8.0, 729.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(average_ranks(&[5.0, 1.0, 5.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    fn heat(rows: usize, cols: usize, data: Vec<f64>) -> Heatmap {
        Heatmap::from_grid(&Tensor::new(vec![rows, cols], data).unwrap()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0, 0, 10, 10).unwrap();
        let b = BoundingBox::new(5, 0, 15, 10).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BoundingBox::new(20, 20, 21, 21).unwrap()), 0.0);
    }

    #[test]
    fn thresholding() {
        let uniform = heat(2, 2, vec![0.4; 4]);
        assert_eq!(threshold_heatmap(&uniform, 0.2).unwrap().count(), 4);
        let hot = heat(2, 2, vec![0.0, 0.0, 1.0, 0.0]);
        let m = threshold_heatmap(&hot, 0.2).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 0));
        let two = heat(1, 4, vec![1.0, 1.0, 0.1, 0.1]);
        let m = threshold_heatmap(&two, 0.2).unwrap();
        assert_eq!((0..4).map(|c| m.get(0, c)).collect::<Vec<_>>(), vec![true, true, false, false]);
        let zero = heat(2, 2, vec![0.0; 4]);
        assert!(threshold_heatmap(&zero, 0.2).unwrap().is_empty());
        assert!(threshold_heatmap(&zero, 1.0).is_err());
    }

    #[test]
    fn component_boxes() {
        #[rustfmt::skip]
        let cells = [
            1, 1, 0, 0, 0,
            1, 1, 0, 1, 0,
            1, 0, 0, 1, 0,
            0, 0, 0, 1, 0,
        ];
        let mask = Mask::new(4, 5, cells.iter().map(|&c| c == 1).collect()).unwrap();
        assert_eq!(largest_component_box(&mask).unwrap(), BoundingBox::new(0, 0, 2, 3).unwrap());
        let diag = Mask::new(3, 3, (0..9).map(|i| i % 4 == 0).collect()).unwrap();
        assert_eq!(largest_component_box(&diag).unwrap(), BoundingBox::new(0, 0, 3, 3).unwrap());
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(largest_component_box(&empty), Err(Error::EmptyMask)));
        // Equal sizes: the earlier seed wins.
        let tie = Mask::new(1, 5, vec![true, false, false, false, true]).unwrap();
        assert_eq!(largest_component_box(&tie).unwrap(), BoundingBox::new(0, 0, 1, 1).unwrap());
    }

    #[test]
    fn hit_rules() {
        let gt = BoundingBox::new(0, 0, 10, 10).unwrap();
        let est = |w| Some(BoundingBox::new(0, 0, w, 10).unwrap());
        assert!(EvalRecord::new("a", "m", true, est(6), gt).loc_hit);
        assert!(!EvalRecord::new("a", "m", true, est(4), gt).loc_hit);
        assert!(!EvalRecord::new("a", "m", false, est(9), gt).loc_hit);
        assert!(!EvalRecord::new("a", "m", true, None, gt).loc_hit);
        let top5 = EvalRecord::top_k("a", "m", &[(3, est(2)), (1, est(9))], 1, gt);
        assert!(top5.loc_hit);
        let own_box = EvalRecord::top_k("a", "m", &[(1, est(2)), (3, est(9))], 1, gt);
        assert!(!own_box.loc_hit);
    }

    #[test]
    fn csv_has_header_and_quotes() {
        let gt = BoundingBox::new(0, 0, 2, 2).unwrap();
        let mut buf = Vec::new();
        write_records_csv(&mut buf, &[EvalRecord::new("img,1", "l2caf", true, Some(gt), gt)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "image_id,method,prediction_correct,iou,loc_hit\n\"img,1\",l2caf,true,1.000000,true\n"
        );
    }
}
