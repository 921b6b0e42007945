//! Segmentation and target-level detection metrics.
//!
//! * IoU is micro-averaged: intersection and union pixel counts are summed over
//!   the whole set before dividing.
//! * Pd counts ground-truth targets (8-connected components) whose centroid has
//!   a predicted component within Euclidean distance strictly below 3 pixels.
//!   Matching is one-to-one, greedy by ascending distance.
//! * Fa is the fraction of all pixels predicted positive where the label is
//!   negative.

use serde::{Deserialize, Serialize};

use crate::model::{BinaryMask, ProbMap};
use crate::{Error, Result};

/// Centroid distance below which a prediction detects a target.
pub const CENTROID_TOLERANCE: f64 = 3.0;

/// One 8-connected foreground region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// Member pixels `(row, col)` in raster order.
    pub pixels: Vec<(usize, usize)>,
    /// Mean `(row, col)` of the member pixels.
    pub centroid: (f64, f64),
}

impl Component {
    fn from_pixels(mut pixels: Vec<(usize, usize)>) -> Self {
        pixels.sort_unstable();
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        Component { pixels, centroid: (sr / n, sc / n) }
    }

    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    /// `(min_row, min_col, max_row, max_col)`.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        self.pixels.iter().fold(
            (usize::MAX, usize::MAX, 0, 0),
            |(r0, c0, r1, c1), &(r, c)| (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
        )
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// 8-connected components, ordered by bounding-box `(min_row, min_col)`.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = mask.dim();
    let mut label = vec![usize::MAX; h * w];
    let mut parent: Vec<usize> = Vec::new();

    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut neighbours = [usize::MAX; 4];
            let candidates = [
                (r.wrapping_sub(1), c.wrapping_sub(1)),
                (r.wrapping_sub(1), c),
                (r.wrapping_sub(1), c + 1),
                (r, c.wrapping_sub(1)),
            ];
            for (slot, (nr, nc)) in neighbours.iter_mut().zip(candidates) {
                if nr < h && nc < w {
                    *slot = label[nr * w + nc];
                }
            }
            let existing: Vec<usize> = neighbours.into_iter().filter(|&l| l != usize::MAX).collect();
            let here = match existing.first() {
                None => {
                    parent.push(parent.len());
                    parent.len() - 1
                }
                Some(&first) => {
                    let root = find(&mut parent, first);
                    for &other in &existing[1..] {
                        let o = find(&mut parent, other);
                        if o != root {
                            let (lo, hi) = (root.min(o), root.max(o));
                            parent[hi] = lo;
                        }
                    }
                    find(&mut parent, first)
                }
            };
            label[r * w + c] = here;
        }
    }

    let mut groups: indexmap::IndexMap<usize, Vec<(usize, usize)>> = indexmap::IndexMap::new();
    for r in 0..h {
        for c in 0..w {
            let l = label[r * w + c];
            if l != usize::MAX {
                let root = find(&mut parent, l);
                groups.entry(root).or_default().push((r, c));
            }
        }
    }
    let mut comps: Vec<Component> = groups.into_values().map(Component::from_pixels).collect();
    comps.sort_by_key(|c| {
        let (r0, c0, _, _) = c.bbox();
        (r0, c0, c.pixels[0])
    });
    comps
}

/// Greedy one-to-one matching of ground-truth centroids to predicted centroids
/// closer than [`CENTROID_TOLERANCE`]. Returns `(gt_index, pred_index)` pairs.
pub fn match_targets(gt: &[Component], pred: &[Component]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (gi, g) in gt.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            let d = ((g.centroid.0 - p.centroid.0).powi(2) + (g.centroid.1 - p.centroid.1).powi(2)).sqrt();
            if d < CENTROID_TOLERANCE {
                pairs.push((d, gi, pi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matched = Vec::new();
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            matched.push((gi, pi));
        }
    }
    matched
}

/// Integer tallies for one prediction/label pair.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// Pixels positive in both.
    pub tp: u64,
    /// Ground-truth positive pixels.
    pub t: u64,
    /// Predicted positive pixels.
    pub p: u64,
    /// Ground-truth targets detected.
    pub n_pred: u64,
    /// Ground-truth targets.
    pub n_all: u64,
    /// Predicted-positive, label-negative pixels.
    pub n_false: u64,
    /// All pixels.
    pub p_all: u64,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.t += o.t;
        self.p += o.p;
        self.n_pred += o.n_pred;
        self.n_all += o.n_all;
        self.n_false += o.n_false;
        self.p_all += o.p_all;
    }
}

fn check_pair(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(Error::Dimension(format!(
            "prediction is {:?} but label is {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Tallies pixel and target counts for one pair.
pub fn pair_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<Counts> {
    check_pair(pred, gt)?;
    let mut c = Counts::default();
    for (&p, &t) in pred.as_array().iter().zip(gt.as_array().iter()) {
        let (p, t) = (p != 0, t != 0);
        c.tp += (p && t) as u64;
        c.t += t as u64;
        c.p += p as u64;
        c.n_false += (p && !t) as u64;
    }
    c.p_all = pred.as_array().len() as u64;
    let gt_comps = connected_components(gt);
    let pred_comps = connected_components(pred);
    c.n_all = gt_comps.len() as u64;
    c.n_pred = match_targets(&gt_comps, &pred_comps).len() as u64;
    Ok(c)
}

/// Summed counts over a paired set.
pub fn dataset_counts(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Counts> {
    if preds.len() != gts.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyDataset("no samples to evaluate".into()));
    }
    let mut total = Counts::default();
    for (p, g) in preds.iter().zip(gts) {
        total += pair_counts(p, g)?;
    }
    Ok(total)
}

/// Micro-averaged IoU.
pub fn iou(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    Ok(EvalReport::from_counts(dataset_counts(preds, gts)?).iou)
}

/// Mean of per-image IoU; an image with an empty union scores 1.
pub fn iou_per_image(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::EmptyDataset("need equally many, non-zero predictions and labels".into()));
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let c = pair_counts(p, g)?;
        let union = c.t + c.p - c.tp;
        total += if union == 0 { 1.0 } else { c.tp as f64 / union as f64 };
    }
    Ok(total / preds.len() as f64)
}

/// Target-level probability of detection.
pub fn pd(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let c = dataset_counts(preds, gts)?;
    if c.n_all == 0 {
        return Err(Error::NoTargets);
    }
    Ok(c.n_pred as f64 / c.n_all as f64)
}

/// Pixel-level false-alarm rate.
pub fn fa(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<f64> {
    let c = dataset_counts(preds, gts)?;
    Ok(c.n_false as f64 / c.p_all as f64)
}

/// Metrics for one evaluation run. `fa` is a plain rate; multiply by 1e6 for
/// the customary ×10⁻⁶ reporting unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou: f64,
    /// `NaN` when the set contains no ground-truth targets.
    pub pd: f64,
    pub fa: f64,
    pub counts: Counts,
}

impl EvalReport {
    pub fn from_counts(c: Counts) -> Self {
        let union = c.t + c.p - c.tp;
        EvalReport {
            iou: if union == 0 { 0.0 } else { c.tp as f64 / union as f64 },
            pd: if c.n_all == 0 { f64::NAN } else { c.n_pred as f64 / c.n_all as f64 },
            fa: if c.p_all == 0 { 0.0 } else { c.n_false as f64 / c.p_all as f64 },
            counts: c,
        }
    }

    pub fn evaluate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Self> {
        Ok(Self::from_counts(dataset_counts(preds, gts)?))
    }

    pub const CSV_HEADER: &'static str = "iou,pd,fa_e6,tp,t,p,n_pred,n_all,n_false,p_all";

    /// One comma-separated row matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self) -> String {
        let c = &self.counts;
        format!(
            "{:.6},{:.6},{:.4},{},{},{},{},{},{},{}",
            self.iou,
            self.pd,
            self.fa * 1e6,
            c.tp,
            c.t,
            c.p,
            c.n_pred,
            c.n_all,
            c.n_false,
            c.p_all
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

/// One operating point of a threshold sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fa: f64,
    pub pd: f64,
}

/// Binarises every probability map at each threshold (`p > τ`) and reports
/// `(Fa, Pd)`, in the given threshold order.
pub fn roc(probs: &[ProbMap], gts: &[BinaryMask], thresholds: &[f64]) -> Result<Vec<RocPoint>> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidInput(format!("threshold {t} outside [0, 1]")));
    }
    if probs.len() != gts.len() {
        return Err(Error::Dimension(format!("{} maps for {} labels", probs.len(), gts.len())));
    }
    let gt_comps: Vec<Vec<Component>> = gts.iter().map(connected_components).collect();
    let n_all: usize = gt_comps.iter().map(Vec::len).sum();
    if n_all == 0 {
        return Err(Error::NoTargets);
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &tau in thresholds {
        let (mut n_false, mut p_all, mut n_pred) = (0u64, 0u64, 0usize);
        for ((prob, gt), comps) in probs.iter().zip(gts).zip(&gt_comps) {
            let mask = prob.threshold(tau);
            check_pair(&mask, gt)?;
            n_false += mask
                .as_array()
                .iter()
                .zip(gt.as_array().iter())
                .filter(|(&p, &t)| p != 0 && t == 0)
                .count() as u64;
            p_all += mask.as_array().len() as u64;
            n_pred += match_targets(comps, &connected_components(&mask)).len();
        }
        out.push(RocPoint { threshold: tau, fa: n_false as f64 / p_all as f64, pd: n_pred as f64 / n_all as f64 });
    }
    Ok(out)
}

/// `threshold\tfa\tpd` table with a header line.
pub fn roc_table(points: &[RocPoint]) -> String {
    let mut s = String::from("threshold\tfa\tpd\n");
    for p in points {
        s.push_str(&format!("{}\t{:e}\t{}\n", p.threshold, p.fa, p.pd));
    }
    s
}
