use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Axis-aligned box as `(x1, y1, x2, y2)` with `x2 > x1`, `y2 > y1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1 && self.area().is_finite()
    }
}

/// Intersection over union of two non-degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    if !a.is_valid() || !b.is_valid() {
        return invalid(format!("degenerate box in IoU: {a:?} / {b:?}"));
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    Ok(inter / (a.area() + b.area() - inter))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image: usize,
    pub class: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image: usize,
    pub class: usize,
    pub bbox: BBox,
}

/// Matching outcome for one image and class.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Confidences in descending order.
    pub confidences: Vec<f64>,
    /// `true` for a true positive, aligned with `confidences`.
    pub flags: Vec<bool>,
    pub false_negatives: usize,
}

/// Greedy matching in descending confidence: each detection takes the
/// highest-IoU ground truth that is still unmatched, if that IoU reaches the
/// threshold.
pub fn match_detections(preds: &[(f64, BBox)], gts: &[BBox], iou_threshold: f64) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].0.total_cmp(&preds[a].0));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(preds.len());
    let mut confidences = Vec::with_capacity(preds.len());
    for &i in &order {
        let (conf, bbox) = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let o = iou(&bbox, gt)?;
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        flags.push(best.is_some());
        confidences.push(conf);
    }
    Ok(MatchResult {
        confidences,
        flags,
        false_negatives: taken.iter().filter(|&&t| !t).count(),
    })
}

/// All-point interpolated AP: area under the monotone precision envelope of
/// the cumulative PR curve. Returns 0 when `n_gt == 0`.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(flags.len() + 2);
    let mut precision = Vec::with_capacity(flags.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in flags {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (1..precision.len()).rev() {
        precision[i - 1] = precision[i - 1].max(precision[i]);
    }
    (1..recall.len())
        .filter(|&i| recall[i] != recall[i - 1])
        .map(|i| (recall[i] - recall[i - 1]) * precision[i])
        .sum()
}

/// Unweighted mean over classes that have ground truth. Entries are `(AP, n_gt)`.
pub fn mean_ap(per_class: &[(f64, usize)]) -> Result<f64> {
    let with_gt: Vec<f64> = per_class.iter().filter(|(_, n)| *n > 0).map(|(ap, _)| *ap).collect();
    if with_gt.is_empty() {
        return invalid("no class has ground truth; mAP is undefined");
    }
    Ok(with_gt.iter().sum::<f64>() / with_gt.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class_ap: BTreeMap<usize, f64>,
    #[serde(rename = "mAP50")]
    pub map50: f64,
    pub counts: BTreeMap<usize, ClassCounts>,
    pub iou_threshold: f64,
    /// Classes without ground truth; their AP is reported as 0 and excluded from the mean.
    pub classes_without_gt: Vec<usize>,
}

/// Per-class AP and mAP over a set of images.
pub fn evaluate(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, iou_threshold: f64) -> Result<EvalReport> {
    let mut per_class_ap = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut summary = Vec::with_capacity(num_classes);
    let mut classes_without_gt = Vec::new();
    for class in 0..num_classes {
        let mut images: BTreeMap<usize, (Vec<(f64, BBox)>, Vec<BBox>)> = BTreeMap::new();
        for d in dets.iter().filter(|d| d.class == class) {
            images.entry(d.image).or_default().0.push((d.confidence, d.bbox));
        }
        for g in gts.iter().filter(|g| g.class == class) {
            images.entry(g.image).or_default().1.push(g.bbox);
        }
        let mut scored: Vec<(f64, bool)> = Vec::new();
        let mut c = ClassCounts::default();
        for (preds, boxes) in images.values() {
            let m = match_detections(preds, boxes, iou_threshold)?;
            c.n_gt += boxes.len();
            c.fn_ += m.false_negatives;
            scored.extend(m.confidences.into_iter().zip(m.flags));
        }
        // Stable: ties keep image order, then in-image order.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = scored.iter().map(|s| s.1).collect();
        c.tp = flags.iter().filter(|&&f| f).count();
        c.fp = flags.len() - c.tp;
        let ap = average_precision(&flags, c.n_gt);
        if c.n_gt == 0 {
            classes_without_gt.push(class);
        }
        per_class_ap.insert(class, ap);
        counts.insert(class, c);
        summary.push((ap, c.n_gt));
    }
    Ok(EvalReport {
        map50: mean_ap(&summary)?,
        per_class_ap,
        counts,
        iou_threshold,
        classes_without_gt,
    })
}
