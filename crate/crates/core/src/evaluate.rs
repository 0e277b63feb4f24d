//! Temporal IoU, average precision and mAP reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_ground_truth, read_ground_truth_infer_classes, GroundTruth};
use crate::localize::{read_results, Proposal};

/// `|a ∩ b| / |a ∪ b|` for `(start, end)` intervals.
pub fn temporal_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    if !(a.1 > a.0) || !(b.1 > b.0) {
        return Err(Error::Data(format!("empty segment in {a:?} / {b:?}")));
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    Ok(inter / ((a.1 - a.0) + (b.1 - b.0) - inter))
}

/// A ranked detection for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

/// Ground-truth instances of one class, keyed by video.
pub type ClassGroundTruth = BTreeMap<String, Vec<(f64, f64)>>;

fn rank(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.video_id.cmp(&b.video_id))
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
    });
}

/// AP with greedy one-to-one matching in rank order: `sum Δrecall * precision`.
///
/// Detections are ranked by descending score (ties by video and start).
/// Each detection takes the unmatched instance of highest IoU when that IoU
/// reaches `iou_thr`. Returns 0 when there is no ground truth.
pub fn average_precision(detections: &[Detection], gt: &ClassGroundTruth, iou_thr: f64) -> Result<f64> {
    let n_gt: usize = gt.values().map(Vec::len).sum();
    if n_gt == 0 {
        return Ok(0.0);
    }
    let mut dets = detections.to_vec();
    rank(&mut dets);
    let mut used: BTreeMap<&str, Vec<bool>> = gt.iter().map(|(k, v)| (k.as_str(), vec![false; v.len()])).collect();
    let (mut tp, mut ap) = (0usize, 0.0);
    for (i, d) in dets.iter().enumerate() {
        let mut hit = false;
        if let (Some(segs), Some(flags)) = (gt.get(&d.video_id), used.get_mut(d.video_id.as_str())) {
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in segs.iter().enumerate() {
                let o = temporal_iou((d.start, d.end), s)?;
                if !flags[j] && o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                flags[j] = true;
                hit = true;
            }
        }
        if hit {
            tp += 1;
            ap += (tp as f64 / (i + 1) as f64) / n_gt as f64;
        }
    }
    Ok(ap)
}

/// IoU thresholds in hundredths: 0.10 to 0.70 by 0.10 and 0.50 to 0.95 by 0.05.
pub fn default_thresholds() -> Vec<f64> {
    let mut hs: Vec<u32> = (1..=7).map(|i| 10 * i).chain((0..10).map(|i| 50 + 5 * i)).collect();
    hs.sort_unstable();
    hs.dedup();
    hs.into_iter().map(|h| h as f64 / 100.0).collect()
}

/// Named averaging ranges as member thresholds in hundredths.
pub fn average_ranges() -> Vec<(&'static str, Vec<u32>)> {
    vec![
        ("0.1:0.7", (1..=7).map(|i| 10 * i).collect()),
        ("0.1:0.5", (1..=5).map(|i| 10 * i).collect()),
        ("0.3:0.7", (3..=7).map(|i| 10 * i).collect()),
        ("0.5:0.95", (0..10).map(|i| 50 + 5 * i).collect()),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou: f64,
    pub map: f64,
    /// AP per class present in the ground truth.
    pub ap: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeAverage {
    pub range: String,
    pub map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdResult>,
    /// Ranges whose every member threshold was evaluated.
    pub averages: Vec<RangeAverage>,
    /// Classes without ground truth, left out of the mean.
    pub skipped_classes: Vec<String>,
}

impl EvalReport {
    pub fn map_at(&self, iou: f64) -> Option<f64> {
        self.thresholds.iter().find(|t| (t.iou - iou).abs() < 1e-9).map(|t| t.map)
    }

    pub fn average(&self, range: &str) -> Option<f64> {
        self.averages.iter().find(|a| a.range == range).map(|a| a.map)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let classes: Vec<&String> = self.thresholds.first().map(|t| t.ap.keys().collect()).unwrap_or_default();
        let _ = write!(s, "{:>6}  {:>8}", "IoU", "mAP");
        for c in &classes {
            let _ = write!(s, "  {:>10}", c);
        }
        s.push('\n');
        for t in &self.thresholds {
            let _ = write!(s, "{:>6.2}  {:>8.4}", t.iou, t.map);
            for c in &classes {
                let _ = write!(s, "  {:>10.4}", t.ap[*c]);
            }
            s.push('\n');
        }
        for a in &self.averages {
            let _ = writeln!(s, "avg {:<10} {:.4}", a.range, a.map);
        }
        s
    }
}

/// Per-threshold mAP over the classes present in `gt`, plus range averages.
pub fn evaluate_proposals(proposals: &[Proposal], gt: &GroundTruth, thresholds: &[f64]) -> Result<EvalReport> {
    let nc = gt.classes.len();
    if proposals.iter().any(|p| p.class_id >= nc) {
        return Err(Error::UnknownClass("proposal class outside the ground-truth class list".into()));
    }
    let mut per_class: Vec<ClassGroundTruth> = vec![BTreeMap::new(); nc];
    for (vid, segs) in &gt.videos {
        for s in segs {
            per_class[s.class_id].entry(vid.clone()).or_default().push((s.start, s.end));
        }
    }
    let mut dets: Vec<Vec<Detection>> = vec![Vec::new(); nc];
    for p in proposals {
        dets[p.class_id].push(Detection { video_id: p.video_id.clone(), start: p.start, end: p.end, score: p.score });
    }
    let present: Vec<usize> = (0..nc).filter(|&c| !per_class[c].is_empty()).collect();
    let skipped_classes = (0..nc).filter(|c| !present.contains(c)).map(|c| gt.classes[c].clone()).collect();

    let mut results = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut ap = BTreeMap::new();
        for &c in &present {
            ap.insert(gt.classes[c].clone(), average_precision(&dets[c], &per_class[c], thr)?);
        }
        let map = if ap.is_empty() { 0.0 } else { ap.values().sum::<f64>() / ap.len() as f64 };
        results.push(ThresholdResult { iou: thr, map, ap });
    }

    let mut averages = Vec::new();
    for (name, members) in average_ranges() {
        let vals: Option<Vec<f64>> = members
            .iter()
            .map(|&h| results.iter().find(|r| (r.iou * 100.0).round() as u32 == h).map(|r| r.map))
            .collect();
        if let Some(v) = vals {
            averages.push(RangeAverage { range: name.into(), map: v.iter().sum::<f64>() / v.len() as f64 });
        }
    }
    Ok(EvalReport { thresholds: results, averages, skipped_classes })
}

/// Reads a results file and a ground-truth file and evaluates them. Labels
/// resolve against `classes`, or against the labels found in the ground truth.
pub fn evaluate(results: &Path, gt_path: &Path, classes: Option<&[String]>, thresholds: &[f64]) -> Result<EvalReport> {
    let gt = match classes {
        Some(c) => read_ground_truth(gt_path, c)?,
        None => read_ground_truth_infer_classes(gt_path)?,
    };
    let proposals = read_results(results, &gt.classes)?;
    evaluate_proposals(&proposals, &gt, thresholds)
}
