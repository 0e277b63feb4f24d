//! Inference: score fusion, proposal generation and soft-NMS.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{read_json, write_json, SnippetIndexMap};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    /// Weight of the suppressed base CAS in the fused scores.
    pub fusion_weight: f64,
    /// Actionness thresholds, strictly increasing inside (0, 1).
    pub thresholds: Vec<f64>,
    /// Video-level probability a class needs to be localized.
    pub class_threshold: f64,
    pub nms_sigma: f64,
    /// Outer regions extend `inflation * length` snippets on each side.
    pub inflation: f64,
    pub min_score: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            fusion_weight: 0.5,
            thresholds: (0..17).map(|i| (10 + 5 * i) as f64 / 100.0).collect(),
            class_threshold: 0.2,
            nms_sigma: 0.3,
            inflation: 0.25,
            min_score: 1e-4,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fusion_weight) {
            return Err(Error::Config(format!("fusion weight {}", self.fusion_weight)));
        }
        if self.thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) || self.thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("thresholds must be strictly increasing inside (0, 1)".into()));
        }
        if !(self.nms_sigma > 0.0) || !(self.inflation >= 0.0) {
            return Err(Error::Config(format!("sigma {} inflation {}", self.nms_sigma, self.inflation)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub video_id: String,
    pub class_id: usize,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::matrix(x.rows(), c, out).expect("same shape")
}

/// `w * softmax(S_supp) + (1 - w) * softmax(S_prob)`, row-wise softmax.
pub fn fuse_scores(s_supp: &Tensor, s_prob: &Tensor, w: f64) -> Result<Tensor> {
    if s_supp.ndim() != 2 || s_supp.shape() != s_prob.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", s_supp.shape(), s_prob.shape())));
    }
    let (a, b) = (softmax_rows(s_supp), softmax_rows(s_prob));
    Ok(a.zip_map(&b, |x, y| w * x + (1.0 - w) * y)?)
}

/// Action classes whose video-level probability exceeds the threshold.
pub fn selected_classes(p_supp: &[f64], num_classes: usize, theta: f64) -> Vec<usize> {
    (0..num_classes.min(p_supp.len())).filter(|&c| p_supp[c] > theta).collect()
}

/// Inclusive runs of true values.
fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().chain(std::iter::once(&false)).enumerate() {
        match (m, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    out
}

/// Candidate snippet runs `(class, first, last)` for one threshold: snippets
/// with actionness above `theta` where `class` wins among the selected classes.
pub fn candidate_runs(s_final: &Tensor, a: &[f64], selected: &[usize], theta: f64) -> Vec<(usize, usize, usize)> {
    let t = a.len();
    let winner: Vec<Option<usize>> = (0..t)
        .map(|i| {
            selected.iter().copied().fold(None, |best: Option<usize>, c| match best {
                Some(b) if s_final.get(i, b) >= s_final.get(i, c) => Some(b),
                _ => Some(c),
            })
        })
        .collect();
    let mut out = Vec::new();
    for &c in selected {
        let mask: Vec<bool> = (0..t).map(|i| a[i] > theta && winner[i] == Some(c)).collect();
        out.extend(runs(&mask).into_iter().map(|(s, e)| (c, s, e)));
    }
    out
}

/// Mean inner score minus mean score of the inflated flanks, plus `p_class`.
pub fn contrast_score(column: &[f64], first: usize, last: usize, inflation: f64, p_class: f64) -> f64 {
    let t = column.len();
    let len = last - first + 1;
    let pad = ((inflation * len as f64).round() as usize).max(1);
    let inner = column[first..=last].iter().sum::<f64>() / len as f64;
    let lo = first.saturating_sub(pad);
    let hi = (last + pad).min(t - 1);
    let outer: Vec<f64> = column[lo..first].iter().chain(&column[last + 1..=hi]).copied().collect();
    let outer = if outer.is_empty() { 0.0 } else { outer.iter().sum::<f64>() / outer.len() as f64 };
    inner - outer + p_class
}

/// Proposals over every threshold, deduplicated by (class, segment) keeping
/// the highest score. Times come from `index_map` clipped to `duration`.
pub fn generate_proposals(
    video_id: &str,
    s_final: &Tensor,
    a: &[f64],
    p_supp: &[f64],
    cfg: &LocalizeConfig,
    index_map: &SnippetIndexMap,
    duration: f64,
) -> Result<Vec<Proposal>> {
    let t = a.len();
    if s_final.ndim() != 2 || s_final.rows() != t || index_map.len() != t {
        return Err(Error::Shape(format!(
            "scores {:?}, {t} actionness values, {} mapped positions",
            s_final.shape(),
            index_map.len()
        )));
    }
    let num_classes = s_final.cols().saturating_sub(1);
    let selected = selected_classes(p_supp, num_classes, cfg.class_threshold);
    let mut best: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
    for &theta in &cfg.thresholds {
        for (c, s, e) in candidate_runs(s_final, a, &selected, theta) {
            let col = s_final.column(c);
            let score = contrast_score(&col, s, e, cfg.inflation, p_supp[c]);
            let slot = best.entry((c, s, e)).or_insert(f64::NEG_INFINITY);
            *slot = slot.max(score);
        }
    }
    Ok(best
        .into_iter()
        .map(|((c, s, e), score)| {
            let (start, end) = index_map.span_seconds(s, e);
            Proposal {
                video_id: video_id.to_string(),
                class_id: c,
                start: start.min(duration),
                end: end.min(duration),
                score,
            }
        })
        .filter(|p| p.end > p.start)
        .collect())
}

fn iou(a: &Proposal, b: &Proposal) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Gaussian soft-NMS within each (video, class); scores below `min_score` are
/// dropped. Output is ordered by video, then descending score.
pub fn soft_nms(proposals: Vec<Proposal>, sigma: f64, min_score: f64) -> Vec<Proposal> {
    let mut groups: BTreeMap<(String, usize), Vec<Proposal>> = BTreeMap::new();
    for p in proposals {
        groups.entry((p.video_id.clone(), p.class_id)).or_default().push(p);
    }
    let mut out = Vec::new();
    for (_, mut rest) in groups {
        while !rest.is_empty() {
            let best = (0..rest.len())
                .max_by(|&i, &j| rest[i].score.total_cmp(&rest[j].score).then(j.cmp(&i)))
                .expect("nonempty");
            let top = rest.swap_remove(best);
            for p in &mut rest {
                let o = iou(&top, p);
                p.score *= (-o * o / sigma).exp();
            }
            out.push(top);
        }
    }
    out.retain(|p| p.score >= min_score);
    sort_canonical(&mut out);
    out
}

/// Video id, then descending score, then start, end and class.
pub fn sort_canonical(ps: &mut [Proposal]) {
    ps.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(b.score.total_cmp(&a.score))
            .then(a.start.total_cmp(&b.start))
            .then(a.end.total_cmp(&b.end))
            .then(a.class_id.cmp(&b.class_id))
    });
}

/// Everything inference needs for one video.
#[derive(Clone, Debug)]
pub struct VideoScores {
    pub video_id: String,
    /// `[T, C + 1]` suppressed base CAS.
    pub s_supp: Tensor,
    /// `[T, C + 1]` probabilistic CAS.
    pub s_prob: Tensor,
    pub actionness: Vec<f64>,
    /// Video-level probabilities of the suppressed branch (`C + 1`).
    pub p_supp: Vec<f64>,
    pub index_map: SnippetIndexMap,
    pub duration: f64,
}

/// Fusion, proposal generation and soft-NMS for one video.
pub fn localize_video(v: &VideoScores, cfg: &LocalizeConfig) -> Result<Vec<Proposal>> {
    cfg.validate()?;
    let fused = fuse_scores(&v.s_supp, &v.s_prob, cfg.fusion_weight)?;
    let props = generate_proposals(&v.video_id, &fused, &v.actionness, &v.p_supp, cfg, &v.index_map, v.duration)?;
    Ok(soft_nms(props, cfg.nms_sigma, cfg.min_score))
}

#[derive(Serialize, Deserialize)]
struct ResultsFile {
    #[serde(default = "version")]
    version: String,
    results: BTreeMap<String, Vec<ResultEntry>>,
}

fn version() -> String {
    "1.0".into()
}

#[derive(Serialize, Deserialize)]
struct ResultEntry {
    label: String,
    score: f64,
    segment: [f64; 2],
}

/// Writes the results JSON in canonical order.
pub fn write_results(path: &Path, proposals: &[Proposal], class_names: &[String]) -> Result<()> {
    let mut ps = proposals.to_vec();
    sort_canonical(&mut ps);
    let mut results: BTreeMap<String, Vec<ResultEntry>> = BTreeMap::new();
    for p in ps {
        let label = class_names
            .get(p.class_id)
            .ok_or_else(|| Error::UnknownClass(format!("class index {}", p.class_id)))?
            .clone();
        results.entry(p.video_id).or_default().push(ResultEntry { label, score: p.score, segment: [p.start, p.end] });
    }
    write_json(path, &ResultsFile { version: version(), results })
}

/// Reads a results JSON, resolving labels against `class_names`.
pub fn read_results(path: &Path, class_names: &[String]) -> Result<Vec<Proposal>> {
    let file: ResultsFile = read_json(path)?;
    let mut out = Vec::new();
    for (vid, entries) in file.results {
        for e in entries {
            let class_id = class_names.iter().position(|c| *c == e.label).ok_or_else(|| Error::UnknownClass(e.label.clone()))?;
            if !e.score.is_finite() || !(e.segment[0] >= 0.0 && e.segment[1] > e.segment[0]) {
                return Err(Error::Data(format!("bad result entry in {vid}: {:?} {}", e.segment, e.score)));
            }
            out.push(Proposal { video_id: vid.clone(), class_id, start: e.segment[0], end: e.segment[1], score: e.score });
        }
    }
    sort_canonical(&mut out);
    Ok(out)
}
