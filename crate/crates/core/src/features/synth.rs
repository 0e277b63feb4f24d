//! Synthetic datasets with planted action segments.
//!
//! Each class owns a unit prototype in feature space and one in the
//! vision-language space. Action snippets are noisy copies of their class
//! prototype; background snippets are noisy copies of a background prototype.
//! The text bank's action rows are the vision-language prototypes.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::types::{Dataset, Segment, SnippetFeatureBundle, Subset, TextBank, Video};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng::{normal_vec, purpose, stream, unit_vector, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub vlp_dim: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub snippets_min: usize,
    pub snippets_max: usize,
    pub segments_min: usize,
    pub segments_max: usize,
    pub segment_len_min: usize,
    pub segment_len_max: usize,
    /// Distinct action classes per video (upper bound).
    pub classes_per_video: usize,
    /// Per-coordinate noise on rgb snippets.
    pub rgb_noise: f64,
    /// Per-coordinate noise on flow snippets.
    pub flow_noise: f64,
    /// Per-coordinate noise separating flow prototypes from rgb prototypes.
    pub flow_prototype_noise: f64,
    /// Per-coordinate noise on vision-language image embeddings.
    pub vlp_noise: f64,
    pub fps: f64,
    pub snippet_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            dim: 16,
            vlp_dim: 16,
            train_videos: 80,
            test_videos: 20,
            snippets_min: 64,
            snippets_max: 96,
            segments_min: 1,
            segments_max: 3,
            segment_len_min: 6,
            segment_len_max: 16,
            classes_per_video: 1,
            rgb_noise: 0.2,
            flow_noise: 0.2,
            flow_prototype_noise: 0.2,
            vlp_noise: 0.2,
            fps: 25.0,
            snippet_len: 16,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.dim == 0 || self.vlp_dim == 0 {
            return bad("classes and dimensions must be positive".into());
        }
        if self.snippets_min == 0 || self.snippets_min > self.snippets_max {
            return bad(format!("snippet range {}..={}", self.snippets_min, self.snippets_max));
        }
        if self.segments_min == 0 || self.segments_min > self.segments_max {
            return bad(format!("segment count range {}..={}", self.segments_min, self.segments_max));
        }
        if self.segment_len_min == 0 || self.segment_len_min > self.segment_len_max {
            return bad(format!("segment length range {}..={}", self.segment_len_min, self.segment_len_max));
        }
        if self.classes_per_video == 0 || self.classes_per_video > self.num_classes.min(self.segments_min) {
            return bad(format!(
                "{} classes per video needs at least that many classes and segments",
                self.classes_per_video
            ));
        }
        // every segment needs background on both sides
        let needed = self.segments_max * (self.segment_len_max + 1) + 1;
        if needed > self.snippets_min {
            return bad(format!(
                "{} segments of up to {} snippets need {needed} snippets, videos may have {}",
                self.segments_max, self.segment_len_max, self.snippets_min
            ));
        }
        for (name, v) in [
            ("rgb_noise", self.rgb_noise),
            ("flow_noise", self.flow_noise),
            ("flow_prototype_noise", self.flow_prototype_noise),
            ("vlp_noise", self.vlp_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        if !(self.fps > 0.0) || self.snippet_len == 0 {
            return bad("fps and snippet length must be positive".into());
        }
        Ok(())
    }
}

/// Class and background prototypes behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct Prototypes {
    /// `C + 1` rows; the last is background.
    pub rgb: Vec<Vec<f64>>,
    pub flow: Vec<Vec<f64>>,
    pub vlp: Vec<Vec<f64>>,
}

fn quantize(v: f64) -> f64 {
    f64::from(v as f32)
}

fn noisy(rng: &mut StreamRng, proto: &[f64], std: f64) -> Vec<f64> {
    if std == 0.0 {
        return proto.iter().map(|&p| quantize(p)).collect();
    }
    proto.iter().zip(normal_vec(rng, proto.len())).map(|(&p, e)| quantize(p + std * e)).collect()
}

pub fn prototypes(cfg: &SynthConfig, seed: u64) -> Prototypes {
    let mut rng = stream(seed, &[purpose::SYNTH, 0]);
    let c = cfg.num_classes + 1;
    let rgb: Vec<Vec<f64>> = (0..c).map(|_| unit_vector(&mut rng, cfg.dim)).collect();
    let flow = rgb
        .iter()
        .map(|p| {
            let v: Vec<f64> = p.iter().zip(normal_vec(&mut rng, cfg.dim)).map(|(a, e)| a + cfg.flow_prototype_noise * e).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let vlp = (0..c).map(|_| unit_vector(&mut rng, cfg.vlp_dim)).collect();
    Prototypes { rgb, flow, vlp }
}

/// Places `lens.len()` segments in `total` snippets with at least one
/// background snippet before, between and after them.
fn place_segments(rng: &mut StreamRng, total: usize, lens: &[usize]) -> Vec<(usize, usize)> {
    let k = lens.len();
    let free = total - lens.iter().sum::<usize>() - (k + 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut pos = 0;
    let mut prev = 0;
    for (i, &len) in lens.iter().enumerate() {
        pos += 1 + (cuts[i] - prev);
        prev = cuts[i];
        out.push((pos, pos + len));
        pos += len;
    }
    out
}

/// Generates a dataset; identical `(cfg, seed)` give bit-identical output.
pub fn synthesize_dataset(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let protos = prototypes(cfg, seed);
    let bg = cfg.num_classes;
    let total = cfg.train_videos + cfg.test_videos;
    let mut videos = Vec::with_capacity(total);

    for vi in 0..total {
        let mut rng = stream(seed, &[purpose::SYNTH, 1, vi as u64]);
        let n = rng.random_range(cfg.snippets_min..=cfg.snippets_max);
        let k = rng.random_range(cfg.segments_min..=cfg.segments_max);
        let lens: Vec<usize> = (0..k).map(|_| rng.random_range(cfg.segment_len_min..=cfg.segment_len_max)).collect();
        let spans = place_segments(&mut rng, n, &lens);

        // round-robin primary class keeps every class represented
        let mut video_classes = vec![vi % cfg.num_classes];
        let mut others: Vec<usize> = (0..cfg.num_classes).filter(|&c| c != video_classes[0]).collect();
        others.shuffle(&mut rng);
        video_classes.extend(others.into_iter().take(cfg.classes_per_video - 1));
        let mut seg_classes: Vec<usize> = (0..k).map(|i| video_classes[i % video_classes.len()]).collect();
        seg_classes.shuffle(&mut rng);

        let mut owner = vec![bg; n];
        for (&(a, b), &c) in spans.iter().zip(&seg_classes) {
            owner[a..b].iter_mut().for_each(|o| *o = c);
        }
        let mut rgb = Vec::with_capacity(n * cfg.dim);
        let mut flow = Vec::with_capacity(n * cfg.dim);
        let mut vlp = Vec::with_capacity(n * cfg.vlp_dim);
        for &o in &owner {
            rgb.extend(noisy(&mut rng, &protos.rgb[o], cfg.rgb_noise));
            flow.extend(noisy(&mut rng, &protos.flow[o], cfg.flow_noise));
            vlp.extend(noisy(&mut rng, &protos.vlp[o], cfg.vlp_noise));
        }
        let sps = cfg.snippet_len as f64 / cfg.fps;
        let segments = spans
            .iter()
            .zip(&seg_classes)
            .map(|(&(a, b), &c)| Segment { class_id: c, start: a as f64 * sps, end: b as f64 * sps })
            .collect();
        videos.push(Video {
            features: SnippetFeatureBundle {
                video_id: format!("video_{vi:04}"),
                rgb: Tensor::matrix(n, cfg.dim, rgb)?,
                flow: Tensor::matrix(n, cfg.dim, flow)?,
                vlp_image: Tensor::matrix(n, cfg.vlp_dim, vlp)?,
                fps: cfg.fps,
                duration: n as f64 * sps,
                snippet_len: cfg.snippet_len,
            },
            segments,
            subset: if vi < cfg.train_videos { Subset::Train } else { Subset::Test },
        });
    }

    let mut rng = stream(seed, &[purpose::SYNTH, 2]);
    let mut bank = Vec::with_capacity((cfg.num_classes + 1) * cfg.vlp_dim);
    for p in &protos.vlp[..cfg.num_classes] {
        bank.extend(p.iter().map(|&v| quantize(v)));
    }
    bank.extend(unit_vector(&mut rng, cfg.vlp_dim).into_iter().map(quantize));
    let names = (0..cfg.num_classes).map(|c| format!("action_{c}")).collect();
    let text_bank = TextBank::new(Tensor::matrix(cfg.num_classes + 1, cfg.vlp_dim, bank)?, names)?;

    let ds = Dataset { dim: cfg.dim, vlp_dim: cfg.vlp_dim, videos, text_bank };
    ds.validate()?;
    Ok(ds)
}
