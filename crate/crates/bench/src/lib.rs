//! Inputs shared by the benchmarks.

use probwtal_core::distlearn::DiagGaussian;
use probwtal_core::evaluate::{ClassGroundTruth, Detection};
use probwtal_core::features::{synthesize_dataset, Dataset, SynthConfig};
use probwtal_core::localize::Proposal;
use probwtal_core::numcore::Tensor;
use probwtal_core::rng::{normal_tensor, normal_vec, stream};

pub fn binary_sequence(t: usize, seed: u64) -> Vec<bool> {
    normal_vec(&mut stream(seed, &[]), t).into_iter().map(|v| v > 0.3).collect()
}

pub fn gaussian(d: usize, seed: u64) -> DiagGaussian {
    let mut rng = stream(seed, &[]);
    let mu = normal_vec(&mut rng, d);
    let scale: Vec<f64> = normal_vec(&mut rng, d).into_iter().map(|v| 0.5 + v.abs()).collect();
    DiagGaussian::from_scale(&mu, &scale).expect("valid scales")
}

/// `k` samples of `[t, d]` and a `[c + 1, d]` bank.
pub fn pcas_inputs(k: usize, t: usize, d: usize, c: usize) -> (Vec<Tensor>, Tensor) {
    let mut rng = stream(1, &[]);
    let samples = (0..k).map(|_| normal_tensor(&mut rng, &[t, d], 1.0)).collect();
    (samples, normal_tensor(&mut rng, &[c + 1, d], 1.0))
}

/// Overlapping proposals of one class in one video.
pub fn proposals(n: usize) -> Vec<Proposal> {
    let v = normal_vec(&mut stream(2, &[]), 2 * n);
    (0..n)
        .map(|i| {
            let start = (i as f64 * 0.7 + v[2 * i].abs()).max(0.0);
            Proposal {
                video_id: "v".into(),
                class_id: 0,
                start,
                end: start + 1.0 + v[2 * i + 1].abs() * 3.0,
                score: 1.0 / (1.0 + (-v[2 * i]).exp()),
            }
        })
        .collect()
}

/// Detections and ground truth of one class over `videos` videos.
pub fn detections(videos: usize, per_video: usize) -> (Vec<Detection>, ClassGroundTruth) {
    let mut dets = Vec::new();
    let mut gt = ClassGroundTruth::new();
    for (i, p) in proposals(videos * per_video).into_iter().enumerate() {
        let id = format!("v{:03}", i % videos);
        if i % 3 == 0 {
            gt.entry(id.clone()).or_default().push((p.start, p.end));
        }
        dets.push(Detection { video_id: id, start: p.start + 0.2, end: p.end, score: p.score });
    }
    (dets, gt)
}

pub fn dataset() -> Dataset {
    let cfg = SynthConfig { train_videos: 16, test_videos: 0, ..SynthConfig::default() };
    synthesize_dataset(&cfg, 1).expect("default synthetic config is valid")
}
