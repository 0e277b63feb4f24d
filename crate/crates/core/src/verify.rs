//! Finite-difference checks of every loss term on random tiny instances.
//!
//! Coordinates with a kink inside the step (ReLU, clamp, top-k switches) are
//! screened out individually; the rest must match the tape gradient.

use crate::distlearn::{
    build_pairs, loss_inter, loss_intra, mine_snippets, DistanceMetric, IntraConfig, MiningConfig, MixtureDraws,
    MixtureVars, SimilarityMap,
};
use crate::error::Result;
use crate::features::TextBank;
use crate::milhead::{aux_losses, forward_head, init_head_params, loss_cls, loss_vid, HeadConfig, VidWeights};
use crate::numcore::{grad_check_report, GradCheckReport, Graph, Tensor, Var};
use crate::params::{grad_check_params, Bound, ParamStore};
use crate::probembed::{
    bank_var, draw_noise, estimate_gaussian, init_embed_params, loss_kd, loss_ortho, pcas, sample_embeddings,
    EmbedConfig, GaussianVars,
};
use crate::rng::{normal_tensor, stream, unit_vector};
use crate::train::{init_model, total_loss, BatchVideo, TrainConfig, VideoDraws};

pub const STEP: f64 = 1e-4;
/// Tolerance for deterministic terms.
pub const TOL: f64 = 1e-3;
/// Tolerance for terms evaluated through frozen Monte-Carlo draws.
pub const TOL_MC: f64 = 5e-3;
/// Largest share of screened-out coordinates for a check to count.
pub const MAX_NONSMOOTH: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub term: String,
    pub seed: u64,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.smooth_max_rel_error < self.tolerance && self.report.nonsmooth_fraction() <= MAX_NONSMOOTH
    }
}

const DIM: usize = 3;
const CLASSES: usize = 2;
const T: usize = 8;

fn bank(seed: u64) -> TextBank {
    let mut rng = stream(seed, &[7]);
    let rows: Vec<Vec<f64>> = (0..=CLASSES).map(|_| unit_vector(&mut rng, 4)).collect();
    TextBank::new(Tensor::from_rows(&rows).expect("rows"), (0..CLASSES).map(|c| format!("c{c}")).collect())
        .expect("bank")
}

fn head_store(seed: u64, bank: &TextBank) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = stream(seed, &[1]);
    init_head_params(&mut store, &mut rng, &HeadConfig::default(), DIM, CLASSES);
    init_embed_params(&mut store, &mut rng, 2 * DIM, bank);
    store
}

fn head_term(which: &str, seed: u64) -> Result<GradCheckReport> {
    let bank = bank(seed);
    let store = head_store(seed, &bank);
    let cfg = HeadConfig::default();
    let ecfg = EmbedConfig { k: 4, ..EmbedConfig::default() };
    let mut rng = stream(seed, &[2]);
    let xr = normal_tensor(&mut rng, &[T, DIM], 1.0);
    let xo = normal_tensor(&mut rng, &[T, DIM], 1.0);
    let image = normal_tensor(&mut rng, &[T, bank.dim()], 1.0);
    let noise = draw_noise(&mut rng, ecfg.k, T, bank.dim());
    let weights: Vec<f64> = (0..T * (CLASSES + 1)).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
    let labels = vec![1.0, 0.0];
    let k = cfg.top_k(T);
    grad_check_params(&store, STEP, |g: &mut Graph, p: &Bound| -> Result<Var> {
        let (r, o) = (g.constant(xr.clone()), g.constant(xo.clone()));
        let out = forward_head(g, p, &cfg, r, o, None)?;
        let cls = loss_cls(g, &out.p_base, &out.p_supp, &labels)?;
        let aux = aux_losses(g, out.s_base, out.a, k)?;
        let gv = estimate_gaussian(g, p, out.xb, &ecfg)?;
        let bv = bank_var(g, p, &bank)?;
        Ok(match which {
            "cls" => cls,
            "oppo" => aux.oppo,
            "norm" => aux.norm,
            "guide" => aux.guide,
            "vid" => loss_vid(g, cls, &aux, &VidWeights::default())?,
            "ortho" => loss_ortho(g, bv)?,
            "kd" => {
                let im = g.constant(image.clone());
                loss_kd(g, gv.mu, im, &ecfg)?
            }
            _ => {
                // P-CAS contracted with fixed weights.
                let z = sample_embeddings(g, gv, &noise)?;
                let s = pcas(g, &z, bv, ecfg.tau, ecfg.eps_norm)?;
                let w = g.constant(Tensor::matrix(T, CLASSES + 1, weights.clone())?);
                let prod = g.mul(s, w)?;
                g.sum(prod)?
            }
        })
    })
}

fn random_gaussians(seed: u64, t: usize, d: usize) -> (Tensor, Tensor) {
    let mut rng = stream(seed, &[3]);
    let mu = normal_tensor(&mut rng, &[t, d], 1.0);
    let scale = normal_tensor(&mut rng, &[t, d], 0.3).map(|v| 0.6 + v.abs());
    (mu, scale)
}

fn intra_term(metric: DistanceMetric, seed: u64) -> Result<GradCheckReport> {
    let a = [0.95, 0.9, 0.7, 0.3, 0.2, 0.05];
    let sets = mine_snippets(&a, &MiningConfig { m: 1, big_m: 3, k_easy: Some(1), ..MiningConfig::default() })?;
    let pairs = build_pairs(&sets, &a, 64);
    let (mu, scale) = random_gaussians(seed, a.len(), 3);
    let cfg = IntraConfig { metric, ..IntraConfig::default() };
    grad_check_report(
        |g, v| Ok(loss_intra(g, GaussianVars { mu: v[0], scale: v[1] }, &pairs, &cfg)?.loss),
        &[mu, scale],
        STEP,
    )
}

fn inter_term(seed: u64) -> Result<GradCheckReport> {
    let mut inputs = Vec::new();
    let mut draws = Vec::new();
    let mut rng = stream(seed, &[4]);
    for i in 0..3 {
        let (mu, scale) = random_gaussians(seed * 10 + i, 4, 3);
        let a: Vec<f64> = (0..4).map(|j| 0.2 + 0.15 * j as f64 + 0.05 * i as f64).collect();
        let total: f64 = a.iter().sum();
        let w: Vec<f64> = a.iter().map(|x| x / total).collect();
        draws.push(MixtureDraws::draw(&w, 3, 16, &mut rng)?);
        inputs.extend([mu, scale, Tensor::vector(a)]);
    }
    let h = SimilarityMap::from_labels(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
    grad_check_report(
        |g, v| {
            let mv: Vec<MixtureVars> = (0..3)
                .map(|i| MixtureVars::new(g, GaussianVars { mu: v[3 * i], scale: v[3 * i + 1] }, v[3 * i + 2]))
                .collect::<Result<_>>()?;
            loss_inter(g, &mv, &draws, &h, 1e-6)
        },
        &inputs,
        STEP,
    )
}

fn total_term(seed: u64) -> Result<GradCheckReport> {
    use crate::features::{synthesize_dataset, Subset, SynthConfig};
    let synth = SynthConfig {
        num_classes: 2,
        dim: 8,
        vlp_dim: 8,
        train_videos: 2,
        test_videos: 0,
        snippets_min: 16,
        snippets_max: 16,
        segments_min: 1,
        segments_max: 1,
        segment_len_min: 3,
        segment_len_max: 5,
        ..SynthConfig::default()
    };
    let ds = synthesize_dataset(&synth, seed)?;
    let cfg = TrainConfig {
        t: 8,
        dim: 8,
        vlp_dim: 8,
        num_classes: 2,
        k: 4,
        batch_size: 2,
        m: 1,
        big_m: 3,
        mixture_samples: 8,
        dropout: 0.0,
        seed,
        // Finite differences see through the default stop-gradient.
        dist_to_base: true,
        ..TrainConfig::default()
    };
    let batch: Vec<BatchVideo> = ds
        .subset(Subset::Train)
        .map(|v| BatchVideo::sample::<crate::rng::StreamRng>(v, &cfg, None))
        .collect::<Result<_>>()?;
    let store = init_model(&cfg, &ds.text_bank)?;
    let mut draws: Vec<VideoDraws> = (0..batch.len()).map(|i| VideoDraws::for_step(&cfg, 0, i as u64)).collect();
    {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        total_loss(&mut g, &p, &ds.text_bank, &cfg, &batch, &mut draws)?;
    }
    grad_check_params(&store, STEP, |g, p| {
        let mut d = draws.clone();
        Ok(total_loss(g, p, &ds.text_bank, &cfg, &batch, &mut d)?.loss)
    })
}

/// Term names in suite order.
pub const TERMS: [&str; 13] = [
    "cls",
    "oppo",
    "norm",
    "guide",
    "vid",
    "pcas",
    "ortho",
    "kd",
    "intra_kl",
    "intra_bhattacharyya",
    "intra_mahalanobis",
    "inter",
    "total",
];

/// Checks each term on `instances` random instances starting at `seed`.
pub fn gradient_suite(seed: u64, instances: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    for term in TERMS {
        for s in seed..seed + instances {
            let (report, tolerance) = match term {
                "intra_kl" => (intra_term(DistanceMetric::Kl, s)?, TOL),
                "intra_bhattacharyya" => (intra_term(DistanceMetric::Bhattacharyya, s)?, TOL),
                "intra_mahalanobis" => (intra_term(DistanceMetric::Mahalanobis, s)?, TOL),
                "inter" => (inter_term(s)?, TOL_MC),
                "total" => (total_term(s)?, TOL_MC),
                "pcas" => (head_term(term, s)?, TOL_MC),
                other => (head_term(other, s)?, TOL),
            };
            out.push(SuiteEntry { term: term.to_string(), seed: s, tolerance, report });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_passes() {
        let entries = gradient_suite(0, 1).unwrap();
        assert_eq!(entries.len(), TERMS.len());
        for e in &entries {
            assert!(e.passed(), "{} seed {}: {:?}", e.term, e.seed, e.report);
        }
    }
}
