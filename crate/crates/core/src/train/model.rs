use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::distlearn::{build_pairs, loss_inter, loss_intra, mine_snippets, MixtureDraws, MixtureVars, SimilarityMap};
use crate::error::{Error, Result};
use crate::features::{sample_snippets, TextBank, Video};
use crate::milhead::{aux_losses, dropout_masks, forward_head, init_head_params, loss_cls, loss_vid, video_predict, HeadOutputs};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::probembed::{
    bank_var, draw_noise, estimate_gaussian, init_embed_params, loss_kd, loss_ortho, pcas, sample_embeddings,
    GaussianVars,
};
use crate::rng::{purpose, stream, StreamRng};

/// Fresh parameters for the head, the Gaussian adapters and the background row.
pub fn init_model(cfg: &TrainConfig, bank: &TextBank) -> Result<ParamStore> {
    if bank.num_classes() != cfg.num_classes || bank.dim() != cfg.vlp_dim {
        return Err(Error::Config(format!(
            "config has {} classes of dim {}, text bank {} of dim {}",
            cfg.num_classes,
            cfg.vlp_dim,
            bank.num_classes(),
            bank.dim()
        )));
    }
    let mut rng = stream(cfg.seed, &[purpose::INIT]);
    let mut store = ParamStore::new();
    init_head_params(&mut store, &mut rng, &cfg.head(), cfg.dim, cfg.num_classes);
    init_embed_params(&mut store, &mut rng, 2 * cfg.dim, bank);
    Ok(store)
}

/// One training video after temporal sampling.
#[derive(Clone, Debug)]
pub struct BatchVideo {
    pub rgb: Tensor,
    pub flow: Tensor,
    pub image: Tensor,
    pub labels: Vec<f64>,
}

impl BatchVideo {
    pub fn sample<R: Rng + ?Sized>(v: &Video, cfg: &TrainConfig, rng: Option<&mut R>) -> Result<Self> {
        let s = sample_snippets(&v.features, cfg.t, rng)?;
        Ok(Self { rgb: s.rgb, flow: s.flow, image: s.vlp_image, labels: v.label_vector(cfg.num_classes) })
    }
}

/// Random draws consumed by one video's forward pass. Mixture components
/// depend on the attention, so they are drawn lazily from `mixture_rng` and
/// then kept; a filled set replays the same pass exactly.
#[derive(Clone, Debug)]
pub struct VideoDraws {
    pub masks: Option<Vec<Tensor>>,
    pub noise: Vec<Tensor>,
    pub mixture: Option<MixtureDraws>,
    pub mixture_rng: StreamRng,
}

impl VideoDraws {
    /// Draws for video slot `slot` of training step `step`.
    pub fn for_step(cfg: &TrainConfig, step: u64, slot: u64) -> Self {
        let head = cfg.head();
        let masks = (head.dropout > 0.0)
            .then(|| dropout_masks(&mut stream(cfg.seed, &[purpose::DROPOUT, step, slot]), &head, cfg.t, cfg.dim));
        let noise = draw_noise(&mut stream(cfg.seed, &[purpose::EMBED, step, slot]), cfg.k, cfg.t, cfg.vlp_dim);
        Self { masks, noise, mixture: None, mixture_rng: stream(cfg.seed, &[purpose::MIXTURE, step, slot]) }
    }
}

/// Graph outputs of one video.
#[derive(Clone, Copy, Debug)]
pub struct VideoForward {
    pub head: HeadOutputs,
    pub gaussians: GaussianVars,
    pub s_prob: Var,
}

/// Head, Gaussian adapters and P-CAS for one video. `noise` holds the P-CAS
/// draws; an empty slice gives the deterministic CAS of the means.
pub fn forward_video(
    g: &mut Graph,
    p: &Bound,
    bank: Var,
    cfg: &TrainConfig,
    xr: &Tensor,
    xo: &Tensor,
    masks: Option<&[Tensor]>,
    noise: &[Tensor],
) -> Result<VideoForward> {
    let (r, o) = (g.constant(xr.clone()), g.constant(xo.clone()));
    let head = forward_head(g, p, &cfg.head(), r, o, masks)?;
    let gaussians = estimate_gaussian(g, p, head.xb, &cfg.embed())?;
    let s_prob = if noise.is_empty() {
        pcas(g, &[gaussians.mu], bank, cfg.tau, cfg.eps_norm)?
    } else {
        let z = sample_embeddings(g, gaussians, noise)?;
        pcas(g, &z, bank, cfg.tau, cfg.eps_norm)?
    };
    Ok(VideoForward { head, gaussians, s_prob })
}

/// Per-term values of the objective. Terms whose weight is zero and whose
/// evaluation is expensive are skipped (`None`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub vid: f64,
    pub cls: f64,
    pub oppo: f64,
    pub norm: f64,
    pub guide: f64,
    pub cls_prob: f64,
    pub kd: f64,
    pub ortho: f64,
    pub intra: Option<f64>,
    pub inter: Option<f64>,
}

impl LossBreakdown {
    pub const COLUMNS: [&'static str; 11] =
        ["total", "vid", "cls", "oppo", "norm", "guide", "cls_prob", "kd", "ortho", "intra", "inter"];

    pub fn values(&self) -> [Option<f64>; 11] {
        [
            Some(self.total),
            Some(self.vid),
            Some(self.cls),
            Some(self.oppo),
            Some(self.norm),
            Some(self.guide),
            Some(self.cls_prob),
            Some(self.kd),
            Some(self.ortho),
            self.intra,
            self.inter,
        ]
    }

    /// Recombines the terms with the config weights.
    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        self.vid
            + cfg.alpha * self.kd
            + cfg.beta * self.ortho
            + cfg.gamma * (self.intra.unwrap_or(0.0) + self.inter.unwrap_or(0.0))
    }
}

pub struct TotalLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let parts: Vec<Var> = terms.iter().map(|&v| g.reshape(v, &[1, 1])).collect::<std::result::Result<_, _>>()?;
    let all = g.concat(&parts, 0)?;
    Ok(g.mean(all)?)
}

/// `L_vid + alpha L_kd + beta L_ortho + gamma (L_intra + L_inter)` over a batch.
///
/// `L_vid` and `L_kd` are batch means; `L_intra` averages the videos that
/// yield both positive and negative pairs. `draws` must hold one entry per
/// video; missing mixture draws are filled in place.
pub fn total_loss(
    g: &mut Graph,
    p: &Bound,
    bank: &TextBank,
    cfg: &TrainConfig,
    batch: &[BatchVideo],
    draws: &mut [VideoDraws],
) -> Result<TotalLoss> {
    if batch.is_empty() || draws.len() != batch.len() {
        return Err(Error::Shape(format!("{} videos with {} draw sets", batch.len(), draws.len())));
    }
    let head_cfg = cfg.head();
    let k_top = head_cfg.top_k(cfg.t);
    let bank_v = bank_var(g, p, bank)?;
    let use_dist = cfg.gamma > 0.0;

    let (mut vid, mut cls, mut oppo, mut norm, mut guide, mut cls_prob, mut kd) =
        (vec![], vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut intra = vec![];
    let mut mixtures = vec![];
    for (v, d) in batch.iter().zip(draws.iter_mut()) {
        let f = forward_video(g, p, bank_v, cfg, &v.rgb, &v.flow, d.masks.as_deref(), &d.noise)?;
        let h = f.head;
        let l_cls = loss_cls(g, &h.p_base, &h.p_supp, &v.labels)?;
        let aux = aux_losses(g, h.s_base, h.a, k_top)?;
        let base = loss_vid(g, l_cls, &aux, &cfg.vid_weights())?;
        let prob_supp = g.scale_rows(f.s_prob, h.a)?;
        let pb = video_predict(g, f.s_prob, k_top)?;
        let ps = video_predict(g, prob_supp, k_top)?;
        let l_prob = loss_cls(g, &pb, &ps, &v.labels)?;
        let weighted = g.scale(l_prob, cfg.lambda_prob)?;
        vid.push(g.add(base, weighted)?);
        cls.push(l_cls);
        oppo.push(aux.oppo);
        norm.push(aux.norm);
        guide.push(aux.guide);
        cls_prob.push(l_prob);
        let image = g.constant(v.image.clone());
        kd.push(loss_kd(g, f.gaussians.mu, image, &cfg.embed())?);

        if use_dist {
            let a_vals = g.value(h.a).data().to_vec();
            let sets = mine_snippets(&a_vals, &cfg.mining())?;
            let pairs = build_pairs(&sets, &a_vals, cfg.n_pair_max);
            // The distribution losses see the fused features as constants
            // unless configured otherwise; mining from an untrained attention
            // otherwise drags the shared features into a collapsed attention.
            let gaussians = if cfg.dist_to_base {
                f.gaussians
            } else {
                let xb = g.constant(g.value(h.xb).clone());
                estimate_gaussian(g, p, xb, &cfg.embed())?
            };
            let li = loss_intra(g, gaussians, &pairs, &cfg.intra())?;
            if !li.empty {
                intra.push(li.loss);
            }
            if d.mixture.is_none() {
                let total: f64 = a_vals.iter().sum();
                let w: Vec<f64> = a_vals.iter().map(|x| x / total).collect();
                d.mixture = Some(MixtureDraws::draw(&w, cfg.vlp_dim, cfg.mixture_samples, &mut d.mixture_rng)?);
            }
            mixtures.push(MixtureVars::new(g, gaussians, h.a)?);
        }
    }

    let vid = mean_of(g, &vid)?;
    let kd = mean_of(g, &kd)?;
    let ortho = loss_ortho(g, bank_v)?;
    let mut total = g.scale(kd, cfg.alpha)?;
    total = g.add(vid, total)?;
    let o = g.scale(ortho, cfg.beta)?;
    total = g.add(total, o)?;

    let (mut intra_v, mut inter_v) = (None, None);
    if use_dist {
        let li = if intra.is_empty() { g.constant(Tensor::scalar(0.0)) } else { mean_of(g, &intra)? };
        let labels: Vec<Vec<f64>> = batch.iter().map(|v| v.labels.clone()).collect();
        let mix_draws: Vec<MixtureDraws> = draws.iter().map(|d| d.mixture.clone().expect("filled above")).collect();
        let le = loss_inter(g, &mixtures, &mix_draws, &SimilarityMap::from_labels(&labels), cfg.eps_log)?;
        let s = g.add(li, le)?;
        let s = g.scale(s, cfg.gamma)?;
        total = g.add(total, s)?;
        intra_v = Some(g.scalar(li)?);
        inter_v = Some(g.scalar(le)?);
    }

    let mut avg = |terms: &[Var]| -> Result<f64> {
        let m = mean_of(g, terms)?;
        Ok(g.scalar(m)?)
    };
    let breakdown = LossBreakdown {
        total: 0.0,
        vid: 0.0,
        cls: avg(&cls)?,
        oppo: avg(&oppo)?,
        norm: avg(&norm)?,
        guide: avg(&guide)?,
        cls_prob: avg(&cls_prob)?,
        kd: 0.0,
        ortho: 0.0,
        intra: intra_v,
        inter: inter_v,
    };
    let breakdown = LossBreakdown {
        total: g.scalar(total)?,
        vid: g.scalar(vid)?,
        kd: g.scalar(kd)?,
        ortho: g.scalar(ortho)?,
        ..breakdown
    };
    Ok(TotalLoss { loss: total, breakdown })
}
