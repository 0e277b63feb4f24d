use super::config::TrainConfig;
use super::model::forward_video;
use crate::error::Result;
use crate::evaluate::{evaluate_proposals, EvalReport};
use crate::features::{sample_snippets, Dataset, Subset, Video};
use crate::localize::{localize_video, sort_canonical, LocalizeConfig, Proposal, VideoScores};
use crate::numcore::Graph;
use crate::params::ParamStore;
use crate::probembed::{bank_var, draw_noise};
use crate::rng::{purpose, stream, StreamRng};

/// Scores of one video at stratum midpoints, without dropout. P-CAS draws
/// come from the inference stream of `index`.
pub fn infer_video(store: &ParamStore, cfg: &TrainConfig, ds: &Dataset, v: &Video, index: u64) -> Result<VideoScores> {
    let s = sample_snippets::<StreamRng>(&v.features, cfg.t, None)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let bank = bank_var(&mut g, &p, &ds.text_bank)?;
    let noise = draw_noise(&mut stream(cfg.seed, &[purpose::INFERENCE, index]), cfg.k, cfg.t, cfg.vlp_dim);
    let f = forward_video(&mut g, &p, bank, cfg, &s.rgb, &s.flow, None, &noise)?;
    Ok(VideoScores {
        video_id: v.id().to_string(),
        s_supp: g.value(f.head.s_supp).clone(),
        s_prob: g.value(f.s_prob).clone(),
        actionness: g.value(f.head.a).data().to_vec(),
        p_supp: g.value(f.head.p_supp.probs).data().to_vec(),
        index_map: s.index_map,
        duration: v.features.duration,
    })
}

/// Proposals for every video of `subset` (all videos when `None`), in
/// canonical order. The inference stream index is the video's position in
/// the dataset.
pub fn localize_dataset(
    store: &ParamStore,
    cfg: &TrainConfig,
    ds: &Dataset,
    subset: Option<Subset>,
    loc: &LocalizeConfig,
) -> Result<Vec<Proposal>> {
    let mut out = Vec::new();
    for (i, v) in ds.videos.iter().enumerate() {
        if subset.is_some_and(|s| v.subset != s) {
            continue;
        }
        let scores = infer_video(store, cfg, ds, v, i as u64)?;
        out.extend(localize_video(&scores, loc)?);
    }
    sort_canonical(&mut out);
    Ok(out)
}

/// Localizes `subset` and scores it against the dataset's own annotations.
pub fn evaluate_model(
    store: &ParamStore,
    cfg: &TrainConfig,
    ds: &Dataset,
    subset: Subset,
    loc: &LocalizeConfig,
    thresholds: &[f64],
) -> Result<(Vec<Proposal>, EvalReport)> {
    let props = localize_dataset(store, cfg, ds, Some(subset), loc)?;
    let report = evaluate_proposals(&props, &ds.ground_truth(Some(subset)), thresholds)?;
    Ok((props, report))
}
