//! Distribution-level contrastive learning.
//!
//! Distances between diagonal Gaussians, snippet mining by binary morphology
//! of the actionness, the intra-video loss over mined snippet pairs, and the
//! inter-video loss over attention-weighted Gaussian mixtures.

mod distance;
mod intra;
mod mining;
mod mixture;

pub use distance::{
    alt_distance, distance, kl_gaussian, match_probability, pair_distance, sym_kl, DiagGaussian, DistanceMetric,
};
pub use intra::{build_pairs, loss_intra, IntraConfig, IntraLoss, PairSet};
pub use mining::{boundary_regions, dilate, dilate_padded, erode, erode_padded, mine_snippets, MinedSets, MiningConfig};
pub use mixture::{
    loss_inter, mixture_match_probability, mixture_match_value, video_gmm, MixtureDraws, MixtureVars, SimilarityMap,
    VideoMixture,
};
