use rand::Rng;

use super::types::SnippetFeatureBundle;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// How sampled positions relate to the raw snippets they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct SnippetIndexMap {
    pub raw_len: usize,
    /// Raw snippet index picked for each sampled position.
    pub picked: Vec<usize>,
    /// Half-open raw range `[start, end)` each sampled position stands for.
    pub strata: Vec<(usize, usize)>,
    pub seconds_per_snippet: f64,
}

impl SnippetIndexMap {
    pub fn len(&self) -> usize {
        self.picked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.picked.is_empty()
    }

    /// Time span in seconds covered by sampled positions `first..=last`.
    pub fn span_seconds(&self, first: usize, last: usize) -> (f64, f64) {
        (
            self.strata[first].0 as f64 * self.seconds_per_snippet,
            self.strata[last].1 as f64 * self.seconds_per_snippet,
        )
    }

    /// Start time of raw snippet `i`.
    pub fn raw_to_seconds(&self, i: usize) -> f64 {
        i as f64 * self.seconds_per_snippet
    }

    /// Raw snippet containing time `t`.
    pub fn seconds_to_raw(&self, t: f64) -> usize {
        let i = (t / self.seconds_per_snippet + 1e-9).floor().max(0.0) as usize;
        i.min(self.raw_len.saturating_sub(1))
    }
}

#[derive(Clone, Debug)]
pub struct SampledSnippets {
    pub rgb: Tensor,
    pub flow: Tensor,
    pub vlp_image: Tensor,
    pub index_map: SnippetIndexMap,
}

/// Splits `raw_len` snippets into `t` strata. When `t > raw_len` strata
/// repeat raw snippets.
pub fn strata(raw_len: usize, t: usize) -> Vec<(usize, usize)> {
    (0..t)
        .map(|i| {
            let a = i * raw_len / t;
            let b = ((i + 1) * raw_len / t).max(a + 1).min(raw_len.max(a + 1));
            (a.min(raw_len - 1), b)
        })
        .collect()
}

/// Inference-time positions: the midpoint of each stratum.
pub fn midpoint_indices(raw_len: usize, t: usize) -> Vec<usize> {
    (0..t).map(|i| (((2 * i + 1) * raw_len) / (2 * t)).min(raw_len - 1)).collect()
}

/// Draws `t` snippets: stratum midpoints when `rng` is `None`, otherwise one
/// uniform draw inside each stratum.
pub fn sample_snippets<R: Rng + ?Sized>(
    bundle: &SnippetFeatureBundle,
    t: usize,
    rng: Option<&mut R>,
) -> Result<SampledSnippets> {
    let raw_len = bundle.num_snippets();
    if raw_len == 0 {
        return Err(Error::Data(format!("{}: empty feature bundle", bundle.video_id)));
    }
    if t == 0 {
        return Err(Error::Config("snippet count T must be at least 1".into()));
    }
    let strata = strata(raw_len, t);
    let picked = match rng {
        None => midpoint_indices(raw_len, t),
        Some(rng) => strata.iter().map(|&(a, b)| rng.random_range(a..b.max(a + 1))).collect(),
    };
    Ok(SampledSnippets {
        rgb: bundle.rgb.select_rows(&picked),
        flow: bundle.flow.select_rows(&picked),
        vlp_image: bundle.vlp_image.select_rows(&picked),
        index_map: SnippetIndexMap {
            raw_len,
            picked,
            strata,
            seconds_per_snippet: bundle.seconds_per_snippet(),
        },
    })
}
