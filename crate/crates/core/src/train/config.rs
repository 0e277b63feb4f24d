use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distlearn::{DistanceMetric, IntraConfig, MiningConfig};
use crate::error::{Error, Result};
use crate::milhead::{HeadConfig, VidWeights};
use crate::probembed::EmbedConfig;

/// Every knob of a training run. Keys are flat so that a config file and
/// `key=value` overrides address the same names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Snippets sampled per video.
    pub t: usize,
    pub dim: usize,
    pub vlp_dim: usize,
    pub num_classes: usize,
    /// P-CAS samples per snippet; 0 is the deterministic CAS.
    pub k: usize,
    pub tau: f64,
    pub lambda_cls: f64,
    pub lambda_oppo: f64,
    pub lambda_norm: f64,
    pub lambda_guide: f64,
    /// Weight of the top-k classification loss on the P-CAS, counted in `L_vid`.
    pub lambda_prob: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Back-propagate `L_intra` and `L_inter` into the fused base features.
    /// Off by default: the distribution losses then train the embedding heads
    /// and, through the mixture weights, the attention.
    pub dist_to_base: bool,
    pub theta_b: f64,
    pub m: usize,
    pub big_m: usize,
    pub k_easy: Option<usize>,
    pub n_pair_max: usize,
    /// Samples per video for the mixture divergence.
    pub mixture_samples: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub metric: DistanceMetric,
    pub dropout: f64,
    pub k_ratio_denominator: usize,
    pub eps_sigma: f64,
    pub eps_log: f64,
    pub eps_norm: f64,
    /// Held-out evaluation period in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let e = EmbedConfig::default();
        let w = VidWeights::default();
        let mining = MiningConfig::default();
        Self {
            t: 64,
            dim: 16,
            vlp_dim: 16,
            num_classes: 4,
            k: e.k,
            tau: e.tau,
            lambda_cls: w.cls,
            lambda_oppo: w.oppo,
            lambda_norm: w.norm,
            lambda_guide: w.guide,
            lambda_prob: 1.0,
            alpha: 1.0,
            beta: 0.1,
            gamma: 0.5,
            dist_to_base: false,
            theta_b: mining.theta_b,
            m: mining.m,
            big_m: mining.big_m,
            k_easy: mining.k_easy,
            n_pair_max: IntraConfig::default().n_pair_max,
            mixture_samples: 32,
            batch_size: 8,
            lr: 1e-4,
            steps: 3000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            metric: DistanceMetric::Kl,
            dropout: 0.5,
            k_ratio_denominator: 8,
            eps_sigma: e.eps_sigma,
            eps_log: e.eps_log,
            eps_norm: e.eps_norm,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t == 0 || self.dim == 0 || self.vlp_dim == 0 || self.num_classes == 0 {
            return bad("t, dim, vlp_dim and num_classes must be positive".into());
        }
        let weights = [
            ("lambda_cls", self.lambda_cls),
            ("lambda_oppo", self.lambda_oppo),
            ("lambda_norm", self.lambda_norm),
            ("lambda_guide", self.lambda_guide),
            ("lambda_prob", self.lambda_prob),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.gamma > 0.0 && self.batch_size < 2 {
            return bad("gamma > 0 needs batch_size >= 2 for the inter-video loss".into());
        }
        if self.gamma > 0.0 && self.mixture_samples == 0 {
            return bad("gamma > 0 needs mixture_samples >= 1".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad(format!("lr {} betas ({}, {})", self.lr, self.adam_beta1, self.adam_beta2));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps {}", self.adam_eps));
        }
        self.head().validate()?;
        self.embed().validate()?;
        self.mining().validate()
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig { dropout: self.dropout, k_ratio_denominator: self.k_ratio_denominator, ..HeadConfig::default() }
    }

    pub fn embed(&self) -> EmbedConfig {
        EmbedConfig { k: self.k, tau: self.tau, eps_sigma: self.eps_sigma, eps_log: self.eps_log, eps_norm: self.eps_norm }
    }

    pub fn mining(&self) -> MiningConfig {
        MiningConfig { theta_b: self.theta_b, m: self.m, big_m: self.big_m, k_easy: self.k_easy }
    }

    pub fn intra(&self) -> IntraConfig {
        IntraConfig { metric: self.metric, n_pair_max: self.n_pair_max, eps_log: self.eps_log }
    }

    pub fn vid_weights(&self) -> VidWeights {
        VidWeights { cls: self.lambda_cls, oppo: self.lambda_oppo, norm: self.lambda_norm, guide: self.lambda_guide }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let cfg = apply_overrides(self, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Reads a TOML file into any config type.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

/// Returns `value` with the keys of a TOML file laid over it.
pub fn merge_toml<T>(value: &T, path: &Path) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = to_table(value)?;
    table.extend(read_toml::<toml::Table>(path)?);
    table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))
}

/// Returns `value` with `key=value` overrides applied to its flat TOML form.
/// Values parse as TOML, falling back to a bare string (`metric=kl`).
pub fn apply_overrides<T, S>(value: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned,
    S: AsRef<str>,
{
    let mut table = to_table(value)?;
    for o in overrides {
        let o = o.as_ref();
        let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        let raw = raw.trim();
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.trim().to_string(), parsed);
    }
    table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig { k_easy: Some(5), metric: DistanceMetric::Mahalanobis, ..TrainConfig::default() };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(TrainConfig::from_toml("steps = 3\nlearning_rate = 0.1\n").is_err());
        assert_eq!(TrainConfig::from_toml("steps = 3\n").unwrap().steps, 3);
    }

    #[test]
    fn overrides_parse_numbers_and_bare_strings() {
        let cfg = TrainConfig::default().with_overrides(&["k=5", "metric=bhattacharyya", "lr = 0.01"]).unwrap();
        assert_eq!((cfg.k, cfg.metric, cfg.lr), (5, DistanceMetric::Bhattacharyya, 0.01));
        assert!(TrainConfig::default().with_overrides(&["nonsense=1"]).is_err());
        assert!(TrainConfig::default().with_overrides(&["k"]).is_err());
    }

    #[test]
    fn file_keys_lay_over_existing_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "steps = 7\nmetric = \"mahalanobis\"\n").unwrap();
        let base = TrainConfig { dim: 9, ..TrainConfig::default() };
        let cfg = merge_toml(&base, &path).unwrap();
        assert_eq!((cfg.dim, cfg.steps, cfg.metric), (9, 7, DistanceMetric::Mahalanobis));
        std::fs::write(&path, "stpes = 7\n").unwrap();
        assert!(merge_toml(&base, &path).is_err());
    }

    #[test]
    fn inter_loss_needs_two_videos() {
        let cfg = TrainConfig { batch_size: 1, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
        assert!(TrainConfig { gamma: 0.0, ..cfg }.validate().is_ok());
        assert!(TrainConfig { alpha: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        assert_eq!(a.hash(), a.clone().hash());
        assert_eq!(a.hash().len(), 64);
        assert_ne!(a.hash(), TrainConfig { k: 5, ..a }.hash());
    }
}
