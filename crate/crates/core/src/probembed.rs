//! Probabilistic snippet embeddings.
//!
//! Each snippet of the fused feature is mapped to a diagonal Gaussian in the
//! vision-language space. Sampled embeddings are compared with the category
//! bank by cosine similarity to form the probabilistic CAS (P-CAS).

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TextBank;
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::rng::normal_tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// Samples per snippet; 0 gives the deterministic CAS `cos(mu, x_c) / tau`.
    pub k: usize,
    pub tau: f64,
    pub eps_sigma: f64,
    pub eps_log: f64,
    pub eps_norm: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { k: 20, tau: 0.07, eps_sigma: 1e-4, eps_log: 1e-6, eps_norm: 1e-8 }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {}", self.tau)));
        }
        for (name, v) in [("eps_sigma", self.eps_sigma), ("eps_log", self.eps_log), ("eps_norm", self.eps_norm)] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} {v}")));
            }
        }
        Ok(())
    }
}

/// Per-snippet diagonal Gaussians. `scale` holds standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSequence {
    /// `[T, D_v]`
    pub mu: Tensor,
    /// `[T, D_v]`, strictly positive.
    pub scale: Tensor,
}

impl GaussianSequence {
    pub fn new(mu: Tensor, scale: Tensor) -> Result<Self> {
        if mu.ndim() != 2 || mu.shape() != scale.shape() {
            return Err(Error::Shape(format!("mu {:?} vs scale {:?}", mu.shape(), scale.shape())));
        }
        if !mu.is_finite() || !scale.is_finite() {
            return Err(Error::NonFinite("gaussian sequence".into()));
        }
        if scale.data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Data("non-positive scale".into()));
        }
        Ok(Self { mu, scale })
    }

    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }
}

/// Graph handles of a [`GaussianSequence`].
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mu: Var,
    pub scale: Var,
}

impl GaussianVars {
    pub fn constant(g: &mut Graph, s: &GaussianSequence) -> Self {
        Self { mu: g.constant(s.mu.clone()), scale: g.constant(s.scale.clone()) }
    }

    pub fn values(&self, g: &Graph) -> GaussianSequence {
        GaussianSequence { mu: g.value(self.mu).clone(), scale: g.value(self.scale).clone() }
    }
}

/// Scores of the probabilistic CAS.
#[derive(Clone, Debug, PartialEq)]
pub struct PCas {
    /// `[T, C + 1]`
    pub scores: Tensor,
    pub k: usize,
    pub tau: f64,
}

/// Adds the mean and scale adapters (`embed.mu`, `embed.sigma`) mapping
/// `in_dim` fused features to `dv` dimensions, and the trainable background
/// row `bank.background` initialised from `bank`.
pub fn init_embed_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, in_dim: usize, bank: &TextBank) {
    let dv = bank.dim();
    store.init_linear(rng, "embed.mu", in_dim, dv, 0.0);
    // Scales start near 1; much smaller scales put snippet divergences where exp(-D) underflows eps.
    store.insert("embed.sigma.w", normal_tensor(rng, &[in_dim, dv], 0.1 / (in_dim as f64).sqrt()));
    store.insert("embed.sigma.b", Tensor::filled(vec![dv], 1.0));
    store.insert("bank.background", bank.background_row());
}

/// `mu = g_mu(x)`, `scale = max(relu(g_sigma(x)), eps_sigma)`.
pub fn estimate_gaussian(g: &mut Graph, p: &Bound, xb: Var, cfg: &EmbedConfig) -> Result<GaussianVars> {
    let h = g.matmul(xb, p.get("embed.mu.w")?)?;
    let mu = g.add_bias(h, p.get("embed.mu.b")?)?;
    let h = g.matmul(xb, p.get("embed.sigma.w")?)?;
    let h = g.add_bias(h, p.get("embed.sigma.b")?)?;
    // relu followed by the floor is a single clamp at eps_sigma > 0.
    let scale = g.clamp_min(h, cfg.eps_sigma)?;
    Ok(GaussianVars { mu, scale })
}

/// The bank `[C + 1, D_v]`: frozen action rows and the bound background row.
pub fn bank_var(g: &mut Graph, p: &Bound, bank: &TextBank) -> Result<Var> {
    let actions = g.constant(bank.action_rows());
    let bg = p.get("bank.background")?;
    Ok(g.concat(&[actions, bg], 0)?)
}

/// Standard normal draws `eps^(k)`, one `[T, D_v]` matrix per sample.
pub fn draw_noise<R: Rng + ?Sized>(rng: &mut R, k: usize, t: usize, dv: usize) -> Vec<Tensor> {
    (0..k).map(|_| normal_tensor(rng, &[t, dv], 1.0)).collect()
}

/// `z^(k) = mu + eps^(k) * scale`; the draws enter the tape as constants.
pub fn sample_embeddings(g: &mut Graph, gv: GaussianVars, noise: &[Tensor]) -> Result<Vec<Var>> {
    noise
        .iter()
        .map(|eps| {
            let e = g.constant(eps.clone());
            let d = g.mul(e, gv.scale)?;
            Ok(g.add(gv.mu, d)?)
        })
        .collect()
}

/// Value-level sampling: `k` matrices `[T, D_v]`.
pub fn sample_values<R: Rng + ?Sized>(s: &GaussianSequence, k: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    draw_noise(rng, k, s.len(), s.dim())
        .into_iter()
        .map(|eps| {
            let d = eps.zip_map(&s.scale, |e, sc| e * sc)?;
            Ok(s.mu.zip_map(&d, |m, v| m + v)?)
        })
        .collect()
}

fn flag_small_norms(t: &Tensor, eps: f64, what: &str) {
    let n = (0..t.rows()).filter(|&r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() < eps).count();
    if n > 0 {
        warn!("{n} {what} rows below norm {eps}; norms clamped");
    }
}

/// `s(t, c) = mean_k cos(z_t^(k), x_c) / tau` over the given samples.
pub fn pcas(g: &mut Graph, samples: &[Var], bank: Var, tau: f64, eps_norm: f64) -> Result<Var> {
    if samples.is_empty() {
        return Err(Error::Config("P-CAS needs at least one sample".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau {tau}")));
    }
    flag_small_norms(g.value(bank), eps_norm, "bank");
    let mut acc: Option<Var> = None;
    for &z in samples {
        flag_small_norms(g.value(z), eps_norm, "sample");
        let c = g.cosine_rows(z, bank, eps_norm)?;
        acc = Some(match acc {
            None => c,
            Some(a) => g.add(a, c)?,
        });
    }
    let total = acc.expect("nonempty");
    Ok(g.scale(total, 1.0 / (samples.len() as f64 * tau))?)
}

/// P-CAS with `cfg.k` fresh draws from `rng`, or the deterministic CAS of the
/// means when `cfg.k == 0`.
pub fn prob_cas<R: Rng + ?Sized>(
    g: &mut Graph,
    gv: GaussianVars,
    bank: Var,
    cfg: &EmbedConfig,
    rng: &mut R,
) -> Result<Var> {
    if cfg.k == 0 {
        return pcas(g, &[gv.mu], bank, cfg.tau, cfg.eps_norm);
    }
    let (t, dv) = (g.value(gv.mu).rows(), g.value(gv.mu).cols());
    let noise = draw_noise(rng, cfg.k, t, dv);
    let z = sample_embeddings(g, gv, &noise)?;
    pcas(g, &z, bank, cfg.tau, cfg.eps_norm)
}

/// Value-level P-CAS from pre-drawn samples.
pub fn pcas_values(samples: &[Tensor], bank: &Tensor, tau: f64, eps_norm: f64) -> Result<PCas> {
    let mut g = Graph::new();
    let z: Vec<Var> = samples.iter().map(|s| g.constant(s.clone())).collect();
    let b = g.constant(bank.clone());
    let s = pcas(&mut g, &z, b, tau, eps_norm)?;
    Ok(PCas { scores: g.value(s).clone(), k: samples.len(), tau })
}

/// `||X X^T - I||_F^2` over the rows of the bank.
pub fn loss_ortho(g: &mut Graph, bank: Var) -> Result<Var> {
    let n = g.value(bank).rows();
    let bt = g.transpose(bank)?;
    let gram = g.matmul(bank, bt)?;
    let eye = g.constant(Tensor::identity(n));
    let d = g.sub(gram, eye)?;
    let sq = g.square(d)?;
    Ok(g.sum(sq)?)
}

/// `-(1/T) sum_t ln(0.5 (cos(mu_t, x_t) + 1) + eps_log)`.
pub fn loss_kd(g: &mut Graph, mu: Var, image: Var, cfg: &EmbedConfig) -> Result<Var> {
    let (a, b) = (g.value(mu).shape().to_vec(), g.value(image).shape().to_vec());
    if a != b {
        return Err(Error::Shape(format!("means {a:?} vs image features {b:?}")));
    }
    let c = g.cosine_paired(mu, image, cfg.eps_norm)?;
    let c = g.add_scalar(c, 1.0)?;
    let c = g.scale(c, 0.5)?;
    let c = g.add_scalar(c, cfg.eps_log)?;
    let l = g.ln(c)?;
    let m = g.mean(l)?;
    Ok(g.neg(m)?)
}
