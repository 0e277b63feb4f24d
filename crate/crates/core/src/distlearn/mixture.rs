use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::probembed::{GaussianSequence, GaussianVars};
use crate::rng::normal_tensor;

/// Attention-weighted mixture of a video's snippet Gaussians.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoMixture {
    pub components: GaussianSequence,
    pub weights: Vec<f64>,
}

impl VideoMixture {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Draws `s` samples: a component index per sample and standard normal noise.
    pub fn draw<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<MixtureDraws> {
        MixtureDraws::draw(&self.weights, self.components.dim(), s, rng)
    }
}

fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    if a.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Data("mixture weights must be finite and nonnegative".into()));
    }
    let total: f64 = a.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Data("all-zero attention".into()));
    }
    Ok(a.iter().map(|v| v / total).collect())
}

/// Mixture with weights `a / sum(a)`.
pub fn video_gmm(s: &GaussianSequence, a: &[f64]) -> Result<VideoMixture> {
    if a.len() != s.len() {
        return Err(Error::Shape(format!("{} weights for {} snippets", a.len(), s.len())));
    }
    Ok(VideoMixture { components: s.clone(), weights: normalized(a)? })
}

/// Pre-drawn randomness for sampling a mixture: the component of each sample
/// and `[S, D]` standard normal noise.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDraws {
    pub components: Vec<usize>,
    pub eps: Tensor,
}

impl MixtureDraws {
    pub fn draw<R: Rng + ?Sized>(weights: &[f64], dim: usize, s: usize, rng: &mut R) -> Result<Self> {
        if s == 0 {
            return Err(Error::Config("mixture sample count must be at least 1".into()));
        }
        let pick = WeightedIndex::new(weights).map_err(|e| Error::Data(format!("mixture weights: {e}")))?;
        let components = (0..s).map(|_| pick.sample(rng)).collect();
        Ok(Self { components, eps: normal_tensor(rng, &[s, dim], 1.0) })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// Graph handles of a mixture; `log_w` is `[T]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureVars {
    pub mu: Var,
    pub scale: Var,
    pub log_w: Var,
}

impl MixtureVars {
    /// Mixture of `gv` with weights `a / sum(a)`, differentiable in `a`.
    pub fn new(g: &mut Graph, gv: GaussianVars, a: Var) -> Result<Self> {
        let t = g.value(gv.mu).rows();
        if g.value(a).numel() != t {
            return Err(Error::Shape(format!("{:?} weights for {t} snippets", g.value(a).shape())));
        }
        normalized(g.value(a).data())?;
        let la = g.ln(a)?;
        let la = g.reshape(la, &[t, 1])?;
        let total = g.sum(a)?;
        let lt = g.ln(total)?;
        let lt = g.neg(lt)?;
        let lt = g.reshape(lt, &[1])?;
        let lw = g.add_bias(la, lt)?;
        let log_w = g.reshape(lw, &[t])?;
        Ok(Self { mu: gv.mu, scale: gv.scale, log_w })
    }

    pub fn constant(g: &mut Graph, m: &VideoMixture) -> Result<Self> {
        let gv = GaussianVars::constant(g, &m.components);
        let a = g.constant(Tensor::vector(m.weights.clone()));
        Self::new(g, gv, a)
    }

    /// Reparameterized samples `[S, D]`; component choices stay fixed.
    pub fn sample(&self, g: &mut Graph, draws: &MixtureDraws) -> Result<Var> {
        let t = g.value(self.mu).rows();
        if draws.components.iter().any(|&c| c >= t) || draws.eps.cols() != g.value(self.mu).cols() {
            return Err(Error::Shape("mixture draws do not fit the mixture".into()));
        }
        let m = g.gather_rows(self.mu, &draws.components)?;
        let s = g.gather_rows(self.scale, &draws.components)?;
        let e = g.constant(draws.eps.clone());
        let d = g.mul(e, s)?;
        Ok(g.add(m, d)?)
    }

    /// `log p(z)` for each row of `z`, giving `[S]`.
    pub fn log_density(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let lp = g.gauss_logpdf(z, self.mu, self.scale)?;
        let lp = g.add_bias(lp, self.log_w)?;
        Ok(g.logsumexp_rows(lp)?)
    }
}

/// Samples of one mixture with their log-density under that mixture.
struct Sampled {
    z: Var,
    self_logp: Var,
}

fn sampled(g: &mut Graph, m: &MixtureVars, d: &MixtureDraws) -> Result<Sampled> {
    let z = m.sample(g, d)?;
    let self_logp = m.log_density(g, z)?;
    Ok(Sampled { z, self_logp })
}

/// `mean_s [log p_a(z_s) - log p_b(z_s)]` with `z_s` drawn from `a`.
fn kl_estimate(g: &mut Graph, a: &Sampled, b: &MixtureVars) -> Result<Var> {
    let lb = b.log_density(g, a.z)?;
    let d = g.sub(a.self_logp, lb)?;
    Ok(g.mean(d)?)
}

fn match_from(g: &mut Graph, sa: &Sampled, a: &MixtureVars, sb: &Sampled, b: &MixtureVars) -> Result<Var> {
    let ab = kl_estimate(g, sa, b)?;
    let ba = kl_estimate(g, sb, a)?;
    let s = g.add(ab, ba)?;
    let s = g.scale(s, 0.5)?;
    let s = g.clamp_min(s, 0.0)?;
    let s = g.neg(s)?;
    Ok(g.exp(s)?)
}

/// `exp(-D)` with `D` the Monte-Carlo symmetrized KL between two mixtures,
/// clamped at zero. `da` samples `a`, `db` samples `b`.
pub fn mixture_match_probability(
    g: &mut Graph,
    a: &MixtureVars,
    b: &MixtureVars,
    da: &MixtureDraws,
    db: &MixtureDraws,
) -> Result<Var> {
    let sa = sampled(g, a, da)?;
    let sb = sampled(g, b, db)?;
    match_from(g, &sa, a, &sb, b)
}

/// Value-level match probability with `s` samples per mixture from `rng`.
pub fn mixture_match_value<R: Rng + ?Sized>(a: &VideoMixture, b: &VideoMixture, s: usize, rng: &mut R) -> Result<f64> {
    let da = a.draw(s, rng)?;
    let db = b.draw(s, rng)?;
    let mut g = Graph::new();
    let (ma, mb) = (MixtureVars::constant(&mut g, a)?, MixtureVars::constant(&mut g, b)?);
    let p = mixture_match_probability(&mut g, &ma, &mb, &da, &db)?;
    Ok(g.scalar(p)?)
}

/// Binary map over a batch: 1 where two videos share an action class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimilarityMap {
    n: usize,
    h: Vec<bool>,
}

impl SimilarityMap {
    /// From multi-hot label vectors.
    pub fn from_labels(labels: &[Vec<f64>]) -> Self {
        let n = labels.len();
        let mut h = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = i == j || labels[i].iter().zip(&labels[j]).any(|(&x, &y)| x > 0.0 && y > 0.0);
            }
        }
        Self { n, h }
    }

    pub fn from_matrix(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("similarity map must be square".into()));
        }
        for i in 0..n {
            if !rows[i][i] || (0..n).any(|j| rows[i][j] != rows[j][i]) {
                return Err(Error::Data("similarity map must be symmetric with a unit diagonal".into()));
            }
        }
        Ok(Self { n, h: rows.concat() })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.h[i * self.n + j]
    }
}

/// Binary cross-entropy between `H` and the pairwise match probabilities,
/// averaged over all `N^2` ordered pairs. Each video is sampled once with its
/// own draws; the diagonal contributes the constant `-ln(1 + eps_log)`.
pub fn loss_inter(
    g: &mut Graph,
    mixtures: &[MixtureVars],
    draws: &[MixtureDraws],
    h: &SimilarityMap,
    eps_log: f64,
) -> Result<Var> {
    let n = mixtures.len();
    if n < 2 {
        return Err(Error::Config(format!("inter-video loss needs at least 2 videos, got {n}")));
    }
    if draws.len() != n || h.len() != n {
        return Err(Error::Shape(format!("{n} mixtures, {} draws, map of {}", draws.len(), h.len())));
    }
    let samples: Vec<Sampled> = mixtures.iter().zip(draws).map(|(m, d)| sampled(g, m, d)).collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let p = match_from(g, &samples[i], &mixtures[i], &samples[j], &mixtures[j])?;
            let term = if h.get(i, j) {
                let q = g.add_scalar(p, eps_log)?;
                g.ln(q)?
            } else {
                let q = g.rsub_scalar(1.0 + eps_log, p)?;
                g.ln(q)?
            };
            terms.push(g.reshape(term, &[1, 1])?);
        }
    }
    let all = g.concat(&terms, 0)?;
    let s = g.sum(all)?;
    // Off-diagonal pairs count twice; the diagonal adds n * ln(1 + eps).
    let s = g.scale(s, 2.0)?;
    let s = g.add_scalar(s, n as f64 * eps_log.ln_1p())?;
    Ok(g.scale(s, -1.0 / (n * n) as f64)?)
}
