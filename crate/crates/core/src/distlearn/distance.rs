use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};

/// Diagonal Gaussian with per-dimension variances.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mu.len() != var.len() || mu.is_empty() {
            return Err(Error::Shape(format!("mean of length {} with {} variances", mu.len(), var.len())));
        }
        if mu.iter().chain(&var).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data("non-positive variance".into()));
        }
        Ok(Self { mu, var })
    }

    /// From a mean and per-dimension standard deviations.
    pub fn from_scale(mu: &[f64], scale: &[f64]) -> Result<Self> {
        Self::new(mu.to_vec(), scale.iter().map(|s| s * s).collect())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check_pair(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!("dimensions {} vs {}", self.dim(), other.dim())));
        }
        Ok(())
    }
}

/// `KL(P || Q)` for diagonal Gaussians.
pub fn kl_gaussian(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    p.check_pair(q)?;
    let mut s = 0.0;
    for d in 0..p.dim() {
        let (vp, vq) = (p.var[d], q.var[d]);
        let dm = q.mu[d] - p.mu[d];
        s += vp / vq + dm * dm / vq + (vq / vp).ln();
    }
    Ok((0.5 * (s - p.dim() as f64)).max(0.0))
}

/// `0.5 KL(P || Q) + 0.5 KL(Q || P)`.
pub fn sym_kl(p: &DiagGaussian, q: &DiagGaussian) -> Result<f64> {
    Ok(0.5 * kl_gaussian(p, q)? + 0.5 * kl_gaussian(q, p)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// Symmetrized KL divergence.
    #[default]
    Kl,
    Bhattacharyya,
    Mahalanobis,
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kl" => Ok(Self::Kl),
            "bhattacharyya" => Ok(Self::Bhattacharyya),
            "mahalanobis" => Ok(Self::Mahalanobis),
            _ => Err(Error::Config(format!("unknown distance metric {s:?}"))),
        }
    }
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kl => "kl",
            Self::Bhattacharyya => "bhattacharyya",
            Self::Mahalanobis => "mahalanobis",
        })
    }
}

/// Mahalanobis or Bhattacharyya distance, both under the averaged variance.
pub fn alt_distance(p: &DiagGaussian, q: &DiagGaussian, metric: DistanceMetric) -> Result<f64> {
    p.check_pair(q)?;
    let mut quad = 0.0;
    let mut log_ratio = 0.0;
    for d in 0..p.dim() {
        let vbar = 0.5 * (p.var[d] + q.var[d]);
        let dm = p.mu[d] - q.mu[d];
        quad += dm * dm / vbar;
        log_ratio += vbar.ln() - 0.5 * (p.var[d].ln() + q.var[d].ln());
    }
    match metric {
        DistanceMetric::Mahalanobis => Ok(quad.sqrt()),
        DistanceMetric::Bhattacharyya => Ok(quad / 8.0 + 0.5 * log_ratio),
        DistanceMetric::Kl => sym_kl(p, q),
    }
}

/// Distance underlying the match probability for `metric`.
pub fn distance(p: &DiagGaussian, q: &DiagGaussian, metric: DistanceMetric) -> Result<f64> {
    alt_distance(p, q, metric)
}

/// `exp(-D(P, Q))`; 1 when `P == Q` and symmetric in its arguments.
pub fn match_probability(p: &DiagGaussian, q: &DiagGaussian, metric: DistanceMetric) -> Result<f64> {
    Ok((-distance(p, q, metric)?).exp())
}

/// Row-paired distances between Gaussians given by `[n, D]` means and scales,
/// giving `[n]`.
pub fn pair_distance(
    g: &mut Graph,
    (mu_a, sc_a): (Var, Var),
    (mu_b, sc_b): (Var, Var),
    metric: DistanceMetric,
) -> Result<Var> {
    let dim = g.value(mu_a).cols() as f64;
    let va = g.square(sc_a)?;
    let vb = g.square(sc_b)?;
    let dm = g.sub(mu_a, mu_b)?;
    let d2 = g.square(dm)?;
    match metric {
        DistanceMetric::Kl => {
            // 0.25 sum(va/vb + vb/va + d2/va + d2/vb) - D/2; the log terms cancel.
            let r1 = g.div(va, vb)?;
            let r2 = g.div(vb, va)?;
            let q1 = g.div(d2, va)?;
            let q2 = g.div(d2, vb)?;
            let s = g.add(r1, r2)?;
            let s = g.add(s, q1)?;
            let s = g.add(s, q2)?;
            let s = g.sum_axis(s, 1)?;
            let s = g.scale(s, 0.25)?;
            Ok(g.add_scalar(s, -0.5 * dim)?)
        }
        DistanceMetric::Bhattacharyya | DistanceMetric::Mahalanobis => {
            let vsum = g.add(va, vb)?;
            let vbar = g.scale(vsum, 0.5)?;
            let q = g.div(d2, vbar)?;
            let q = g.sum_axis(q, 1)?;
            if metric == DistanceMetric::Mahalanobis {
                // Floor keeps the square root differentiable at coincident means.
                let q = g.clamp_min(q, 1e-12)?;
                return Ok(g.sqrt(q)?);
            }
            let lbar = g.ln(vbar)?;
            let la = g.ln(va)?;
            let lb = g.ln(vb)?;
            let lab = g.add(la, lb)?;
            let lab = g.scale(lab, 0.5)?;
            let l = g.sub(lbar, lab)?;
            let l = g.sum_axis(l, 1)?;
            let q = g.scale(q, 0.125)?;
            let l = g.scale(l, 0.5)?;
            Ok(g.add(q, l)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::rng::{normal_vec, stream};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_pair(seed: u64, d: usize) -> (DiagGaussian, DiagGaussian) {
        let mut rng = stream(seed, &[]);
        let mut one = || {
            let mu = normal_vec(&mut rng, d);
            let var = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
            DiagGaussian::new(mu, var).unwrap()
        };
        (one(), one())
    }

    fn log_density(p: &DiagGaussian, z: &[f64]) -> f64 {
        (0..p.dim())
            .map(|d| -0.5 * ((2.0 * std::f64::consts::PI * p.var[d]).ln() + (z[d] - p.mu[d]).powi(2) / p.var[d]))
            .sum()
    }

    #[test]
    fn kl_special_cases() {
        let (p, _) = random_pair(1, 4);
        assert_eq!(kl_gaussian(&p, &p).unwrap(), 0.0);
        let a = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let b = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((kl_gaussian(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let (p, q) = random_pair(2, 4);
        let mut rng = stream(3, &[]);
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut z = vec![0.0; 4];
        for _ in 0..n {
            for d in 0..4 {
                let e: f64 = rng.sample(StandardNormal);
                z[d] = p.mu[d] + e * p.var[d].sqrt();
            }
            acc += log_density(&p, &z) - log_density(&q, &z);
        }
        let mc = acc / n as f64;
        let kl = kl_gaussian(&p, &q).unwrap();
        assert!((mc - kl).abs() / kl < 0.02, "{mc} vs {kl}");
    }

    #[test]
    fn kl_is_positive_off_the_diagonal() {
        for s in 0..50 {
            let (p, q) = random_pair(100 + s, 3);
            assert!(kl_gaussian(&p, &q).unwrap() > 0.0);
        }
    }

    #[test]
    fn invalid_gaussians_are_rejected() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        let a = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let b = DiagGaussian::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(kl_gaussian(&a, &b).is_err());
    }

    #[test]
    fn alternative_distance_cases() {
        let (p, _) = random_pair(4, 3);
        for m in [DistanceMetric::Mahalanobis, DistanceMetric::Bhattacharyya] {
            assert!(alt_distance(&p, &p, m).unwrap().abs() < 1e-15);
        }
        let a = DiagGaussian::new(vec![0.0], vec![1.0]).unwrap();
        let b = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        assert!((alt_distance(&a, &b, DistanceMetric::Mahalanobis).unwrap() - 1.0).abs() < 1e-15);
        assert!((alt_distance(&a, &b, DistanceMetric::Bhattacharyya).unwrap() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn bhattacharyya_matches_quadrature() {
        let a = DiagGaussian::new(vec![0.3], vec![0.5]).unwrap();
        let b = DiagGaussian::new(vec![-0.8], vec![1.7]).unwrap();
        let (lo, hi, n) = (-15.0, 15.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut s = 0.0;
        for i in 0..n {
            let z = [lo + (i as f64 + 0.5) * h];
            s += (0.5 * (log_density(&a, &z) + log_density(&b, &z))).exp() * h;
        }
        let want = -s.ln();
        let got = alt_distance(&a, &b, DistanceMetric::Bhattacharyya).unwrap();
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }

    #[test]
    fn match_probability_properties() {
        for m in [DistanceMetric::Kl, DistanceMetric::Bhattacharyya, DistanceMetric::Mahalanobis] {
            let (p, q) = random_pair(5, 4);
            assert_eq!(match_probability(&p, &p, m).unwrap(), 1.0);
            let (pq, qp) = (match_probability(&p, &q, m).unwrap(), match_probability(&q, &p, m).unwrap());
            assert!((pq - qp).abs() < 1e-15);
            let mut last = 1.0;
            for gap in 1..8 {
                let shifted = DiagGaussian::new(p.mu.iter().map(|v| v + 0.25 * gap as f64).collect(), p.var.clone()).unwrap();
                let v = match_probability(&p, &shifted, m).unwrap();
                assert!(v < last && v > 0.0, "{m}: gap {gap}");
                last = v;
            }
        }
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [DistanceMetric::Kl, DistanceMetric::Bhattacharyya, DistanceMetric::Mahalanobis] {
            assert_eq!(m.to_string().parse::<DistanceMetric>().unwrap(), m);
        }
        assert!("euclid".parse::<DistanceMetric>().is_err());
    }

    #[test]
    fn graph_distances_match_closed_forms() {
        let pairs: Vec<_> = (0..4).map(|s| random_pair(20 + s, 3)).collect();
        let rows = |f: &dyn Fn(&(DiagGaussian, DiagGaussian)) -> Vec<f64>| {
            Tensor::from_rows(&pairs.iter().map(f).collect::<Vec<_>>()).unwrap()
        };
        let sd = |v: &[f64]| v.iter().map(|x| x.sqrt()).collect::<Vec<_>>();
        for m in [DistanceMetric::Kl, DistanceMetric::Bhattacharyya, DistanceMetric::Mahalanobis] {
            let mut g = Graph::new();
            let ma = g.constant(rows(&|p| p.0.mu.clone()));
            let sa = g.constant(rows(&|p| sd(&p.0.var)));
            let mb = g.constant(rows(&|p| p.1.mu.clone()));
            let sb = g.constant(rows(&|p| sd(&p.1.var)));
            let d = pair_distance(&mut g, (ma, sa), (mb, sb), m).unwrap();
            for (i, (p, q)) in pairs.iter().enumerate() {
                let want = distance(p, q, m).unwrap();
                assert!((g.value(d).data()[i] - want).abs() < 1e-10, "{m} pair {i}");
            }
        }
    }
}
