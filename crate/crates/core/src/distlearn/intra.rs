use serde::{Deserialize, Serialize};

use super::distance::{pair_distance, DistanceMetric};
use super::mining::MinedSets;
use crate::error::{Error, Result};
use crate::numcore::{Graph, Var};
use crate::probembed::GaussianVars;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntraConfig {
    pub metric: DistanceMetric,
    pub n_pair_max: usize,
    pub eps_log: f64,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self { metric: DistanceMetric::Kl, n_pair_max: 64, eps_log: 1e-6 }
    }
}

/// Snippet pairs `(hard, easy)` for the intra-video loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn group(hard: &[usize], easy: &[usize], conf: impl Fn(usize) -> f64) -> Vec<(usize, usize)> {
    let mut easy = easy.to_vec();
    easy.sort_by(|&i, &j| conf(j).total_cmp(&conf(i)).then(i.cmp(&j)));
    let mut out = Vec::new();
    for &e in &easy {
        for &h in hard {
            if h != e {
                out.push((h, e));
            }
        }
    }
    out
}

/// Positive pairs join a hard snippet with an easy snippet of the same kind,
/// negative pairs with the other kind; self-pairs are dropped.
///
/// With more than `n_pair_max` candidates, the four groups (act+, bkg+, act-,
/// bkg-) are drawn round-robin, each in order of the easy snippet's
/// confidence (`a` for actions, `1 - a` for background).
pub fn build_pairs(sets: &MinedSets, a: &[f64], n_pair_max: usize) -> PairSet {
    let act = |i: usize| a[i];
    let bkg = |i: usize| 1.0 - a[i];
    let groups = [
        (group(&sets.hard_act, &sets.easy_act, act), true),
        (group(&sets.hard_bkg, &sets.easy_bkg, bkg), true),
        (group(&sets.hard_act, &sets.easy_bkg, bkg), false),
        (group(&sets.hard_bkg, &sets.easy_act, act), false),
    ];
    let mut out = PairSet::default();
    let mut cursor = [0usize; 4];
    loop {
        let mut progressed = false;
        for (gi, (pairs, positive)) in groups.iter().enumerate() {
            if out.len() >= n_pair_max {
                return out;
            }
            if let Some(&p) = pairs.get(cursor[gi]) {
                cursor[gi] += 1;
                progressed = true;
                if *positive {
                    out.positive.push(p);
                } else {
                    out.negative.push(p);
                }
            }
        }
        if !progressed {
            return out;
        }
    }
}

/// Result of [`loss_intra`]; `loss` is a zero constant when `empty` is set.
#[derive(Clone, Copy, Debug)]
pub struct IntraLoss {
    pub loss: Var,
    pub pairs: usize,
    pub empty: bool,
}

/// Mean over pairs of `-ln(p + eps)` for positives and `-ln(1 - p + eps)` for
/// negatives, with `p = exp(-D)` between the snippet Gaussians.
pub fn loss_intra(g: &mut Graph, gv: GaussianVars, pairs: &PairSet, cfg: &IntraConfig) -> Result<IntraLoss> {
    if pairs.positive.is_empty() || pairs.negative.is_empty() {
        let loss = g.constant(crate::numcore::Tensor::scalar(0.0));
        return Ok(IntraLoss { loss, pairs: 0, empty: true });
    }
    let t = g.value(gv.mu).rows();
    if pairs.positive.iter().chain(&pairs.negative).any(|&(i, j)| i >= t || j >= t) {
        return Err(Error::Shape(format!("pair index beyond {t} snippets")));
    }
    let probs = |g: &mut Graph, list: &[(usize, usize)]| -> Result<Var> {
        let (l, r): (Vec<usize>, Vec<usize>) = list.iter().copied().unzip();
        let a = (g.gather_rows(gv.mu, &l)?, g.gather_rows(gv.scale, &l)?);
        let b = (g.gather_rows(gv.mu, &r)?, g.gather_rows(gv.scale, &r)?);
        let d = pair_distance(g, a, b, cfg.metric)?;
        let nd = g.neg(d)?;
        Ok(g.exp(nd)?)
    };
    let pp = probs(g, &pairs.positive)?;
    let pos = g.add_scalar(pp, cfg.eps_log)?;
    let pos = g.ln(pos)?;
    let pos = g.sum(pos)?;
    let pn = probs(g, &pairs.negative)?;
    let neg = g.rsub_scalar(1.0 + cfg.eps_log, pn)?;
    let neg = g.ln(neg)?;
    let neg = g.sum(neg)?;
    let total = g.add(pos, neg)?;
    let n = pairs.len();
    let loss = g.scale(total, -1.0 / n as f64)?;
    Ok(IntraLoss { loss, pairs: n, empty: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distlearn::mining::{mine_snippets, MiningConfig};
    use crate::numcore::{grad_check_report, Tensor};
    use crate::probembed::GaussianSequence;
    use crate::rng::{normal_tensor, stream};

    fn seq(t: usize, d: usize, seed: u64) -> GaussianSequence {
        let mut rng = stream(seed, &[]);
        let mu = normal_tensor(&mut rng, &[t, d], 1.0);
        let scale = normal_tensor(&mut rng, &[t, d], 0.3).map(|v| 0.6 + v.abs());
        GaussianSequence::new(mu, scale).unwrap()
    }

    fn eval(s: &GaussianSequence, pairs: &PairSet, cfg: &IntraConfig) -> f64 {
        let mut g = Graph::new();
        let gv = GaussianVars::constant(&mut g, s);
        let l = loss_intra(&mut g, gv, pairs, cfg).unwrap();
        g.scalar(l.loss).unwrap()
    }

    #[test]
    fn identical_gaussians() {
        let cfg = IntraConfig::default();
        let mu = Tensor::from_rows(&[[0.5, 1.0], [0.5, 1.0], [0.5, 1.0]]).unwrap();
        let s = GaussianSequence::new(mu, Tensor::filled(vec![3, 2], 0.7)).unwrap();
        let pos_only = |n: Vec<(usize, usize)>| PairSet { positive: vec![(0, 1)], negative: n };
        // One positive (0 loss) and one negative (clamped) pair.
        let v = eval(&s, &pos_only(vec![(0, 2)]), &cfg);
        assert!((v - 0.5 * -(cfg.eps_log.ln_1p() + cfg.eps_log.ln())).abs() < 1e-9, "{v}");
        let far = GaussianSequence::new(
            Tensor::from_rows(&[[0.5, 1.0], [0.5, 1.0], [40.0, -40.0]]).unwrap(),
            Tensor::filled(vec![3, 2], 0.7),
        )
        .unwrap();
        let v = eval(&far, &pos_only(vec![(0, 2)]), &cfg);
        assert!(v.abs() < 1e-5, "{v}");
    }

    #[test]
    fn missing_pairs_give_a_flagged_zero() {
        let s = seq(4, 2, 1);
        let mut g = Graph::new();
        let gv = GaussianVars::constant(&mut g, &s);
        let pairs = PairSet { positive: vec![(0, 1)], negative: vec![] };
        let l = loss_intra(&mut g, gv, &pairs, &IntraConfig::default()).unwrap();
        assert!(l.empty);
        assert_eq!(g.scalar(l.loss).unwrap(), 0.0);
    }

    #[test]
    fn pairs_skip_self_and_respect_the_cap() {
        let sets = MinedSets { easy_act: vec![1, 2], easy_bkg: vec![6], hard_act: vec![2, 3], hard_bkg: vec![5] };
        let a = [0.1, 0.9, 0.8, 0.7, 0.4, 0.3, 0.05, 0.1];
        let all = build_pairs(&sets, &a, 100);
        assert_eq!(all.positive, vec![(2, 1), (5, 6), (3, 1), (3, 2)]);
        assert_eq!(all.negative, vec![(2, 6), (5, 1), (3, 6), (5, 2)]);
        let capped = build_pairs(&sets, &a, 5);
        assert_eq!(capped.len(), 5);
        assert_eq!(capped.positive, vec![(2, 1), (5, 6), (3, 1)]);
        assert_eq!(capped.negative, vec![(2, 6), (5, 1)]);
    }

    #[test]
    fn loss_falls_as_a_hard_action_moves_to_its_positive() {
        let cfg = IntraConfig::default();
        let base = seq(4, 3, 7);
        let pairs = PairSet { positive: vec![(0, 1)], negative: vec![(0, 2), (0, 3)] };
        let mut s = base.clone();
        // Negatives sit far away so only the positive term moves.
        for r in [2, 3] {
            for d in 0..3 {
                let i = r * 3 + d;
                let mut m = s.mu.clone().into_data();
                m[i] = 30.0 * (r as f64) * if d % 2 == 0 { 1.0 } else { -1.0 };
                s.mu = Tensor::new(vec![4, 3], m).unwrap();
            }
        }
        let mut last = f64::INFINITY;
        for step in 0..10 {
            let w = step as f64 / 9.0;
            let mut mu = s.mu.clone().into_data();
            let mut sc = s.scale.clone().into_data();
            for d in 0..3 {
                mu[d] = (1.0 - w) * base.mu.get(0, d) + w * s.mu.get(1, d);
                sc[d] = (1.0 - w) * base.scale.get(0, d) + w * s.scale.get(1, d);
            }
            let cur = GaussianSequence::new(Tensor::new(vec![4, 3], mu).unwrap(), Tensor::new(vec![4, 3], sc).unwrap()).unwrap();
            let v = eval(&cur, &pairs, &cfg);
            assert!(v < last, "step {step}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn mined_instances_pass_gradient_checks() {
        let a4 = [0.9, 0.8, 0.2, 0.1];
        let a6 = [0.95, 0.9, 0.7, 0.3, 0.2, 0.05];
        for (a, seed) in [(&a4[..], 3), (&a6[..], 4)] {
            let cfg = MiningConfig { m: 1, big_m: 3, k_easy: Some(1), ..MiningConfig::default() };
            let sets = mine_snippets(a, &cfg).unwrap();
            let pairs = build_pairs(&sets, a, 64);
            assert!(!pairs.positive.is_empty() && !pairs.negative.is_empty(), "{sets:?} {pairs:?}");
            let s = seq(a.len(), 3, seed);
            for metric in [DistanceMetric::Kl, DistanceMetric::Bhattacharyya, DistanceMetric::Mahalanobis] {
                let icfg = IntraConfig { metric, ..IntraConfig::default() };
                let report = grad_check_report(
                    |g, v| {
                        let l = loss_intra(g, GaussianVars { mu: v[0], scale: v[1] }, &pairs, &icfg)?;
                        Ok::<_, Error>(l.loss)
                    },
                    &[s.mu.clone(), s.scale.clone()],
                    1e-3,
                )
                .unwrap();
                assert!(report.is_smooth() && report.max_rel_error < 1e-3, "{metric}: {report:?}");
            }
        }
    }
}
