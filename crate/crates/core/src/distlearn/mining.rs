use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Snippet mining settings. `k_easy = None` means `max(1, floor(T / 8))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub theta_b: f64,
    pub m: usize,
    pub big_m: usize,
    pub k_easy: Option<usize>,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self { theta_b: 0.5, m: 3, big_m: 7, k_easy: None }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_b > 0.0 && self.theta_b < 1.0) {
            return Err(Error::Config(format!("theta_b {} outside (0, 1)", self.theta_b)));
        }
        if self.m % 2 == 0 || self.big_m % 2 == 0 || self.m >= self.big_m {
            return Err(Error::Config(format!("mask sizes m={} M={} must be odd with m < M", self.m, self.big_m)));
        }
        if self.k_easy == Some(0) {
            return Err(Error::Config("k_easy must be positive".into()));
        }
        Ok(())
    }

    pub fn k_easy_for(&self, t: usize) -> usize {
        self.k_easy.unwrap_or((t / 8).max(1))
    }
}

/// Snippet index sets from one actionness sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MinedSets {
    pub easy_act: Vec<usize>,
    pub easy_bkg: Vec<usize>,
    pub hard_act: Vec<usize>,
    pub hard_bkg: Vec<usize>,
}

/// Erosion with a centered mask of odd width `w`; positions beyond the ends
/// read as `pad`.
pub fn erode_padded(b: &[bool], w: usize, pad: bool) -> Vec<bool> {
    let r = (w / 2) as isize;
    let n = b.len() as isize;
    (0..n)
        .map(|i| (i - r..=i + r).all(|j| if (0..n).contains(&j) { b[j as usize] } else { pad }))
        .collect()
}

/// Dilation with a centered mask of odd width `w`; positions beyond the ends
/// read as `pad`.
pub fn dilate_padded(b: &[bool], w: usize, pad: bool) -> Vec<bool> {
    let r = (w / 2) as isize;
    let n = b.len() as isize;
    (0..n)
        .map(|i| (i - r..=i + r).any(|j| if (0..n).contains(&j) { b[j as usize] } else { pad }))
        .collect()
}

/// Zero-padded erosion.
pub fn erode(b: &[bool], w: usize) -> Vec<bool> {
    erode_padded(b, w, false)
}

/// Zero-padded dilation.
pub fn dilate(b: &[bool], w: usize) -> Vec<bool> {
    dilate_padded(b, w, false)
}

/// Positions set in `a` but not in `b`.
fn minus(a: &[bool], b: &[bool]) -> Vec<usize> {
    a.iter().zip(b).enumerate().filter(|(_, (&x, &y))| x && !y).map(|(i, _)| i).collect()
}

/// `(inner, outer)` boundary regions of a binary sequence.
pub fn boundary_regions(b: &[bool], m: usize, big_m: usize) -> (Vec<usize>, Vec<usize>) {
    let inner = minus(&erode(b, m), &erode(b, big_m));
    let outer = minus(&dilate(b, big_m), &dilate(b, m));
    (inner, outer)
}

/// Easy and hard snippet sets from actionness `a`.
pub fn mine_snippets(a: &[f64], cfg: &MiningConfig) -> Result<MinedSets> {
    cfg.validate()?;
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("actionness".into()));
    }
    let b: Vec<bool> = a.iter().map(|&v| v > cfg.theta_b).collect();
    let (hard_act, hard_bkg) = boundary_regions(&b, cfg.m, cfg.big_m);
    let k = cfg.k_easy_for(a.len());

    let mut act: Vec<usize> = (0..a.len()).filter(|&i| b[i]).collect();
    act.sort_by(|&i, &j| a[j].total_cmp(&a[i]).then(i.cmp(&j)));
    act.truncate(k);
    act.sort_unstable();
    let mut bkg: Vec<usize> = (0..a.len()).filter(|&i| !b[i]).collect();
    bkg.sort_by(|&i, &j| a[i].total_cmp(&a[j]).then(i.cmp(&j)));
    bkg.truncate(k);
    bkg.sort_unstable();

    Ok(MinedSets { easy_act: act, easy_bkg: bkg, hard_act, hard_bkg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn bits(s: &str) -> Vec<bool> {
        s.chars().map(|c| c == '1').collect()
    }

    fn idx(b: &[bool]) -> Vec<usize> {
        (0..b.len()).filter(|&i| b[i]).collect()
    }

    // Mask sliding over an explicitly padded copy.
    fn slide(b: &[bool], w: usize, pad: bool, all: bool) -> Vec<bool> {
        let r = w / 2;
        let mut padded = vec![pad; r];
        padded.extend_from_slice(b);
        padded.extend(std::iter::repeat_n(pad, r));
        padded
            .windows(w)
            .map(|win| if all { win.iter().all(|&x| x) } else { win.iter().any(|&x| x) })
            .collect()
    }

    #[test]
    fn binarization() {
        let s = mine_snippets(&[0.9, 0.9, 0.1, 0.1], &MiningConfig::default()).unwrap();
        assert_eq!(s.easy_act, vec![0]);
        assert_eq!(s.easy_bkg, vec![2]);
    }

    #[test]
    fn hand_traced_morphology() {
        let b = bits("11111");
        assert_eq!(erode(&b, 3), bits("01110"));
        assert_eq!(erode(&b, 5), bits("00100"));
        assert_eq!(boundary_regions(&b, 3, 5).0, vec![1, 3]);
        let b = bits("01110");
        assert_eq!(dilate(&b, 3), bits("11111"));
        assert_eq!(dilate(&b, 5), bits("11111"));
        assert!(boundary_regions(&b, 3, 5).1.is_empty());
    }

    #[test]
    fn morphology_matches_brute_force() {
        let mut rng = stream(1, &[]);
        for case in 0..1000 {
            let t = rng.random_range(1..=64);
            let p: f64 = rng.random_range(0.1..0.9);
            let b: Vec<bool> = (0..t).map(|_| rng.random::<f64>() < p).collect();
            for (m, mm) in [(3, 5), (3, 7), (1, 9)] {
                assert_eq!(erode(&b, m), slide(&b, m, false, true), "case {case}");
                assert_eq!(dilate(&b, mm), slide(&b, mm, false, false), "case {case}");
                let (inner, outer) = boundary_regions(&b, m, mm);
                let ei: Vec<usize> = idx(&slide(&b, m, false, true))
                    .into_iter()
                    .filter(|&i| !slide(&b, mm, false, true)[i])
                    .collect();
                let eo: Vec<usize> = idx(&slide(&b, mm, false, false))
                    .into_iter()
                    .filter(|&i| !slide(&b, m, false, false)[i])
                    .collect();
                assert_eq!((inner, outer), (ei, eo), "case {case}");
            }
        }
    }

    #[test]
    fn exhaustive_duality_and_oracle_for_short_sequences() {
        for t in 1..=12usize {
            for mask in 0u32..(1 << t) {
                let b: Vec<bool> = (0..t).map(|i| mask >> i & 1 == 1).collect();
                let nb: Vec<bool> = b.iter().map(|x| !x).collect();
                for w in [1, 3, 5, 7] {
                    let dual: Vec<bool> = erode_padded(&nb, w, true).iter().map(|x| !x).collect();
                    assert_eq!(dilate(&b, w), dual);
                    assert_eq!(erode(&b, w), slide(&b, w, false, true));
                    assert_eq!(dilate(&b, w), slide(&b, w, false, false));
                }
            }
        }
    }

    #[test]
    fn hard_sets_lie_in_the_right_regions() {
        let mut rng = stream(2, &[]);
        let cfg = MiningConfig::default();
        for _ in 0..200 {
            let a: Vec<f64> = (0..40).map(|_| rng.random()).collect();
            let s = mine_snippets(&a, &cfg).unwrap();
            assert!(s.hard_act.iter().all(|&i| a[i] > cfg.theta_b));
            assert!(s.hard_bkg.iter().all(|&i| a[i] <= cfg.theta_b));
            assert!(s.easy_act.iter().all(|i| !s.easy_bkg.contains(i)));
            assert!(s.easy_act.len() <= 5 && s.easy_bkg.len() <= 5);
        }
    }

    #[test]
    fn easy_sets_pick_extremes() {
        let a = [0.6, 0.95, 0.7, 0.99, 0.2, 0.05, 0.3, 0.01, 0.9, 0.4, 0.8, 0.1, 0.55, 0.45, 0.65, 0.35];
        let s = mine_snippets(&a, &MiningConfig { k_easy: Some(3), ..MiningConfig::default() }).unwrap();
        assert_eq!(s.easy_act, vec![1, 3, 8]);
        assert_eq!(s.easy_bkg, vec![5, 7, 11]);
    }

    #[test]
    fn degenerate_inputs_do_not_fail() {
        let cfg = MiningConfig::default();
        let s = mine_snippets(&[0.9; 10], &cfg).unwrap();
        assert!(s.easy_bkg.is_empty() && s.hard_bkg.is_empty());
        let s = mine_snippets(&[0.1; 10], &cfg).unwrap();
        assert!(s.easy_act.is_empty() && s.hard_act.is_empty());
        assert_eq!(mine_snippets(&[], &cfg).unwrap(), MinedSets::default());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            MiningConfig { theta_b: 1.0, ..MiningConfig::default() },
            MiningConfig { m: 4, ..MiningConfig::default() },
            MiningConfig { m: 7, big_m: 7, ..MiningConfig::default() },
            MiningConfig { k_easy: Some(0), ..MiningConfig::default() },
        ] {
            assert!(mine_snippets(&[0.5], &cfg).is_err());
        }
    }
}
