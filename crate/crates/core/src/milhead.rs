//! Multiple-instance base head.
//!
//! RGB and flow snippet features are fused by a temporal convolution stack, an
//! attention branch scores actionness from both modality orders, and a linear
//! classifier produces the base class activation sequence (CAS) with the
//! background as its last column. Video-level predictions come from top-k
//! temporal pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Kernel sizes of the fusion stack; every layer maps 2D to 2D.
    pub fuse_kernels: Vec<usize>,
    /// Kernel sizes of the attention branch; the last layer outputs one channel.
    pub attn_kernels: Vec<usize>,
    pub dropout: f64,
    /// `k = max(1, floor(T / k_ratio_denominator))` for top-k pooling.
    pub k_ratio_denominator: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { fuse_kernels: vec![3, 3], attn_kernels: vec![3, 1], dropout: 0.5, k_ratio_denominator: 8 }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fuse_kernels.is_empty() || self.attn_kernels.is_empty() {
            return Err(Error::Config("fusion and attention stacks need at least one layer".into()));
        }
        if self.fuse_kernels.iter().chain(&self.attn_kernels).any(|k| k % 2 == 0) {
            return Err(Error::Config("temporal kernels must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {}", self.dropout)));
        }
        if self.k_ratio_denominator == 0 {
            return Err(Error::Config("k_ratio_denominator must be positive".into()));
        }
        Ok(())
    }

    pub fn top_k(&self, t: usize) -> usize {
        (t / self.k_ratio_denominator).max(1)
    }
}

/// Adds freshly initialised head parameters for `dim`-dimensional modality
/// features and `num_classes` action classes.
pub fn init_head_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &HeadConfig, dim: usize, num_classes: usize) {
    let width = 2 * dim;
    for (i, &k) in cfg.fuse_kernels.iter().enumerate() {
        store.init_conv(rng, &format!("head.fuse.{i}"), k, width, width);
    }
    let n = cfg.attn_kernels.len();
    for (i, &k) in cfg.attn_kernels.iter().enumerate() {
        let out = if i + 1 == n { 1 } else { width };
        store.init_conv(rng, &format!("head.attn.{i}"), k, width, out);
    }
    store.init_linear(rng, "head.cls", width, num_classes + 1, 0.0);
}

/// Dropout masks (already rescaled) for the fusion stack, one per layer.
pub fn dropout_masks<R: Rng + ?Sized>(rng: &mut R, cfg: &HeadConfig, t: usize, dim: usize) -> Vec<Tensor> {
    let keep = 1.0 - cfg.dropout;
    cfg.fuse_kernels
        .iter()
        .map(|_| {
            let data = (0..t * 2 * dim).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
            Tensor::matrix(t, 2 * dim, data).expect("mask shape")
        })
        .collect()
}

fn conv_layer(g: &mut Graph, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let h = g.conv1d(x, p.get(&format!("{name}.w"))?)?;
    Ok(g.add_bias(h, p.get(&format!("{name}.b"))?)?)
}

fn check_pair(g: &Graph, xr: Var, xo: Var) -> Result<()> {
    let (r, o) = (g.value(xr).shape(), g.value(xo).shape());
    if r != o {
        return Err(Error::Shape(format!("rgb {r:?} vs flow {o:?}")));
    }
    Ok(())
}

/// Fused base feature `X^B` (`[T, 2D]`) from rgb and flow features.
pub fn fuse_base(g: &mut Graph, p: &Bound, cfg: &HeadConfig, xr: Var, xo: Var, masks: Option<&[Tensor]>) -> Result<Var> {
    check_pair(g, xr, xo)?;
    let mut h = g.concat(&[xr, xo], 1)?;
    for i in 0..cfg.fuse_kernels.len() {
        h = conv_layer(g, p, &format!("head.fuse.{i}"), h)?;
        h = g.relu(h)?;
        if let Some(m) = masks.and_then(|m| m.get(i)) {
            let m = g.constant(m.clone());
            h = g.mul(h, m)?;
        }
    }
    Ok(h)
}

/// Attention branch applied to `[first; second]`, giving `[T, 1]` in (0, 1).
pub fn attention_branch(g: &mut Graph, p: &Bound, cfg: &HeadConfig, first: Var, second: Var) -> Result<Var> {
    let mut h = g.concat(&[first, second], 1)?;
    let n = cfg.attn_kernels.len();
    for i in 0..n {
        h = conv_layer(g, p, &format!("head.attn.{i}"), h)?;
        h = if i + 1 == n { g.sigmoid(h)? } else { g.relu(h)? };
    }
    Ok(h)
}

/// Actionness `a` (`[T]`): the mean of the attention branch over both
/// modality orders, so swapping rgb and flow leaves it unchanged.
pub fn actionness(g: &mut Graph, p: &Bound, cfg: &HeadConfig, xr: Var, xo: Var) -> Result<Var> {
    check_pair(g, xr, xo)?;
    let ro = attention_branch(g, p, cfg, xr, xo)?;
    let or = attention_branch(g, p, cfg, xo, xr)?;
    let s = g.add(ro, or)?;
    let a = g.scale(s, 0.5)?;
    let t = g.value(a).rows();
    Ok(g.reshape(a, &[t])?)
}

/// Base CAS `[T, C + 1]`.
pub fn base_cas(g: &mut Graph, p: &Bound, xb: Var) -> Result<Var> {
    let h = g.matmul(xb, p.get("head.cls.w")?)?;
    Ok(g.add_bias(h, p.get("head.cls.b")?)?)
}

/// Video-level prediction from a CAS.
#[derive(Clone, Copy, Debug)]
pub struct VideoPrediction {
    /// Top-k pooled scores before the softmax, `[C + 1]`.
    pub pooled: Var,
    pub probs: Var,
    pub log_probs: Var,
}

/// Top-k mean over time per class, then a softmax over classes.
pub fn video_predict(g: &mut Graph, cas: Var, k: usize) -> Result<VideoPrediction> {
    let t = g.value(cas).rows();
    let k = if k > t {
        log::warn!("top-k of {k} over {t} snippets; clamping to {t}");
        t
    } else {
        k.max(1)
    };
    let pooled = g.topk_mean(cas, k)?;
    let probs = g.softmax(pooled, 0)?;
    let log_probs = g.log_softmax(pooled, 0)?;
    Ok(VideoPrediction { pooled, probs, log_probs })
}

/// `(y_base, y_supp)`: the multi-hot label with the background bit set to 1
/// and to 0, each normalised to sum to one.
pub fn normalized_targets(labels: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let s: f64 = labels.iter().sum();
    if s <= 0.0 {
        return Err(Error::Data("video has no action label".into()));
    }
    let mut base: Vec<f64> = labels.iter().map(|y| y / (s + 1.0)).collect();
    base.push(1.0 / (s + 1.0));
    let mut supp: Vec<f64> = labels.iter().map(|y| y / s).collect();
    supp.push(0.0);
    Ok((base, supp))
}

fn cross_entropy(g: &mut Graph, target: &[f64], log_probs: Var) -> Result<Var> {
    let y = g.constant(Tensor::vector(target.to_vec()));
    let prod = g.mul(y, log_probs)?;
    let s = g.sum(prod)?;
    Ok(g.neg(s)?)
}

/// `L_cls = CE(y_base, p_base) + CE(y_supp, p_supp)`.
pub fn loss_cls(g: &mut Graph, base: &VideoPrediction, supp: &VideoPrediction, labels: &[f64]) -> Result<Var> {
    let (yb, ys) = normalized_targets(labels)?;
    let lb = cross_entropy(g, &yb, base.log_probs)?;
    let ls = cross_entropy(g, &ys, supp.log_probs)?;
    Ok(g.add(lb, ls)?)
}

/// Auxiliary base-head regularisers.
#[derive(Clone, Copy, Debug)]
pub struct AuxLosses {
    /// Cross-entropy toward pure background of the complement-attended CAS.
    pub oppo: Var,
    /// Mean actionness.
    pub norm: Var,
    /// Mean squared gap between the background posterior and `1 - a`.
    pub guide: Var,
}

pub fn aux_losses(g: &mut Graph, s_base: Var, a: Var, k: usize) -> Result<AuxLosses> {
    let (t, c1) = (g.value(s_base).rows(), g.value(s_base).cols());
    let bg = c1 - 1;
    let norm = g.mean(a)?;

    let post = g.softmax(s_base, 1)?;
    let mut pick = vec![0.0; c1];
    pick[bg] = 1.0;
    let pick = g.constant(Tensor::matrix(c1, 1, pick)?);
    let bg_post = g.matmul(post, pick)?;
    let bg_post = g.reshape(bg_post, &[t])?;
    let inv = g.rsub_scalar(1.0, a)?;
    let gap = g.sub(bg_post, inv)?;
    let sq = g.square(gap)?;
    let guide = g.mean(sq)?;

    let s_oppo = g.scale_rows(s_base, inv)?;
    let pred = video_predict(g, s_oppo, k)?;
    let mut target = vec![0.0; c1];
    target[bg] = 1.0;
    let oppo = cross_entropy(g, &target, pred.log_probs)?;
    Ok(AuxLosses { oppo, norm, guide })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VidWeights {
    pub cls: f64,
    pub oppo: f64,
    pub norm: f64,
    pub guide: f64,
}

impl Default for VidWeights {
    fn default() -> Self {
        Self { cls: 1.0, oppo: 1.0, norm: 0.1, guide: 1.0 }
    }
}

/// `λ1·L_cls + λ2·L_oppo + λ3·L_norm + λ4·L_guide`.
pub fn loss_vid(g: &mut Graph, cls: Var, aux: &AuxLosses, w: &VidWeights) -> Result<Var> {
    if [w.cls, w.oppo, w.norm, w.guide].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Config(format!("negative loss weight in {w:?}")));
    }
    let mut total = g.scale(cls, w.cls)?;
    for (term, wt) in [(aux.oppo, w.oppo), (aux.norm, w.norm), (aux.guide, w.guide)] {
        let s = g.scale(term, wt)?;
        total = g.add(total, s)?;
    }
    Ok(total)
}

/// Everything the base head produces for one video.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub xb: Var,
    pub a: Var,
    pub s_base: Var,
    pub s_supp: Var,
    pub p_base: VideoPrediction,
    pub p_supp: VideoPrediction,
}

pub fn forward_head(
    g: &mut Graph,
    p: &Bound,
    cfg: &HeadConfig,
    xr: Var,
    xo: Var,
    masks: Option<&[Tensor]>,
) -> Result<HeadOutputs> {
    let xb = fuse_base(g, p, cfg, xr, xo, masks)?;
    let a = actionness(g, p, cfg, xr, xo)?;
    let s_base = base_cas(g, p, xb)?;
    let s_supp = g.scale_rows(s_base, a)?;
    let k = cfg.top_k(g.value(xr).rows());
    let p_base = video_predict(g, s_base, k)?;
    let p_supp = video_predict(g, s_supp, k)?;
    Ok(HeadOutputs { xb, a, s_base, s_supp, p_base, p_supp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use crate::params::grad_check_params;
    use crate::rng::{normal_tensor, stream};

    fn setup(dim: usize, c: usize, seed: u64) -> (ParamStore, HeadConfig) {
        let cfg = HeadConfig::default();
        let mut store = ParamStore::new();
        init_head_params(&mut store, &mut stream(seed, &[]), &cfg, dim, c);
        (store, cfg)
    }

    #[test]
    fn identity_fusion_concatenates_inputs() {
        let dim = 3;
        let cfg = HeadConfig { fuse_kernels: vec![1], ..HeadConfig::default() };
        let mut store = ParamStore::new();
        let mut w = vec![0.0; 4 * dim * dim];
        for i in 0..2 * dim {
            w[i * 2 * dim + i] = 1.0;
        }
        store.insert("head.fuse.0.w", Tensor::new(vec![1, 2 * dim, 2 * dim], w).unwrap());
        store.insert("head.fuse.0.b", Tensor::zeros(vec![2 * dim]));
        let mut rng = stream(1, &[]);
        let xr = normal_tensor(&mut rng, &[5, dim], 1.0).map(f64::abs);
        let xo = normal_tensor(&mut rng, &[5, dim], 1.0).map(f64::abs);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (r, o) = (g.constant(xr.clone()), g.constant(xo.clone()));
        let xb = fuse_base(&mut g, &p, &cfg, r, o, None).unwrap();
        for t in 0..5 {
            assert_eq!(&g.value(xb).row(t)[..dim], xr.row(t));
            assert_eq!(&g.value(xb).row(t)[dim..], xo.row(t));
        }
    }

    #[test]
    fn zero_input_zero_fusion() {
        let (store, cfg) = setup(4, 2, 2);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let z = g.constant(Tensor::zeros(vec![6, 4]));
        let xb = fuse_base(&mut g, &p, &cfg, z, z, None).unwrap();
        assert!(g.value(xb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fused_shape() {
        let (store, cfg) = setup(8, 3, 3);
        let mut rng = stream(3, &[1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let r = g.constant(normal_tensor(&mut rng, &[12, 8], 1.0));
        let o = g.constant(normal_tensor(&mut rng, &[12, 8], 1.0));
        let out = forward_head(&mut g, &p, &cfg, r, o, None).unwrap();
        assert_eq!(g.value(out.xb).shape(), &[12, 16]);
        assert_eq!(g.value(out.s_base).shape(), &[12, 4]);
        assert_eq!(g.value(out.a).shape(), &[12]);
        let ps: f64 = g.value(out.p_base.probs).sum();
        assert!((ps - 1.0).abs() < 1e-5);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let (store, cfg) = setup(4, 2, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let r = g.constant(Tensor::zeros(vec![6, 4]));
        let o = g.constant(Tensor::zeros(vec![5, 4]));
        assert!(fuse_base(&mut g, &p, &cfg, r, o, None).is_err());
        assert!(actionness(&mut g, &p, &cfg, r, o).is_err());
    }

    #[test]
    fn actionness_is_swap_symmetric_and_bounded() {
        let (store, cfg) = setup(5, 2, 5);
        let mut rng = stream(5, &[1]);
        let xr = normal_tensor(&mut rng, &[9, 5], 1.0);
        let xo = normal_tensor(&mut rng, &[9, 5], 1.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let (r, o) = (g.constant(xr.clone()), g.constant(xo));
        let a1 = actionness(&mut g, &p, &cfg, r, o).unwrap();
        let a2 = actionness(&mut g, &p, &cfg, o, r).unwrap();
        assert_eq!(g.value(a1).data(), g.value(a2).data());
        assert!(g.value(a1).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let same = actionness(&mut g, &p, &cfg, r, r).unwrap();
        let single = attention_branch(&mut g, &p, &cfg, r, r).unwrap();
        assert_eq!(g.value(same).data(), g.value(single).data());
    }

    #[test]
    fn zero_classifier_gives_uniform_snippet_posteriors() {
        let (mut store, _) = setup(4, 3, 6);
        store.insert("head.cls.w", Tensor::zeros(vec![8, 4]));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xb = g.constant(normal_tensor(&mut stream(6, &[1]), &[7, 8], 1.0));
        let s = base_cas(&mut g, &p, xb).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.0));
        let post = g.softmax(s, 1).unwrap();
        assert!(g.value(post).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_snippet_prediction_is_row_softmax() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 0.5]).unwrap());
        let pred = video_predict(&mut g, s, 1).unwrap();
        let row = g.softmax(s, 1).unwrap();
        assert_eq!(g.value(pred.probs).data(), g.value(row).data());
    }

    #[test]
    fn topk_pool_and_time_permutation() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let pred = video_predict(&mut g, s, 2).unwrap();
        assert_eq!(g.value(pred.pooled).data(), &[3.5]);

        let mut rng = stream(7, &[]);
        let cas = normal_tensor(&mut rng, &[10, 3], 1.0);
        let perm = [3, 9, 0, 4, 1, 8, 2, 7, 6, 5];
        let a = g.constant(cas.clone());
        let b = g.constant(cas.select_rows(&perm));
        let pa = video_predict(&mut g, a, 3).unwrap();
        let pb = video_predict(&mut g, b, 3).unwrap();
        assert_eq!(g.value(pa.probs).data(), g.value(pb.probs).data());
        // oversize k clamps to T
        let pc = video_predict(&mut g, a, 50).unwrap();
        assert_eq!(g.value(pc.pooled).numel(), 3);
    }

    #[test]
    fn cls_loss_minimum_is_label_entropy() {
        let labels = [1.0, 0.0, 1.0];
        let (yb, ys) = normalized_targets(&labels).unwrap();
        let entropy = |y: &[f64]| -y.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let mut g = Graph::new();
        // logits = log(y) reproduce y exactly; zeros become a very negative logit
        let logits = |y: &[f64]| Tensor::vector(y.iter().map(|&v| if v > 0.0 { v.ln() } else { -60.0 }).collect());
        let lb = g.constant(logits(&yb));
        let ls = g.constant(logits(&ys));
        let base = VideoPrediction { pooled: lb, probs: g.softmax(lb, 0).unwrap(), log_probs: g.log_softmax(lb, 0).unwrap() };
        let supp = VideoPrediction { pooled: ls, probs: g.softmax(ls, 0).unwrap(), log_probs: g.log_softmax(ls, 0).unwrap() };
        let l = loss_cls(&mut g, &base, &supp, &labels).unwrap();
        let expect = entropy(&yb) + entropy(&ys);
        assert!((g.scalar(l).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn zero_label_video_is_an_error() {
        assert!(normalized_targets(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn aux_losses_closed_cases() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::matrix(3, 2, vec![0.3, -0.2, 1.0, 0.5, -1.0, 2.0]).unwrap());
        let ones = g.constant(Tensor::vector(vec![1.0; 3]));
        let aux = aux_losses(&mut g, s, ones, 1).unwrap();
        assert_eq!(g.scalar(aux.norm).unwrap(), 1.0);

        // choose a so that 1 - a equals the background posterior
        let post = g.softmax(s, 1).unwrap();
        let a: Vec<f64> = (0..3).map(|t| 1.0 - g.value(post).get(t, 1)).collect();
        let a = g.constant(Tensor::vector(a));
        let aux = aux_losses(&mut g, s, a, 1).unwrap();
        assert!(g.scalar(aux.guide).unwrap() < 1e-30);
        assert!(g.scalar(aux.oppo).unwrap() > 0.0);
    }

    #[test]
    fn vid_loss_weighting() {
        let mut g = Graph::new();
        let cls = g.constant(Tensor::scalar(2.0));
        let aux = AuxLosses {
            oppo: g.constant(Tensor::scalar(3.0)),
            norm: g.constant(Tensor::scalar(5.0)),
            guide: g.constant(Tensor::scalar(7.0)),
        };
        let only_cls = VidWeights { cls: 1.5, oppo: 0.0, norm: 0.0, guide: 0.0 };
        let v = loss_vid(&mut g, cls, &aux, &only_cls).unwrap();
        assert_eq!(g.scalar(v).unwrap(), 3.0);
        let zero = VidWeights { cls: 0.0, oppo: 0.0, norm: 0.0, guide: 0.0 };
        let v = loss_vid(&mut g, cls, &aux, &zero).unwrap();
        assert_eq!(g.scalar(v).unwrap(), 0.0);
        let w = VidWeights { cls: 1.0, oppo: 2.0, norm: 3.0, guide: 4.0 };
        let v = loss_vid(&mut g, cls, &aux, &w).unwrap();
        assert_eq!(g.scalar(v).unwrap(), 2.0 + 6.0 + 15.0 + 28.0);
        let neg = VidWeights { cls: -1.0, ..w };
        assert!(loss_vid(&mut g, cls, &aux, &neg).is_err());
    }

    #[test]
    fn suppressed_cas_never_exceeds_nonnegative_base() {
        let (store, cfg) = setup(4, 2, 9);
        let mut rng = stream(9, &[1]);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let r = g.constant(normal_tensor(&mut rng, &[10, 4], 1.0));
        let o = g.constant(normal_tensor(&mut rng, &[10, 4], 1.0));
        let xb = fuse_base(&mut g, &p, &cfg, r, o, None).unwrap();
        let s = base_cas(&mut g, &p, xb).unwrap();
        let s = g.relu(s).unwrap();
        let a = actionness(&mut g, &p, &cfg, r, o).unwrap();
        let supp = g.scale_rows(s, a).unwrap();
        for (x, y) in g.value(supp).data().iter().zip(g.value(s).data()) {
            assert!(x <= y);
        }
    }

    /// Gradient checks over the head parameters for every base-head loss.
    #[test]
    fn head_losses_pass_gradient_checks() {
        // Instances with a kink inside the step are skipped; the screen does
        // not look at the analytic gradient.
        let (dim, c, t) = (3, 2, 8);
        let labels = vec![1.0, 0.0];
        for which in 0..5 {
            let mut checked = 0;
            for seed in 0..40 {
                let (store, cfg) = setup(dim, c, seed);
                let mut rng = stream(seed, &[1]);
                let xr = normal_tensor(&mut rng, &[t, dim], 1.0);
                let xo = normal_tensor(&mut rng, &[t, dim], 1.0);
                let k = cfg.top_k(t);
                let report = grad_check_params(&store, 1e-3, |g, p| {
                    let (r, o) = (g.constant(xr.clone()), g.constant(xo.clone()));
                    let out = forward_head(g, p, &cfg, r, o, None)?;
                    let cls = loss_cls(g, &out.p_base, &out.p_supp, &labels)?;
                    let aux = aux_losses(g, out.s_base, out.a, k)?;
                    Ok(match which {
                        0 => cls,
                        1 => aux.oppo,
                        2 => aux.norm,
                        3 => aux.guide,
                        _ => loss_vid(g, cls, &aux, &VidWeights::default())?,
                    })
                })
                .unwrap();
                if !report.is_smooth() {
                    continue;
                }
                assert!(report.max_rel_error < 1e-3, "loss {which} seed {seed}: {report:?}");
                checked += 1;
                if checked == 3 {
                    break;
                }
            }
            assert_eq!(checked, 3, "loss {which}: too few smooth instances");
        }
    }
}
