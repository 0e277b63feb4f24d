use super::*;
use crate::rng::{normal_tensor, stream};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    for &v in g.value(y).data() {
        assert!(close(v, 1.0 / 3.0, 1e-15));
    }
}

#[test]
fn cosine_of_vector_with_itself_is_one() {
    let mut rng = stream(3, &[]);
    let mut g = Graph::new();
    let v = g.constant(normal_tensor(&mut rng, &[1, 7], 2.0));
    let c = g.cosine_rows(v, v, 1e-8).unwrap();
    assert!(close(g.value(c).data()[0], 1.0, 1e-12));
}

#[test]
fn topk_mean_of_column() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.topk_mean(x, 2).unwrap();
    assert_eq!(g.value(y).data(), &[3.5]);
}

#[test]
fn sum_of_squares_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unused_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let w = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
    let loss = g.sum(x).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(w).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(NumError::NotScalar { .. })));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.0, -1.0]));
    assert!(matches!(g.ln(x), Err(NumError::NonFinite { .. })));
}

#[test]
fn shape_mismatch_is_reported() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(vec![2, 3]));
    let b = g.param(Tensor::zeros(vec![2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumError::ShapeMismatch { .. })));
    let c = g.param(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.add(a, c), Err(NumError::ShapeMismatch { .. })));
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut rng = stream(5, &[]);
    let x = normal_tensor(&mut rng, &[3, 4], 1.0);
    let err = grad_check(|g, x| g.sum(x), &x, 1e-3).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_bad_step() {
    let x = Tensor::vector(vec![1.0]);
    assert!(grad_check(|g, x| g.sum(x), &x, 0.0).is_err());
}

/// Weighted sum with fixed pseudo-random weights so every output coordinate
/// contributes a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let mut rng = stream(seed, &[99]);
    let w = g.constant(normal_tensor(&mut rng, &shape, 1.0));
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary(op: impl Fn(&mut Graph, Var) -> Result<Var>, x: Tensor) {
    let err = grad_check(|g, x| {
        let y = op(g, x)?;
        probe(g, y, 1)
    }, &x, 1e-3)
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn elementwise_gradients() {
    let mut rng = stream(11, &[]);
    let x = normal_tensor(&mut rng, &[3, 4], 1.0);
    let pos = x.map(|v| v.abs() + 0.5);
    check_unary(|g, x| g.relu(x), x.clone());
    check_unary(|g, x| g.sigmoid(x), x.clone());
    check_unary(|g, x| g.exp(x), x.clone());
    check_unary(|g, x| g.square(x), x.clone());
    check_unary(|g, x| g.scale(x, -2.5), x.clone());
    check_unary(|g, x| g.add_scalar(x, 3.0), x.clone());
    check_unary(|g, x| g.ln(x), pos.clone());
    check_unary(|g, x| g.sqrt(x), pos.clone());
    check_unary(|g, x| g.clamp_min(x, 0.1), x.clone());
    check_unary(|g, x| g.softmax(x, 0), x.clone());
    check_unary(|g, x| g.softmax(x, 1), x.clone());
    check_unary(|g, x| g.log_softmax(x, 0), x.clone());
    check_unary(|g, x| g.log_softmax(x, 1), x.clone());
    check_unary(|g, x| g.sum_axis(x, 0), x.clone());
    check_unary(|g, x| g.sum_axis(x, 1), x.clone());
    check_unary(|g, x| g.transpose(x), x.clone());
    check_unary(|g, x| g.mean(x), x.clone());
    check_unary(|g, x| g.topk_mean(x, 2), x.clone());
    check_unary(|g, x| g.gather_rows(x, &[2, 0, 2]), x.clone());
    check_unary(|g, x| g.reshape(x, &[4, 3]), x.clone());
    check_unary(|g, x| g.logsumexp_rows(x), x.clone());
}

#[test]
fn binary_gradients() {
    let mut rng = stream(12, &[]);
    let a = normal_tensor(&mut rng, &[3, 4], 1.0);
    let b = normal_tensor(&mut rng, &[3, 4], 1.0).map(|v| v.abs() + 0.5);
    let w = normal_tensor(&mut rng, &[4, 2], 1.0);
    let bias = normal_tensor(&mut rng, &[4], 1.0);
    let rows = normal_tensor(&mut rng, &[3], 1.0);
    let other = normal_tensor(&mut rng, &[5, 4], 1.0);
    type Bin = fn(&mut Graph, Var, Var) -> Result<Var>;
    let cases: Vec<(Bin, Tensor, Tensor)> = vec![
        (|g, a, b| g.add(a, b), a.clone(), b.clone()),
        (|g, a, b| g.sub(a, b), a.clone(), b.clone()),
        (|g, a, b| g.mul(a, b), a.clone(), b.clone()),
        (|g, a, b| g.div(a, b), a.clone(), b.clone()),
        (|g, a, b| g.matmul(a, b), a.clone(), w.clone()),
        (|g, a, b| g.add_bias(a, b), a.clone(), bias.clone()),
        (|g, a, b| g.scale_rows(a, b), a.clone(), rows.clone()),
        (|g, a, b| g.cosine_rows(a, b, 1e-8), a.clone(), other.clone()),
        (|g, a, b| g.cosine_paired(a, b, 1e-8), a.clone(), b.clone()),
        (|g, a, b| g.concat(&[a, b], 0), a.clone(), other.clone()),
        (|g, a, b| g.concat(&[a, b], 1), a.clone(), b.clone()),
    ];
    for (i, (op, x, y)) in cases.into_iter().enumerate() {
        let err = grad_check_many(|g, v| {
            let out = op(g, v[0], v[1])?;
            probe(g, out, i as u64)
        }, &[x, y], 1e-3)
        .unwrap();
        assert!(err < 1e-3, "case {i}: relative error {err}");
    }
}

#[test]
fn conv1d_gradient_and_same_length() {
    let mut rng = stream(13, &[]);
    let x = normal_tensor(&mut rng, &[6, 3], 1.0);
    let w = normal_tensor(&mut rng, &[3, 3, 2], 0.5);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv1d(xv, wv).unwrap();
    assert_eq!(g.value(y).shape(), &[6, 2]);
    let err = grad_check_many(|g, v| {
        let out = g.conv1d(v[0], v[1])?;
        probe(g, out, 4)
    }, &[x, w], 1e-3)
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn conv1d_matches_direct_sum() {
    let mut rng = stream(14, &[]);
    let x = normal_tensor(&mut rng, &[5, 2], 1.0);
    let w = normal_tensor(&mut rng, &[3, 2, 1], 1.0);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv1d(xv, wv).unwrap();
    for t in 0..5i64 {
        let mut expect = 0.0;
        for j in 0..3i64 {
            let src = t + j - 1;
            if !(0..5).contains(&src) {
                continue;
            }
            for i in 0..2 {
                expect += x.get(src as usize, i) * w.data()[(j as usize * 2 + i) * 1];
            }
        }
        assert!(close(g.value(y).data()[t as usize], expect, 1e-12));
    }
}

#[test]
fn gauss_logpdf_matches_closed_form_and_gradients() {
    let mut rng = stream(15, &[]);
    let z = normal_tensor(&mut rng, &[4, 3], 1.0);
    let mu = normal_tensor(&mut rng, &[2, 3], 1.0);
    let scale = normal_tensor(&mut rng, &[2, 3], 0.3).map(|v| v.abs() + 0.5);
    let mut g = Graph::new();
    let (zv, mv, sv) = (g.constant(z.clone()), g.constant(mu.clone()), g.constant(scale.clone()));
    let out = g.gauss_logpdf(zv, mv, sv).unwrap();
    for s in 0..4 {
        for t in 0..2 {
            let mut lp = 0.0;
            for k in 0..3 {
                let sd = scale.get(t, k);
                let r = (z.get(s, k) - mu.get(t, k)) / sd;
                lp += -0.5 * r * r - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            assert!(close(g.value(out).get(s, t), lp, 1e-12));
        }
    }
    let err = grad_check_many(|g, v| {
        let out = g.gauss_logpdf(v[0], v[1], v[2])?;
        probe(g, out, 5)
    }, &[z, mu, scale], 1e-3)
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

/// conv -> ReLU -> top-k -> cross-entropy, the shape of the base head.
#[test]
fn composite_head_gradient() {
    let mut rng = stream(16, &[]);
    let x = normal_tensor(&mut rng, &[10, 4], 1.0);
    let w = normal_tensor(&mut rng, &[3, 4, 3], 0.5);
    let label = Tensor::vector(vec![0.5, 0.0, 0.5]);
    let err = grad_check_many(|g, v| {
        let h = g.conv1d(v[0], v[1])?;
        let h = g.relu(h)?;
        let pooled = g.topk_mean(h, 3)?;
        let logp = g.log_softmax(pooled, 0)?;
        let y = g.constant(label.clone());
        let prod = g.mul(logp, y)?;
        let s = g.sum(prod)?;
        g.neg(s)
    }, &[x, w], 1e-3)
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn repeated_leaf_accumulates() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![3.0]));
    let a = g.scale(x, 2.0).unwrap();
    let b = g.scale(x, 5.0).unwrap();
    let s = g.add(a, b).unwrap();
    let loss = g.sum(s).unwrap();
    assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[7.0]);
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = stream(17, &[]);
        let mut g = Graph::new();
        let x = g.param(normal_tensor(&mut rng, &[8, 4], 1.0));
        let w = g.param(normal_tensor(&mut rng, &[3, 4, 4], 1.0));
        let h = g.conv1d(x, w).unwrap();
        let h = g.sigmoid(h).unwrap();
        let c = g.cosine_rows(h, x, 1e-8).unwrap();
        let loss = g.mean(c).unwrap();
        let gr = g.backward(loss).unwrap();
        (gr.get(x).unwrap().clone(), gr.get(w).unwrap().clone())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut rng = stream(18, &[]);
    let x0 = normal_tensor(&mut rng, &[5, 3], 1.0);
    let grad_of = |alpha: f64, beta: f64| {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let s = g.sigmoid(x).unwrap();
        let f = g.sum(s).unwrap();
        let q = g.square(x).unwrap();
        let h = g.mean(q).unwrap();
        let fa = g.scale(f, alpha).unwrap();
        let hb = g.scale(h, beta).unwrap();
        let loss = g.add(fa, hb).unwrap();
        g.backward(loss).unwrap().get(x).unwrap().clone()
    };
    let (gf, gh, mix) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.0, -3.0));
    for i in 0..mix.numel() {
        let expect = 2.0 * gf.data()[i] - 3.0 * gh.data()[i];
        assert!(close(mix.data()[i], expect, 1e-12));
    }
}

#[test]
fn cosine_clamps_tiny_norms() {
    let mut g = Graph::new();
    let a = g.param(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
    let b = g.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
    let c = g.cosine_rows(a, b, 1e-8).unwrap();
    assert_eq!(g.value(c).data(), &[0.0]);
    let loss = g.sum(c).unwrap();
    assert!(g.backward(loss).unwrap().get(a).unwrap().is_finite());
}
