//! Every operator's backward pass against central finite differences in f64.

use grdh_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Builds a scalar loss from leaves; leaves flagged `true` are differentiated.
type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Var + 'a;

fn check(inputs: &[Tensor<f64>], diff: &[bool], build: &Build<'_>) {
    let run = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(diff)
        .map(|(t, &d)| if d { g.param(t.clone()) } else { g.input(t.clone()) })
        .collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let h = 1e-6;
    for (idx, (t, &d)) in inputs.iter().zip(diff).enumerate() {
        if !d {
            assert!(grads.get(vars[idx]).is_none());
            continue;
        }
        let analytic = grads.get(vars[idx]).expect("gradient for differentiable leaf");
        for j in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[idx].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[idx].data_mut()[j] -= h;
            let numeric = (run(&plus) - run(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-5, "input {idx} elem {j}: analytic {a} numeric {numeric}");
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

/// Weighted sum so every output element receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var) -> Var {
    let shape = g.value(y).shape().to_vec();
    let w = Tensor::from_fn(shape, |i| ((i as f64) * 0.731).sin());
    g.sum_sq_error_mean(y, &w).unwrap()
}

#[test]
fn conv2d_stride_and_padding() {
    let mut r = rng();
    let x = random(&[2, 3, 6, 6], &mut r);
    let w = random(&[4, 3, 4, 4], &mut r);
    let b = random(&[4], &mut r);
    check(&[x, w, b], &[true, true, true], &|g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn conv2d_frozen_weights_still_pass_input_gradient() {
    let mut r = rng();
    let x = random(&[1, 2, 5, 5], &mut r);
    let w = random(&[3, 2, 3, 3], &mut r);
    check(&[x, w], &[true, false], &|g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn conv_transpose2d() {
    let mut r = rng();
    let x = random(&[2, 3, 3, 3], &mut r);
    let w = random(&[3, 2, 4, 4], &mut r);
    let b = random(&[2], &mut r);
    check(&[x, w, b], &[true, true, true], &|g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2, 6, 6]);
        weighted_sum(g, y)
    });
}

#[test]
fn linear() {
    let mut r = rng();
    let x = random(&[3, 5], &mut r);
    let w = random(&[4, 5], &mut r);
    let b = random(&[4], &mut r);
    check(&[x, w, b], &[true, true, true], &|g, v| {
        let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn batch_norm_with_affine() {
    let mut r = rng();
    let x = random(&[3, 2, 3, 3], &mut r);
    let gamma = random(&[2], &mut r);
    let beta = random(&[2], &mut r);
    check(&[x, gamma, beta], &[true, true, true], &|g, v| {
        let (n, _) = g.batch_norm(v[0]);
        let y = g.channel_affine(n, v[1], v[2]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn batch_norm_on_dense_features() {
    let mut r = rng();
    let x = random(&[4, 3], &mut r);
    check(&[x], &[true], &|g, v| {
        let (n, _) = g.batch_norm(v[0]);
        weighted_sum(g, n)
    });
}

#[test]
fn instance_norm() {
    let mut r = rng();
    let x = random(&[2, 3, 3, 3], &mut r);
    check(&[x], &[true], &|g, v| {
        let y = g.instance_norm(v[0]);
        weighted_sum(g, y)
    });
}

#[test]
fn fixed_normalize() {
    let mut r = rng();
    let x = random(&[2, 2, 2, 2], &mut r);
    check(&[x], &[true], &|g, v| {
        let y = g.normalize_with(v[0], &[0.1, -0.2], &[0.5, 2.0]).unwrap();
        weighted_sum(g, y)
    });
}

#[test]
fn pointwise_nonlinearities() {
    let mut r = rng();
    // keep clear of the kink at zero
    let x = random(&[2, 7], &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check(&[x], &[true], &|g, v| {
        let a = g.relu(v[0]);
        let b = g.leaky_relu(v[0], 0.2);
        let c = g.tanh(v[0]);
        let d = g.sigmoid(v[0]);
        let ab = g.add(a, b).unwrap();
        let cd = g.add(c, d).unwrap();
        let s = g.add(ab, cd).unwrap();
        let s = g.scale(s, 0.7);
        weighted_sum(g, s)
    });
}

#[test]
fn reshape_spatial_mean_and_mean() {
    let mut r = rng();
    let x = random(&[2, 3, 2, 2], &mut r);
    check(&[x], &[true], &|g, v| {
        let m = g.spatial_mean(v[0]).unwrap();
        let f = g.reshape(m, &[6]).unwrap();
        let sq = g.add(f, f).unwrap();
        let t = g.tanh(sq);
        g.mean(t)
    });
}

#[test]
fn loss_reductions() {
    let mut r = rng();
    let x = random(&[3, 4], &mut r);
    let target = random(&[3, 4], &mut r);
    check(&[x.clone()], &[true], &|g, v| g.mean_abs_error(v[0], &target).unwrap());
    check(&[x.clone()], &[true], &|g, v| g.sum_sq_error_mean(v[0], &target).unwrap());
    check(&[x.clone()], &[true], &|g, v| g.bce_with_logits(v[0], 1.0, 1e-7).unwrap());
    check(&[x], &[true], &|g, v| g.bce_with_logits(v[0], 0.0, 1e-7).unwrap());
}

#[test]
fn bce_of_saturated_logits_is_clamped() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new([2], vec![50.0, 50.0]).unwrap());
    let l = g.bce_with_logits(x, 0.0, 1e-7).unwrap();
    assert!((g.scalar(l) + (1e-7f64).ln()).abs() < 1e-9);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&d| d == 0.0));
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros([1, 3, 8, 8]));
    let w = g.input(Tensor::zeros([4, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1).is_err());
    let a = g.input(Tensor::zeros([2, 3]));
    let b = g.input(Tensor::zeros([3, 2]));
    assert!(g.add(a, b).is_err());
}
