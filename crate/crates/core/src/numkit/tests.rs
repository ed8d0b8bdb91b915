use super::*;
use crate::testutil::{fd_check_input, rel_err};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_identity() {
    let g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::identity(2));
    let c = a.matmul(i).unwrap();
    assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = a.matmul(b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
}

#[test]
fn l2_normalize_three_four_five() {
    let g = Graph::new();
    let v = g
        .constant(Tensor::from_vec(vec![3.0, 4.0]))
        .normalize_last();
    assert!(close(v.value().data(), &[0.6, 0.8], 1e-15));
}

#[test]
fn leaky_relu_slope() {
    let g = Graph::new();
    let v = g
        .constant(Tensor::from_vec(vec![-1.0, 2.0]))
        .leaky_relu(0.2);
    assert_eq!(v.value().data(), &[-0.2, 2.0]);
}

#[test]
fn broadcast_only_over_leading_axis() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[4, 3]));
    assert!(a.add(g.constant(Tensor::zeros(&[3]))).is_ok());
    assert!(a.add(g.constant(Tensor::zeros(&[4]))).is_err());
    assert!(a.mul(g.constant(Tensor::zeros(&[2, 3]))).is_err());
}

#[test]
fn backward_sum_of_squares() {
    let g = Graph::new();
    let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
    let loss = w.mul(w).unwrap().sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_zero_loss_gives_zero_grad() {
    let g = Graph::new();
    let w = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 5.0]).with_requires_grad(true));
    let loss = w.scale(0.0).sum();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let g = Graph::new();
    let w = g.leaf(Tensor::from_vec(vec![1.0, 2.0]).with_requires_grad(true));
    assert!(matches!(
        g.backward(w.square()),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn mean_tanh_matches_finite_differences() {
    let mut rng = Rng::new(11);
    let x = rng.normal_tensor(&[7]);
    let err = fd_check_input(&x, 1e-5, |_, w| w.tanh().mean());
    assert!(err < 1e-6, "rel err {err}");
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, 2.0]));
    for _ in 0..2 {
        let g = Graph::new();
        let w = g.param(&store, id);
        let loss = w.square().sum();
        g.backward_into(loss, &mut store).unwrap();
    }
    assert_eq!(store.get(id).grad().unwrap(), &[4.0, 8.0]);
}

#[test]
fn tape_isolation_after_zero_grad() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![0.5, -1.5]));
    let g1 = Graph::new();
    let w = g1.param(&store, id);
    g1.backward_into(w.exp().sum(), &mut store).unwrap();
    store.zero_grad();
    let g2 = Graph::new();
    let w = g2.param(&store, id);
    g2.backward_into(w.square().sum(), &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[1.0, -3.0]);
}

#[test]
fn shared_param_bind_sums_both_uses() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![3.0]));
    let g = Graph::new();
    let a = g.param(&store, id);
    let b = g.param(&store, id);
    assert_eq!(a.id(), b.id());
    let loss = a.mul(b).unwrap().sum();
    g.backward_into(loss, &mut store).unwrap();
    assert_eq!(store.get(id).grad().unwrap(), &[6.0]);
}

#[test]
fn frozen_param_gets_no_grad() {
    let mut store = ParamStore::new();
    let id = store.add("e1.w", Tensor::from_vec(vec![1.0]));
    store.set_trainable("e1.", false);
    let g = Graph::new();
    let w = g.param(&store, id);
    let loss = w.square().sum();
    g.backward_into(loss, &mut store).unwrap();
    assert!(store.get(id).grad().is_none());
}

/// Every differentiable op against central differences on random inputs.
#[test]
fn every_op_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let x = rng.normal_tensor(&[3, 4]);
    let other = rng.normal_tensor(&[4, 2]);
    let row = rng.normal_tensor(&[4]);
    let pos = x.map(|v| v.abs() + 0.5);
    let ops: Vec<(
        &str,
        Tensor,
        Box<dyn for<'a> Fn(&'a Graph, Var<'a>) -> Var<'a>>,
    )> = vec![
        (
            "matmul",
            x.clone(),
            Box::new(move |g, w| w.matmul(g.constant(other.clone())).unwrap().square().sum()),
        ),
        (
            "matmul_rhs",
            x.clone(),
            Box::new(|g, w| {
                g.constant(Tensor::full(&[2, 3], 0.3))
                    .matmul(w)
                    .unwrap()
                    .tanh()
                    .sum()
            }),
        ),
        (
            "add_row",
            x.clone(),
            Box::new({
                let r = row.clone();
                move |g, w| w.add(g.constant(r.clone())).unwrap().square().mean()
            }),
        ),
        (
            "row_param",
            row.clone(),
            Box::new({
                let xx = x.clone();
                move |g, w| g.constant(xx.clone()).mul(w).unwrap().square().sum()
            }),
        ),
        (
            "sub",
            x.clone(),
            Box::new(|_, w| w.sub(w.tanh()).unwrap().square().sum()),
        ),
        (
            "scale_add",
            x.clone(),
            Box::new(|_, w| w.scale(1.7).add_scalar(0.3).square().sum()),
        ),
        ("exp", x.clone(), Box::new(|_, w| w.exp().mean())),
        ("log", pos.clone(), Box::new(|_, w| w.log().sum())),
        ("sqrt", pos.clone(), Box::new(|_, w| w.sqrt().sum())),
        ("relu", x.clone(), Box::new(|_, w| w.relu().square().sum())),
        (
            "leaky",
            x.clone(),
            Box::new(|_, w| w.leaky_relu(0.2).square().sum()),
        ),
        ("softplus", x.clone(), Box::new(|_, w| w.softplus().sum())),
        (
            "sum_last",
            x.clone(),
            Box::new(|_, w| w.sum_last().square().sum()),
        ),
        (
            "norm_last",
            x.clone(),
            Box::new(|_, w| w.norm_last().tanh().sum()),
        ),
        (
            "normalize",
            x.clone(),
            Box::new({
                let o = rng.normal_tensor(&[3, 4]);
                move |g, w| w.normalize_last().mul(g.constant(o.clone())).unwrap().sum()
            }),
        ),
        (
            "concat",
            x.clone(),
            Box::new(|_, w| w.concat_last(w.square()).unwrap().tanh().sum()),
        ),
        (
            "slice",
            x.clone(),
            Box::new(|_, w| w.slice_last(1, 2).unwrap().exp().sum()),
        ),
        (
            "select_rows",
            x.clone(),
            Box::new(|_, w| w.select_rows(&[2, 0, 2]).unwrap().square().sum()),
        ),
        (
            "broadcast",
            row.clone(),
            Box::new(|_, w| w.broadcast_rows(3).tanh().sum()),
        ),
        (
            "reshape",
            x.clone(),
            Box::new(|_, w| {
                w.reshape(&[2, 6])
                    .unwrap()
                    .slice_last(0, 3)
                    .unwrap()
                    .square()
                    .sum()
            }),
        ),
    ];
    for (name, input, f) in ops {
        let err = fd_check_input(&input, 1e-5, |g, w| f(g, w));
        assert!(err < 1e-5, "{name}: rel err {err}");
    }
}

#[test]
fn conv_all_ones() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
    let y = x.conv2d(k, 4, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 1, 1, 1]);
    assert_eq!(y.value().data(), &[16.0]);
}

#[test]
fn conv_zero_kernel() {
    let mut rng = Rng::new(2);
    let g = Graph::new();
    let x = g.constant(rng.normal_tensor(&[2, 3, 8, 8]));
    let k = g.constant(Tensor::zeros(&[5, 3, 4, 4]));
    let y = x.conv2d(k, 2, 1).unwrap();
    assert_eq!(y.shape(), vec![2, 5, 4, 4]);
    assert!(y.value().data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_geometry_errors() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 8, 8]));
    assert!(x
        .conv2d(g.constant(Tensor::zeros(&[1, 3, 4, 4])), 2, 1)
        .is_err());
    assert!(x
        .conv2d(g.constant(Tensor::zeros(&[1, 2, 4, 4])), 3, 0)
        .is_err());
}

/// Direct nested-loop convolution; independent of the im2col path.
fn conv_naive(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; b * co * oh * ow];
    for bi in 0..b {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.data()
                                        [((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                        * k.data()[((o * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((bi * co + o) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_naive_loops() {
    let mut rng = Rng::new(8);
    let x = rng.normal_tensor(&[2, 3, 10, 10]);
    let k = rng.normal_tensor(&[4, 3, 4, 4]);
    let fast = conv2d_forward(&x, &k, 2, 1).unwrap();
    let slow = conv_naive(&x, &k, 2, 1);
    assert!(close(fast.data(), &slow, 1e-12));
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut rng = Rng::new(21);
    let x = rng.normal_tensor(&[1, 2, 8, 8]);
    let k = rng.normal_tensor(&[3, 2, 4, 4]);
    let bias = rng.normal_tensor(&[3]);
    let (kk, bb) = (k.clone(), bias.clone());
    let err_x = fd_check_input(&x, 1e-5, move |g, w| {
        w.conv2d(g.constant(kk.clone()), 2, 1)
            .unwrap()
            .add_channel_bias(g.constant(bb.clone()))
            .unwrap()
            .tanh()
            .sum()
    });
    assert!(err_x < 1e-5, "input grad rel err {err_x}");
    let xx = x.clone();
    let err_k = fd_check_input(&k, 1e-5, move |g, w| {
        g.constant(xx.clone()).conv2d(w, 2, 1).unwrap().tanh().sum()
    });
    assert!(err_k < 1e-5, "kernel grad rel err {err_k}");
    let (xx, kk) = (x.clone(), k.clone());
    let err_b = fd_check_input(&bias, 1e-5, move |g, w| {
        g.constant(xx.clone())
            .conv2d(g.constant(kk.clone()), 2, 1)
            .unwrap()
            .add_channel_bias(w)
            .unwrap()
            .square()
            .mean()
    });
    assert!(err_b < 1e-5, "bias grad rel err {err_b}");
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![1.0, -2.0]));
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1), vec![id], &store);
    store.get_mut(id).accumulate_grad(&[0.0, 0.0]);
    adam.step(&mut store).unwrap();
    assert_eq!(store.get(id).data(), &[1.0, -2.0]);
    assert!(store.get(id).grad().is_none());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![0.0]));
    let mut adam = AdamState::new(AdamConfig::with_lr(0.1), vec![id], &store);
    store.get_mut(id).accumulate_grad(&[1.0]);
    adam.step(&mut store).unwrap();
    // m_hat = v_hat = 1 after bias correction: step = 0.1 / (1 + 1e-8)
    let expected = -0.1 / (1.0 + 1e-8);
    assert!((store.get(id).data()[0] - expected).abs() < 1e-15);
    assert_eq!(adam.step_count, 1);
}

#[test]
fn adam_missing_grad_is_contract_error() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![0.0]));
    let mut adam = AdamState::new(AdamConfig::default(), vec![id], &store);
    assert!(matches!(
        adam.step(&mut store),
        Err(crate::Error::Contract(_))
    ));
}

#[test]
fn adam_converges_on_quadratic_bowl() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_vec(vec![3.0, -2.0, 1.5]));
    let target = Tensor::from_vec(vec![0.5, 1.0, -1.0]);
    let loss_of = |store: &ParamStore| -> f64 {
        store
            .get(id)
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let initial = loss_of(&store);
    let mut adam = AdamState::new(AdamConfig::with_lr(0.05), vec![id], &store);
    for _ in 0..500 {
        let g = Graph::new();
        let w = g.param(&store, id);
        let loss = w.sub(g.constant(target.clone())).unwrap().square().sum();
        g.backward_into(loss, &mut store).unwrap();
        adam.step(&mut store).unwrap();
    }
    assert!(
        loss_of(&store) < 1e-4 * initial,
        "{} vs {}",
        loss_of(&store),
        initial
    );
}

#[test]
fn identical_seeds_produce_identical_tensors() {
    let run = || {
        let mut rng = Rng::new(77);
        let g = Graph::new();
        let a = g.constant(rng.normal_tensor(&[4, 5]));
        let b = g.constant(rng.normal_tensor(&[5, 3]));
        let c = a.matmul(b).unwrap().tanh().normalize_last();
        c.value()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn rel_err_is_symmetric_and_zero_on_equal() {
    assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((rel_err(&[1.0], &[1.1]) - rel_err(&[1.1], &[1.0])).abs() < 1e-15);
}
