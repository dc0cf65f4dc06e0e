use imsty::tensor::{grad_check, grad_check_sampled, BatchNormMode, RunningStats, StatScope};
use imsty::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weighted sum with fixed random weights so every output coordinate matters.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(t.shape(y).to_vec(), &mut rng(seed));
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum_all(p))
}

#[test]
fn conv2d_sum_of_ones() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let k = t.constant(Tensor::ones(vec![1, 1, 3, 3]));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.shape(y), [1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), [9.0]);
}

#[test]
fn conv2d_identity_kernel() {
    let x = Tensor::randn(vec![2, 1, 5, 6], &mut rng(1));
    let mut kd = vec![0.0; 9];
    kd[4] = 1.0;
    let mut t = Tape::new();
    let xv = t.constant(x.clone());
    let k = t.constant(Tensor::new(vec![1, 1, 3, 3], kd).unwrap());
    let y = t.conv2d(xv, k, 1, 1).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv2d_shape_mismatch_names_both_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(vec![1, 2, 4, 4]));
    let k = t.constant(Tensor::ones(vec![1, 3, 3, 3]));
    let msg = t.conv2d(x, k, 1, 0).unwrap_err().to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let x = Tensor::randn(vec![2, 3, 8, 8], &mut rng(2));
    let k = Tensor::randn(vec![4, 3, 3, 3], &mut rng(3));
    let kk = k.clone();
    let err = grad_check(
        move |t, v| {
            let k = t.constant(kk.clone());
            let y = t.conv2d(v, k, 1, 1)?;
            probe(t, y, 9)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "input {err}");
    let err = grad_check(
        move |t, k| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, k, 2, 1)?;
            probe(t, y, 10)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "kernel {err}");
}

#[test]
fn transpose_conv_broadcasts_scalar() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap());
    let k = t.constant(Tensor::ones(vec![1, 1, 2, 2]));
    let y = t.conv_transpose2d(x, k, 2, 0).unwrap();
    assert_eq!(t.shape(y), [1, 1, 2, 2]);
    assert_eq!(t.value(y).data(), [2.0; 4]);
}

#[test]
fn transpose_conv_output_size() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(vec![1, 3, 4, 4]));
    let k = t.constant(Tensor::ones(vec![3, 2, 4, 4]));
    let y = t.conv_transpose2d(x, k, 2, 1).unwrap();
    assert_eq!(t.shape(y), [1, 2, 8, 8]);
}

#[test]
fn transpose_conv_is_adjoint_of_conv() {
    let mut r = rng(4);
    let mut checked = 0;
    while checked < 20 {
        let n = r.random_range(1..3);
        let ci = r.random_range(1..4);
        let co = r.random_range(1..4);
        let k = r.random_range(1..5);
        let s = r.random_range(1..3);
        let p = r.random_range(0..k);
        let h = r.random_range(k.max(2)..10);
        // Matched shapes only: otherwise the transpose drops trailing rows.
        if (h + 2 * p - k) % s != 0 {
            continue;
        }
        let x = Tensor::randn(vec![n, ci, h, h], &mut r);
        let w = Tensor::randn(vec![co, ci, k, k], &mut r);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w);
        let y = t.conv2d(xv, wv, s, p).unwrap();
        let probe_y = Tensor::randn(t.shape(y).to_vec(), &mut r);
        let lhs = t.value(y).dot(&probe_y).unwrap();
        let yv = t.constant(probe_y);
        let back = t.conv_transpose2d(yv, wv, s, p).unwrap();
        let rhs = x.dot(t.value(back)).unwrap();
        let rel = (lhs - rhs).abs() / lhs.abs().max(1.0);
        assert!(rel < 1e-10, "n{n} ci{ci} co{co} k{k} s{s} p{p} h{h}: {lhs} vs {rhs}");
        checked += 1;
    }
}

#[test]
fn transpose_conv_gradients() {
    let x = Tensor::randn(vec![2, 3, 4, 4], &mut rng(5));
    let k = Tensor::randn(vec![3, 2, 4, 4], &mut rng(6));
    let kk = k.clone();
    let err = grad_check(
        move |t, v| {
            let k = t.constant(kk.clone());
            let y = t.conv_transpose2d(v, k, 2, 1)?;
            probe(t, y, 11)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "input {err}");
    let err = grad_check(
        move |t, k| {
            let xv = t.constant(x.clone());
            let y = t.conv_transpose2d(xv, k, 2, 1)?;
            probe(t, y, 12)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "kernel {err}");
}

fn bn_train(t: &mut Tape, x: Var, c: usize, running: &mut RunningStats) -> Result<Var> {
    let g = t.constant(Tensor::ones(vec![c]));
    let b = t.constant(Tensor::zeros(vec![c]));
    t.batch_norm2d(x, g, b, BatchNormMode::Train { running, momentum: 0.1 }, 1e-5)
}

#[test]
fn batch_norm_constant_input_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(vec![2, 3, 2, 2], 4.0));
    let y = bn_train(&mut t, x, 3, &mut RunningStats::new(3)).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn batch_norm_moments() {
    let mut r = rng(7);
    for _ in 0..10 {
        let x = Tensor::randn(vec![4, 3, 5, 5], &mut r).map(|v| 3.0 * v + 1.5);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let y = bn_train(&mut t, xv, 3, &mut RunningStats::new(3)).unwrap();
        let yd = t.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|b| (0..25).map(move |i| (b, i))).map(|(b, i)| yd[(b * 3 + ch) * 25 + i]).collect();
            let xs: Vec<f64> = (0..4).flat_map(|b| (0..25).map(move |i| (b, i))).map(|(b, i)| x.data()[(b * 3 + ch) * 25 + i]).collect();
            let m = vals.iter().sum::<f64>() / 100.0;
            let v = vals.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 100.0;
            let xm = xs.iter().sum::<f64>() / 100.0;
            let xv = xs.iter().map(|e| (e - xm) * (e - xm)).sum::<f64>() / 100.0;
            let expected = xv / (xv + 1e-5);
            assert!(m.abs() < 1e-6);
            assert!((v / expected - 1.0).abs() < 1e-4, "{v} vs {expected}");
        }
    }
}

#[test]
fn batch_norm_rejects_single_value_per_channel() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::ones(vec![1, 2, 1, 1]));
    assert!(bn_train(&mut t, x, 2, &mut RunningStats::new(2)).is_err());
}

#[test]
fn batch_norm_gradients() {
    let x = Tensor::randn(vec![3, 2, 4, 4], &mut rng(8));
    let gb = Tensor::randn(vec![2], &mut rng(9));
    let err = grad_check(
        move |t, v| {
            let g = t.constant(gb.clone());
            let b = t.constant(gb.map(|e| e * 0.5));
            let mut rs = RunningStats::new(2);
            let y = t.batch_norm2d(v, g, b, BatchNormMode::Train { running: &mut rs, momentum: 0.1 }, 1e-5)?;
            probe(t, y, 13)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let gamma = Tensor::randn(vec![2], &mut rng(10));
    let err = grad_check(
        move |t, g| {
            let xv = t.constant(x.clone());
            let b = t.constant(Tensor::zeros(vec![2]));
            let rs = RunningStats { mean: vec![0.2, -0.1], var: vec![1.5, 0.7] };
            let y = t.batch_norm2d(xv, g, b, BatchNormMode::Eval { running: &rs }, 1e-5)?;
            probe(t, y, 14)
        },
        &gamma,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn batch_norm_updates_running_stats_unbiased() {
    let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut t = Tape::new();
    let xv = t.constant(x);
    let mut rs = RunningStats::new(1);
    bn_train(&mut t, xv, 1, &mut rs).unwrap();
    assert!((rs.mean[0] - 0.25).abs() < 1e-15);
    // unbiased variance 5/3
    assert!((rs.var[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn small_op_examples() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
    let m = t.mse_loss(a, &Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
    assert_eq!(t.value(m).data(), [0.0]);

    let z = t.constant(Tensor::zeros(vec![1]));
    let b = t.bce_with_logits_loss(z, &Tensor::full(vec![1], 0.5)).unwrap();
    assert!((t.value(b).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    assert!(t.bce_with_logits_loss(z, &Tensor::full(vec![1], 1.5)).is_err());

    let z4 = t.constant(Tensor::zeros(vec![4]));
    let s = t.softmax(z4).unwrap();
    assert_eq!(t.value(s).data(), [0.25; 4]);
    let scalar = t.constant(Tensor::scalar(1.0));
    assert!(t.softmax(scalar).is_err());
}

#[test]
fn elementwise_and_pooling_gradients() {
    let mut r = rng(11);
    let x = Tensor::randn(vec![2, 3, 6, 6], &mut r);
    type Build = fn(&mut Tape, Var) -> Result<Var>;
    let cases: Vec<(&str, Build)> = vec![
        ("sigmoid", |t, v| Ok(t.sigmoid(v))),
        ("max_pool2d", |t, v| t.max_pool2d(v, 2)),
        ("softmax", |t, v| {
            let f = t.flatten(v)?;
            t.softmax(f)
        }),
        ("channel_mean", |t, v| t.channel_mean(v, StatScope::Minibatch)),
        ("channel_mean_instance", |t, v| {
            let m = t.channel_mean(v, StatScope::PerInstance)?;
            let s = t.shape(v).to_vec();
            t.broadcast_channels(m, StatScope::PerInstance, &s)
        }),
        ("sqrt", |t, v| {
            let sq = t.mul(v, v)?;
            let p = t.add_scalar(sq, 0.5);
            t.sqrt(p)
        }),
        ("div", |t, v| {
            let sq = t.mul(v, v)?;
            let d = t.add_scalar(sq, 1.0);
            t.div(v, d)
        }),
    ];
    for (i, (name, f)) in cases.into_iter().enumerate() {
        let err = grad_check(
            move |t, v| {
                let y = f(t, v)?;
                probe(t, y, 100 + i as u64)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn linear_and_loss_gradients() {
    let mut r = rng(12);
    let x = Tensor::randn(vec![4, 6], &mut r);
    let w = Tensor::randn(vec![3, 6], &mut r);
    let target = Tensor::new(vec![4, 3], (0..12).map(|i| (i % 3) as f64 / 2.0).collect()).unwrap();
    let tg = target.clone();
    let err = grad_check(
        move |t, v| {
            let wv = t.constant(w.clone());
            let b = t.constant(Tensor::full(vec![3], 0.1));
            let y = t.linear(v, wv, Some(b))?;
            t.bce_with_logits_loss(y, &tg)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let keep: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
    let err = grad_check(move |t, v| t.masked_mse_loss(v, &target.reshape(vec![4, 3]).unwrap().map(|e| e - 0.2).reshape(vec![4, 3]).unwrap(), &keep), &Tensor::randn(vec![4, 3], &mut r), 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn large_input_sampled_grad_check() {
    let x = Tensor::randn(vec![4, 8, 16, 16], &mut rng(13));
    let k = Tensor::randn(vec![8, 8, 3, 3], &mut rng(14));
    let err = grad_check_sampled(
        move |t, v| {
            let kv = t.constant(k.clone());
            let y = t.conv2d(v, kv, 1, 1)?;
            let y = t.relu(y);
            probe(t, y, 15)
        },
        &x,
        1e-5,
        64,
        1,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forward_ops_are_deterministic() {
    let run = || {
        let x = Tensor::randn(vec![2, 3, 9, 9], &mut rng(15));
        let k = Tensor::randn(vec![5, 3, 3, 3], &mut rng(16));
        let mut t = Tape::new();
        let xv = t.constant(x);
        let kv = t.constant(k);
        let y = t.conv2d(xv, kv, 2, 1).unwrap();
        let y = t.conv_transpose2d(y, kv, 2, 1).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
