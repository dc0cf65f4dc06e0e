use imsty::stylization::{
    compute_channel_stats, implicit_stylize, normalize_features, AlphaPolicy, ImplicitStylization, StyleSource,
};
use imsty::tensor::{grad_check, StatScope};
use imsty::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

/// Straight-loop per-channel population mean and std over N, H, W.
fn oracle_stats(t: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mu = vec![0.0; c];
    let mut sd = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| t.data()[(b * c + ch) * plane..][..plane].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        mu[ch] = m;
        sd[ch] = v.sqrt();
    }
    (mu, sd)
}

fn batch(seed: u64, shape: [usize; 4], shift: f64, scale: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape.to_vec(), &mut rng).map(|v| v * scale + shift)
}

#[test]
fn stats_match_oracle() {
    let t = batch(1, [3, 4, 5, 6], 2.0, 3.0);
    let s = compute_channel_stats(&t, StatScope::Minibatch, EPS).unwrap();
    let (mu, sd) = oracle_stats(&t);
    for c in 0..4 {
        assert!((s.mu[c] - mu[c]).abs() < 1e-12);
        assert!((s.sigma[c] - (sd[c] * sd[c] + EPS).sqrt()).abs() < 1e-12);
        assert!(s.sigma[c] >= EPS);
    }
}

#[test]
fn stats_invariant_under_spatial_permutation() {
    let t = batch(2, [2, 3, 4, 4], 0.0, 1.0);
    let mut d = t.data().to_vec();
    for plane in d.chunks_mut(16) {
        plane.reverse();
        plane.swap(3, 9);
    }
    let p = Tensor::new(t.shape().to_vec(), d).unwrap();
    let a = compute_channel_stats(&t, StatScope::Minibatch, EPS).unwrap();
    let b = compute_channel_stats(&p, StatScope::Minibatch, EPS).unwrap();
    for c in 0..3 {
        assert!((a.mu[c] - b.mu[c]).abs() < 1e-14);
        assert!((a.sigma[c] - b.sigma[c]).abs() < 1e-14);
    }
}

#[test]
fn normalizing_twice_equals_once() {
    // Input with exactly zero mean and unit variance per channel (the
    // population-limit premise); only then is the eps floor negligible.
    let raw = batch(3, [4, 3, 6, 6], 0.0, 1.0);
    let (mu, sd) = oracle_stats(&raw);
    let mut t = raw.clone();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let ch = (i / 36) % 3;
        *v = (*v - mu[ch]) / sd[ch];
    }
    let once = normalize_features(&t, &compute_channel_stats(&t, StatScope::Minibatch, EPS).unwrap()).unwrap();
    let twice = normalize_features(&once, &compute_channel_stats(&once, StatScope::Minibatch, EPS).unwrap()).unwrap();
    let worst = once.data().iter().zip(twice.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn normalization_is_scale_equivariant() {
    let t = batch(4, [2, 3, 5, 5], 0.5, 4.0);
    let scaled = t.map(|v| v * 7.5);
    let eps = 1e-12;
    let a = normalize_features(&t, &compute_channel_stats(&t, StatScope::Minibatch, eps).unwrap()).unwrap();
    let b = normalize_features(&scaled, &compute_channel_stats(&scaled, StatScope::Minibatch, eps).unwrap()).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn per_instance_moment_transfer() {
    let a = batch(5, [3, 2, 4, 4], 0.0, 1.0);
    let b = batch(6, [3, 2, 4, 4], 5.0, 0.3);
    let out = implicit_stylize(&a, &b, 1.0, StatScope::PerInstance, EPS).unwrap();
    let so = compute_channel_stats(&out, StatScope::PerInstance, EPS).unwrap();
    let sb = compute_channel_stats(&b, StatScope::PerInstance, EPS).unwrap();
    for i in 0..6 {
        assert!((so.mu[i] - sb.mu[i]).abs() < 1e-6);
    }
}

#[test]
fn gradient_flows_through_both_domains() {
    let a = batch(7, [2, 3, 4, 4], 0.3, 1.2);
    let b = batch(8, [2, 3, 4, 4], -0.7, 0.6);
    let block = ImplicitStylization::default();
    let bb = b.clone();
    let err = grad_check(
        move |t, v| {
            let style = t.constant(bb.clone());
            let y = block.apply(t, v, StyleSource::Features(style), 0.6)?;
            let sq = t.mul(y, y)?;
            let w = t.constant(bb.map(f64::sin));
            let p = t.mul(sq, w)?;
            Ok(t.sum_all(p))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "content {err}");
    let aa = a.clone();
    let err = grad_check(
        move |t, v| {
            let content = t.constant(aa.clone());
            let y = block.apply(t, content, StyleSource::Features(v), 0.6)?;
            let w = t.constant(aa.map(f64::cos));
            let p = t.mul(y, w)?;
            Ok(t.sum_all(p))
        },
        &b,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "style {err}");
}

#[test]
fn stop_gradient_cuts_the_style_path() {
    let block = ImplicitStylization {
        stop_gradient: true,
        ..Default::default()
    };
    let mut t = Tape::new();
    let a = t.leaf(batch(9, [2, 2, 3, 3], 0.0, 1.0).with_requires_grad(true));
    let b = t.leaf(batch(10, [2, 2, 3, 3], 1.0, 2.0).with_requires_grad(true));
    let y = block.apply(&mut t, a, StyleSource::Features(b), 0.5).unwrap();
    let sq = t.mul(y, y).unwrap();
    let l = t.sum_all(sq);
    let g = t.backward(l).unwrap();
    assert!(g.get(a).is_some());
    assert!(g.get(b).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
}

#[test]
fn fixed_stats_source_matches_feature_source() {
    let a = batch(11, [2, 3, 4, 4], 0.0, 1.0);
    let b = batch(12, [2, 3, 4, 4], 2.0, 0.5);
    let block = ImplicitStylization::default();
    let stats = compute_channel_stats(&b, StatScope::Minibatch, EPS).unwrap();
    let mut t = Tape::new();
    let av = t.constant(a.clone());
    let y = block.apply(&mut t, av, StyleSource::Stats(&stats), 0.4).unwrap();
    let direct = implicit_stylize(&a, &b, 0.4, StatScope::Minibatch, EPS).unwrap();
    assert_eq!(t.value(y), &direct);
}

#[test]
fn uniform_alpha_mean() {
    let mut s = AlphaPolicy::Uniform01 { seed: 42 }.sampler();
    let draws: Vec<f64> = (0..100_000).map(|_| s.sample_alpha()).collect();
    assert!(draws.iter().all(|a| (0.0..=1.0).contains(a)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    assert!((0.497..=0.503).contains(&mean), "{mean}");
}

#[test]
fn invalid_fixed_alpha_rejected() {
    assert!(AlphaPolicy::Fixed { value: 1.2 }.validate().is_err());
    assert!(AlphaPolicy::Fixed { value: 0.3 }.validate().is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn alpha_zero_is_bit_identity(seed in any::<u64>(), n in 1usize..4, c in 1usize..5, h in 1usize..6) {
        let a = batch(seed, [n, c, h, h + 1], 0.0, 1.0);
        let b = batch(seed ^ 1, [n, c, h + 1, h], 3.0, 2.0);
        let out = implicit_stylize(&a, &b, 0.0, StatScope::Minibatch, EPS).unwrap();
        prop_assert_eq!(out, a);
    }

    #[test]
    fn self_stylization_is_neutral(seed in any::<u64>(), k in 0usize..4) {
        let alpha = [0.0, 0.25, 0.5, 1.0][k];
        let f = batch(seed, [2, 3, 4, 4], 1.0, 2.0);
        let out = implicit_stylize(&f, &f, alpha, StatScope::Minibatch, EPS).unwrap();
        for (x, y) in out.data().iter().zip(f.data()) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn alpha_one_transfers_moments(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.1f64..4.0) {
        // eps biases the output std by about sigma_b * eps / (2 sigma_a^2); keep it far below 1e-6.
        let a = batch(seed, [3, 4, 5, 5], 0.0, 1.0);
        let b = batch(seed.wrapping_add(7), [2, 4, 3, 6], shift, scale);
        let out = implicit_stylize(&a, &b, 1.0, StatScope::Minibatch, 1e-12).unwrap();
        let (mo, so) = oracle_stats(&out);
        let (mb, sb) = oracle_stats(&b);
        for ch in 0..4 {
            prop_assert!((mo[ch] - mb[ch]).abs() < 1e-6);
            prop_assert!((so[ch] - sb[ch]).abs() < 1e-6);
        }
    }

    #[test]
    fn own_stats_normalize_to_unit(seed in any::<u64>(), shift in -5.0f64..5.0, scale in 0.5f64..4.0) {
        let f = batch(seed, [4, 3, 4, 4], shift, scale);
        let z = normalize_features(&f, &compute_channel_stats(&f, StatScope::Minibatch, EPS).unwrap()).unwrap();
        let (m, s) = oracle_stats(&z);
        for ch in 0..3 {
            prop_assert!(m[ch].abs() < 1e-6);
            prop_assert!((s[ch] - 1.0).abs() < 1e-4);
        }
    }
}
