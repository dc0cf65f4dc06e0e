use imsty::metrics::{accuracy, pck, pck_per_joint};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn brute_accuracy(p: &[usize], t: &[usize]) -> f64 {
    let mut hits = 0;
    for i in 0..p.len() {
        if p[i] == t[i] {
            hits += 1;
        }
    }
    hits as f64 / p.len() as f64
}

fn brute_pck(p: &[[f64; 2]], t: &[[f64; 2]], v: &[bool], size: usize, frac: f64) -> Option<f64> {
    let (mut hits, mut n) = (0, 0);
    for i in 0..p.len() {
        if !v[i] {
            continue;
        }
        n += 1;
        let d = ((p[i][0] - t[i][0]).powi(2) + (p[i][1] - t[i][1]).powi(2)).sqrt();
        if d <= frac * size as f64 {
            hits += 1;
        }
    }
    (n > 0).then(|| hits as f64 / n as f64)
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, size: f64, integral: bool) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let mut p = [rng.random_range(0.0..size), rng.random_range(0.0..size)];
            if integral {
                p = p.map(f64::floor);
            }
            p
        })
        .collect()
}

#[test]
fn accuracy_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let n = rng.random_range(1..300);
        let k = rng.random_range(1..12);
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        assert_eq!(accuracy(&p, &t).unwrap(), brute_accuracy(&p, &t));
    }
}

#[test]
fn pck_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..1000 {
        let joints = rng.random_range(1..6);
        let n = rng.random_range(1..40) * joints;
        let size = [32, 64, 100, 256][case % 4];
        // Integral coordinates put many distances exactly on the threshold.
        let integral = case % 2 == 0;
        let t = random_points(&mut rng, n, size as f64, integral);
        let p: Vec<[f64; 2]> = t
            .iter()
            .map(|q| {
                let mut d = [rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)];
                if integral {
                    d = d.map(f64::round);
                }
                [q[0] + d[0], q[1] + d[1]]
            })
            .collect();
        let v: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let frac = [0.05, 0.1, 0.02][case % 3];
        match brute_pck(&p, &t, &v, size, frac) {
            Some(expect) => assert_eq!(pck(&p, &t, &v, size, frac).unwrap(), expect),
            None => assert!(pck(&p, &t, &v, size, frac).is_err()),
        }
        let per = pck_per_joint(&p, &t, &v, joints, size, frac).unwrap();
        for (j, got) in per.iter().enumerate() {
            let idx: Vec<usize> = (j..n).step_by(joints).collect();
            let sel = |xs: &[[f64; 2]]| idx.iter().map(|&i| xs[i]).collect::<Vec<_>>();
            let vj: Vec<bool> = idx.iter().map(|&i| v[i]).collect();
            assert_eq!(*got, brute_pck(&sel(&p), &sel(&t), &vj, size, frac));
        }
    }
}

#[test]
fn metric_examples_and_properties() {
    let t = [[0.0, 0.0]; 2];
    assert_eq!(pck(&[[3.0, 4.0], [0.0, 4.9]], &t, &[true, true], 100, 0.05).unwrap(), 1.0);
    assert_eq!(pck(&[[3.0, 0.0], [7.0, 0.0]], &t, &[true, true], 100, 0.05).unwrap(), 0.5);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth = random_points(&mut rng, 200, 64.0, false);
    let pred = random_points(&mut rng, 200, 64.0, false);
    let valid = vec![true; 200];
    let mut last = 0.0;
    for frac in [0.01, 0.05, 0.1, 0.3, 1.0] {
        let v = pck(&pred, &truth, &valid, 64, frac).unwrap();
        assert!(v >= last);
        last = v;
    }
    let mut order: Vec<usize> = (0..200).collect();
    order.shuffle(&mut rng);
    let perm = |xs: &[[f64; 2]]| order.iter().map(|&i| xs[i]).collect::<Vec<_>>();
    assert_eq!(
        pck(&perm(&pred), &perm(&truth), &valid, 64, 0.1).unwrap(),
        pck(&pred, &truth, &valid, 64, 0.1).unwrap()
    );
    let classes: Vec<usize> = (0..50).map(|i| i % 7).collect();
    let guess: Vec<usize> = (0..50).map(|i| i % 5).collect();
    let mut idx: Vec<usize> = (0..50).collect();
    idx.shuffle(&mut rng);
    let p2: Vec<usize> = idx.iter().map(|&i| guess[i]).collect();
    let t2: Vec<usize> = idx.iter().map(|&i| classes[i]).collect();
    assert_eq!(accuracy(&p2, &t2).unwrap(), accuracy(&guess, &classes).unwrap());
}
