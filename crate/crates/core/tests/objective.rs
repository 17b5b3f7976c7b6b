use gaitgl::autodiff::{grad_check, ParamStore};
use gaitgl::objective::{
    combined_loss, cross_entropy, cross_entropy_loss, triplet_ba, triplet_loss, LossConfig, TripletOrder,
    TripletReduction,
};
use gaitgl::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Brute-force batch-all triplet loss over explicit (a, p, n) triples.
fn triplet_oracle(e: &Tensor<f64>, labels: &[usize], m: f64, nonzero: bool, printed: bool) -> f64 {
    let s = e.shape();
    let (n, h, b) = (s[0], s[1], s[2]);
    let v = |i: usize, st: usize| &e.data()[(i * h + st) * b..(i * h + st + 1) * b];
    let mut acc = 0.0;
    for st in 0..h {
        let mut terms = Vec::new();
        for a in 0..n {
            for p in 0..n {
                for q in 0..n {
                    if p == a || labels[p] != labels[a] || labels[q] == labels[a] {
                        continue;
                    }
                    let (dap, dan) = (dist(v(a, st), v(p, st)), dist(v(a, st), v(q, st)));
                    let t = if printed { dan - dap + m } else { dap - dan + m };
                    terms.push(t.max(0.0));
                }
            }
        }
        let count = if nonzero { terms.iter().filter(|t| **t > 0.0).count().max(1) } else { terms.len() };
        acc += terms.iter().sum::<f64>() / count as f64;
    }
    acc / h as f64
}

fn cfg(reduction: TripletReduction, order: TripletOrder) -> LossConfig {
    LossConfig { reduction, order, ..LossConfig::new(0.2, 3).unwrap() }
}

#[test]
fn triplet_matches_brute_force() {
    let labels = [0, 0, 1, 1, 2, 2];
    for seed in 0..5 {
        let e = rand_t(&[6, 1, 4], seed);
        for (red, nz) in [(TripletReduction::MeanAll, false), (TripletReduction::MeanNonzero, true)] {
            for (ord, printed) in [(TripletOrder::Corrected, false), (TripletOrder::Printed, true)] {
                let got = triplet_ba(&e, &labels, &cfg(red, ord)).unwrap();
                let want = triplet_oracle(&e, &labels, 0.2, nz, printed);
                assert!((got - want).abs() < 1e-9, "{red:?} {ord:?}: {got} vs {want}");
            }
        }
        let e = rand_t(&[6, 3, 4], seed + 100);
        let got = triplet_ba(&e, &labels, &cfg(TripletReduction::MeanAll, TripletOrder::Corrected)).unwrap();
        assert!((got - triplet_oracle(&e, &labels, 0.2, false, false)).abs() < 1e-9);
    }
}

/// log-softmax computed directly, no shift.
fn ce_oracle(l: &Tensor<f64>, labels: &[usize]) -> f64 {
    let s = l.shape();
    let (n, h, c) = (s[0], s[1], s[2]);
    let mut acc = 0.0;
    for i in 0..n {
        for st in 0..h {
            let row: Vec<f64> = (0..c).map(|k| l.at(&[i, st, k])).collect();
            let log_z = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            acc -= row[labels[i]] - log_z;
        }
    }
    acc / (n * h) as f64
}

#[test]
fn cross_entropy_matches_log_softmax() {
    for seed in 0..5 {
        let l = rand_t(&[4, 2, 5], seed).map(|v| 3.0 * v);
        let labels = [0, 4, 2, 2];
        let got = cross_entropy(&l, &labels).unwrap();
        assert!((got - ce_oracle(&l, &labels)).abs() < 1e-9);
        assert!(got >= 0.0);
    }
}

#[test]
fn loss_gradients_pass_grad_check() {
    let labels = vec![0, 0, 1, 1, 2, 2];
    for seed in 0..3 {
        let mut store = ParamStore::new();
        store.add("emb", rand_t(&[6, 2, 3], seed)).unwrap();
        let c = cfg(TripletReduction::MeanAll, TripletOrder::Corrected);
        let l = labels.clone();
        let r = grad_check(
            move |t, s| {
                let e = t.param(s, s.id("emb").unwrap());
                triplet_loss(t, e, &l, &c)
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");

        let mut store = ParamStore::new();
        store.add("logits", rand_t(&[6, 2, 3], seed + 10)).unwrap();
        let l = labels.clone();
        let r = grad_check(
            move |t, s| {
                let z = t.param(s, s.id("logits").unwrap());
                cross_entropy_loss(t, z, &l)
            },
            &mut store,
            1e-6,
        )
        .unwrap();
        assert!(r.passes(1e-3), "{r:?}");
    }
}

#[test]
fn combined_gradient_is_sum_of_branches() {
    // shared embedding feeds both the triplet loss and a linear classifier
    let labels = vec![0, 0, 1, 1];
    let mut store = ParamStore::new();
    store.add("emb", rand_t(&[4, 2, 3], 40)).unwrap();
    let w = rand_t(&[2, 3, 2], 41);
    let c = LossConfig::new(0.2, 2).unwrap();
    let l = labels.clone();
    let r = grad_check(
        move |t, s| {
            let e = t.param(s, s.id("emb").unwrap());
            let wv = t.constant(w.clone());
            let z = t.separate_fc(e, wv)?;
            let tri = triplet_loss(t, e, &l, &c)?;
            let ce = cross_entropy_loss(t, z, &l)?;
            combined_loss(t, tri, ce)
        },
        &mut store,
        1e-6,
    )
    .unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn doubling_separated_batch_keeps_zero_loss() {
    let c = LossConfig::new(0.2, 2).unwrap();
    // within-class spread 0.1, between-class gap 1.0: slack well above m
    let e: Tensor<f64> = Tensor::from_f64(&[4, 1, 2], &[0.0, 0.0, 0.1, 0.0, 1.0, 1.0, 1.1, 1.0]).unwrap();
    assert_eq!(triplet_ba(&e, &[0, 0, 1, 1], &c).unwrap(), 0.0);
    assert_eq!(triplet_ba(&e.map(|v| 2.0 * v), &[0, 0, 1, 1], &c).unwrap(), 0.0);
}

proptest! {
    #[test]
    fn triplet_ignores_row_order(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let labels = [0, 0, 1, 1, 2, 2];
        let e = rand_t(&[6, 2, 3], seed);
        let mut data = Vec::new();
        for &i in &perm {
            data.extend_from_slice(&e.data()[i * 6..(i + 1) * 6]);
        }
        let ep = Tensor::from_vec(&[6, 2, 3], data).unwrap();
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let c = LossConfig::new(0.2, 3).unwrap();
        let a = triplet_ba(&e, &labels, &c).unwrap();
        let b = triplet_ba(&ep, &lp, &c).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
