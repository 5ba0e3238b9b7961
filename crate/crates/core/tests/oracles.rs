//! Closed-form and brute-force oracles for the numerical cores.

use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use survens_core::cox::{cox_grad_hess, cox_nll};
use survens_core::deepsurv::{loss_and_flat_grad, Activation, DeepSurvModel, MlpConfig};
use survens_core::ensemble::{aggregate_bma, aggregate_ea, BmaWeights, RiskScores, WeightSource};
use survens_core::impute::pool;
use survens_core::metrics::{auc_curve, c_index, concordance_pairs, trapezoid_mean};
use survens_core::rsf::{fit_rsf, nelson_aalen, Node, RsfParams};
use survens_core::SurvivalDataset;

fn random_instance(rng: &mut ChaCha8Rng, n: usize, p: usize) -> SurvivalDataset {
    let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
    let time: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..10.0)).collect();
    let mut event: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    event[0] = true;
    SurvivalDataset::new(
        x,
        (0..p).map(|j| format!("f{j}")).collect(),
        time,
        event,
        (0..n).map(|i| i.to_string()).collect(),
    )
    .unwrap()
}

/// Harrell's pair rule written out directly.
fn brute_cindex(s: &[f64], t: &[f64], e: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if i == j {
                continue;
            }
            let comparable = (e[i] && t[i] < t[j]) || (t[i] == t[j] && e[i] && !e[j]);
            if comparable {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

#[test]
fn cindex_matches_pair_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(2..=8);
        // coarse values so ties in time and score occur
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(1..5) as f64).collect();
        let e: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        match (brute_cindex(&s, &t, &e), c_index(&s, &t, &e)) {
            (Some(b), Ok(c)) => assert_eq!(b, c),
            (None, Err(_)) => {}
            (b, c) => panic!("disagree: {b:?} vs {c:?}"),
        }
    }
}

#[test]
fn auc_without_censoring_is_unweighted() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 40;
    let s: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.37 + rng.random::<f64>() * 0.1).collect();
    let e = vec![true; n];
    let curve = auc_curve(&s, &t, &e).unwrap();
    for (&g, a) in curve.grid.iter().zip(&curve.auc) {
        let cases: Vec<usize> = (0..n).filter(|&i| t[i] <= g).collect();
        let controls: Vec<usize> = (0..n).filter(|&j| t[j] > g).collect();
        if cases.is_empty() || controls.is_empty() {
            assert!(a.is_none());
            continue;
        }
        let mut wins = 0.0;
        for &i in &cases {
            for &j in &controls {
                wins += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        assert_eq!(a.unwrap(), wins / (cases.len() * controls.len()) as f64);
    }
}

#[test]
fn iauc_of_constant_curve() {
    let pts: Vec<(f64, f64)> = (0..100).map(|k| (2.0 + k as f64 * 0.731, 0.6137)).collect();
    assert!((trapezoid_mean(&pts).unwrap() - 0.6137).abs() < 1e-12);
}

#[test]
fn pair_counts_are_bounded() {
    let s = [3.0, 1.0, 2.0, 0.5];
    let t = [1.0, 2.0, 3.0, 4.0];
    let e = [true, true, false, true];
    let pc = concordance_pairs(&s, &t, &e).unwrap();
    assert_eq!(pc.comparable, 5);
    assert_eq!(pc.concordant, 4.0);
}

#[test]
fn nelson_aalen_small_leaves() {
    // {(2,1),(3,0),(5,1)}: H(2) = 1/3, H(5) = 1/3 + 1
    let (t, h) = nelson_aalen(&[2.0, 3.0, 5.0], &[true, false, true]);
    assert_eq!(t, vec![2.0, 5.0]);
    assert_eq!(h, vec![1.0 / 3.0, 1.0 / 3.0 + 1.0 / 1.0]);
    // ties: two events at 1 among 4, one at 4 among 1
    let (t, h) = nelson_aalen(&[1.0, 1.0, 3.0, 4.0], &[true, true, false, true]);
    assert_eq!(t, vec![1.0, 4.0]);
    assert_eq!(h, vec![2.0 / 4.0, 2.0 / 4.0 + 1.0]);
    // five samples, unordered input
    let (t, h) = nelson_aalen(&[6.0, 2.0, 9.0, 2.0, 7.0], &[true, false, true, true, false]);
    assert_eq!(t, vec![2.0, 6.0, 9.0]);
    assert_eq!(h, vec![1.0 / 5.0, 1.0 / 5.0 + 1.0 / 3.0, 1.0 / 5.0 + 1.0 / 3.0 + 1.0]);
}

#[test]
fn forest_leaves_hold_nelson_aalen_of_their_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = random_instance(&mut rng, 30, 3);
    let params = RsfParams {
        n_trees: 1,
        mtry: Some(3),
        min_node_events: 2,
        bootstrap: false,
        ..RsfParams::default()
    };
    let model = fit_rsf(&ds, &params).unwrap();
    let tree = &model.trees[0];
    assert!(tree.n_leaves() > 1);
    for (k, node) in tree.nodes.iter().enumerate() {
        let Node::Leaf { times, cumhaz } = node else { continue };
        let rows: Vec<usize> = (0..ds.n())
            .filter(|&i| tree.leaf_index(ds.x.row(i).as_slice().unwrap()) == k)
            .collect();
        let t: Vec<f64> = rows.iter().map(|&i| ds.time[i]).collect();
        let e: Vec<bool> = rows.iter().map(|&i| ds.event[i]).collect();
        let (et, eh) = nelson_aalen(&t, &e);
        assert_eq!((times, cumhaz), (&et, &eh));
        assert!(e.iter().filter(|v| **v).count() >= 2 || rows.len() == ds.n());
    }
}

#[test]
fn forest_average_is_tree_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = random_instance(&mut rng, 60, 4);
    let model = fit_rsf(
        &ds,
        &RsfParams {
            n_trees: 7,
            min_node_events: 2,
            seed: 4,
            ..RsfParams::default()
        },
    )
    .unwrap();
    let x = ds.x.row(5).to_vec();
    for t in [1.0, 3.3, 8.0] {
        let direct = model.trees.iter().map(|tr| tr.cumhaz(&x, t)).sum::<f64>() / 7.0;
        assert_eq!(model.predict_cumhaz(&x, t), direct);
    }
}

#[test]
fn rubin_two_imputation_example() {
    let p = pool(&[(0.8, 0.04), (1.0, 0.04)], 0.95).unwrap();
    assert!((p.mean - 0.9).abs() < 1e-12);
    assert!((p.within_var - 0.04).abs() < 1e-12);
    assert!((p.between_var - 0.02).abs() < 1e-12);
    assert!((p.total_var - 0.07).abs() < 1e-12);
    // r = 0.75, 1/r = 4/3: nu = (M-1)(1+1/r)^2/(1+1/r) = 7/3
    assert!((p.df - 7.0 / 3.0).abs() < 1e-12);
    let q = StudentsT::new(0.0, 1.0, 7.0 / 3.0).unwrap().inverse_cdf(0.975);
    assert!((p.ci_low - (0.9 - q * 0.07f64.sqrt())).abs() < 1e-12);
    assert!((p.ci_high - (0.9 + q * 0.07f64.sqrt())).abs() < 1e-12);
}

#[test]
fn cox_hand_values() {
    let nll = cox_nll(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap();
    assert!((nll - 2f64.ln()).abs() < 1e-15);
    let (g, h) = cox_grad_hess(&[0.0, 0.0], &[1.0, 2.0], &[true, false]).unwrap();
    assert_eq!(g, vec![-0.5, 0.5]);
    assert_eq!(h, vec![0.25, 0.25]);
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn cox_grad_hess_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let ds = random_instance(&mut rng, 20, 1);
        let eta: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (g, h) = cox_grad_hess(&eta, &ds.time, &ds.event).unwrap();
        let f = |e: &[f64]| cox_nll(e, &ds.time, &ds.event).unwrap();
        let step = 1e-5;
        for k in 0..20 {
            let mut up = eta.clone();
            up[k] += step;
            let mut dn = eta.clone();
            dn[k] -= step;
            let fd = (f(&up) - f(&dn)) / (2.0 * step);
            assert!((fd - g[k]).abs() < 1e-6, "g[{k}] {fd} vs {}", g[k]);
            let big = 1e-3;
            let mut up2 = eta.clone();
            up2[k] += big;
            let mut dn2 = eta.clone();
            dn2[k] -= big;
            let fd2 = (f(&up2) - 2.0 * f(&eta) + f(&dn2)) / (big * big);
            assert!((fd2 - h[k]).abs() < 1e-5, "h[{k}] {fd2} vs {}", h[k]);
        }
    }
}

#[test]
fn deepsurv_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ds = random_instance(&mut rng, 20, 5);
    for act in [Activation::Relu, Activation::Tanh] {
        let cfg = MlpConfig {
            layer_widths: vec![6, 4, 1],
            activation: act,
            dropout: 0.0,
            weight_init_seed: 2,
            ..MlpConfig::default()
        };
        let mut m = DeepSurvModel::init(5, &cfg).unwrap();
        let mut p = m.params_flat();
        p.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        m.set_params_flat(&p);
        let (_, g) = loss_and_flat_grad(&m, &ds.x, &ds.time, &ds.event);
        for _ in 0..25 {
            let k = rng.random_range(0..p.len());
            let h = 1e-6;
            let mut mp = m.clone();
            let mut q = p.clone();
            q[k] += h;
            mp.set_params_flat(&q);
            let up = mp.loss(&ds.x, &ds.time, &ds.event).unwrap();
            q[k] -= 2.0 * h;
            mp.set_params_flat(&q);
            let dn = mp.loss(&ds.x, &ds.time, &ds.event).unwrap();
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(fd, g[k]) < 1e-4 || (fd - g[k]).abs() < 1e-9, "{act:?} {k}: {fd} vs {}", g[k]);
        }
    }
}

#[test]
fn bma_identities() {
    let a = RiskScores::new("a", vec![0.3, 2.0, -1.0, 4.0]).unwrap();
    let b = RiskScores::new("b", vec![10.0, 11.0, 9.0, 30.0]).unwrap();
    let c = RiskScores::new("c", vec![-5.0, 0.0, 5.0, 1.0]).unwrap();
    let all = [a.clone(), b.clone(), c.clone()];
    let ea = aggregate_ea(&all).unwrap();
    let bma = aggregate_bma(&all, &BmaWeights::uniform(3)).unwrap();
    for (x, y) in ea.scores.iter().zip(&bma.scores) {
        assert!((x - y).abs() < 1e-12);
    }
    let w = BmaWeights {
        weights: vec![0.0, 1.0, 0.0],
        source: WeightSource::Uniform,
    };
    assert_eq!(aggregate_bma(&all, &w).unwrap().scores, b.normalize().scores);
    let direct: Vec<f64> = (0..4)
        .map(|i| (a.normalize().scores[i] + b.normalize().scores[i] + c.normalize().scores[i]) / 3.0)
        .collect();
    for (x, y) in ea.scores.iter().zip(&direct) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn hand_network() {
    let cfg = MlpConfig {
        layer_widths: vec![2, 1],
        dropout: 0.0,
        ..MlpConfig::default()
    };
    let mut m = DeepSurvModel::init(2, &cfg).unwrap();
    m.layers[0].w = array![[1.0, 1.0], [2.0, 0.5]];
    m.layers[0].b = array![0.0, 0.0];
    m.layers[1].w = array![[1.0, 1.0]];
    m.layers[1].b = array![0.0];
    // all path weights positive: monotone in each input
    let mut prev = f64::NEG_INFINITY;
    for k in 0..20 {
        let v = m.risk_score(&[k as f64 * 0.3 - 3.0, 0.2]);
        assert!(v >= prev);
        prev = v;
    }
}
