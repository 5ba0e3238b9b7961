use ndarray::Array2;
use proptest::prelude::*;

use survens_core::cox::{cox_grad_hess, cox_nll};
use survens_core::dataset::{read_dataset, write_dataset};
use survens_core::ensemble::{aggregate_ea, z_normalize, BmaWeights, RiskScores};
use survens_core::impute::pool;
use survens_core::metrics::c_index;
use survens_core::SurvivalDataset;

fn outcomes(max_n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<f64>)> {
    (2..max_n).prop_flat_map(|n| {
        (
            prop::collection::vec(1u32..20, n).prop_map(|v| v.into_iter().map(f64::from).collect()),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
    })
}

proptest! {
    #[test]
    fn cox_nll_shift_invariant((time, mut event, eta) in outcomes(30), c in -5.0f64..5.0) {
        event[0] = true;
        let a = cox_nll(&eta, &time, &event).unwrap();
        let shifted: Vec<f64> = eta.iter().map(|v| v + c).collect();
        let b = cox_nll(&shifted, &time, &event).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn cox_gradient_sums_to_zero((time, mut event, eta) in outcomes(30)) {
        event[0] = true;
        let (g, h) = cox_grad_hess(&eta, &time, &event).unwrap();
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(h.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn cindex_invariant_to_monotone_maps((time, event, s) in outcomes(25)) {
        let a = c_index(&s, &time, &event);
        let mapped: Vec<f64> = s.iter().map(|v| (2.0 * v).exp() + 7.0).collect();
        let b = c_index(&mapped, &time, &event);
        match (a, b) {
            (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "one side failed"),
        }
    }

    #[test]
    fn cindex_in_unit_interval((time, event, s) in outcomes(25)) {
        if let Ok(c) = c_index(&s, &time, &event) {
            prop_assert!((0.0..=1.0).contains(&c));
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let d = c_index(&neg, &time, &event).unwrap();
            prop_assert!((c + d - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bma_weights_sum_to_one(nll in prop::collection::vec(-1e3f64..1e3, 1..6)) {
        let w = BmaWeights::from_nll(&nll, None).unwrap();
        prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(w.weights.iter().all(|v| *v >= 0.0));
        // lower loss never gets less weight
        for i in 0..nll.len() {
            for j in 0..nll.len() {
                if nll[i] < nll[j] {
                    prop_assert!(w.weights[i] >= w.weights[j]);
                }
            }
        }
    }

    #[test]
    fn z_normalize_affine_invariant(v in prop::collection::vec(-10.0f64..10.0, 2..30), a in 0.1f64..10.0, b in -10.0f64..10.0) {
        let z = z_normalize(&v);
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let zw = z_normalize(&w);
        for (p, q) in z.iter().zip(&zw) {
            prop_assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn ea_permutation_equivariant(rows in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 3..20), rot in 0usize..20) {
        let a: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let ea = aggregate_ea(&[RiskScores::new("a", a.clone()).unwrap(), RiskScores::new("b", b.clone()).unwrap()]).unwrap();
        let n = a.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let pa: Vec<f64> = perm.iter().map(|&i| a[i]).collect();
        let pb: Vec<f64> = perm.iter().map(|&i| b[i]).collect();
        // model order must not matter either
        let pe = aggregate_ea(&[RiskScores::new("b", pb).unwrap(), RiskScores::new("a", pa).unwrap()]).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((pe.scores[k] - ea.scores[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn pooled_interval_contains_mean(est in prop::collection::vec((-1.0f64..1.0, 0.0f64..0.1), 2..10)) {
        let p = pool(&est, 0.95).unwrap();
        prop_assert!(p.ci_low <= p.mean && p.mean <= p.ci_high);
        prop_assert!(p.total_var >= p.within_var);
        let lo = est.iter().map(|e| e.0).fold(f64::INFINITY, f64::min);
        let hi = est.iter().map(|e| e.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p.mean >= lo - 1e-12 && p.mean <= hi + 1e-12);
    }

    #[test]
    fn dataset_csv_round_trip(rows in prop::collection::vec((-1e6f64..1e6, -1.0f64..1.0, 0.01f64..100.0, any::<bool>()), 1..15)) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { rows[i].0 } else { rows[i].1 });
        let ds = SurvivalDataset::new(
            x,
            vec!["age".into(), "ldl_slope".into()],
            rows.iter().map(|r| r.2).collect(),
            rows.iter().map(|r| r.3).collect(),
            (0..n).map(|i| format!("s{i}")).collect(),
        ).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        prop_assert_eq!(back, ds);
    }
}
