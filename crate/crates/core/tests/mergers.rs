mod common;

use common::oracles::{oracle_elect, oracle_kmeans, oracle_knots, oracle_lego, oracle_ties, scalar_collection, units};
use common::{random_collection, rel_err};
use loramerge::adapters::LoraAdapter;
use loramerge::linalg::svd;
use loramerge::mergers::{
    dare_drop, merge, merge_dare_ties, merge_knots, merge_linear, merge_lora_lego, merge_svd, merge_ta, merge_ties,
    KnotsInner, LegoReweight, MergeConfig, Method,
};
use loramerge::rng::{keyed, tag};
use loramerge::Matrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn ties_hand_trace() {
    let c = scalar_collection(0.5, &[2.0, -3.0]);
    let w = merge_ties(&c, 0.3, 0.8).unwrap();
    assert!((w[0].get(0, 0) - (0.5 - 3.0 * 0.3)).abs() < 1e-15);
    let c = scalar_collection(0.0, &[1.0, 3.0]);
    assert!((merge_ties(&c, 1.0, 0.8).unwrap()[0].get(0, 0) - 2.0).abs() < 1e-15);
}

#[test]
fn ties_exhaustive_scalar_sign_patterns() {
    let magnitudes = [0.0, 1.0, 2.0, 3.0];
    let values: Vec<f64> = magnitudes
        .iter()
        .flat_map(|&m| if m == 0.0 { vec![0.0] } else { vec![m, -m] })
        .collect();
    let mut cases = 0;
    for n in 1..=3u32 {
        for code in 0..values.len().pow(n) {
            let mut c = code;
            let v: Vec<f64> = (0..n)
                .map(|_| {
                    let x = values[c % values.len()];
                    c /= values.len();
                    x
                })
                .collect();
            let base = 0.25;
            for &lambda in &[1.0, 0.3] {
                let got = merge_ties(&scalar_collection(base, &v), lambda, 0.8).unwrap()[0].get(0, 0);
                let column: Vec<f64> = v.clone();
                let want = base + lambda * oracle_elect(&column);
                assert!((got - want).abs() <= 1e-15, "{v:?} λ={lambda}: {got} vs {want}");
            }
            cases += 1;
        }
    }
    assert_eq!(cases, 7 + 49 + 343);
}

#[test]
fn dare_is_unbiased() {
    let v = 1.7;
    let p = 0.5;
    let n = 10_000;
    let draws: Vec<f64> = (0..n).map(|s| dare_drop(&[v], p, s as u64, 0, 0)[0]).collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - v).abs() <= 3.0 * se, "mean {mean}, se {se}");
    // Every draw is either dropped or rescaled.
    assert!(draws.iter().all(|&d| d == 0.0 || (d - v / (1.0 - p)).abs() < 1e-12));
}

#[test]
fn dare_follows_the_documented_stream() {
    let vals: Vec<f64> = (0..50).map(|i| i as f64 - 20.0).collect();
    let mut rng = keyed(42, &[tag::DARE, 2, 1]);
    let want: Vec<f64> = vals
        .iter()
        .map(|&v| if rng.random::<f64>() < 0.3 { 0.0 } else { v * (1.0 / 0.7) })
        .collect();
    assert_eq!(dare_drop(&vals, 0.3, 42, 2, 1), want);
}

#[test]
fn dare_with_zero_drop_is_ties_and_reruns_identically() {
    let c = random_collection(3, &[(5, 4), (4, 4)], &[2, 2, 3]);
    assert_eq!(merge_dare_ties(&c, 0.7, 0.6, 0.0, 9).unwrap(), merge_ties(&c, 0.7, 0.6).unwrap());
    assert_eq!(
        merge_dare_ties(&c, 1.0, 0.8, 0.5, 9).unwrap(),
        merge_dare_ties(&c, 1.0, 0.8, 0.5, 9).unwrap()
    );
    assert_ne!(
        merge_dare_ties(&c, 1.0, 0.8, 0.5, 9).unwrap(),
        merge_dare_ties(&c, 1.0, 0.8, 0.5, 10).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ties_matches_reference(seed in any::<u64>(), trim in 0.0f64..0.95, lambda in -2.0f64..2.0) {
        let c = random_collection(seed, &[(4, 3), (3, 5)], &[1, 2, 2]);
        let got = merge_ties(&c, lambda, trim).unwrap();
        for (l, layer) in c.layers.iter().enumerate() {
            let tasks: Vec<Vec<f64>> = layer.deltas().into_iter().map(Matrix::into_data).collect();
            let merged = oracle_ties(&tasks, trim);
            for (k, m) in merged.iter().enumerate() {
                let want = layer.base.data()[k] + lambda * m;
                prop_assert!((got[l].data()[k] - want).abs() <= 1e-12 * (1.0 + want.abs()));
            }
        }
    }
}

// ---- KnOTS ----

#[test]
fn knots_matches_step_by_step_reference() {
    for seed in 0..5 {
        let c = random_collection(100 + seed, &[(6, 5), (5, 7)], &[2, 3, 2]);
        let got = merge_knots(&c, 0.9, KnotsInner::Ties { trim_fraction: 0.5 }).unwrap();
        for (g, w) in got.iter().zip(oracle_knots(&c, 0.9, 0.5, None)) {
            assert!(common::max_abs_diff(g.data(), w.data()) <= 1e-9);
        }
        let inner = KnotsInner::DareTies {
            trim_fraction: 0.3,
            drop_prob: 0.4,
            seed: 77,
        };
        let got = merge_knots(&c, 1.0, inner).unwrap();
        for (g, w) in got.iter().zip(oracle_knots(&c, 1.0, 0.3, Some((0.4, 77)))) {
            assert!(common::max_abs_diff(g.data(), w.data()) <= 1e-9);
        }
    }
}

#[test]
fn knots_reductions() {
    let one = random_collection(5, &[(5, 4)], &[3]);
    let got = merge_knots(&one, 0.6, KnotsInner::Ties { trim_fraction: 0.0 }).unwrap();
    assert!(rel_err(&got[0], &merge_ta(&one, 0.6).unwrap()[0]) <= 1e-10);

    let mut twin = random_collection(6, &[(5, 4)], &[2, 2]);
    let first = twin.layers[0].adapters[0].clone();
    twin.layers[0].adapters[1] = LoraAdapter {
        task_id: "t1".into(),
        ..first.clone()
    };
    let lambda = 0.4;
    let got = merge_knots(&twin, lambda, KnotsInner::Ties { trim_fraction: 0.0 }).unwrap();
    let mut want = twin.layers[0].base.clone();
    want.add_scaled(&first.delta_weight(), lambda);
    assert!(rel_err(&got[0], &want) <= 1e-10);
}

// ---- LoRA-LEGO ----

#[test]
fn lego_matches_step_by_step_reference() {
    for seed in 0..6u64 {
        let c = random_collection(200 + seed, &[(5, 4), (4, 6)], &[3, 2, 3]);
        for &(k, rw) in &[(3, LegoReweight::Output), (4, LegoReweight::Parameter), (1, LegoReweight::Output)] {
            let got = merge_lora_lego(&c, k, rw, seed).unwrap();
            for (g, w) in got.iter().zip(oracle_lego(&c, k, rw, seed)) {
                assert!(common::max_abs_diff(g.delta().data(), w.data()) <= 1e-9, "seed {seed} k {k}");
            }
        }
    }
}

#[test]
fn lego_parameter_reweight_restores_member_norms() {
    let c = random_collection(31, &[(6, 5)], &[4, 4]);
    let pts = units(&c, 0);
    let a = merge_lora_lego(&c, 3, LegoReweight::Parameter, 5).unwrap();
    assert_eq!(a, merge_lora_lego(&c, 3, LegoReweight::Parameter, 5).unwrap());
    let (_, assign) = oracle_kmeans(&pts, 3, 5, 0);
    let f = &a[0];
    for ci in 0..3 {
        let mut v = f.a.col(ci);
        v.extend(f.b.col(ci));
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let members: Vec<f64> = (0..pts.len())
            .filter(|&i| assign[i] == ci)
            .map(|i| pts[i].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let target = members.iter().sum::<f64>() / members.len() as f64;
        assert!((norm - target).abs() <= 1e-9);
    }
}

#[test]
fn lego_with_one_cluster_per_unit_recovers_a_single_adapter() {
    let c = random_collection(8, &[(6, 5)], &[3]);
    let f = merge_lora_lego(&c, 3, LegoReweight::Output, 0).unwrap();
    assert!(rel_err(&f[0].delta(), &c.layers[0].adapters[0].delta_weight()) <= 1e-12);
}

#[test]
fn lego_identical_units_collapse() {
    let mut c = random_collection(12, &[(3, 2)], &[1, 1, 1]);
    let first = c.layers[0].adapters[0].clone();
    for (i, ad) in c.layers[0].adapters.iter_mut().enumerate() {
        *ad = LoraAdapter {
            task_id: format!("t{i}"),
            ..first.clone()
        };
    }
    let f = merge_lora_lego(&c, 1, LegoReweight::Parameter, 3).unwrap();
    let u = &units(&c, 0)[0];
    let mut got = f[0].a.col(0);
    got.extend(f[0].b.col(0));
    assert!(common::max_abs_diff(&got, u) <= 1e-12);
}

// ---- Linear and SVD ----

#[test]
fn linear_examples() {
    let mut c = random_collection(2, &[(4, 3)], &[2, 2]);
    let first = c.layers[0].adapters[0].clone();
    c.layers[0].adapters[1] = LoraAdapter {
        task_id: "t1".into(),
        ..first.clone()
    };
    let f = merge_linear(&c, 0.5).unwrap();
    let s = first.scale();
    let b = first.b.scaled(2.0 * 0.5 * s);
    let a = first.a.scaled(2.0);
    assert!(rel_err(&f[0].delta(), &b.matmul_t(&a)) <= 1e-12);
    assert!(rel_err(&f[0].delta(), &first.delta_weight().scaled(2.0)) <= 1e-12);
    assert!(merge_linear(&c, 0.0).unwrap()[0].delta().data().iter().all(|&v| v == 0.0));
}

#[test]
fn svd_merge_tail_energy() {
    for seed in 0..8 {
        let c = random_collection(50 + seed, &[(7, 6)], &[2, 3, 2]);
        let lambda = 0.3;
        let mut sum = Matrix::zeros(7, 6);
        for d in c.layers[0].deltas() {
            sum.add_scaled(&d, lambda);
        }
        let sigma = svd(&sum).unwrap().sigma;
        for r in 1..=6 {
            let f = merge_svd(&c, lambda, r).unwrap();
            let mut resid = sum.clone();
            resid.add_scaled(&f[0].delta(), -1.0);
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum::<f64>().sqrt();
            assert!((resid.frobenius_norm() - tail).abs() <= 1e-9, "r={r}");
        }
    }
}

#[test]
fn svd_merge_special_cases() {
    let mut c = random_collection(1, &[(3, 3)], &[1]);
    c.layers[0].adapters[0].b = Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
    c.layers[0].adapters[0].a = Matrix::from_vec(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    c.layers[0].adapters[0].lora_alpha = 3.0;
    let mut other = c.layers[0].adapters[0].clone();
    other.task_id = "t1".into();
    other.b = Matrix::from_vec(3, 1, vec![0.0, 1.0, 0.0]).unwrap();
    other.a = Matrix::from_vec(3, 1, vec![1.0, 0.0, 0.0]).unwrap();
    other.lora_alpha = 1.0;
    c.task_ids.push("t1".into());
    c.layers[0].adapters.push(other);
    c.validate().unwrap();
    // Summed update has singular values (3, 1).
    let f = merge_svd(&c, 1.0, 1).unwrap();
    let want = Matrix::from_fn(3, 3, |i, j| if (i, j) == (0, 1) { 3.0 } else { 0.0 });
    assert!(rel_err(&f[0].delta(), &want) <= 1e-12);
    let full = merge_svd(&c, 1.0, 2).unwrap();
    let mut sum = Matrix::zeros(3, 3);
    for d in c.layers[0].deltas() {
        sum.add_scaled(&d, 1.0);
    }
    assert!(rel_err(&full[0].delta(), &sum) <= 1e-9);
}

#[test]
fn every_method_runs_and_resolves_defaults() {
    let c = random_collection(21, &[(6, 5), (6, 6)], &[3, 3, 3]);
    for m in Method::ALL {
        let out = merge(&c, &MergeConfig::new(m)).unwrap();
        assert_eq!(out.weights.len(), 2);
        out.config.validate().unwrap();
        assert!(out.weights.iter().all(Matrix::is_finite));
    }
    let ta = merge(&c, &MergeConfig::new(Method::Ta)).unwrap();
    assert_eq!(ta.config.lambda, Some(0.3));
    assert_eq!(ta.weights, merge_ta(&c, 0.3).unwrap());
    let lego = merge(&c, &MergeConfig::new(Method::LoraLego)).unwrap();
    assert_eq!(lego.config.k_clusters, Some(3));
    let mut bad = MergeConfig::new(Method::Ta);
    bad.drop_prob = Some(0.2);
    assert!(merge(&c, &bad).is_err());
}
