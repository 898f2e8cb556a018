mod common;

use std::collections::HashSet;

use carfollow::gmm::{em_fit, fit_gmm, kmeans_init, EmConfig};
use carfollow::gmr::ConditionalGmm;
use carfollow::hmm::{forward_init, forward_step, predict_acceleration, HmmRegressor};
use carfollow::io::to_json_string;
use carfollow::model::{AccelBounds, CvReport, FeatureSet, FittedModel, FoldResult, GmmParams, HmmParams, Method};
use carfollow::pdf::{argmax_acceleration, conditional_mixture, GRID_STEP};
use carfollow::preprocess::{central_difference, partition_indices, smooth_moving_average};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn gmm_json_round_trip_is_bitwise(seed in any::<u64>(), n in 1usize..5, d in 2usize..6) {
        let g = random_gmm(&mut rng(seed), n, d);
        let back: GmmParams = serde_json::from_str(&to_json_string(&g).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }

    #[test]
    fn model_json_round_trip_is_bitwise(seed in any::<u64>(), n in 1usize..5, fs_idx in 0usize..4) {
        let fs = FeatureSet::ALL[fs_idx];
        let mut r = rng(seed);
        let hmm = random_hmm(&mut r, n, fs.total_dim());
        let gmm = hmm.gmm().clone().with_feature_set(fs).unwrap();
        let hmm = HmmParams::new(gmm.clone(), hmm.initial().to_vec(), hmm.transitions().to_vec()).unwrap();
        for model in [FittedModel::new_hmm(hmm).unwrap(), FittedModel::new_pdf(gmm).unwrap()] {
            let back: FittedModel = serde_json::from_str(&to_json_string(&model).unwrap()).unwrap();
            prop_assert_eq!(back, model);
        }
    }

    #[test]
    fn partitions_are_disjoint_and_complete(count in 2usize..300, m in 2usize..40, seed in any::<u64>()) {
        let groups = partition_indices(count, m, seed).unwrap();
        prop_assert_eq!(groups.len(), m);
        let mut seen = HashSet::new();
        for g in &groups {
            for &i in g {
                prop_assert!(seen.insert(i), "index {} in two groups", i);
            }
        }
        prop_assert_eq!(seen.len(), count);
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(groups, partition_indices(count, m, seed).unwrap());
    }

    #[test]
    fn moving_average_matches_naive_window(len in 1usize..80, window in 1usize..15, seed in any::<u64>()) {
        let mut r = rng(seed);
        let xs: Vec<f64> = (0..len).map(|_| r.random_range(-10.0..10.0)).collect();
        let smooth = smooth_moving_average(&xs, window).unwrap();
        for k in 0..len {
            let lo = k as i64 - (window / 2) as i64;
            let hi = k as i64 + ((window - 1) / 2) as i64;
            let inside: Vec<f64> = (lo..=hi).filter(|&j| j >= 0 && (j as usize) < len).map(|j| xs[j as usize]).collect();
            let naive = inside.iter().sum::<f64>() / inside.len() as f64;
            prop_assert!((smooth[k] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_step_matches_direct_recursion(seed in any::<u64>(), n in 1usize..6, d in 2usize..5) {
        let mut r = rng(seed);
        let hmm = HmmRegressor::new(random_hmm(&mut r, n, d)).unwrap();
        let p = hmm.params();
        let z0: Vec<f64> = (0..d - 1).map(|_| r.random_range(-2.0..2.0)).collect();
        let z1: Vec<f64> = (0..d - 1).map(|_| r.random_range(-2.0..2.0)).collect();
        let s0 = forward_init(&z0, &hmm).unwrap();
        let s1 = forward_step(&s0, &z1, &hmm).unwrap();
        let input_pdf = |z: &[f64], i: usize| {
            let q = d - 1;
            let m = DVector::from_iterator(q, p.gmm().means()[i].iter().take(q).copied());
            let c = p.gmm().covariances()[i].view((0, 0), (q, q)).into_owned();
            naive_pdf(z, &m, &c)
        };
        let prior: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| s0.alpha[j] * p.transitions()[j][i]).sum())
            .collect();
        let unnorm: Vec<f64> = (0..n).map(|i| prior[i] * input_pdf(&z1, i)).collect();
        let total: f64 = unnorm.iter().sum();
        for i in 0..n {
            prop_assert!((s1.alpha[i] - unnorm[i] / total).abs() < 1e-12);
        }
        prop_assert!((s1.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s1.alpha.iter().all(|a| *a >= 0.0));
    }

    #[test]
    fn single_component_regression_is_closed_form(seed in any::<u64>(), d in 2usize..6) {
        let mut r = rng(seed);
        let g = random_gmm(&mut r, 1, d);
        let q = d - 1;
        let mean = &g.means()[0];
        let cov = &g.covariances()[0];
        let hmm = HmmRegressor::new(HmmParams::new(g.clone(), vec![1.0], vec![vec![1.0]]).unwrap()).unwrap();
        let s_zz = cov.view((0, 0), (q, q)).into_owned();
        let s_az = cov.view((q, 0), (1, q)).into_owned();
        let gain = s_az * s_zz.try_inverse().unwrap();
        for _ in 0..10 {
            let z: Vec<f64> = (0..q).map(|_| r.random_range(-4.0..4.0)).collect();
            let dz = DVector::from_row_slice(&z) - mean.rows(0, q);
            let expect = mean[q] + (&gain * dz)[(0, 0)];
            let state = forward_init(&z, &hmm).unwrap();
            let got = predict_acceleration(&state, &z, &hmm).unwrap();
            prop_assert!((got - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn argmax_beats_every_grid_point(seed in any::<u64>(), n in 1usize..6, d in 2usize..4) {
        let mut r = rng(seed);
        let g = random_gmm(&mut r, n, d);
        let cond = ConditionalGmm::new(&g).unwrap();
        let bounds = AccelBounds::default();
        let z: Vec<f64> = (0..d - 1).map(|_| r.random_range(-3.0..3.0)).collect();
        let mix = conditional_mixture(&z, &cond).unwrap();
        let a = argmax_acceleration(&z, &cond, &bounds).unwrap();
        prop_assert!(bounds.contains(a));
        let best = mix.ln_density(a);
        let steps = ((bounds.a_max() - bounds.a_min()) / GRID_STEP).round() as usize;
        for k in 0..=steps {
            let x = bounds.a_min() + k as f64 * GRID_STEP;
            prop_assert!(mix.ln_density(x) <= best + 1e-12, "grid point {} beats {}", x, a);
        }
    }

    #[test]
    fn hmm_predictions_transform_with_affine_rescaling(
        seed in any::<u64>(), n in 1usize..5, d in 2usize..5, len in 2usize..20,
    ) {
        let mut r = rng(seed);
        let p = random_hmm(&mut r, n, d);
        let scale: Vec<f64> = (0..d).map(|_| r.random_range(0.2..5.0) * if r.random_bool(0.5) { -1.0 } else { 1.0 }).collect();
        let shift: Vec<f64> = (0..d).map(|_| r.random_range(-10.0..10.0)).collect();
        let s = DMatrix::from_diagonal(&DVector::from_row_slice(&scale));
        let b = DVector::from_row_slice(&shift);
        let g = p.gmm();
        let scaled = GmmParams::new(
            g.weights().to_vec(),
            g.means().iter().map(|m| &s * m + &b).collect(),
            g.covariances().iter().map(|c| &s * c * &s).collect(),
            None,
        ).unwrap();
        let q = HmmParams::new(scaled, p.initial().to_vec(), p.transitions().to_vec()).unwrap();
        let (orig, moved) = (HmmRegressor::new(p).unwrap(), HmmRegressor::new(q).unwrap());
        let seq: Vec<_> = (0..len)
            .map(|k| obs((0..d - 1).map(|_| r.random_range(-2.0..2.0)).collect(), 0.0, k as f64 * 0.1))
            .collect();
        let seq2: Vec<_> = seq
            .iter()
            .map(|o| obs(o.z.iter().enumerate().map(|(j, v)| scale[j] * v + shift[j]).collect(), 0.0, o.t))
            .collect();
        let a = orig.predict_sequence(&seq).unwrap();
        let a2 = moved.predict_sequence(&seq2).unwrap();
        for (x, y) in a.iter().zip(&a2) {
            let expect = scale[d - 1] * x + shift[d - 1];
            prop_assert!((y - expect).abs() < 1e-8 * (1.0 + expect.abs()), "{} vs {}", y, expect);
        }
    }

    #[test]
    fn relabelled_states_predict_identically(seed in any::<u64>(), n in 2usize..6, len in 2usize..20) {
        let mut r = rng(seed);
        let p = random_hmm(&mut r, n, 3);
        let mut order: Vec<usize> = (0..n).collect();
        order.rotate_left(1);
        order.swap(0, n - 1);
        let q = HmmParams::new(
            p.gmm().permuted(&order).unwrap(),
            order.iter().map(|&i| p.initial()[i]).collect(),
            order.iter().map(|&i| order.iter().map(|&j| p.transitions()[i][j]).collect()).collect(),
        ).unwrap();
        let seq: Vec<_> = (0..len)
            .map(|k| obs(vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)], 0.0, k as f64 * 0.1))
            .collect();
        let a = HmmRegressor::new(p).unwrap().predict_sequence(&seq).unwrap();
        let b = HmmRegressor::new(q).unwrap().predict_sequence(&seq).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn report_means_are_consistent(rows in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..20)) {
        let folds: Vec<FoldResult> = rows
            .iter()
            .enumerate()
            .map(|(k, &(tr, te))| FoldResult { fold_index: k, repeat_index: k, seed: k as u64, train_mae: tr, test_mae: te })
            .collect();
        let rep = CvReport::from_folds("d", FeatureSet::Z1, 2, Method::GmmHmm, folds, vec![]).unwrap();
        let k = rows.len() as f64;
        prop_assert!((rep.mean_train_mae - rows.iter().map(|r| r.0).sum::<f64>() / k).abs() < 1e-12);
        prop_assert!((rep.mean_test_mae - rows.iter().map(|r| r.1).sum::<f64>() / k).abs() < 1e-12);
    }
}

fn blob_data(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|k| {
            let offset = if k % 2 == 0 { 3.0 } else { -3.0 };
            (0..d).map(|_| offset + normal(&mut r)).collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn fitted_mixtures_are_valid(seed in any::<u64>(), n in 1usize..5, d in 1usize..4) {
        let data = blob_data(seed, 200, d);
        let fit = fit_gmm(&data, n, &EmConfig { seed, ..Default::default() }).unwrap();
        let p = &fit.params;
        prop_assert!((p.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for c in p.covariances() {
            prop_assert_eq!(c, &c.transpose());
            prop_assert!(c.clone().symmetric_eigen().eigenvalues.iter().all(|e| *e > 0.0));
        }
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8, "trace fell from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_commutes_with_relabelling(seed in any::<u64>(), n in 2usize..5) {
        let data = blob_data(seed, 150, 2);
        let cfg = EmConfig { seed, max_iter: 25, ..Default::default() };
        let init = kmeans_init(&data, n, &cfg).unwrap();
        let order: Vec<usize> = (0..n).rev().collect();
        let a = em_fit(&data, &init, &cfg).unwrap();
        let b = em_fit(&data, &init.permuted(&order).unwrap(), &cfg).unwrap();
        prop_assert_eq!(a.iterations, b.iterations);
        let expect = a.params.permuted(&order).unwrap();
        for i in 0..n {
            prop_assert!((expect.weights()[i] - b.params.weights()[i]).abs() < 1e-9);
            prop_assert!((&expect.means()[i] - &b.params.means()[i]).amax() < 1e-9);
            prop_assert!((&expect.covariances()[i] - &b.params.covariances()[i]).amax() < 1e-9);
        }
    }

    #[test]
    fn one_em_iteration_matches_hand_rolled_step(seed in any::<u64>(), n in 1usize..4, d in 1usize..4) {
        let data = blob_data(seed, 120, d);
        let cfg = EmConfig { seed, max_iter: 1, rel_tol: 1e-300, cov_reg: Some(1e-3), ..Default::default() };
        let init = kmeans_init(&data, n, &cfg).unwrap();
        let got = em_fit(&data, &init, &cfg).unwrap();
        prop_assert_eq!(got.iterations, 1);

        let resp: Vec<Vec<f64>> = data
            .iter()
            .map(|x| {
                let p: Vec<f64> = (0..n)
                    .map(|i| init.weights()[i] * naive_pdf(x, &init.means()[i], &init.covariances()[i]))
                    .collect();
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            })
            .collect();
        for i in 0..n {
            let mass: f64 = resp.iter().map(|r| r[i]).sum();
            let mut mean = DVector::zeros(d);
            for (x, r) in data.iter().zip(&resp) {
                mean += DVector::from_row_slice(x) * r[i];
            }
            mean /= mass;
            let mut cov = DMatrix::zeros(d, d);
            for (x, r) in data.iter().zip(&resp) {
                let dx = DVector::from_row_slice(x) - &mean;
                cov += &dx * dx.transpose() * r[i];
            }
            cov /= mass;
            cov += DMatrix::identity(d, d) * 1e-3;
            prop_assert!((got.params.weights()[i] - mass / data.len() as f64).abs() < 1e-10);
            prop_assert!((&got.params.means()[i] - &mean).amax() < 1e-10);
            prop_assert!((&got.params.covariances()[i] - &cov).amax() < 1e-10);
        }
    }
}

#[test]
fn relative_acceleration_is_the_derivative_of_relative_speed() {
    let n = 400;
    let ev = event_from("e#0", n, |t| 15.0 + (0.3 * t).sin(), |t| 16.0 + 0.5 * (0.2 * t).cos(), |t| 30.0 + t.sin());
    let feats = carfollow::preprocess::build_features(&ev, FeatureSet::Z3, 10).unwrap();
    let v_h: Vec<f64> = ev.samples.iter().map(|s| s.v_h).collect();
    let v_l: Vec<f64> = ev.samples.iter().map(|s| s.v_l).collect();
    let dv: Vec<f64> = smooth_moving_average(&v_l, 10)
        .unwrap()
        .iter()
        .zip(smooth_moving_average(&v_h, 10).unwrap())
        .map(|(l, h)| l - h)
        .collect();
    for o in &feats {
        let k = (o.t / 0.1).round() as usize;
        let fd = (dv[k + 1] - dv[k - 1]) / 0.2;
        assert!((o.z[2] - fd).abs() < 1e-9, "t={}: {} vs {}", o.t, o.z[2], fd);
        assert!((o.z[1] - dv[k]).abs() < 1e-12);
    }
    assert_eq!(feats.len(), n - 2);
    assert_eq!(central_difference(&[1.0, 3.0], 0.1).len(), 2);
}
