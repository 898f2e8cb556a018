#![allow(dead_code)]

use carfollow::model::{GmmParams, HmmParams, ObservationVector, Trajectory, TrajectorySample};
use carfollow::preprocess::CarFollowingEvent;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `A Aᵀ + 0.5 I` with `A` standard normal, scaled.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
    let m = (&a * a.transpose() + DMatrix::identity(d, d) * 0.5) * scale;
    (&m + m.transpose()) * 0.5
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

pub fn random_gmm(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GmmParams {
    let weights = random_weights(rng, n);
    let means = (0..n)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-3.0..3.0)))
        .collect();
    let covs = (0..n).map(|_| random_spd(rng, d, 0.5)).collect();
    GmmParams::new(weights, means, covs, None).unwrap()
}

pub fn random_hmm(rng: &mut ChaCha8Rng, n: usize, d: usize) -> HmmParams {
    let gmm = random_gmm(rng, n, d);
    let initial = random_weights(rng, n);
    let transitions = (0..n).map(|_| random_weights(rng, n)).collect();
    HmmParams::new(gmm, initial, transitions).unwrap()
}

/// Row-major copy of a matrix.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// Direct multivariate normal density with an explicit inverse.
pub fn naive_pdf(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = DVector::from_row_slice(x) - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powi(d as i32) * cov.determinant()).sqrt()
}

pub fn obs(z: Vec<f64>, a: f64, t: f64) -> ObservationVector {
    ObservationVector {
        z,
        a,
        t,
        event_id: "e".into(),
    }
}

/// An event whose samples come from closures of time.
pub fn event_from(
    id: &str,
    n: usize,
    v_h: impl Fn(f64) -> f64,
    v_l: impl Fn(f64) -> f64,
    gap: impl Fn(f64) -> f64,
) -> CarFollowingEvent {
    let samples: Vec<TrajectorySample> = (0..n)
        .map(|k| {
            let t = k as f64 * 0.1;
            TrajectorySample {
                t,
                x_h: 0.0,
                v_h: v_h(t),
                x_l: gap(t),
                v_l: v_l(t),
            }
        })
        .collect();
    CarFollowingEvent {
        event_id: id.into(),
        driver_id: "d".into(),
        duration: samples.last().unwrap().t,
        samples,
    }
}

/// Noise-free following that obeys `dv_h/dt = 0.5 Δv` exactly.
///
/// The lead speed is a sinusoid and the host is the steady-state response of
/// the first-order lag, so every quantity is in closed form.
pub fn linear_law_trajectory(driver: &str, id: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let k = 0.5;
    let base = rng.random_range(10.0..20.0);
    let amp = rng.random_range(1.0..3.0);
    let omega = 2.0 * std::f64::consts::PI / rng.random_range(15.0..40.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let lag = omega.atan2(k);
    let host_amp = amp * k / (k * k + omega * omega).sqrt();
    let gap0 = 20.0 + 2.0 * amp / omega;
    let samples: Vec<TrajectorySample> = (0..=600)
        .map(|i| {
            let t = i as f64 * 0.1;
            let th = omega * t + phase;
            let x_h = base * t - host_amp / omega * (th - lag).cos();
            TrajectorySample {
                t,
                x_h,
                v_h: base + host_amp * (th - lag).sin(),
                x_l: gap0 + base * t - amp / omega * th.cos(),
                v_l: base + amp * th.sin(),
            }
        })
        .collect();
    Trajectory::new(driver, &format!("{driver}-lin{id:02}"), samples).unwrap()
}
