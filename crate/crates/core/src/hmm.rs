//! GMM+HMM regression.
//!
//! Every mixture component is a hidden state. The forward variable
//! `α_i(z_t)` is propagated through the transition matrix and reweighted by
//! each state's input density; the prediction is the `α`-weighted sum of
//! per-state conditional means.

use log::warn;

use crate::error::{Error, Result};
use crate::gaussian::log_sum_exp;
use crate::gmm::MixtureDensity;
use crate::gmr::ConditionalGmm;
use crate::model::{GmmParams, HmmParams, ObservationVector};

/// Additive smoothing applied to every soft transition count.
pub const TRANSITION_SMOOTHING: f64 = 1e-6;

/// Forward variable after `t + 1` observations.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardState {
    pub alpha: Vec<f64>,
    pub t: usize,
}

/// HMM parameters with the conditioning factorizations cached.
#[derive(Debug, Clone)]
pub struct HmmRegressor {
    params: HmmParams,
    cond: ConditionalGmm,
    log_initial: Vec<f64>,
}

impl HmmRegressor {
    pub fn new(params: HmmParams) -> Result<Self> {
        let cond = ConditionalGmm::new(params.gmm())?;
        let log_initial = params.initial().iter().map(|p| p.ln()).collect();
        Ok(HmmRegressor {
            params,
            cond,
            log_initial,
        })
    }

    pub fn params(&self) -> &HmmParams {
        &self.params
    }

    pub fn conditional(&self) -> &ConditionalGmm {
        &self.cond
    }

    /// Open-loop one-step predictions for a whole event.
    pub fn predict_sequence(&self, features: &[ObservationVector]) -> Result<Vec<f64>> {
        predict_sequence(features, self)
    }
}

/// Soft transition counts from consecutive-frame responsibilities.
///
/// `C_ij = Σ_seq Σ_t r_i(ξ_t) r_j(ξ_{t+1})`, row-normalized after adding
/// [`TRANSITION_SMOOTHING`] to every cell. The initial distribution is the
/// mixture weights. Sequences shorter than two frames are skipped.
pub fn estimate_transitions(sequences: &[Vec<ObservationVector>], gmm: &GmmParams) -> Result<HmmParams> {
    let density = MixtureDensity::new(gmm)?;
    let n = gmm.n_components();
    let mut counts = vec![vec![0.0; n]; n];
    let mut used = 0usize;
    for seq in sequences {
        if seq.len() < 2 {
            continue;
        }
        used += 1;
        let mut prev: Option<Vec<f64>> = None;
        for obs in seq {
            let xi = obs.joint();
            if xi.len() != gmm.dim() {
                return Err(Error::invalid(format!(
                    "observation has dimension {}, mixture expects {}",
                    xi.len(),
                    gmm.dim()
                )));
            }
            if xi.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("observation has non-finite components"));
            }
            let r = density.responsibilities(&xi);
            if let Some(p) = &prev {
                for (i, pi) in p.iter().enumerate() {
                    for (j, rj) in r.iter().enumerate() {
                        counts[i][j] += pi * rj;
                    }
                }
            }
            prev = Some(r);
        }
    }
    if used == 0 {
        return Err(Error::invalid("no sequence has at least two observations"));
    }
    let transitions = counts
        .into_iter()
        .map(|row| {
            let smoothed: Vec<f64> = row.iter().map(|c| c + TRANSITION_SMOOTHING).collect();
            let total: f64 = smoothed.iter().sum();
            smoothed.iter().map(|c| c / total).collect()
        })
        .collect();
    HmmParams::new(gmm.clone(), gmm.weights().to_vec(), transitions)
}

fn normalize_log(log_terms: &[f64], fallback: &[f64], t: usize) -> ForwardState {
    let lse = log_sum_exp(log_terms);
    if !lse.is_finite() {
        warn!("forward recursion underflowed at step {t}; falling back to the initial distribution");
        return ForwardState {
            alpha: fallback.to_vec(),
            t,
        };
    }
    let mut alpha: Vec<f64> = log_terms.iter().map(|l| (l - lse).exp()).collect();
    let sum: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= sum);
    ForwardState { alpha, t }
}

/// `α_i(z_1) ∝ Π_i N(z_1; μ_i^z, Σ_i^{zz})`.
pub fn forward_init(z: &[f64], hmm: &HmmRegressor) -> Result<ForwardState> {
    hmm.cond.check_input(z)?;
    let terms: Vec<f64> = hmm
        .cond
        .input_log_densities(z)
        .iter()
        .zip(&hmm.log_initial)
        .map(|(ld, lp)| ld + lp)
        .collect();
    Ok(normalize_log(&terms, hmm.params.initial(), 0))
}

/// `α_i(z_t) ∝ (Σ_j α_j(z_{t-1}) φ_ji) N(z_t; μ_i^z, Σ_i^{zz})`.
pub fn forward_step(prev: &ForwardState, z: &[f64], hmm: &HmmRegressor) -> Result<ForwardState> {
    hmm.cond.check_input(z)?;
    let n = hmm.params.n_states();
    if prev.alpha.len() != n {
        return Err(Error::invalid(format!(
            "forward state has {} entries, model has {n} states",
            prev.alpha.len()
        )));
    }
    let phi = hmm.params.transitions();
    let mut terms = hmm.cond.input_log_densities(z);
    for (i, term) in terms.iter_mut().enumerate() {
        let predicted: f64 = prev.alpha.iter().zip(phi).map(|(a, row)| a * row[i]).sum();
        *term += predicted.ln();
    }
    Ok(normalize_log(&terms, hmm.params.initial(), prev.t + 1))
}

/// `â = Σ_i α_i [μ_i^a + Σ_i^{az} (Σ_i^{zz})⁻¹ (z − μ_i^z)]`.
///
/// `state` must already include `z`.
pub fn predict_acceleration(state: &ForwardState, z: &[f64], hmm: &HmmRegressor) -> Result<f64> {
    hmm.cond.check_input(z)?;
    if state.alpha.len() != hmm.cond.n_components() {
        return Err(Error::invalid("forward state does not match the model"));
    }
    Ok(state
        .alpha
        .iter()
        .zip(hmm.cond.components())
        .map(|(a, c)| a * c.regress(z))
        .sum())
}

/// Runs the forward recursion over measured inputs, predicting at every step.
/// Predictions never feed back into the inputs.
pub fn predict_sequence(features: &[ObservationVector], hmm: &HmmRegressor) -> Result<Vec<f64>> {
    let Some(first) = features.first() else {
        return Err(Error::invalid("cannot predict an empty sequence"));
    };
    let mut out = Vec::with_capacity(features.len());
    let mut state = forward_init(&first.z, hmm)?;
    out.push(predict_acceleration(&state, &first.z, hmm)?);
    for obs in &features[1..] {
        state = forward_step(&state, &obs.z, hmm)?;
        out.push(predict_acceleration(&state, &obs.z, hmm)?);
    }
    Ok(out)
}
