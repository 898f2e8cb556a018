//! GMM+PDF prediction: the acceleration that maximizes the fitted density at
//! the observed situation, searched over the reachable interval.
//!
//! At fixed `z` the joint density `P(z, a)` is proportional (in `a`) to a
//! one-dimensional Gaussian mixture, so the search runs on that conditional.

use crate::error::Result;
use crate::gaussian::{log_sum_exp, LN_2PI};
use crate::gmr::ConditionalGmm;
use crate::model::{AccelBounds, GmmParams, ObservationVector};

/// Spacing of the coarse search grid (m/s²).
pub const GRID_STEP: f64 = 0.01;

/// Components whose peak log-density trails the tallest peak by more than
/// this are dropped before the search. Their contribution is below `e^-30`
/// of the maximum density anywhere.
const NEGLIGIBLE_LOG_PEAK: f64 = 30.0;

const GOLDEN_TOL: f64 = 1e-9;

/// The one-dimensional mixture `a ↦ P(a | z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl ConditionalMixture {
    pub fn ln_density(&self, a: f64) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w.ln() - 0.5 * (LN_2PI + v.ln()) - 0.5 * (a - m) * (a - m) / v)
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, a: f64) -> f64 {
        self.ln_density(a).exp()
    }
}

/// Conditional weights, means and variances of the output at input `z`.
pub fn conditional_mixture(z: &[f64], gmm: &ConditionalGmm) -> Result<ConditionalMixture> {
    gmm.check_input(z)?;
    let log_w: Vec<f64> = gmm
        .components()
        .iter()
        .map(|c| c.log_weight + c.input.ln_pdf(z))
        .collect();
    let lse = log_sum_exp(&log_w);
    let weights = if lse.is_finite() {
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        w
    } else {
        // every input density underflowed: fall back to the prior weights
        gmm.components().iter().map(|c| c.log_weight.exp()).collect()
    };
    Ok(ConditionalMixture {
        weights,
        means: gmm.components().iter().map(|c| c.regress(z)).collect(),
        variances: gmm.components().iter().map(|c| c.cond_var).collect(),
    })
}

/// Bounded maximizer of a one-dimensional mixture density.
///
/// A mixture is monotone outside the hull of its component means, so the
/// 0.01 grid is only scanned over `[min m_i, max m_i] ∩ bounds`; every mean
/// clamped into the bounds is also a candidate. Each local maximum found
/// this way is refined by golden-section search within one grid step and the
/// best point wins. Ties go to the smaller acceleration.
pub fn maximize_mixture(mix: &ConditionalMixture, bounds: &AccelBounds) -> f64 {
    let (lo_b, hi_b) = (bounds.a_min(), bounds.a_max());
    let log_peak = |w: f64, v: f64| w.ln() - 0.5 * (LN_2PI + v.ln());
    let tallest = mix
        .weights
        .iter()
        .zip(&mix.variances)
        .map(|(&w, &v)| log_peak(w, v))
        .fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<usize> = (0..mix.weights.len())
        .filter(|&i| log_peak(mix.weights[i], mix.variances[i]) >= tallest - NEGLIGIBLE_LOG_PEAK)
        .collect();
    let mix = ConditionalMixture {
        weights: keep.iter().map(|&i| mix.weights[i]).collect(),
        means: keep.iter().map(|&i| mix.means[i]).collect(),
        variances: keep.iter().map(|&i| mix.variances[i]).collect(),
    };
    let significant = &mix.means;
    let hull_lo = significant.iter().copied().fold(f64::INFINITY, f64::min);
    let hull_hi = significant.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let prepared = PreparedMixture::new(&mix);
    let f = |a: f64| prepared.ln_density(a);
    let mut candidates: Vec<(f64, f64)> = Vec::new();

    // Grid points a_min + k·step restricted to the hull.
    let n_steps = ((hi_b - lo_b) / GRID_STEP).round() as i64;
    let grid_at = |k: i64| if k >= n_steps { hi_b } else { lo_b + k as f64 * GRID_STEP };
    let k_lo = (((hull_lo - lo_b) / GRID_STEP).ceil() as i64).clamp(0, n_steps);
    let k_hi = (((hull_hi - lo_b) / GRID_STEP).floor() as i64).clamp(0, n_steps);
    if k_lo <= k_hi && hull_hi >= lo_b && hull_lo <= hi_b {
        let values: Vec<(f64, f64)> = (k_lo..=k_hi).map(|k| (grid_at(k), f(grid_at(k)))).collect();
        for (idx, &(a, v)) in values.iter().enumerate() {
            let left = if idx > 0 { values[idx - 1].1 } else { f64::NEG_INFINITY };
            let right = values.get(idx + 1).map_or(f64::NEG_INFINITY, |p| p.1);
            if v >= left && v >= right {
                candidates.push((a, v));
            }
        }
    }
    for &m in significant {
        let a = bounds.clamp(m);
        candidates.push((a, f(a)));
    }

    let mut best = candidates[0];
    for &(a, v) in &candidates {
        if v > best.1 || (v == best.1 && a < best.0) {
            best = (a, v);
        }
    }
    // (ln f)'' >= -1/min variance, so a point whose value trails the best by
    // more than step²/(2·min var) cannot overtake it within one step.
    let min_var = mix.variances.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = GRID_STEP * GRID_STEP / (2.0 * min_var);
    let threshold = best.1 - slack;
    for &(a, v) in &candidates {
        if v < threshold {
            continue;
        }
        let lo = (a - GRID_STEP).max(lo_b);
        let hi = (a + GRID_STEP).min(hi_b);
        let (ra, rv) = golden_section_max(&f, lo, hi);
        if rv > best.1 || (rv == best.1 && ra < best.0) {
            best = (ra, rv);
        }
    }
    best.0
}

/// Log-density with per-component constants folded in.
struct PreparedMixture {
    /// `(ln w - (ln 2π + ln s²)/2, mean, 1/(2 s²))`
    terms: Vec<(f64, f64, f64)>,
}

impl PreparedMixture {
    fn new(mix: &ConditionalMixture) -> Self {
        let terms = mix
            .weights
            .iter()
            .zip(&mix.means)
            .zip(&mix.variances)
            .filter(|((w, _), _)| **w > 0.0)
            .map(|((w, m), v)| (w.ln() - 0.5 * (LN_2PI + v.ln()), *m, 0.5 / v))
            .collect();
        PreparedMixture { terms }
    }

    #[inline]
    fn ln_density(&self, a: f64) -> f64 {
        let term = |&(c, m, h): &(f64, f64, f64)| c - (a - m) * (a - m) * h;
        let max = self.terms.iter().map(term).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return max;
        }
        let sum: f64 = self.terms.iter().map(|t| (term(t) - max).exp()).sum();
        max + sum.ln()
    }
}

/// Golden-section search for a maximum of `f` on `[lo, hi]`.
fn golden_section_max(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > GOLDEN_TOL {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    let x = 0.5 * (lo + hi);
    (x, f(x))
}

/// `arg max_{a ∈ [a_min, a_max]} P(z, a; θ)`.
pub fn argmax_acceleration(z: &[f64], gmm: &ConditionalGmm, bounds: &AccelBounds) -> Result<f64> {
    let mix = conditional_mixture(z, gmm)?;
    Ok(maximize_mixture(&mix, bounds))
}

/// A fitted mixture ready for density-argmax prediction.
#[derive(Debug, Clone)]
pub struct PdfRegressor {
    cond: ConditionalGmm,
    bounds: AccelBounds,
}

impl PdfRegressor {
    pub fn new(gmm: &GmmParams, bounds: AccelBounds) -> Result<Self> {
        Ok(PdfRegressor {
            cond: ConditionalGmm::new(gmm)?,
            bounds,
        })
    }

    pub fn conditional(&self) -> &ConditionalGmm {
        &self.cond
    }

    pub fn bounds(&self) -> AccelBounds {
        self.bounds
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64> {
        argmax_acceleration(z, &self.cond, &self.bounds)
    }

    pub fn predict_sequence(&self, features: &[ObservationVector]) -> Result<Vec<f64>> {
        features.iter().map(|o| self.predict(&o.z)).collect()
    }
}
