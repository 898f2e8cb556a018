//! Gaussian mixture fitting: seeded k-means initialization, EM, and BIC.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{log_sum_exp, Gaussian};
use crate::model::GmmParams;

/// Relative ridge used when [`EmConfig::cov_reg`] is left automatic.
pub const AUTO_RIDGE_SCALE: f64 = 1e-6;

/// Components whose responsibility mass falls below this keep their previous
/// mean and covariance instead of being re-estimated from nothing.
const MIN_COMPONENT_MASS: f64 = 1e-10;

const NEGLIGIBLE_LOG_RATIO: f64 = -40.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once `(L_new - L_old) / |L_old|` drops below this.
    pub rel_tol: f64,
    /// Ridge added to every covariance diagonal. `None` uses
    /// [`AUTO_RIDGE_SCALE`] times the mean per-dimension data variance.
    pub cov_reg: Option<f64>,
    pub seed: u64,
    pub kmeans_max_iter: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            rel_tol: 1e-6,
            cov_reg: None,
            seed: 0,
            kmeans_max_iter: 100,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::invalid("rel_tol must be positive"));
        }
        if let Some(r) = self.cov_reg {
            if !(r >= 0.0) || !r.is_finite() {
                return Err(Error::invalid("cov_reg must be finite and non-negative"));
            }
        }
        if self.kmeans_max_iter == 0 {
            return Err(Error::invalid("kmeans_max_iter must be at least 1"));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        EmConfig { seed, ..self.clone() }
    }
}

/// Row-major copy of the data with its dimension checked once.
struct Points {
    data: Vec<f64>,
    n: usize,
    d: usize,
    /// Column means; moments are accumulated about this point.
    shift: Vec<f64>,
}

impl Points {
    fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = rows.first() else {
            return Err(Error::invalid("no data points"));
        };
        let d = first.len();
        if d == 0 {
            return Err(Error::invalid("zero-dimensional data"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for (k, r) in rows.iter().enumerate() {
            if r.len() != d {
                return Err(Error::invalid(format!("point {k} has dimension {}, expected {d}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("point {k} has non-finite components")));
            }
            data.extend_from_slice(r);
        }
        let n = rows.len();
        let shift = (0..d).map(|j| (0..n).map(|k| data[k * d + j]).sum::<f64>() / n as f64).collect();
        Ok(Points { data, n, d, shift })
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    fn mean_variance(&self) -> f64 {
        let (n, d) = (self.n as f64, self.d);
        let mut total = 0.0;
        for j in 0..d {
            let mean = (0..self.n).map(|k| self.data[k * d + j]).sum::<f64>() / n;
            total += (0..self.n).map(|k| (self.data[k * d + j] - mean).powi(2)).sum::<f64>() / n;
        }
        total / d as f64
    }
}

fn ridge(points: &Points, cfg: &EmConfig) -> f64 {
    cfg.cov_reg.unwrap_or_else(|| {
        let v = points.mean_variance();
        if v > 0.0 {
            AUTO_RIDGE_SCALE * v
        } else {
            AUTO_RIDGE_SCALE
        }
    })
}

/// The ridge [`em_fit`] and [`kmeans_init`] apply for this data and config.
pub fn effective_ridge(data: &[Vec<f64>], cfg: &EmConfig) -> Result<f64> {
    Ok(ridge(&Points::new(data)?, cfg))
}

/// Indices of the first occurrence of every distinct point, in data order.
fn distinct_indices(points: &Points) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.n).collect();
    let bits = |k: usize| points.row(k).iter().map(|v| v.to_bits());
    order.sort_by(|&a, &b| bits(a).cmp(bits(b)).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for &k in &order {
        match keep.last() {
            Some(&prev) if points.row(prev) == points.row(k) => {}
            _ => keep.push(k),
        }
    }
    keep.sort_unstable();
    keep
}

/// Assigns every point to its nearest center; returns whether any moved.
fn assign_nearest(points: &Points, centers: &[f64], assign: &mut [usize]) -> bool {
    match points.d {
        1 => assign_nearest_dim(points, centers, assign, 1),
        2 => assign_nearest_dim(points, centers, assign, 2),
        3 => assign_nearest_dim(points, centers, assign, 3),
        4 => assign_nearest_dim(points, centers, assign, 4),
        5 => assign_nearest_dim(points, centers, assign, 5),
        6 => assign_nearest_dim(points, centers, assign, 6),
        d => assign_nearest_dim(points, centers, assign, d),
    }
}

#[inline(always)]
fn assign_nearest_dim(points: &Points, centers: &[f64], assign: &mut [usize], d: usize) -> bool {
    let mut changed = false;
    for (x, slot) in points.data.chunks_exact(d).zip(assign.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, c) in centers.chunks_exact(d).enumerate() {
            let mut dist = 0.0;
            for j in 0..d {
                let t = x[j] - c[j];
                dist += t * t;
            }
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        if *slot != best {
            *slot = best;
            changed = true;
        }
    }
    changed
}

/// Seeded k-means, turned into an initial mixture.
///
/// Centers start at `n` distinct data points drawn with the configured seed
/// and move by Lloyd iterations until assignments stop changing (or
/// `kmeans_max_iter`). Weights are cluster fractions and covariances the
/// within-cluster moment matrices plus the ridge.
pub fn kmeans_init(data: &[Vec<f64>], n: usize, cfg: &EmConfig) -> Result<GmmParams> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::invalid("number of components must be at least 1"));
    }
    let points = Points::new(data)?;
    let distinct = distinct_indices(&points);
    if n > distinct.len() {
        return Err(Error::invalid(format!(
            "{n} components requested but data has only {} distinct points",
            distinct.len()
        )));
    }
    let d = points.d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks = rand::seq::index::sample(&mut rng, distinct.len(), n);
    let mut centers: Vec<f64> = picks.iter().flat_map(|i| points.row(distinct[i]).iter().copied()).collect();

    let mut assign = vec![usize::MAX; points.n];
    for _ in 0..cfg.kmeans_max_iter {
        if !assign_nearest(&points, &centers, &mut assign) {
            break;
        }
        let mut sums = vec![0.0; n * d];
        let mut counts = vec![0usize; n];
        for (k, &i) in assign.iter().enumerate() {
            counts[i] += 1;
            for (s, v) in sums[i * d..(i + 1) * d].iter_mut().zip(points.row(k)) {
                *s += v;
            }
        }
        for i in 0..n {
            // empty clusters keep their previous center
            if counts[i] > 0 {
                for j in 0..d {
                    centers[i * d + j] = sums[i * d + j] / counts[i] as f64;
                }
            }
        }
    }
    let centers: Vec<&[f64]> = centers.chunks_exact(d).collect();

    let eps = ridge(&points, cfg);
    let mut counts = vec![0usize; n];
    let mut scatter = vec![DMatrix::<f64>::zeros(d, d); n];
    for (k, &i) in assign.iter().enumerate() {
        counts[i] += 1;
        let x = points.row(k);
        for a in 0..d {
            let da = x[a] - centers[i][a];
            for b in 0..=a {
                scatter[i][(a, b)] += da * (x[b] - centers[i][b]);
            }
        }
    }
    let total = points.n as f64;
    let mut weights = Vec::with_capacity(n);
    let mut means = Vec::with_capacity(n);
    let mut covariances = Vec::with_capacity(n);
    for i in 0..n {
        let c = counts[i].max(1) as f64;
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..=a {
                let v = scatter[i][(a, b)] / c;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += eps;
        }
        weights.push(counts[i] as f64 / total);
        means.push(DVector::from_row_slice(centers[i]));
        covariances.push(cov);
    }
    GmmParams::new(weights, means, covariances, None).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::fit(format!("k-means initialization: {msg}")),
        other => other,
    })
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: GmmParams,
    /// Log-likelihood of the initial parameters followed by the value after
    /// every EM iteration; the last entry belongs to `params`.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EmFit {
    pub fn log_likelihood(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds at least the initial value")
    }
}

fn prepare(params: &GmmParams) -> Result<(Vec<Gaussian>, Vec<f64>)> {
    let comps = params
        .means()
        .iter()
        .zip(params.covariances())
        .map(|(m, c)| Gaussian::new(m, c))
        .collect::<Result<Vec<_>>>()?;
    let log_w = params.weights().iter().map(|w| w.ln()).collect();
    Ok((comps, log_w))
}

/// Responsibility-weighted moments of the data about [`Points::shift`].
struct Moments {
    mass: Vec<f64>,
    /// `N × d`
    first: Vec<f64>,
    /// `N × d × d`, lower triangle only.
    second: Vec<f64>,
}

impl Moments {
    fn new(nc: usize, d: usize) -> Self {
        Moments {
            mass: vec![0.0; nc],
            first: vec![0.0; nc * d],
            second: vec![0.0; nc * d * d],
        }
    }

    fn clear(&mut self) {
        self.mass.fill(0.0);
        self.first.fill(0.0);
        self.second.fill(0.0);
    }
}

/// Computes responsibilities, accumulates their moments into `mom` and
/// returns the total log-likelihood.
fn e_step(points: &Points, comps: &[Gaussian], log_w: &[f64], mom: &mut Moments) -> f64 {
    // Constant dimensions let the compiler unroll the inner loops.
    match points.d {
        1 => e_step_dim(points, comps, log_w, mom, 1),
        2 => e_step_dim(points, comps, log_w, mom, 2),
        3 => e_step_dim(points, comps, log_w, mom, 3),
        4 => e_step_dim(points, comps, log_w, mom, 4),
        5 => e_step_dim(points, comps, log_w, mom, 5),
        6 => e_step_dim(points, comps, log_w, mom, 6),
        d => e_step_dim(points, comps, log_w, mom, d),
    }
}

#[inline(always)]
fn e_step_dim(points: &Points, comps: &[Gaussian], log_w: &[f64], mom: &mut Moments, d: usize) -> f64 {
    let nc = comps.len();
    mom.clear();
    let means: Vec<f64> = comps.iter().flat_map(|c| c.mean().iter().copied()).collect();
    let factors: Vec<f64> = comps.iter().flat_map(|c| c.inv_chol().iter().copied()).collect();
    let consts: Vec<f64> = comps.iter().zip(log_w).map(|(c, w)| w + c.log_norm()).collect();
    let mut buf = vec![0.0; nc];
    let mut diff = vec![0.0; d];
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    for x in points.data.chunks_exact(d) {
        let mut max = f64::NEG_INFINITY;
        for i in 0..nc {
            let mean = &means[i * d..(i + 1) * d];
            let l = &factors[i * d * d..(i + 1) * d * d];
            for j in 0..d {
                diff[j] = x[j] - mean[j];
            }
            let mut acc = 0.0;
            for a in 0..d {
                let row = &l[a * d..a * d + d];
                let mut s = 0.0;
                for b in 0..=a {
                    s += row[b] * diff[b];
                }
                acc += s * s;
            }
            buf[i] = consts[i] - 0.5 * acc;
            max = max.max(buf[i]);
        }
        if max == f64::NEG_INFINITY || max.is_nan() {
            return max;
        }
        let mut sum = 0.0;
        for b in buf.iter_mut() {
            let t = *b - max;
            // below e^-40 a term is lost in the rounding of the sum anyway
            *b = if t < NEGLIGIBLE_LOG_RATIO { 0.0 } else { t.exp() };
            sum += *b;
        }
        total += max + sum.ln();
        for j in 0..d {
            y[j] = x[j] - points.shift[j];
        }
        let scale = 1.0 / sum;
        for i in 0..nc {
            let r = buf[i] * scale;
            if r == 0.0 {
                continue;
            }
            mom.mass[i] += r;
            let first = &mut mom.first[i * d..(i + 1) * d];
            let second = &mut mom.second[i * d * d..(i + 1) * d * d];
            for a in 0..d {
                let ra = r * y[a];
                first[a] += ra;
                let row = &mut second[a * d..a * d + d];
                for b in 0..=a {
                    row[b] += ra * y[b];
                }
            }
        }
    }
    total
}

fn m_step(points: &Points, mom: &Moments, prev: &GmmParams, eps: f64) -> Result<GmmParams> {
    let d = points.d;
    let nc = prev.n_components();
    let mut means = Vec::with_capacity(nc);
    let mut covariances = Vec::with_capacity(nc);
    for i in 0..nc {
        let mass = mom.mass[i];
        if mass < MIN_COMPONENT_MASS {
            means.push(prev.means()[i].clone());
            covariances.push(prev.covariances()[i].clone());
            continue;
        }
        let centered: Vec<f64> = mom.first[i * d..(i + 1) * d].iter().map(|s| s / mass).collect();
        let second = &mom.second[i * d * d..(i + 1) * d * d];
        let mut cov = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..=a {
                let v = second[a * d + b] / mass - centered[a] * centered[b];
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
            cov[(a, a)] += eps;
        }
        means.push(DVector::from_iterator(d, centered.iter().zip(&points.shift).map(|(c, s)| c + s)));
        covariances.push(cov);
    }
    let total: f64 = mom.mass.iter().sum();
    let weights = mom.mass.iter().map(|m| m / total).collect();
    GmmParams::new(weights, means, covariances, prev.feature_set())
}

/// Expectation-maximization from `init` until the relative log-likelihood
/// improvement drops below `cfg.rel_tol` or `cfg.max_iter` iterations ran.
pub fn em_fit(data: &[Vec<f64>], init: &GmmParams, cfg: &EmConfig) -> Result<EmFit> {
    cfg.validate()?;
    let points = Points::new(data)?;
    if points.d != init.dim() {
        return Err(Error::invalid(format!(
            "data dimension {} does not match mixture dimension {}",
            points.d,
            init.dim()
        )));
    }
    if points.n <= init.n_components() {
        return Err(Error::invalid(format!(
            "{} points cannot support {} components",
            points.n,
            init.n_components()
        )));
    }
    let eps = ridge(&points, cfg);
    let nc = init.n_components();
    let mut mom = Moments::new(nc, points.d);

    let mut params = init.clone();
    let (comps, log_w) = prepare(&params)?;
    let mut ll = e_step(&points, &comps, &log_w, &mut mom);
    if !ll.is_finite() {
        return Err(Error::FitFailure {
            reason: "initial log-likelihood is not finite".into(),
            last_params: Some(Box::new(params)),
        });
    }
    let mut trace = vec![ll];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        let collapse = |reason: String, last: &GmmParams| Error::FitFailure {
            reason,
            last_params: Some(Box::new(last.clone())),
        };
        let next = m_step(&points, &mom, &params, eps)
            .map_err(|e| collapse(format!("M-step produced invalid parameters: {e}"), &params))?;
        let (comps, log_w) = prepare(&next).map_err(|e| collapse(e.to_string(), &params))?;
        let next_ll = e_step(&points, &comps, &log_w, &mut mom);
        iterations += 1;
        if !next_ll.is_finite() {
            return Err(collapse(
                format!("log-likelihood became {next_ll} at iteration {iterations}"),
                &params,
            ));
        }
        params = next;
        trace.push(next_ll);
        let improvement = (next_ll - ll) / ll.abs().max(f64::MIN_POSITIVE);
        ll = next_ll;
        if improvement < cfg.rel_tol {
            converged = true;
            break;
        }
    }
    Ok(EmFit {
        params,
        loglik_trace: trace,
        iterations,
        converged,
    })
}

/// [`kmeans_init`] followed by [`em_fit`].
pub fn fit_gmm(data: &[Vec<f64>], n: usize, cfg: &EmConfig) -> Result<EmFit> {
    let init = kmeans_init(data, n, cfg)?;
    let fit = em_fit(data, &init, cfg)?;
    log::debug!(
        "EM N={n} on {} points: {} iterations, converged={}",
        data.len(),
        fit.iterations,
        fit.converged
    );
    Ok(fit)
}

/// Mixture log-density with component factorizations cached.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    comps: Vec<Gaussian>,
    log_w: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(params: &GmmParams) -> Result<Self> {
        let (comps, log_w) = prepare(params)?;
        Ok(MixtureDensity { comps, log_w })
    }

    pub fn dim(&self) -> usize {
        self.comps[0].dim()
    }

    pub fn ln_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, mixture expects {}",
                x.len(),
                self.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite components"));
        }
        let terms: Vec<f64> = self
            .comps
            .iter()
            .zip(&self.log_w)
            .map(|(g, lw)| lw + g.ln_pdf(x))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// Per-component posterior probabilities of `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms: Vec<f64> = self
            .comps
            .iter()
            .zip(&self.log_w)
            .map(|(g, lw)| lw + g.ln_pdf(x))
            .collect();
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }
}

/// `ln Σ_i π_i N(x; μ_i, Σ_i)`.
pub fn log_density(x: &[f64], params: &GmmParams) -> Result<f64> {
    MixtureDensity::new(params)?.ln_density(x)
}

/// Free parameters of a full-covariance mixture.
pub fn free_parameters(n_components: usize, dim: usize) -> usize {
    (n_components - 1) + n_components * dim + n_components * dim * (dim + 1) / 2
}

/// Bayesian information criterion, `k ln n - 2 L`; lower is better.
pub fn bic(data: &[Vec<f64>], params: &GmmParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("BIC needs at least one point"));
    }
    let density = MixtureDensity::new(params)?;
    let mut total = 0.0;
    for x in data {
        total += density.ln_density(x)?;
    }
    let k = free_parameters(params.n_components(), params.dim()) as f64;
    Ok(k * (data.len() as f64).ln() - 2.0 * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicScore {
    pub n_components: usize,
    pub bic: f64,
}

/// Restarts per candidate in [`bic_sweep`].
pub const BIC_RESTARTS: u64 = 5;

/// Fits every candidate component count and scores it. Each count keeps the
/// best of [`BIC_RESTARTS`] fits seeded `cfg.seed, cfg.seed + 1, ...`, so a
/// single unlucky k-means start cannot hide the right count.
pub fn bic_sweep(data: &[Vec<f64>], candidates: &[usize], cfg: &EmConfig) -> Result<Vec<BicScore>> {
    candidates
        .iter()
        .map(|&n| {
            let mut best: Option<EmFit> = None;
            for r in 0..BIC_RESTARTS {
                let fit = fit_gmm(data, n, &cfg.with_seed(cfg.seed.wrapping_add(r)))?;
                if best.as_ref().is_none_or(|b| fit.log_likelihood() > b.log_likelihood()) {
                    best = Some(fit);
                }
            }
            let best = best.expect("at least one restart");
            Ok(BicScore {
                n_components: n,
                bic: bic(data, &best.params)?,
            })
        })
        .collect()
}

/// The candidate with the smallest BIC (first on ties).
pub fn select_by_bic(scores: &[BicScore]) -> Option<usize> {
    scores
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic))
        .map(|s| s.n_components)
}
