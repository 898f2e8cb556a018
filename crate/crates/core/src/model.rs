//! Domain types shared by every stage of the pipeline.
//!
//! Validated types (`Trajectory`, `GmmParams`, `HmmParams`, `AccelBounds`)
//! re-check their invariants on deserialization, so a model document loaded
//! from disk is as trustworthy as one fitted in process.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed sample period of all trajectory data (10 Hz).
pub const SAMPLE_PERIOD: f64 = 0.1;

const SPACING_TOL: f64 = 1e-9;
const SIMPLEX_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x_h: f64,
    pub v_h: f64,
    pub x_l: f64,
    pub v_l: f64,
}

impl TrajectorySample {
    /// Range to the lead vehicle, `x_l - x_h`.
    pub fn gap(&self) -> f64 {
        self.x_l - self.x_h
    }
}

/// Host and lead kinematics sampled every [`SAMPLE_PERIOD`] seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRepr")]
pub struct Trajectory {
    driver_id: String,
    trajectory_id: String,
    dt: f64,
    samples: Vec<TrajectorySample>,
}

#[derive(Deserialize)]
struct TrajectoryRepr {
    driver_id: String,
    trajectory_id: String,
    dt: f64,
    samples: Vec<TrajectorySample>,
}

impl TryFrom<TrajectoryRepr> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRepr) -> Result<Self> {
        if (r.dt - SAMPLE_PERIOD).abs() > SPACING_TOL {
            return Err(Error::invalid(format!(
                "sample period {} s is not supported, expected {SAMPLE_PERIOD} s",
                r.dt
            )));
        }
        Trajectory::new(r.driver_id, r.trajectory_id, r.samples)
    }
}

impl Trajectory {
    pub fn new(
        driver_id: impl Into<String>,
        trajectory_id: impl Into<String>,
        samples: Vec<TrajectorySample>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("trajectory has no samples"));
        }
        for (k, s) in samples.iter().enumerate() {
            let fields = [s.t, s.x_h, s.v_h, s.x_l, s.v_l];
            if fields.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("sample {k} has a non-finite field")));
            }
            if s.v_h < 0.0 || s.v_l < 0.0 {
                return Err(Error::invalid(format!("sample {k} has a negative speed")));
            }
            if s.x_l <= s.x_h {
                return Err(Error::invalid(format!(
                    "sample {k}: lead position {} is not ahead of host position {}",
                    s.x_l, s.x_h
                )));
            }
        }
        for (k, w) in samples.windows(2).enumerate() {
            let step = w[1].t - w[0].t;
            if (step - SAMPLE_PERIOD).abs() > SPACING_TOL {
                return Err(Error::invalid(format!(
                    "samples {k}..{} are {step} s apart, expected uniform {SAMPLE_PERIOD} s",
                    k + 1
                )));
            }
        }
        Ok(Trajectory {
            driver_id: driver_id.into(),
            trajectory_id: trajectory_id.into(),
            dt: SAMPLE_PERIOD,
            samples,
        })
    }

    pub fn driver_id(&self) -> &str {
        &self.driver_id
    }

    pub fn trajectory_id(&self) -> &str {
        &self.trajectory_id
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// One derived signal that can enter the input vector `z_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Range `Δx` (m).
    Gap,
    /// Relative speed `Δv = v_l - v_h` (m/s).
    RelSpeed,
    /// Relative acceleration `Δv̇` (m/s²).
    RelAccel,
    /// Host jerk (m/s³).
    Jerk,
    /// Host speed (m/s).
    HostSpeed,
}

/// The four input-variable combinations compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeatureSet {
    Z1,
    Z2,
    Z3,
    Z4,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 4] = [FeatureSet::Z1, FeatureSet::Z2, FeatureSet::Z3, FeatureSet::Z4];

    pub fn channels(self) -> &'static [Channel] {
        use Channel::*;
        match self {
            FeatureSet::Z1 => &[Gap, RelSpeed],
            FeatureSet::Z2 => &[Gap, RelSpeed, HostSpeed],
            FeatureSet::Z3 => &[Gap, RelSpeed, RelAccel, HostSpeed],
            FeatureSet::Z4 => &[Gap, RelSpeed, RelAccel, Jerk, HostSpeed],
        }
    }

    pub fn input_dim(self) -> usize {
        self.channels().len()
    }

    /// Input dimension plus the acceleration output.
    pub fn total_dim(self) -> usize {
        self.input_dim() + 1
    }

    /// Highest time-derivative order needed by any channel (or the target).
    pub fn derivative_order(self) -> usize {
        if self.channels().contains(&Channel::Jerk) {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureSet::Z1 => "Z1",
            FeatureSet::Z2 => "Z2",
            FeatureSet::Z3 => "Z3",
            FeatureSet::Z4 => "Z4",
        };
        f.write_str(s)
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "z1" => Ok(FeatureSet::Z1),
            "z2" => Ok(FeatureSet::Z2),
            "z3" => Ok(FeatureSet::Z3),
            "z4" => Ok(FeatureSet::Z4),
            other => Err(Error::invalid(format!("unknown feature set `{other}`"))),
        }
    }
}

/// Training/test sample `ξ_t = [z_t, a_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationVector {
    pub z: Vec<f64>,
    pub a: f64,
    pub t: f64,
    pub event_id: String,
}

impl ObservationVector {
    /// The joint vector `[z, a]`.
    pub fn joint(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.z.len() + 1);
        v.extend_from_slice(&self.z);
        v.push(self.a);
        v
    }
}

/// Mixture parameters `θ = {π_i, μ_i, Σ_i}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmParamsRepr", into = "GmmParamsRepr")]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    feature_set: Option<FeatureSet>,
}

#[derive(Serialize, Deserialize)]
struct GmmParamsRepr {
    n_components: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_set: Option<FeatureSet>,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    /// Row-major, one `d × d` nested array per component.
    covariances: Vec<Vec<Vec<f64>>>,
}

impl From<GmmParams> for GmmParamsRepr {
    fn from(p: GmmParams) -> Self {
        GmmParamsRepr {
            n_components: p.weights.len(),
            feature_set: p.feature_set,
            means: p.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: p
                .covariances
                .iter()
                .map(|c| {
                    (0..c.nrows())
                        .map(|i| (0..c.ncols()).map(|j| c[(i, j)]).collect())
                        .collect()
                })
                .collect(),
            weights: p.weights,
        }
    }
}

impl TryFrom<GmmParamsRepr> for GmmParams {
    type Error = Error;

    fn try_from(r: GmmParamsRepr) -> Result<Self> {
        if r.n_components != r.weights.len() {
            return Err(Error::invalid(format!(
                "n_components = {} but {} weights given",
                r.n_components,
                r.weights.len()
            )));
        }
        let means = r.means.into_iter().map(DVector::from_vec).collect();
        let mut covariances = Vec::with_capacity(r.covariances.len());
        for rows in r.covariances {
            let d = rows.len();
            if rows.iter().any(|row| row.len() != d) {
                return Err(Error::invalid("covariance is not square"));
            }
            covariances.push(DMatrix::from_fn(d, d, |i, j| rows[i][j]));
        }
        GmmParams::new(r.weights, means, covariances, r.feature_set)
    }
}

impl GmmParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
        feature_set: Option<FeatureSet>,
    ) -> Result<Self> {
        let n = weights.len();
        if n == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        if means.len() != n || covariances.len() != n {
            return Err(Error::invalid(format!(
                "{n} weights but {} means and {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        check_simplex(&weights, "mixture weights")?;
        let d = means[0].len();
        if d == 0 {
            return Err(Error::invalid("zero-dimensional mixture"));
        }
        if let Some(fs) = feature_set {
            if fs.total_dim() != d {
                return Err(Error::invalid(format!(
                    "feature set {fs} needs dimension {}, mixture has {d}",
                    fs.total_dim()
                )));
            }
        }
        for (i, (m, c)) in means.iter().zip(&covariances).enumerate() {
            if m.len() != d || c.nrows() != d || c.ncols() != d {
                return Err(Error::invalid(format!("component {i} has inconsistent dimensions")));
            }
            if m.iter().chain(c.iter()).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("component {i} has non-finite entries")));
            }
            check_spd(c).map_err(|msg| Error::invalid(format!("component {i}: {msg}")))?;
        }
        Ok(GmmParams {
            weights,
            means,
            covariances,
            feature_set,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Dimension of the joint vector.
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn feature_set(&self) -> Option<FeatureSet> {
        self.feature_set
    }

    pub fn with_feature_set(mut self, fs: FeatureSet) -> Result<Self> {
        if fs.total_dim() != self.dim() {
            return Err(Error::invalid(format!(
                "feature set {fs} needs dimension {}, mixture has {}",
                fs.total_dim(),
                self.dim()
            )));
        }
        self.feature_set = Some(fs);
        Ok(self)
    }

    /// Reorders components so that new component `k` is old component `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_components();
        let mut seen = vec![false; n];
        if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::invalid("not a permutation of the components"));
        }
        Ok(GmmParams {
            weights: order.iter().map(|&i| self.weights[i]).collect(),
            means: order.iter().map(|&i| self.means[i].clone()).collect(),
            covariances: order.iter().map(|&i| self.covariances[i].clone()).collect(),
            feature_set: self.feature_set,
        })
    }
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::invalid(format!("{what} must be finite and non-negative")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("{what} sum to {sum}, not 1")));
    }
    Ok(())
}

fn check_spd(c: &DMatrix<f64>) -> std::result::Result<(), String> {
    let scale = c.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..c.nrows() {
        for j in 0..i {
            if (c[(i, j)] - c[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err("covariance is not symmetric".into());
            }
        }
    }
    let min_eig = c.clone().symmetric_eigenvalues().min();
    if !(min_eig > 0.0) {
        return Err(format!("covariance is not positive definite (min eigenvalue {min_eig})"));
    }
    Ok(())
}

/// Mixture plus the Markov chain over its components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmParamsRepr")]
pub struct HmmParams {
    gmm: GmmParams,
    initial: Vec<f64>,
    /// Row-stochastic; `transitions[i][j]` is the probability of moving from state `i` to `j`.
    transitions: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct HmmParamsRepr {
    gmm: GmmParams,
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl TryFrom<HmmParamsRepr> for HmmParams {
    type Error = Error;

    fn try_from(r: HmmParamsRepr) -> Result<Self> {
        HmmParams::new(r.gmm, r.initial, r.transitions)
    }
}

impl HmmParams {
    pub fn new(gmm: GmmParams, initial: Vec<f64>, transitions: Vec<Vec<f64>>) -> Result<Self> {
        let n = gmm.n_components();
        if initial.len() != n {
            return Err(Error::invalid(format!(
                "{} initial probabilities for {n} states",
                initial.len()
            )));
        }
        check_simplex(&initial, "initial probabilities")?;
        if transitions.len() != n || transitions.iter().any(|row| row.len() != n) {
            return Err(Error::invalid(format!("transition matrix must be {n}×{n}")));
        }
        for (i, row) in transitions.iter().enumerate() {
            check_simplex(row, &format!("transition row {i}"))?;
        }
        Ok(HmmParams {
            gmm,
            initial,
            transitions,
        })
    }

    pub fn gmm(&self) -> &GmmParams {
        &self.gmm
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    pub fn n_states(&self) -> usize {
        self.initial.len()
    }
}

/// Reachable acceleration interval for the density argmax.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AccelBoundsRepr")]
pub struct AccelBounds {
    a_min: f64,
    a_max: f64,
}

#[derive(Deserialize)]
struct AccelBoundsRepr {
    a_min: f64,
    a_max: f64,
}

impl TryFrom<AccelBoundsRepr> for AccelBounds {
    type Error = Error;

    fn try_from(r: AccelBoundsRepr) -> Result<Self> {
        AccelBounds::new(r.a_min, r.a_max)
    }
}

impl Default for AccelBounds {
    fn default() -> Self {
        AccelBounds {
            a_min: -8.0,
            a_max: 8.0,
        }
    }
}

impl AccelBounds {
    pub fn new(a_min: f64, a_max: f64) -> Result<Self> {
        if !a_min.is_finite() || !a_max.is_finite() || a_min >= a_max {
            return Err(Error::invalid(format!(
                "acceleration bounds [{a_min}, {a_max}] are not a proper interval"
            )));
        }
        Ok(AccelBounds { a_min, a_max })
    }

    pub fn a_min(&self) -> f64 {
        self.a_min
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn clamp(&self, a: f64) -> f64 {
        a.clamp(self.a_min, self.a_max)
    }

    pub fn contains(&self, a: f64) -> bool {
        (self.a_min..=self.a_max).contains(&a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    GmmHmm,
    GmmPdf,
}

impl Method {
    pub const ALL: [Method; 2] = [Method::GmmHmm, Method::GmmPdf];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GmmHmm => "GmmHmm",
            Method::GmmPdf => "GmmPdf",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "hmm" | "gmmhmm" | "gmm-hmm" => Ok(Method::GmmHmm),
            "pdf" | "gmmpdf" | "gmm-pdf" => Ok(Method::GmmPdf),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// One held-out fold of one repeat.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_index: usize,
    pub repeat_index: usize,
    pub seed: u64,
    pub train_mae: f64,
    pub test_mae: f64,
}

/// Cross-validation outcome for one (driver, feature set, N, method) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub driver_id: String,
    pub feature_set: FeatureSet,
    pub n_components: usize,
    pub method: Method,
    pub per_fold: Vec<FoldResult>,
    pub mean_train_mae: f64,
    pub mean_test_mae: f64,
    /// Folds that were skipped, with the reason.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl CvReport {
    pub fn from_folds(
        driver_id: impl Into<String>,
        feature_set: FeatureSet,
        n_components: usize,
        method: Method,
        per_fold: Vec<FoldResult>,
        diagnostics: Vec<String>,
    ) -> Result<Self> {
        if per_fold.is_empty() {
            return Err(Error::invalid("a report needs at least one fold"));
        }
        if per_fold
            .iter()
            .any(|f| !(f.train_mae >= 0.0 && f.test_mae >= 0.0) || !f.train_mae.is_finite() || !f.test_mae.is_finite())
        {
            return Err(Error::invalid("fold errors must be finite and non-negative"));
        }
        let k = per_fold.len() as f64;
        let mean_train_mae = per_fold.iter().map(|f| f.train_mae).sum::<f64>() / k;
        let mean_test_mae = per_fold.iter().map(|f| f.test_mae).sum::<f64>() / k;
        Ok(CvReport {
            driver_id: driver_id.into(),
            feature_set,
            n_components,
            method,
            per_fold,
            mean_train_mae,
            mean_test_mae,
            diagnostics,
        })
    }
}

/// A fitted driver model as persisted to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelDocument", into = "ModelDocument")]
pub enum FittedModel {
    GmmHmm(HmmParams),
    GmmPdf(GmmParams),
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    method: Method,
    feature_set: FeatureSet,
    gmm: GmmParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transitions: Option<Vec<Vec<f64>>>,
}

impl From<FittedModel> for ModelDocument {
    fn from(m: FittedModel) -> Self {
        match m {
            FittedModel::GmmHmm(h) => ModelDocument {
                method: Method::GmmHmm,
                feature_set: h.gmm.feature_set.expect("fitted model carries its feature set"),
                gmm: h.gmm,
                initial: Some(h.initial),
                transitions: Some(h.transitions),
            },
            FittedModel::GmmPdf(g) => ModelDocument {
                method: Method::GmmPdf,
                feature_set: g.feature_set.expect("fitted model carries its feature set"),
                gmm: g,
                initial: None,
                transitions: None,
            },
        }
    }
}

impl TryFrom<ModelDocument> for FittedModel {
    type Error = Error;

    fn try_from(doc: ModelDocument) -> Result<Self> {
        let gmm = doc.gmm.with_feature_set(doc.feature_set)?;
        match doc.method {
            Method::GmmHmm => {
                let (Some(initial), Some(transitions)) = (doc.initial, doc.transitions) else {
                    return Err(Error::invalid("GmmHmm model is missing `initial` or `transitions`"));
                };
                Ok(FittedModel::GmmHmm(HmmParams::new(gmm, initial, transitions)?))
            }
            Method::GmmPdf => Ok(FittedModel::GmmPdf(gmm)),
        }
    }
}

impl FittedModel {
    /// Wraps fitted parameters; they must carry a feature set.
    pub fn new_hmm(params: HmmParams) -> Result<Self> {
        if params.gmm.feature_set.is_none() {
            return Err(Error::invalid("model parameters carry no feature set"));
        }
        Ok(FittedModel::GmmHmm(params))
    }

    pub fn new_pdf(params: GmmParams) -> Result<Self> {
        if params.feature_set.is_none() {
            return Err(Error::invalid("model parameters carry no feature set"));
        }
        Ok(FittedModel::GmmPdf(params))
    }

    pub fn method(&self) -> Method {
        match self {
            FittedModel::GmmHmm(_) => Method::GmmHmm,
            FittedModel::GmmPdf(_) => Method::GmmPdf,
        }
    }

    pub fn gmm(&self) -> &GmmParams {
        match self {
            FittedModel::GmmHmm(h) => h.gmm(),
            FittedModel::GmmPdf(g) => g,
        }
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.gmm().feature_set().expect("fitted model carries its feature set")
    }
}
