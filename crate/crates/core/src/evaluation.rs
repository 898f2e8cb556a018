//! Grouped cross-validation, the component/feature-set sweep, and the
//! method comparison.
//!
//! Every (driver, feature set, N, repeat) gets its own seed derived from the
//! base seed, so results do not depend on scheduling or thread count. Both
//! methods in a cell share the seed, and with it the partition, held-out
//! group and fitted mixture, so their errors are paired.

use std::collections::{BTreeMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmm::{fit_gmm, EmConfig};
use crate::hmm::{estimate_transitions, HmmRegressor};
use crate::model::{AccelBounds, CvReport, FeatureSet, FoldResult, GmmParams, Method, ObservationVector, Trajectory};
use crate::pdf::PdfRegressor;
use crate::preprocess::{
    build_features, extract_events_with, partition_indices, CarFollowingEvent, ExtractionCriteria,
    DEFAULT_SMOOTH_WINDOW,
};

pub const DEFAULT_COMPONENT_COUNTS: [usize; 14] = [2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 15, 20, 25];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub feature_sets: Vec<FeatureSet>,
    pub component_counts: Vec<usize>,
    pub methods: Vec<Method>,
    pub m_groups: usize,
    pub repeats: usize,
    pub base_seed: u64,
    pub em: EmConfig,
    pub bounds: AccelBounds,
    pub smooth_window: usize,
    /// Hold out every group in turn instead of one random group per repeat.
    pub full_rotation: bool,
    pub extraction: ExtractionCriteria,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            feature_sets: FeatureSet::ALL.to_vec(),
            component_counts: DEFAULT_COMPONENT_COUNTS.to_vec(),
            methods: Method::ALL.to_vec(),
            m_groups: 20,
            repeats: 10,
            base_seed: 0,
            em: EmConfig::default(),
            bounds: AccelBounds::default(),
            smooth_window: DEFAULT_SMOOTH_WINDOW,
            full_rotation: false,
            extraction: ExtractionCriteria::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if self.component_counts.is_empty() || self.component_counts.contains(&0) {
            return Err(Error::invalid("component counts must be a non-empty list of positive integers"));
        }
        if self.feature_sets.is_empty() || self.methods.is_empty() {
            return Err(Error::invalid("at least one feature set and one method are required"));
        }
        if self.m_groups < 2 {
            return Err(Error::invalid("m_groups must be at least 2"));
        }
        if self.smooth_window == 0 {
            return Err(Error::invalid("smoothing window must be at least 1"));
        }
        self.em.validate()
    }
}

/// Time-averaged absolute error; the uniform sample period cancels.
pub fn mean_abs_error(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} observations",
            predicted.len(),
            actual.len()
        )));
    }
    if predicted.is_empty() {
        return Err(Error::invalid("cannot score an empty series"));
    }
    let total: f64 = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum();
    Ok(total / predicted.len() as f64)
}

/// Seed of one repeat of one cell: the base seed XOR a digest of the cell key.
pub fn cell_seed(base_seed: u64, driver_id: &str, fs: FeatureSet, n_components: usize, repeat: usize) -> u64 {
    let digest = Sha256::digest(format!("{driver_id}|{fs}|{n_components}|{repeat}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    base_seed ^ u64::from_le_bytes(bytes)
}

/// Feature sequence of one event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFeatures {
    pub event_id: String,
    pub observations: Vec<ObservationVector>,
}

/// All car-following events of one driver.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverEvents {
    pub driver_id: String,
    pub events: Vec<CarFollowingEvent>,
}

/// Extracts events from every trajectory and groups them by driver, in
/// driver-id order.
pub fn group_by_driver(trajectories: &[Trajectory], criteria: &ExtractionCriteria) -> Vec<DriverEvents> {
    let mut by_driver: BTreeMap<String, Vec<CarFollowingEvent>> = BTreeMap::new();
    for t in trajectories {
        by_driver
            .entry(t.driver_id().to_string())
            .or_default()
            .extend(extract_events_with(t, criteria));
    }
    by_driver
        .into_iter()
        .map(|(driver_id, events)| DriverEvents { driver_id, events })
        .collect()
}

pub fn event_features(events: &[CarFollowingEvent], fs: FeatureSet, window: usize) -> Result<Vec<EventFeatures>> {
    events
        .iter()
        .map(|e| {
            Ok(EventFeatures {
                event_id: e.event_id.clone(),
                observations: build_features(e, fs, window)?,
            })
        })
        .collect()
}

/// A mixture fitted on training sequences, ready to predict.
pub enum Predictor {
    Hmm(HmmRegressor),
    Pdf(PdfRegressor),
}

impl Predictor {
    pub fn build(method: Method, gmm: &GmmParams, train: &[Vec<ObservationVector>], bounds: AccelBounds) -> Result<Self> {
        Ok(match method {
            Method::GmmHmm => Predictor::Hmm(HmmRegressor::new(estimate_transitions(train, gmm)?)?),
            Method::GmmPdf => Predictor::Pdf(PdfRegressor::new(gmm, bounds)?),
        })
    }

    pub fn predict_sequence(&self, seq: &[ObservationVector]) -> Result<Vec<f64>> {
        match self {
            Predictor::Hmm(h) => h.predict_sequence(seq),
            Predictor::Pdf(p) => p.predict_sequence(seq),
        }
    }

    /// Mean absolute error pooled over every sample of every sequence.
    pub fn score(&self, seqs: &[&[ObservationVector]]) -> Result<f64> {
        let mut predicted = Vec::new();
        let mut actual = Vec::new();
        for seq in seqs {
            predicted.extend(self.predict_sequence(seq)?);
            actual.extend(seq.iter().map(|o| o.a));
        }
        mean_abs_error(&predicted, &actual)
    }
}

struct MethodTally {
    folds: Vec<FoldResult>,
    diagnostics: Vec<String>,
}

/// Cross-validates one (driver, feature set, N) cell for every method in
/// `methods`, returning one outcome per method in the same order.
pub fn run_cv_features(
    driver_id: &str,
    features: &[EventFeatures],
    cfg: &SweepConfig,
    fs: FeatureSet,
    n: usize,
    methods: &[Method],
) -> Vec<Result<CvReport>> {
    let fail_all = |e: Error| methods.iter().map(|_| Err(Error::invalid(e.to_string()))).collect();
    if let Err(e) = cfg.validate() {
        return fail_all(e);
    }
    if features.len() < 2 {
        return fail_all(Error::invalid(format!(
            "driver {driver_id} has {} events, cross-validation needs at least 2",
            features.len()
        )));
    }
    if let Some(bad) = features.iter().flat_map(|f| &f.observations).find(|o| o.z.len() != fs.input_dim()) {
        return fail_all(Error::invalid(format!(
            "observation of event {} has {} inputs, feature set {fs} has {}",
            bad.event_id,
            bad.z.len(),
            fs.input_dim()
        )));
    }

    let mut tallies: Vec<MethodTally> = methods
        .iter()
        .map(|_| MethodTally { folds: Vec::new(), diagnostics: Vec::new() })
        .collect();
    let note_all = |tallies: &mut Vec<MethodTally>, msg: String| {
        log::debug!("{msg}");
        for t in tallies.iter_mut() {
            t.diagnostics.push(msg.clone());
        }
    };

    for repeat in 0..cfg.repeats {
        let seed = cell_seed(cfg.base_seed, driver_id, fs, n, repeat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups = match partition_indices(features.len(), cfg.m_groups, rng.random()) {
            Ok(g) => g,
            Err(e) => return fail_all(e),
        };
        let non_empty: Vec<usize> = (0..groups.len()).filter(|&g| !groups[g].is_empty()).collect();
        let holdouts = if cfg.full_rotation {
            non_empty.clone()
        } else {
            vec![non_empty[rng.random_range(0..non_empty.len())]]
        };
        let em = cfg.em.with_seed(rng.random());

        for fold in holdouts {
            let test_set: HashSet<usize> = groups[fold].iter().copied().collect();
            let train: Vec<Vec<ObservationVector>> = (0..features.len())
                .filter(|i| !test_set.contains(i))
                .map(|i| features[i].observations.clone())
                .collect();
            let test: Vec<&[ObservationVector]> = groups[fold].iter().map(|&i| features[i].observations.as_slice()).collect();
            let points: Vec<Vec<f64>> = train.iter().flatten().map(|o| o.joint()).collect();
            let where_ = format!("driver {driver_id} {fs} N={n} repeat {repeat} fold {fold}");
            if points.len() <= n {
                note_all(&mut tallies, format!("{where_}: skipped, {} training points for {n} components", points.len()));
                continue;
            }
            let gmm = match fit_gmm(&points, n, &em).and_then(|f| f.params.with_feature_set(fs)) {
                Ok(g) => g,
                Err(e) => {
                    note_all(&mut tallies, format!("{where_}: skipped, {e}"));
                    continue;
                }
            };
            let train_refs: Vec<&[ObservationVector]> = train.iter().map(Vec::as_slice).collect();
            for (tally, &method) in tallies.iter_mut().zip(methods) {
                let scored = Predictor::build(method, &gmm, &train, cfg.bounds)
                    .and_then(|p| Ok((p.score(&train_refs)?, p.score(&test)?)));
                match scored {
                    Ok((train_mae, test_mae)) => tally.folds.push(FoldResult {
                        fold_index: fold,
                        repeat_index: repeat,
                        seed,
                        train_mae,
                        test_mae,
                    }),
                    Err(e) => tally.diagnostics.push(format!("{where_} {method}: skipped, {e}")),
                }
            }
        }
    }

    tallies
        .into_iter()
        .zip(methods)
        .map(|(t, &method)| {
            if t.folds.is_empty() {
                return Err(Error::invalid(format!(
                    "driver {driver_id} {fs} N={n} {method}: every fold was skipped ({})",
                    t.diagnostics.join("; ")
                )));
            }
            CvReport::from_folds(driver_id, fs, n, method, t.folds, t.diagnostics)
        })
        .collect()
}

/// Grouped cross-validation of one driver for one cell.
pub fn run_cv(
    driver_events: &[CarFollowingEvent],
    cfg: &SweepConfig,
    fs: FeatureSet,
    n: usize,
    method: Method,
) -> Result<CvReport> {
    if driver_events.len() < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 events"));
    }
    let driver_id = &driver_events[0].driver_id;
    let features = event_features(driver_events, fs, cfg.smooth_window)?;
    run_cv_features(driver_id, &features, cfg, fs, n, &[method])
        .pop()
        .expect("one result per method")
}

/// A sweep cell that produced no report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub driver_id: String,
    pub feature_set: FeatureSet,
    pub n_components: usize,
    pub method: Method,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOutcome {
    pub reports: Vec<CvReport>,
    pub failures: Vec<CellFailure>,
}

/// Runs every driver × feature set × N × method cell on up to `jobs` threads.
/// Output order is driver, feature set, N, then method, as listed in `cfg`.
pub fn sweep(drivers: &[DriverEvents], cfg: &SweepConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;

    let feature_keys: Vec<(usize, FeatureSet)> = (0..drivers.len())
        .flat_map(|d| cfg.feature_sets.iter().map(move |&fs| (d, fs)))
        .collect();
    let features: Vec<Result<Vec<EventFeatures>>> = pool.install(|| {
        feature_keys
            .par_iter()
            .map(|&(d, fs)| event_features(&drivers[d].events, fs, cfg.smooth_window))
            .collect()
    });

    let cells: Vec<(usize, usize)> = (0..feature_keys.len())
        .flat_map(|k| cfg.component_counts.iter().map(move |&n| (k, n)))
        .collect();
    let results: Vec<Vec<Result<CvReport>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(k, n)| {
                let (d, fs) = feature_keys[k];
                match &features[k] {
                    Ok(f) => run_cv_features(&drivers[d].driver_id, f, cfg, fs, n, &cfg.methods),
                    Err(e) => cfg.methods.iter().map(|_| Err(Error::invalid(e.to_string()))).collect(),
                }
            })
            .collect()
    });

    let mut outcome = SweepOutcome::default();
    for (&(k, n), per_method) in cells.iter().zip(results) {
        let (d, fs) = feature_keys[k];
        for (&method, r) in cfg.methods.iter().zip(per_method) {
            match r {
                Ok(report) => outcome.reports.push(report),
                Err(e) => outcome.failures.push(CellFailure {
                    driver_id: drivers[d].driver_id.clone(),
                    feature_set: fs,
                    n_components: n,
                    method,
                    reason: e.to_string(),
                }),
            }
        }
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellComparison {
    pub driver_id: String,
    pub feature_set: FeatureSet,
    pub n_components: usize,
    pub hmm_test_mae: f64,
    pub pdf_test_mae: f64,
    /// `(pdf − hmm) / pdf`; positive when GMM+HMM is more accurate.
    pub improvement: f64,
}

/// The (feature set, N) with the lowest test error averaged over drivers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestCell {
    pub method: Method,
    pub feature_set: FeatureSet,
    pub n_components: usize,
    pub mean_test_mae: f64,
    pub mean_train_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub cells: Vec<CellComparison>,
    pub mean_improvement: f64,
    pub median_improvement: f64,
    pub best_hmm: BestCell,
    pub best_pdf: BestCell,
    /// Relative improvement between the two best cells.
    pub best_cell_improvement: f64,
}

fn relative_improvement(hmm: f64, pdf: f64) -> Result<f64> {
    if hmm == pdf {
        return Ok(0.0);
    }
    if pdf == 0.0 {
        return Err(Error::invalid("GMM+PDF error is zero; relative improvement is undefined"));
    }
    Ok((pdf - hmm) / pdf)
}

fn best_cell(reports: &[&CvReport], method: Method) -> BestCell {
    let mut acc: BTreeMap<(FeatureSet, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.method == method) {
        let e = acc.entry((r.feature_set, r.n_components)).or_insert((0.0, 0.0, 0));
        e.0 += r.mean_test_mae;
        e.1 += r.mean_train_mae;
        e.2 += 1;
    }
    let mut best: Option<BestCell> = None;
    for ((fs, n), (test, train, count)) in acc {
        let cell = BestCell {
            method,
            feature_set: fs,
            n_components: n,
            mean_test_mae: test / count as f64,
            mean_train_mae: train / count as f64,
        };
        if best.as_ref().is_none_or(|b| cell.mean_test_mae < b.mean_test_mae) {
            best = Some(cell);
        }
    }
    best.expect("caller checked both methods are present")
}

/// Pairs GMM+HMM and GMM+PDF reports on identical cells and summarizes the
/// relative improvement of the former.
pub fn compare_methods(reports: &[CvReport]) -> Result<ComparisonSummary> {
    type Key = (String, FeatureSet, usize);
    let mut hmm: BTreeMap<Key, &CvReport> = BTreeMap::new();
    let mut pdf: BTreeMap<Key, &CvReport> = BTreeMap::new();
    for r in reports {
        let key = (r.driver_id.clone(), r.feature_set, r.n_components);
        let slot = match r.method {
            Method::GmmHmm => &mut hmm,
            Method::GmmPdf => &mut pdf,
        };
        if slot.insert(key.clone(), r).is_some() {
            return Err(Error::invalid(format!(
                "duplicate {} report for driver {} {} N={}",
                r.method, key.0, key.1, key.2
            )));
        }
    }
    if hmm.is_empty() {
        return Err(Error::invalid("no GMM+HMM reports to compare"));
    }
    if hmm.len() != pdf.len() || hmm.keys().any(|k| !pdf.contains_key(k)) {
        return Err(Error::invalid("GMM+HMM and GMM+PDF reports do not cover the same cells"));
    }
    let mut cells = Vec::with_capacity(hmm.len());
    for (key, h) in &hmm {
        let p = pdf[key];
        cells.push(CellComparison {
            driver_id: key.0.clone(),
            feature_set: key.1,
            n_components: key.2,
            hmm_test_mae: h.mean_test_mae,
            pdf_test_mae: p.mean_test_mae,
            improvement: relative_improvement(h.mean_test_mae, p.mean_test_mae)?,
        });
    }
    let mut imps: Vec<f64> = cells.iter().map(|c| c.improvement).collect();
    let mean_improvement = imps.iter().sum::<f64>() / imps.len() as f64;
    imps.sort_by(f64::total_cmp);
    let mid = imps.len() / 2;
    let median_improvement = if imps.len() % 2 == 1 { imps[mid] } else { 0.5 * (imps[mid - 1] + imps[mid]) };
    let all: Vec<&CvReport> = reports.iter().collect();
    let best_hmm = best_cell(&all, Method::GmmHmm);
    let best_pdf = best_cell(&all, Method::GmmPdf);
    let best_cell_improvement = relative_improvement(best_hmm.mean_test_mae, best_pdf.mean_test_mae)?;
    Ok(ComparisonSummary {
        cells,
        mean_improvement,
        median_improvement,
        best_hmm,
        best_pdf,
        best_cell_improvement,
    })
}

/// Spearman rank correlation, with tied values sharing their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("Spearman correlation needs two equal-length series of length ≥ 2"));
    }
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::invalid("Spearman correlation is undefined for a constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}
