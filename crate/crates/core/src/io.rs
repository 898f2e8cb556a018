//! File formats: trajectory and feature CSVs, model JSON, report CSV and the
//! summary JSON.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::evaluation::{CellFailure, ComparisonSummary, EventFeatures, SweepConfig};
use crate::model::{Channel, CvReport, FeatureSet, FittedModel, FoldResult, Method, ObservationVector, Trajectory, TrajectorySample};
use crate::synth::Corpus;

/// Pretty JSON with every float written to 17 significant digits.
struct ExactFloats<'a>(PrettyFormatter<'a>);

impl Formatter for ExactFloats<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            write!(w, "{value:.16e}")
        } else {
            w.write_all(b"null")
        }
    }

    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

/// Serializes `value` as pretty JSON with full-precision floats.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, ExactFloats(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json_string(value)?)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_model(path: &Path, model: &FittedModel) -> Result<()> {
    write_json(path, model)
}

pub fn read_model(path: &Path) -> Result<FittedModel> {
    read_json(path)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

// ---- trajectories ----

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for s in traj.samples() {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path, driver_id: &str, trajectory_id: &str) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let samples = r.deserialize::<TrajectorySample>().collect::<std::result::Result<Vec<_>, _>>()?;
    Trajectory::new(driver_id, trajectory_id, samples)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() && p.extension().is_some_and(|e| e == "csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads trajectories from a single CSV file or a corpus directory.
///
/// In a directory, `<dir>/<driver>/<trajectory>.csv` belongs to `<driver>`
/// and a CSV directly under `<dir>` is its own driver. A lone file takes its
/// driver id from its parent directory.
pub fn load_trajectories(input: &Path) -> Result<Vec<Trajectory>> {
    if input.is_file() {
        let driver = input
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| stem(input));
        return Ok(vec![read_trajectory_csv(input, &driver, &stem(input))?]);
    }
    if !input.is_dir() {
        return Err(Error::invalid(format!("{} does not exist", input.display())));
    }
    let mut out = Vec::new();
    for file in csv_files(input)? {
        let id = stem(&file);
        out.push(read_trajectory_csv(&file, &id, &id)?);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for dir in subdirs {
        let driver = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        for file in csv_files(&dir)? {
            out.push(read_trajectory_csv(&file, &driver, &stem(&file))?);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid(format!("no trajectory CSVs under {}", input.display())));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<dir>/<driver>/<trajectory>.csv` for every trajectory plus the
/// ground-truth manifest.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir)?;
    for t in &corpus.trajectories {
        let path = dir.join(t.driver_id()).join(format!("{}.csv", t.trajectory_id()));
        write_trajectory_csv(&path, t)?;
    }
    write_json(&dir.join(MANIFEST_FILE), &corpus.manifest)
}

// ---- features ----

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    event_id: String,
    t: f64,
    dx: Option<f64>,
    dv: Option<f64>,
    dvdot: Option<f64>,
    jerk: Option<f64>,
    v_h: Option<f64>,
    a: f64,
}

impl FeatureRow {
    fn slot(&mut self, c: Channel) -> &mut Option<f64> {
        match c {
            Channel::Gap => &mut self.dx,
            Channel::RelSpeed => &mut self.dv,
            Channel::RelAccel => &mut self.dvdot,
            Channel::Jerk => &mut self.jerk,
            Channel::HostSpeed => &mut self.v_h,
        }
    }

    /// The richest feature set whose columns are all filled.
    fn feature_set(&self) -> FeatureSet {
        let has = |v: &Option<f64>| v.is_some();
        if has(&self.jerk) {
            FeatureSet::Z4
        } else if has(&self.dvdot) {
            FeatureSet::Z3
        } else if has(&self.v_h) {
            FeatureSet::Z2
        } else {
            FeatureSet::Z1
        }
    }
}

pub fn write_features_csv(path: &Path, fs_: FeatureSet, events: &[EventFeatures]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for e in events {
        for o in &e.observations {
            let mut row = FeatureRow {
                event_id: e.event_id.clone(),
                t: o.t,
                dx: None,
                dv: None,
                dvdot: None,
                jerk: None,
                v_h: None,
                a: o.a,
            };
            for (&c, &v) in fs_.channels().iter().zip(&o.z) {
                *row.slot(c) = Some(v);
            }
            w.serialize(row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature dump grouped by event, in order of first appearance.
///
/// With `fs_ = None` the feature set is the richest one whose columns are
/// filled in the first row.
pub fn read_features_csv(path: &Path, fs_: Option<FeatureSet>) -> Result<(FeatureSet, Vec<EventFeatures>)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut chosen = fs_;
    let mut events: Vec<EventFeatures> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    for (line, row) in r.deserialize::<FeatureRow>().enumerate() {
        let mut row = row?;
        let fs_ = *chosen.get_or_insert_with(|| row.feature_set());
        let mut z = Vec::with_capacity(fs_.input_dim());
        for &c in fs_.channels() {
            match *row.slot(c) {
                Some(v) => z.push(v),
                None => {
                    return Err(Error::invalid(format!(
                        "{} row {}: feature set {fs_} needs a {c:?} value",
                        path.display(),
                        line + 1
                    )))
                }
            }
        }
        let slot = *index.entry(row.event_id.clone()).or_insert_with(|| {
            events.push(EventFeatures { event_id: row.event_id.clone(), observations: Vec::new() });
            events.len() - 1
        });
        events[slot].observations.push(ObservationVector { z, a: row.a, t: row.t, event_id: row.event_id });
    }
    let fs_ = chosen.ok_or_else(|| Error::invalid(format!("{} holds no observations", path.display())))?;
    Ok((fs_, events))
}

// ---- reports ----

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow {
    driver: String,
    feature_set: FeatureSet,
    n_components: usize,
    method: Method,
    fold: usize,
    repeat: usize,
    seed: u64,
    train_mae: f64,
    test_mae: f64,
}

pub fn write_report_csv(path: &Path, reports: &[CvReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in reports {
        for f in &r.per_fold {
            w.serialize(ReportRow {
                driver: r.driver_id.clone(),
                feature_set: r.feature_set,
                n_components: r.n_components,
                method: r.method,
                fold: f.fold_index,
                repeat: f.repeat_index,
                seed: f.seed,
                train_mae: f.train_mae,
                test_mae: f.test_mae,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds one report per (driver, feature set, N, method), in file order.
pub fn read_report_csv(path: &Path) -> Result<Vec<CvReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut order: Vec<(String, FeatureSet, usize, Method)> = Vec::new();
    let mut folds: BTreeMap<(String, FeatureSet, usize, Method), Vec<FoldResult>> = BTreeMap::new();
    for row in r.deserialize::<ReportRow>() {
        let row = row?;
        let key = (row.driver, row.feature_set, row.n_components, row.method);
        let entry = folds.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            Vec::new()
        });
        entry.push(FoldResult {
            fold_index: row.fold,
            repeat_index: row.repeat,
            seed: row.seed,
            train_mae: row.train_mae,
            test_mae: row.test_mae,
        });
    }
    order
        .into_iter()
        .map(|key| {
            let f = folds.remove(&key).expect("key recorded on insert");
            CvReport::from_folds(key.0, key.1, key.2, key.3, f, Vec::new())
        })
        .collect()
}

/// Per-cell means as written to the summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub driver_id: String,
    pub feature_set: FeatureSet,
    pub n_components: usize,
    pub method: Method,
    pub folds: usize,
    pub mean_train_mae: f64,
    pub mean_test_mae: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl From<&CvReport> for CellSummary {
    fn from(r: &CvReport) -> Self {
        CellSummary {
            driver_id: r.driver_id.clone(),
            feature_set: r.feature_set,
            n_components: r.n_components,
            method: r.method,
            folds: r.per_fold.len(),
            mean_train_mae: r.mean_train_mae,
            mean_test_mae: r.mean_test_mae,
            diagnostics: r.diagnostics.clone(),
        }
    }
}

/// The JSON written next to a report CSV. `config` echoes the effective
/// settings, defaults included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub config: SweepConfig,
    pub cells: Vec<CellSummary>,
    #[serde(default)]
    pub failures: Vec<CellFailure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comparison: Option<ComparisonSummary>,
}
