use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use carfollow::evaluation::{self, event_features, group_by_driver, EventFeatures, Predictor, SweepConfig};
use carfollow::gmm::{fit_gmm, EmConfig};
use carfollow::hmm::{estimate_transitions, HmmRegressor};
use carfollow::io::{self, ReportSummary};
use carfollow::pdf::PdfRegressor;
use carfollow::preprocess::{ExtractionCriteria, DEFAULT_SMOOTH_WINDOW};
use carfollow::synth::{generate_corpus, random_driver_params, random_lead_profiles};
use carfollow::{AccelBounds, Error, FeatureSet, FittedModel, Method, ObservationVector, Result};

#[derive(Parser)]
#[command(name = "carfollow", version, about = "Personalized car-following models from mixture densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic multi-driver corpus.
    Generate(GenerateArgs),
    /// Cut trajectories into car-following events and dump their features.
    Extract(ExtractArgs),
    /// Fit a model on a feature dump.
    Fit(FitArgs),
    /// Predict accelerations for a feature dump with a fitted model.
    Predict(PredictArgs),
    /// Cross-validate one (feature set, N, method) cell per driver.
    Evaluate(EvaluateArgs),
    /// Cross-validate the full feature set × N × method grid.
    Sweep(SweepArgs),
    /// Compare the two methods in a report CSV.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 3)]
    drivers: usize,
    /// Episodes (trajectories) per driver.
    #[arg(long, default_value_t = 20)]
    events: usize,
    /// Episode length (s).
    #[arg(long, default_value_t = 120.0)]
    duration: f64,
    /// Acceleration noise std (m/s²).
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    /// Trajectory CSV or corpus directory.
    #[arg(long)]
    input: PathBuf,
    /// Feature CSV to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "z4")]
    feature_set: FeatureSet,
    #[arg(long, default_value_t = DEFAULT_SMOOTH_WINDOW)]
    window: usize,
}

#[derive(Args)]
struct FitArgs {
    /// Feature CSV.
    #[arg(long)]
    input: PathBuf,
    /// Model JSON to write.
    #[arg(long)]
    output: PathBuf,
    /// Defaults to the richest set present in the input.
    #[arg(long)]
    feature_set: Option<FeatureSet>,
    #[arg(long)]
    components: usize,
    #[arg(long)]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    input: PathBuf,
    /// Prediction CSV to write.
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = -8.0, allow_negative_numbers = true)]
    a_min: f64,
    #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
    a_max: f64,
}

/// Settings shared by `evaluate` and `sweep`; flags override the config file.
#[derive(Args)]
struct CvArgs {
    /// Trajectory CSV or corpus directory.
    #[arg(long)]
    input: PathBuf,
    /// Directory for report.csv and summary.json.
    #[arg(long)]
    output: PathBuf,
    /// JSON sweep configuration; absent fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    m_groups: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    a_min: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    a_max: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    cv: CvArgs,
    #[arg(long)]
    feature_set: FeatureSet,
    #[arg(long)]
    components: usize,
    #[arg(long)]
    method: Method,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cv: CvArgs,
}

#[derive(Args)]
struct CompareArgs {
    /// Report CSV.
    #[arg(long)]
    input: PathBuf,
    /// Summary JSON to write.
    #[arg(long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_fit_failure() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Extract(a) => extract(a),
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Compare(a) => compare(a),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let params = random_driver_params(a.drivers, a.noise, a.seed);
    let leads = random_lead_profiles(a.drivers * a.events, a.duration, a.seed)?;
    let corpus = generate_corpus(a.drivers, a.events, &leads, &params, a.seed)?;
    io::write_corpus(&a.output, &corpus)
}

fn extract(a: ExtractArgs) -> Result<()> {
    let trajectories = io::load_trajectories(&a.input)?;
    let mut features = Vec::new();
    for driver in group_by_driver(&trajectories, &ExtractionCriteria::default()) {
        features.extend(event_features(&driver.events, a.feature_set, a.window)?);
    }
    if features.is_empty() {
        return Err(Error::invalid("no car-following events found"));
    }
    io::write_features_csv(&a.output, a.feature_set, &features)
}

fn fit(a: FitArgs) -> Result<()> {
    let (fs, events) = io::read_features_csv(&a.input, a.feature_set)?;
    let points: Vec<Vec<f64>> = events.iter().flat_map(|e| &e.observations).map(ObservationVector::joint).collect();
    let em = EmConfig::default().with_seed(a.seed);
    let gmm = fit_gmm(&points, a.components, &em)?.params.with_feature_set(fs)?;
    let model = match a.method {
        Method::GmmHmm => {
            let seqs: Vec<Vec<ObservationVector>> = events.into_iter().map(|e| e.observations).collect();
            FittedModel::new_hmm(estimate_transitions(&seqs, &gmm)?)?
        }
        Method::GmmPdf => FittedModel::new_pdf(gmm)?,
    };
    io::write_model(&a.output, &model)
}

/// Rows of `event_id,t,a,a_pred`.
fn write_predictions(path: &Path, events: &[EventFeatures], preds: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["event_id", "t", "a", "a_pred"])?;
    for (e, p) in events.iter().zip(preds) {
        for (o, v) in e.observations.iter().zip(p) {
            w.serialize((&o.event_id, o.t, o.a, v))?;
        }
    }
    w.flush()?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let model = io::read_model(&a.model)?;
    let (_, events) = io::read_features_csv(&a.input, Some(model.feature_set()))?;
    let predictor = match model {
        FittedModel::GmmHmm(p) => Predictor::Hmm(HmmRegressor::new(p)?),
        FittedModel::GmmPdf(g) => Predictor::Pdf(PdfRegressor::new(&g, AccelBounds::new(a.a_min, a.a_max)?)?),
    };
    let preds = events
        .iter()
        .map(|e| predictor.predict_sequence(&e.observations))
        .collect::<Result<Vec<_>>>()?;
    write_predictions(&a.output, &events, &preds)
}

fn load_config(cv: &CvArgs) -> Result<SweepConfig> {
    let mut cfg: SweepConfig = match &cv.config {
        Some(p) => io::read_json(p)?,
        None => SweepConfig::default(),
    };
    if let Some(v) = cv.m_groups {
        cfg.m_groups = v;
    }
    if let Some(v) = cv.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = cv.seed {
        cfg.base_seed = v;
    }
    if let Some(v) = cv.window {
        cfg.smooth_window = v;
    }
    if cv.a_min.is_some() || cv.a_max.is_some() {
        cfg.bounds = AccelBounds::new(cv.a_min.unwrap_or(cfg.bounds.a_min()), cv.a_max.unwrap_or(cfg.bounds.a_max()))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_and_write(cv: &CvArgs, cfg: SweepConfig) -> Result<()> {
    let trajectories = io::load_trajectories(&cv.input)?;
    let drivers = group_by_driver(&trajectories, &cfg.extraction);
    let outcome = evaluation::sweep(&drivers, &cfg, cv.jobs)?;
    for f in &outcome.failures {
        log::warn!("{} {} N={} {}: {}", f.driver_id, f.feature_set, f.n_components, f.method, f.reason);
    }
    if outcome.reports.is_empty() {
        let reasons: Vec<&str> = outcome.failures.iter().map(|f| f.reason.as_str()).collect();
        return Err(Error::invalid(format!("no cell produced a report: {}", reasons.join("; "))));
    }
    let comparison = if cfg.methods.len() == 2 {
        evaluation::compare_methods(&outcome.reports).ok()
    } else {
        None
    };
    std::fs::create_dir_all(&cv.output)?;
    io::write_report_csv(&cv.output.join("report.csv"), &outcome.reports)?;
    let summary = ReportSummary {
        config: cfg,
        cells: outcome.reports.iter().map(Into::into).collect(),
        failures: outcome.failures,
        comparison,
    };
    io::write_json(&cv.output.join("summary.json"), &summary)
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let mut cfg = load_config(&a.cv)?;
    cfg.feature_sets = vec![a.feature_set];
    cfg.component_counts = vec![a.components];
    cfg.methods = vec![a.method];
    cfg.validate()?;
    run_and_write(&a.cv, cfg)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.cv)?;
    run_and_write(&a.cv, cfg)
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = io::read_report_csv(&a.input)?;
    let summary = evaluation::compare_methods(&reports)?;
    io::write_json(&a.output, &summary)
}
