//! The `cdrca` command line. One subcommand per pipeline stage, so every
//! intermediate artifact is an inspectable file.
//!
//! Options come from flags and, optionally, a TOML file passed with
//! `--config`. Top-level keys of the file apply to every subcommand and a
//! table named after the subcommand overrides them; flags given on the
//! command line win over both. Every run writes a [`RunManifest`] next to
//! its primary output before heavy work starts and rewrites it on success.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::{shapley_attributions, AttributionResult, zscore_baseline, AttributionConfig, OutlierScorer, ShapleyMode};
use crate::dataset::{load_csv, target_row, to_lagged, Player, TimeSeriesDataset, VariableRole};
use crate::discovery::{discover_graph, DiscoveryConfig};
use crate::error::{Error, Result};
use crate::graph::{CausalGraph, EdgeInterventionSpec};
use crate::harness::{
    ate_table_csv, run_ate_table, run_graph_intervention, run_illustrative, run_sensitivity_grid, shapley_mode_for,
    FitSource, GridSpec, IllustrativeSpec, InterventionStudySpec, Scale,
};
use crate::rng::derive_seed;
use crate::scm::{estimate_ate, fit_scm_with, AteMethod, AteSource, NoiseKind, Scm};
use crate::synthgen::{
    generate, prediction_errors, train_stub_predictor_with, true_scm, InjectionSpec, ModelKind, PredictorConfig,
    ScenarioSpec, StubPredictor,
};

#[derive(Debug, Parser)]
#[command(name = "cdrca", version, about = "Root-cause analysis of prediction-error outliers in time series")]
struct Cli {
    /// TOML file with default options.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Where to write the run manifest (default: next to the output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a benchmark model and write it as CSV plus a JSON sidecar.
    Generate(GenerateArgs),
    /// Simulate a series with an outlier shock, optionally scored by a saved predictor.
    Inject(InjectArgs),
    /// Learn a lagged causal graph from a CSV.
    Discover(DiscoverArgs),
    /// Fit a linear additive-noise model on a graph.
    Fit(FitArgs),
    /// Attribute the outlierness of one sample to every variable.
    Attribute(AttributeArgs),
    /// z-score baseline attribution of one sample.
    Baseline(BaselineArgs),
    /// Average total effects under shift interventions.
    Ate(AteArgs),
    /// Run one of the benchmark studies.
    Experiment(ExperimentArgs),
    /// Report acyclicity and time-order violations of a graph.
    ValidateGraph(ValidateGraphArgs),
    /// Add random admissible edges to a graph.
    PerturbGraph(PerturbGraphArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Inject(_) => "inject",
            Command::Discover(_) => "discover",
            Command::Fit(_) => "fit",
            Command::Attribute(_) => "attribute",
            Command::Baseline(_) => "baseline",
            Command::Ate(_) => "ate",
            Command::Experiment(_) => "experiment",
            Command::ValidateGraph(_) => "validate-graph",
            Command::PerturbGraph(_) => "perturb-graph",
        }
    }
}

/// Column roles. Either list them with flags or point at a JSON file holding
/// a name → role map (the sidecar written by `generate` qualifies).
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
struct RoleArgs {
    /// JSON file with a `roles` object (or a bare name → role object).
    #[arg(long)]
    roles: Option<PathBuf>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Prediction target column.
    #[arg(long)]
    target: Option<String>,
    /// Prediction error column.
    #[arg(long)]
    error: Option<String>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct GenerateArgs {
    /// illustrative, f1, f2, f1a..f2c or sim2.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Coupling strength for the test variants.
    #[arg(long)]
    beta: Option<f64>,
    /// Outlier shock as VAR:Z@T.
    #[arg(long)]
    inject: Option<String>,
    /// Train the stub predictor on the first half and emit the second half
    /// with its prediction errors as column `r`.
    #[arg(long)]
    #[serde(default)]
    with_errors: bool,
    /// Predictor horizon.
    #[arg(long)]
    horizon: Option<usize>,
    /// Predictor lags per input.
    #[arg(long)]
    lags: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct InjectArgs {
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Outlier shock as VAR:Z@T.
    #[arg(long)]
    inject: Option<String>,
    /// Predictor JSON written by `generate --with-errors`; adds column `r`.
    #[arg(long)]
    predictor: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct DiscoverArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    roles: RoleArgs,
    #[arg(long)]
    tau_max: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Largest conditioning set tried.
    #[arg(long)]
    max_cond: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum NoiseArg {
    Empirical,
    Gaussian,
    Uniform,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct FitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    roles: RoleArgs,
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Noise model (default: empirical residual rows).
    #[arg(long, value_enum)]
    noise: Option<NoiseArg>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeArg {
    /// Exact below a size limit, permutation sampling above it.
    Auto,
    Exact,
    Permutations,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct AttributeArgs {
    #[arg(long)]
    scm: Option<PathBuf>,
    /// CSV holding the sample to explain.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    roles: RoleArgs,
    /// Time label of the sample (row index when the CSV has no `t` column).
    #[arg(long)]
    time: Option<String>,
    /// CSV whose errors form the outlier-score reference (same roles).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Model draws used as reference when no reference CSV is given.
    #[arg(long)]
    reference_samples: Option<usize>,
    /// Variable to explain (default: the prediction error).
    #[arg(long)]
    explain: Option<String>,
    /// Monte-Carlo draws per coalition.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Permutations drawn in permutation mode.
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct BaselineArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    roles: RoleArgs,
    #[arg(long)]
    time: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum AteMethodArg {
    Path,
    Sampling,
    Both,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct AteArgs {
    /// Fitted model; alternatively use --model for a known benchmark model.
    #[arg(long)]
    scm: Option<PathBuf>,
    /// f1 or f2. Without --source this prints the X1..X3 → X4 table.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    tau_max: Option<usize>,
    /// VAR (all lags shifted) or VAR@LAG.
    #[arg(long)]
    source: Option<String>,
    /// VAR@LAG, lag 0 when omitted.
    #[arg(long = "effect-on")]
    effect_on: Option<String>,
    #[arg(long, value_enum)]
    method: Option<AteMethodArg>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `.csv` for a table, anything else for JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Scenario {
    Illustrative,
    GridF1a,
    GridF1b,
    GridF1c,
    GridF2a,
    GridF2b,
    GridF2c,
    Table1,
}

impl Scenario {
    fn tag(self) -> &'static str {
        match self {
            Scenario::Illustrative => "illustrative",
            Scenario::GridF1a => "grid-f1a",
            Scenario::GridF1b => "grid-f1b",
            Scenario::GridF1c => "grid-f1c",
            Scenario::GridF2a => "grid-f2a",
            Scenario::GridF2b => "grid-f2b",
            Scenario::GridF2c => "grid-f2c",
            Scenario::Table1 => "table1",
        }
    }

    fn family(self) -> Option<ModelKind> {
        Some(match self {
            Scenario::GridF1a => ModelKind::F1TestA,
            Scenario::GridF1b => ModelKind::F1TestB,
            Scenario::GridF1c => ModelKind::F1TestC,
            Scenario::GridF2a => ModelKind::F2TestA,
            Scenario::GridF2b => ModelKind::F2TestB,
            Scenario::GridF2c => ModelKind::F2TestC,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FitOnArg {
    Train,
    Test,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct ExperimentArgs {
    #[arg(long, value_enum)]
    scenario: Option<Scenario>,
    /// Full published settings.
    #[arg(long, conflicts_with = "desk_scale")]
    #[serde(default)]
    paper_scale: bool,
    /// Reduced settings that finish in minutes (the default).
    #[arg(long)]
    #[serde(default)]
    desk_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Repeats per cell (trials for the illustrative study).
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    /// Training series length.
    #[arg(long)]
    length: Option<usize>,
    /// Grid studies: fit the model on the train or the test dynamics.
    #[arg(long, value_enum)]
    fit_on: Option<FitOnArg>,
    /// Grid studies: learn the graph instead of using the true one.
    #[arg(long)]
    #[serde(default)]
    discover: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct ValidateGraphArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Optional JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize, Deserialize)]
struct PerturbGraphArgs {
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Number of edges to add.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Record of one invocation, enough to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Effective options after merging the config file and flags.
    pub config: Value,
    pub seed: Option<u64>,
    pub version: String,
    pub jobs: usize,
    pub started_unix: f64,
    pub finished_unix: Option<f64>,
    pub wall_seconds: Option<f64>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

/// Why a run stopped. Usage problems exit with 2, data problems with 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Data(other),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Parse `argv` (including the program name), run one subcommand and return
/// the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Data(err)) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn run(cli: Cli) -> CliResult<i32> {
    let file_config = match &cli.config {
        Some(path) => Some(read_config(path)?),
        None => None,
    };
    let name = cli.command.name();
    let section = |key: &str| -> Option<Value> {
        let cfg = file_config.as_ref()?;
        let mut merged = serde_json::Map::new();
        for (k, v) in cfg.as_object()? {
            if !v.is_object() {
                merged.insert(k.replace('-', "_"), v.clone());
            }
        }
        if let Some(Value::Object(sub)) = cfg.get(key) {
            for (k, v) in sub {
                merged.insert(k.replace('-', "_"), v.clone());
            }
        }
        Some(Value::Object(merged))
    };
    let defaults = section(name);
    let jobs = match cli.jobs {
        Some(j) => Some(j),
        None => defaults.as_ref().and_then(|d| d.get("jobs")).and_then(Value::as_u64).map(|j| j as usize),
    };
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build().map_err(Error::from)?;
    let jobs = pool.current_num_threads();
    let manifest_override = cli.manifest.clone();
    pool.install(|| {
        let d = defaults.as_ref();
        let mut ctx = Context { jobs, manifest_path: manifest_override, manifest: None, started: Instant::now() };
        match cli.command {
            Command::Generate(a) => cmd_generate(merge(a, d)?, &mut ctx),
            Command::Inject(a) => cmd_inject(merge(a, d)?, &mut ctx),
            Command::Discover(a) => cmd_discover(merge(a, d)?, &mut ctx),
            Command::Fit(a) => cmd_fit(merge(a, d)?, &mut ctx),
            Command::Attribute(a) => cmd_attribute(merge(a, d)?, &mut ctx),
            Command::Baseline(a) => cmd_baseline(merge(a, d)?, &mut ctx),
            Command::Ate(a) => cmd_ate(merge(a, d)?, &mut ctx),
            Command::Experiment(a) => cmd_experiment(merge(a, d)?, &mut ctx),
            Command::ValidateGraph(a) => cmd_validate_graph(merge(a, d)?, &mut ctx),
            Command::PerturbGraph(a) => cmd_perturb_graph(merge(a, d)?, &mut ctx),
        }
    })
}

fn read_config(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
    serde_json::to_value(table).map_err(|e| Failure::Data(e.into()))
}

/// Fill options left unset on the command line from the config file.
fn merge<T: Serialize + DeserializeOwned>(args: T, defaults: Option<&Value>) -> CliResult<T> {
    let Some(Value::Object(defaults)) = defaults else {
        return Ok(args);
    };
    let mut value = serde_json::to_value(&args).map_err(|e| Failure::Data(e.into()))?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    for (k, v) in defaults {
        match obj.get(k) {
            Some(Value::Null) | Some(Value::Bool(false)) => {
                obj.insert(k.clone(), v.clone());
            }
            _ => {}
        }
    }
    serde_json::from_value(value).map_err(|e| usage(format!("config file: {e}")))
}

struct Context {
    jobs: usize,
    manifest_path: Option<PathBuf>,
    manifest: Option<RunManifest>,
    started: Instant,
}

impl Context {
    /// Writes the manifest with status `running`.
    fn begin<A: Serialize>(&mut self, subcommand: &str, args: &A, seed: Option<u64>, default_path: PathBuf) -> CliResult<()> {
        if self.manifest_path.is_none() {
            self.manifest_path = Some(default_path);
        }
        let m = RunManifest {
            subcommand: subcommand.to_string(),
            config: serde_json::to_value(args).map_err(|e| Failure::Data(e.into()))?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            jobs: self.jobs,
            started_unix: unix_now(),
            finished_unix: None,
            wall_seconds: None,
            status: "running".into(),
            outputs: Vec::new(),
        };
        self.manifest = Some(m);
        self.flush()
    }

    fn finish(&mut self, outputs: Vec<PathBuf>, status: &str) -> CliResult<()> {
        if let Some(m) = self.manifest.as_mut() {
            m.outputs = outputs;
            m.finished_unix = Some(unix_now());
            m.wall_seconds = Some(self.started.elapsed().as_secs_f64());
            m.status = status.to_string();
        }
        self.flush()
    }

    fn flush(&self) -> CliResult<()> {
        if let (Some(path), Some(m)) = (&self.manifest_path, &self.manifest) {
            let text = serde_json::to_string_pretty(m).map_err(|e| Failure::Data(e.into()))?;
            write_text(path, &(text + "\n"))?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Data(Error::io(path, e)))
}

/// `dir/stem.csv` → `dir/stem.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn manifest_for(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

fn to_json_pretty<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v).map_err(|e| Failure::Data(e.into()))? + "\n")
}

fn parse_model(s: &str) -> CliResult<ModelKind> {
    s.parse::<ModelKind>().map_err(Failure::from)
}

fn resolve_roles(r: &RoleArgs) -> CliResult<BTreeMap<String, VariableRole>> {
    if r.covariates.is_some() || r.target.is_some() || r.error.is_some() {
        let covariates = r.covariates.clone().ok_or_else(|| usage("--covariates is required when roles are given as flags"))?;
        let target = r.target.clone().ok_or_else(|| usage("--target is required when roles are given as flags"))?;
        let mut map: BTreeMap<String, VariableRole> = covariates.into_iter().map(|c| (c, VariableRole::Covariate)).collect();
        map.insert(target, VariableRole::Target);
        if let Some(e) = &r.error {
            map.insert(e.clone(), VariableRole::PredictionError);
        }
        return Ok(map);
    }
    let path = r
        .roles
        .as_ref()
        .ok_or_else(|| usage("column roles are required: pass --covariates/--target[/--error] or --roles FILE"))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(Error::from)?;
    let roles = value.get("roles").cloned().unwrap_or(value);
    Ok(serde_json::from_value(roles).map_err(Error::from)?)
}

fn load_with_roles(data: &Path, roles: &RoleArgs) -> CliResult<TimeSeriesDataset> {
    Ok(load_csv(data, &resolve_roles(roles)?)?)
}

/// Row index of the sample labelled `time`.
fn resolve_time(ds: &TimeSeriesDataset, time: &str) -> CliResult<usize> {
    match ds.time_labels() {
        Some(labels) => labels
            .iter()
            .position(|l| l == time)
            .ok_or_else(|| Failure::Data(Error::Dataset(format!("no row labelled {time:?} in the time column")))),
        None => time.parse().map_err(|_| usage(format!("--time {time:?} is not a row index and the CSV has no t column"))),
    }
}

fn parse_player(s: &str) -> CliResult<Player> {
    match s.split_once('@') {
        Some((name, lag)) => Ok(Player::new(name, lag.parse().map_err(|_| usage(format!("bad lag in {s:?}")))?)),
        None => Ok(Player::new(s, 0)),
    }
}

#[derive(Serialize)]
struct DatasetSidecar<'a> {
    roles: BTreeMap<String, VariableRole>,
    scenario: &'a ScenarioSpec,
    predictor: Option<PredictorConfig>,
    /// Leading rows lost to the predictor warm-up.
    dropped_rows: usize,
    rows: usize,
}

fn scenario_from(model: &str, length: Option<usize>, seed: Option<u64>, beta: Option<f64>, inject: Option<&str>) -> CliResult<ScenarioSpec> {
    let model = parse_model(model)?;
    let seed = required(seed, "seed")?;
    let length = required(length, "length")?;
    let mut spec = ScenarioSpec::new(model, length, seed);
    spec.beta = beta;
    if let Some(inj) = inject {
        spec.injection = Some(inj.parse::<InjectionSpec>()?);
    }
    spec.validate()?;
    Ok(spec)
}

fn write_dataset(ds: &TimeSeriesDataset, out: &Path, sidecar: &DatasetSidecar) -> CliResult<PathBuf> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ds.write_csv(out)?;
    let side = sibling(out, "sidecar.json");
    write_text(&side, &to_json_pretty(sidecar)?)?;
    Ok(side)
}

fn cmd_generate(a: GenerateArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let spec = scenario_from(&required(a.model.clone(), "model")?, a.length, a.seed, a.beta, a.inject.as_deref())?;
    ctx.begin("generate", &a, a.seed, manifest_for(&out))?;
    let series = generate(&spec)?;
    let mut outputs = vec![out.clone()];
    let (ds, predictor, dropped) = if a.with_errors {
        let cfg = PredictorConfig { horizon: a.horizon.unwrap_or(1), lags: a.lags.unwrap_or(1) };
        let pred = train_stub_predictor_with(&series, &cfg)?;
        let half = spec.length / 2;
        let labels = (half..spec.length).map(|t| t.to_string()).collect();
        let eval = series.slice_rows(half, spec.length)?.with_time_labels(labels)?;
        let res = prediction_errors(&pred, &eval)?;
        let pred_path = sibling(&out, "predictor.json");
        write_text(&pred_path, &(pred.to_json()? + "\n"))?;
        outputs.push(pred_path);
        (res.dataset, Some(cfg), half + res.dropped)
    } else {
        (series, None, 0)
    };
    let sidecar = DatasetSidecar { roles: ds.role_map(), scenario: &spec, predictor, dropped_rows: dropped, rows: ds.n_times() };
    outputs.push(write_dataset(&ds, &out, &sidecar)?);
    ctx.finish(outputs, "ok")?;
    Ok(0)
}

fn cmd_inject(a: InjectArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let inject = required(a.inject.clone(), "inject")?;
    let spec = scenario_from(&required(a.model.clone(), "model")?, a.length, a.seed, a.beta, Some(&inject))?;
    ctx.begin("inject", &a, a.seed, manifest_for(&out))?;
    let series = generate(&spec)?;
    let (ds, predictor, dropped) = match &a.predictor {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let pred = StubPredictor::from_json(&text)?;
            let res = prediction_errors(&pred, &series)?;
            (res.dataset, Some(pred.config), res.dropped)
        }
        None => {
            let labels = (0..series.n_times()).map(|t| t.to_string()).collect();
            (series.with_time_labels(labels)?, None, 0)
        }
    };
    let sidecar = DatasetSidecar { roles: ds.role_map(), scenario: &spec, predictor, dropped_rows: dropped, rows: ds.n_times() };
    let side = write_dataset(&ds, &out, &sidecar)?;
    ctx.finish(vec![out, side], "ok")?;
    Ok(0)
}

fn cmd_discover(a: DiscoverArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let data = required(a.data.clone(), "data")?;
    let cfg = DiscoveryConfig {
        alpha: a.alpha.unwrap_or(DiscoveryConfig::default().alpha),
        max_cond_set: a.max_cond.unwrap_or(DiscoveryConfig::default().max_cond_set),
        ..Default::default()
    };
    cfg.validate()?;
    let ds = load_with_roles(&data, &a.roles)?;
    ctx.begin("discover", &a, None, manifest_for(&out))?;
    let lds = to_lagged(&ds, a.tau_max.unwrap_or(1))?;
    let report = discover_graph(&lds, &cfg)?;
    report.graph.write_json(&out)?;
    let side = sibling(&out, "discovery.json");
    write_text(&side, &(report.sidecar_json()? + "\n"))?;
    eprintln!(
        "discovered {} edges over {} players ({} tests, {} ambiguous orientations)",
        report.graph.n_edges(),
        report.graph.n_players(),
        report.tests_run,
        report.ambiguous.len()
    );
    ctx.finish(vec![out, side], "ok")?;
    Ok(0)
}

fn cmd_fit(a: FitArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let data = required(a.data.clone(), "data")?;
    let graph_path = required(a.graph.clone(), "graph")?;
    let kind = match a.noise.unwrap_or(NoiseArg::Empirical) {
        NoiseArg::Empirical => NoiseKind::EmpiricalRows,
        NoiseArg::Gaussian => NoiseKind::Gaussian,
        NoiseArg::Uniform => NoiseKind::Uniform,
    };
    let ds = load_with_roles(&data, &a.roles)?;
    let graph = CausalGraph::read_json(&graph_path)?;
    ctx.begin("fit", &a, None, manifest_for(&out))?;
    let lds = to_lagged(&ds, graph.tau_max())?;
    let scm = fit_scm_with(&lds, &graph, kind)?;
    scm.write_json(&out)?;
    let mut outputs = vec![out.clone()];
    if kind == NoiseKind::EmpiricalRows {
        outputs.push(crate::scm::noise_csv_path(&out));
    }
    ctx.finish(outputs, "ok")?;
    Ok(0)
}

fn cmd_attribute(a: AttributeArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let seed = required(a.seed, "seed")?;
    let time = required(a.time.clone(), "time")?;
    let scm = Scm::read_json(required(a.scm.clone(), "scm")?)?;
    let ds = load_with_roles(&required(a.data.clone(), "data")?, &a.roles)?;
    let explain = match &a.explain {
        Some(v) => v.clone(),
        None => {
            let e = ds.error_index().map_err(|e| {
                let detail = match e {
                    Error::Roles(msg) => msg,
                    other => other.to_string(),
                };
                Failure::Data(Error::Roles(format!(
                    "{detail}; attribution explains the prediction error by default, so tag an error column with --error or choose a variable with --explain"
                )))
            })?;
            ds.names()[e].clone()
        }
    };
    let tau = scm.graph().tau_max();
    let target = scm
        .graph()
        .find(&explain, 0)
        .ok_or_else(|| Failure::Data(Error::Dataset(format!("the model has no player {explain}@0"))))?;
    ctx.begin("attribute", &a, Some(seed), manifest_for(&out))?;

    let lds = to_lagged(&ds, tau)?;
    if lds.players() != scm.graph().players() {
        return Err(Failure::Data(Error::Dataset("the data columns do not match the model's players".into())));
    }
    let row = resolve_time(&ds, &time)?;
    let sample = target_row(&lds, row)?;
    let scorer = match &a.reference {
        Some(path) => {
            let reference = load_with_roles(path, &a.roles)?;
            let rl = to_lagged(&reference, tau)?;
            let p = rl.find_player(&explain, 0).ok_or_else(|| Failure::Data(Error::Dataset(format!("reference has no column {explain}"))))?;
            OutlierScorer::from_reference(&rl.column(p))?
        }
        None => OutlierScorer::from_scm(&scm, target, a.reference_samples.unwrap_or(10_000), derive_seed(seed, &[0x5ef]))?,
    };
    let relevant = scm.graph().ancestors(target).len();
    let mode = match a.mode.unwrap_or(ModeArg::Auto) {
        ModeArg::Auto => shapley_mode_for(relevant),
        ModeArg::Exact => ShapleyMode::Exact,
        ModeArg::Permutations => ShapleyMode::Permutations(a.permutations.unwrap_or(1000)),
    };
    let cfg = AttributionConfig { samples: a.samples.unwrap_or(10_000), mode, seed };
    let res = shapley_attributions(&scm, &scorer, &sample, target, &cfg)?;
    write_text(&out, &labelled_report(&res, &time)?)?;
    print_ranking(&res.variables, res.normalized.as_deref(), Some(res.outlier_score));
    ctx.finish(vec![out], "ok")?;
    Ok(0)
}

/// The attribution report plus the time label the user asked for, since the
/// report itself counts rows.
fn labelled_report(res: &AttributionResult, time: &str) -> CliResult<String> {
    let mut v: Value = serde_json::from_str(&res.to_report_json()?).map_err(Error::from)?;
    v.as_object_mut().expect("report is an object").insert("time_label".into(), json!(time));
    to_json_pretty(&v)
}

fn print_ranking(vars: &[String], normalized: Option<&[f64]>, score: Option<f64>) {
    if let Some(score) = score {
        eprintln!("outlier score {score:.4}");
    }
    let Some(norm) = normalized else {
        eprintln!("all attributions are zero");
        return;
    };
    let mut order: Vec<usize> = (0..vars.len()).collect();
    order.sort_by(|&i, &j| norm[j].total_cmp(&norm[i]));
    for i in order {
        eprintln!("  {:<12} {:>8.4}", vars[i], norm[i]);
    }
}

fn cmd_baseline(a: BaselineArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let time = required(a.time.clone(), "time")?;
    let ds = load_with_roles(&required(a.data.clone(), "data")?, &a.roles)?;
    ctx.begin("baseline", &a, None, manifest_for(&out))?;
    let row = resolve_time(&ds, &time)?;
    let res = zscore_baseline(&to_lagged(&ds, 0)?, row)?;
    write_text(&out, &labelled_report(&res, &time)?)?;
    print_ranking(&res.variables, res.normalized.as_deref(), None);
    ctx.finish(vec![out], "ok")?;
    Ok(0)
}

fn cmd_ate(a: AteArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let method = a.method.unwrap_or(AteMethodArg::Both);
    let needs_seed = !matches!(method, AteMethodArg::Path);
    let seed = if needs_seed { Some(required(a.seed, "seed")?) } else { a.seed };
    let samples = a.samples.unwrap_or(10_000);
    let tau = a.tau_max.unwrap_or(2);
    let model = a.model.as_deref().map(parse_model).transpose()?;
    if a.scm.is_some() == model.is_some() {
        return Err(usage("pass exactly one of --scm and --model"));
    }
    ctx.begin("ate", &a, seed, manifest_for(&out))?;

    let rows = match (&a.source, model) {
        (None, Some(m)) => {
            let mut rows = run_ate_table(m, tau, samples, seed.unwrap_or(0))?;
            if matches!(method, AteMethodArg::Path) {
                rows.retain(|r| r.method == AteMethod::PathProduct);
            } else if matches!(method, AteMethodArg::Sampling) {
                rows.retain(|r| r.method != AteMethod::PathProduct);
            }
            rows
        }
        (None, None) => return Err(usage("--source is required with --scm")),
        (Some(src), _) => {
            let scm = match model {
                Some(m) => true_scm(m, None, tau)?,
                None => Scm::read_json(a.scm.as_ref().expect("checked above"))?,
            };
            let source = if src.contains('@') { AteSource::Player(parse_player(src)?) } else { AteSource::Variable(src.clone()) };
            let target_player = match &a.effect_on {
                Some(t) => parse_player(t)?,
                None if model.is_some() => Player::new("X4", 0),
                None => return Err(usage("--effect-on is required with --scm")),
            };
            let target = scm
                .graph()
                .find(&target_player.name, target_player.lag)
                .ok_or_else(|| Failure::Data(Error::Dataset(format!("the model has no player {target_player}"))))?;
            let mut methods = Vec::new();
            if !matches!(method, AteMethodArg::Sampling) {
                methods.push(AteMethod::PathProduct);
            }
            if !matches!(method, AteMethodArg::Path) {
                methods.push(AteMethod::InterventionalSampling { samples, seed: seed.expect("required above") });
            }
            methods.into_iter().map(|m| estimate_ate(&scm, &source, target, m)).collect::<Result<Vec<_>>>()?
        }
    };
    if out.extension().is_some_and(|e| e == "csv") {
        write_text(&out, &ate_table_csv(&rows))?;
    } else {
        write_text(&out, &to_json_pretty(&rows)?)?;
    }
    for r in &rows {
        eprintln!("{:?} -> {}: {:.4}", r.source, r.target, r.value);
    }
    ctx.finish(vec![out], "ok")?;
    Ok(0)
}

fn cmd_experiment(a: ExperimentArgs, ctx: &mut Context) -> CliResult<i32> {
    let dir = required(a.out.clone(), "out")?;
    let scenario = required(a.scenario, "scenario")?;
    let seed = required(a.seed, "seed")?;
    let scale = if a.paper_scale { Scale::Paper } else { Scale::Desk };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    // Resolve the study spec first so the manifest echoes every setting.
    enum Study {
        Grid(GridSpec),
        Table(InterventionStudySpec),
        Illustrative(IllustrativeSpec),
    }
    let study = match scenario {
        Scenario::Illustrative => {
            let mut s = IllustrativeSpec::for_scale(scale, seed);
            if let Some(r) = a.repeats {
                s.trials = r;
            }
            if let Some(m) = a.samples {
                s.samples = m;
            }
            if let Some(t) = a.length {
                s.length = t;
            }
            s.validate()?;
            Study::Illustrative(s)
        }
        Scenario::Table1 => {
            let mut s = InterventionStudySpec::for_scale(scale, seed);
            if let Some(r) = a.repeats {
                s.reps = r;
            }
            if let Some(m) = a.samples {
                s.samples = m;
            }
            if let Some(t) = a.length {
                s.train_length = t;
            }
            s.validate()?;
            Study::Table(s)
        }
        grid => {
            let mut s = GridSpec::for_scale(grid.family().expect("grid scenario"), scale, seed);
            if let Some(r) = a.repeats {
                s.repeats = r;
            }
            if let Some(m) = a.samples {
                s.samples = m;
            }
            if let Some(t) = a.length {
                s.train_length = t;
            }
            if let Some(f) = a.fit_on {
                s.fit_on = match f {
                    FitOnArg::Train => FitSource::TrainModel,
                    FitOnArg::Test => FitSource::TestModel,
                };
            }
            s.known_graph = !a.discover;
            s.validate()?;
            Study::Grid(s)
        }
    };
    let echo = json!({
        "args": serde_json::to_value(&a).map_err(|e| Failure::Data(e.into()))?,
        "study": match &study {
            Study::Grid(s) => serde_json::to_value(s),
            Study::Table(s) => serde_json::to_value(s),
            Study::Illustrative(s) => serde_json::to_value(s),
        }.map_err(|e| Failure::Data(e.into()))?,
    });
    ctx.begin("experiment", &echo, Some(seed), dir.join("manifest.json"))?;

    let csv_path = dir.join(format!("{}.csv", scenario.tag()));
    let mut outputs = vec![csv_path.clone()];
    match study {
        Study::Grid(s) => {
            let table = run_sensitivity_grid(&s)?;
            for c in &table.cells {
                eprintln!("{} beta={} z={}: accuracy {:.3} (sd {:.3}, n {})", scenario.tag(), c.row, c.col, c.mean, c.std, c.n);
            }
            table.write_csv(&csv_path)?;
        }
        Study::Table(s) => {
            let table = run_graph_intervention(&s)?;
            for c in &table.cells {
                eprintln!("table1 z={} k={}: accuracy {:.3} (sd {:.3}, n {})", c.row, c.col, c.mean, c.std, c.n);
            }
            table.write_csv(&csv_path)?;
        }
        Study::Illustrative(s) => {
            let report = run_illustrative(&s)?;
            eprintln!("illustrative: CD-RCA TPR {:.3}, z-score TPR {:.3}", report.cdrca_tpr, report.zscore_tpr);
            write_text(&csv_path, &report.summary_csv())?;
            let trials = dir.join("illustrative_trials.csv");
            write_text(&trials, &report.trials_csv())?;
            outputs.push(trials);
        }
    }
    ctx.finish(outputs, "ok")?;
    Ok(0)
}

#[derive(Serialize)]
struct ValidationReport {
    valid: bool,
    violations: Vec<String>,
    players: usize,
    edges: usize,
}

fn cmd_validate_graph(a: ValidateGraphArgs, ctx: &mut Context) -> CliResult<i32> {
    let path = required(a.graph.clone(), "graph")?;
    let default_manifest = match &a.out {
        Some(out) => manifest_for(out),
        None => sibling(&path, "validation.manifest.json"),
    };
    let graph = CausalGraph::read_json(&path)?;
    ctx.begin("validate-graph", &a, None, default_manifest)?;
    let violations: Vec<String> = graph.validate().iter().map(ToString::to_string).collect();
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("valid: {} players, {} edges", graph.n_players(), graph.n_edges());
    }
    let mut outputs = Vec::new();
    if let Some(out) = &a.out {
        let report = ValidationReport { valid: violations.is_empty(), players: graph.n_players(), edges: graph.n_edges(), violations: violations.clone() };
        write_text(out, &to_json_pretty(&report)?)?;
        outputs.push(out.clone());
    }
    ctx.finish(outputs, if violations.is_empty() { "ok" } else { "invalid" })?;
    Ok(if violations.is_empty() { 0 } else { 1 })
}

fn cmd_perturb_graph(a: PerturbGraphArgs, ctx: &mut Context) -> CliResult<i32> {
    let out = required(a.out.clone(), "out")?;
    let spec = EdgeInterventionSpec { k: required(a.k, "k")?, seed: required(a.seed, "seed")? };
    let graph = CausalGraph::read_json(required(a.graph.clone(), "graph")?)?;
    ctx.begin("perturb-graph", &a, Some(spec.seed), manifest_for(&out))?;
    let perturbed = graph.add_random_edges(&spec)?;
    perturbed.write_json(&out)?;
    ctx.finish(vec![out], "ok")?;
    Ok(0)
}
