//! Command-line front end.
//!
//! Flags override values from `--config` files, which override defaults.
//! Every file written embeds the resolved configuration and the format
//! version: JSON documents in a `config` field, CSV files in leading `#`
//! lines.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{DseError, Result};
use crate::grid_model::{Base, NetworkFile, Phase, RadialNetwork};
use crate::layering::{EstimatorConfig, Partition, PartitionFile, ProcessNoise, SfMode};
use crate::measurement::{
    bus_series_from_records, bus_series_to_records, meter_stream_from_records, meter_stream_to_records, read_phasor_csv, write_phasor_csv,
    MeterKind, MeterSample, MeteringPlan,
};
use crate::metrics::{area_map, benchmark_cases, run_estimator, step_errors, write_step_errors, BenchmarkReport, Case, EstimatorKind, Inputs};
use crate::synthetic::{build_scenario, FeederSpec, ScenarioConfig};

pub const NETWORK_FILE: &str = "network.json";
pub const PARTITION_FILE: &str = "partition.json";
pub const PLAN_FILE: &str = "plan.json";
pub const TRUTH_FILE: &str = "truth.csv";
pub const PSEUDO_FILE: &str = "pseudo.csv";
pub const METERS_FILE: &str = "meters.csv";
pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, Parser)]
#[command(name = "ackf-dse", version, about = "Forecasting-aided distribution state estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic scenario bundle.
    Generate(GenerateArgs),
    /// Run one estimator and write per-sample voltage estimates.
    Estimate(EstimateArgs),
    /// Score an estimator against a baseline.
    Compare(CompareArgs),
    /// Score several estimators with repeated timing runs.
    Bench(BenchArgs),
    /// Turn a report or an estimates file into plot-ready CSV.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FeederArg {
    Compact,
    Layered,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Bundle directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Scenario configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub areas: Option<usize>,
    /// Customers per load bus.
    #[arg(long)]
    pub customers: Option<usize>,
    /// Number of one-minute samples.
    #[arg(long = "T")]
    pub samples: Option<usize>,
    #[arg(long, value_enum)]
    pub feeder: Option<FeederArg>,
    /// Bus count of a layered feeder.
    #[arg(long)]
    pub buses: Option<usize>,
    #[arg(long)]
    pub increment_sd: Option<f64>,
    #[arg(long)]
    pub pv_penetration: Option<f64>,
    #[arg(long)]
    pub day_correlation: Option<f64>,
    #[arg(long)]
    pub meter_sd: Option<f64>,
    #[arg(long)]
    pub pseudo_sd: Option<f64>,
    /// Report magnitudes only for meters off the feeder head.
    #[arg(long)]
    pub magnitude_only: bool,
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Scenario bundle directory; individual paths below override its files.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Pseudo injections CSV.
    #[arg(long)]
    pub pseudo: Option<PathBuf>,
    /// Meter readings CSV.
    #[arg(long)]
    pub meters: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SfModeArg {
    Complex,
    Magnitude,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ProcessNoiseArg {
    MeterIncrements,
    PseudoIncrements,
}

#[derive(Debug, Args)]
pub struct EstimatorArgs {
    /// Estimator configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Bad-data band multiplier.
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long, value_enum)]
    pub sf_mode: Option<SfModeArg>,
    /// Width of the pseudo window behind each scaling factor.
    #[arg(long)]
    pub sf_window: Option<usize>,
    #[arg(long, value_enum)]
    pub process_noise: Option<ProcessNoiseArg>,
    /// Solve subareas one after another.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EstimatorArg {
    AckfSingle,
    AckfMultilayer,
    Wls,
}

impl From<EstimatorArg> for EstimatorKind {
    fn from(a: EstimatorArg) -> Self {
        match a {
            EstimatorArg::AckfSingle => EstimatorKind::AckfSingle,
            EstimatorArg::AckfMultilayer => EstimatorKind::AckfMultilayer,
            EstimatorArg::Wls => EstimatorKind::Wls,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub estimator_opts: EstimatorArgs,
    #[arg(long, value_enum, default_value = "ackf-multilayer")]
    pub estimator: EstimatorArg,
    /// Estimates CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub estimator_opts: EstimatorArgs,
    /// True voltages CSV; defaults to the bundle's truth file.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ackf-multilayer")]
    pub estimator: EstimatorArg,
    #[arg(long, value_enum, default_value = "wls")]
    pub baseline: EstimatorArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub estimator_opts: EstimatorArgs,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["ackf-single", "ackf-multilayer", "wls"])]
    pub estimators: Vec<EstimatorArg>,
    #[arg(long, default_value_t = 3)]
    pub repetitions: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "json")]
    pub format: ReportFormat,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Benchmark or comparison report JSON.
    #[arg(long, conflicts_with = "estimates")]
    pub report: Option<PathBuf>,
    /// Estimates CSV written by `estimate`; needs `--truth` or `--bundle`.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
}

/// Parses `args` and runs the command; returns the process exit status.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error ({}): {e}", format!("{cat:?}").to_lowercase());
            cat.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Estimate(a) => estimate(a),
        Command::Compare(a) => compare(a),
        Command::Bench(a) => bench(a),
        Command::Export(a) => export(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| DseError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn csv_header(config: &Value) -> String {
    format!("format_version: {}\nconfig: {}", crate::FORMAT_VERSION, config)
}

pub fn resolve_scenario(a: &GenerateArgs) -> Result<ScenarioConfig> {
    let mut c: ScenarioConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ScenarioConfig::default(),
    };
    if let Some(f) = a.feeder {
        c.feeder = match f {
            FeederArg::Compact => FeederSpec::Compact,
            FeederArg::Layered => FeederSpec::Layered { buses: 150 },
        };
        if matches!(f, FeederArg::Layered) && a.customers.is_none() && a.config.is_none() {
            c.customers_per_area = 1;
        }
    }
    if let Some(b) = a.buses {
        match &mut c.feeder {
            FeederSpec::Layered { buses } => *buses = b,
            FeederSpec::Compact => return Err(DseError::Usage("--buses applies to layered feeders only".into())),
        }
    }
    macro_rules! set {
        ($($field:ident <- $flag:expr),*) => { $(if let Some(v) = $flag { c.$field = v; })* };
    }
    set!(seed <- a.seed, areas <- a.areas, customers_per_area <- a.customers, samples <- a.samples,
         increment_sd <- a.increment_sd, pv_penetration <- a.pv_penetration, day_correlation <- a.day_correlation,
         meter_sd <- a.meter_sd, pseudo_sd <- a.pseudo_sd);
    if a.magnitude_only {
        c.magnitude_only = true;
    }
    c.validate().map_err(|e| DseError::Usage(e.to_string()))?;
    Ok(c)
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let config = resolve_scenario(a)?;
    let scenario = build_scenario::<f64>(&config)?;
    let cfg_json = json!({ "command": "generate", "scenario": config });
    std::fs::create_dir_all(&a.out)?;
    let dir = &a.out;

    let mut network = NetworkFile::from_network(&scenario.network, Base::default());
    network.config = Some(cfg_json.clone());
    network.write(&dir.join(NETWORK_FILE))?;
    let mut partition = scenario.partition.clone();
    partition.config = Some(cfg_json.clone());
    partition.write(&dir.join(PARTITION_FILE))?;
    let mut plan = scenario.plan.clone();
    plan.config = Some(cfg_json.clone());
    plan.write(&dir.join(PLAN_FILE))?;
    std::fs::write(
        dir.join(SCENARIO_FILE),
        serde_json::to_string_pretty(&json!({ "format_version": crate::FORMAT_VERSION, "config": cfg_json }))?,
    )?;

    let header = csv_header(&cfg_json);
    let truth = bus_series_to_records(&scenario.truth.voltages(), &scenario.network, MeterKind::Voltage, None);
    write_phasor_csv(&dir.join(TRUTH_FILE), &header, &truth)?;
    let pseudo = bus_series_to_records(&scenario.pseudo, &scenario.network, MeterKind::Current, None);
    write_phasor_csv(&dir.join(PSEUDO_FILE), &header, &pseudo)?;
    let meters = meter_stream_to_records(&scenario.meters, None);
    write_phasor_csv(&dir.join(METERS_FILE), &header, &meters)?;
    println!(
        "wrote scenario bundle to {} ({} buses, {} samples)",
        dir.display(),
        scenario.network.bus_count(),
        config.samples
    );
    Ok(())
}

pub fn resolve_estimator(a: &EstimatorArgs) -> Result<EstimatorConfig> {
    let mut c: EstimatorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EstimatorConfig::default(),
    };
    if let Some(k) = a.k {
        if !(k > 0.0) {
            return Err(DseError::Usage(format!("--k must be positive, got {k}")));
        }
        c.bad_data_k = k;
    }
    if let Some(m) = a.sf_mode {
        c.sf_mode = match m {
            SfModeArg::Complex => SfMode::Complex,
            SfModeArg::Magnitude => SfMode::Magnitude,
        };
    }
    if let Some(w) = a.sf_window {
        if w == 0 {
            return Err(DseError::Usage("--sf-window must be at least 1".into()));
        }
        c.sf_window = w;
    }
    if let Some(p) = a.process_noise {
        c.process_noise = match p {
            ProcessNoiseArg::MeterIncrements => ProcessNoise::MeterIncrements,
            ProcessNoiseArg::PseudoIncrements => ProcessNoise::PseudoIncrements,
        };
    }
    if a.sequential {
        c.parallel = false;
    }
    Ok(c)
}

/// Input paths after applying bundle defaults.
#[derive(Debug, Clone, Serialize)]
pub struct InputPaths {
    pub network: PathBuf,
    pub partition: Option<PathBuf>,
    pub plan: PathBuf,
    pub pseudo: PathBuf,
    pub meters: PathBuf,
}

fn pick(explicit: &Option<PathBuf>, bundle: &Option<PathBuf>, name: &str, what: &str) -> Result<PathBuf> {
    let p = match (explicit, bundle) {
        (Some(p), _) => p.clone(),
        (None, Some(b)) => b.join(name),
        (None, None) => return Err(DseError::Usage(format!("no {what} file: pass --{what} or --bundle"))),
    };
    if !p.exists() {
        return Err(DseError::Usage(format!("{what} file {} does not exist", p.display())));
    }
    Ok(p)
}

pub fn resolve_inputs(a: &InputArgs) -> Result<InputPaths> {
    let partition = match (&a.partition, &a.bundle) {
        (Some(_), _) => Some(pick(&a.partition, &a.bundle, PARTITION_FILE, "partition")?),
        (None, Some(b)) if b.join(PARTITION_FILE).exists() => Some(b.join(PARTITION_FILE)),
        _ => None,
    };
    Ok(InputPaths {
        network: pick(&a.network, &a.bundle, NETWORK_FILE, "network")?,
        partition,
        plan: pick(&a.plan, &a.bundle, PLAN_FILE, "plan")?,
        pseudo: pick(&a.pseudo, &a.bundle, PSEUDO_FILE, "pseudo")?,
        meters: pick(&a.meters, &a.bundle, METERS_FILE, "meters")?,
    })
}

/// Everything loaded and validated for one phase.
pub struct PhaseData {
    pub network: RadialNetwork<f64>,
    pub partition: PartitionFile,
    pub plan: MeteringPlan,
    pub pseudo: Vec<Vec<Complex<f64>>>,
    pub meters: Vec<MeterSample<f64>>,
}

impl PhaseData {
    pub fn inputs(&self) -> Inputs<'_, f64> {
        Inputs {
            network: &self.network,
            partition: &self.partition,
            plan: &self.plan,
            pseudo: &self.pseudo,
            meters: &self.meters,
        }
    }

    fn phase_tag(&self) -> Option<Phase> {
        match self.network.phase() {
            Phase::Single => None,
            p => Some(p),
        }
    }
}

/// Loads every input and validates it against each phase of the network.
pub fn load_inputs(paths: &InputPaths) -> Result<Vec<PhaseData>> {
    let networks = NetworkFile::read(&paths.network)?.into_networks::<f64>()?;
    let partition = match &paths.partition {
        Some(p) => PartitionFile::read(p)?,
        None => PartitionFile::default(),
    };
    let plan = MeteringPlan::read(&paths.plan)?;
    let pseudo_records = read_phasor_csv(&paths.pseudo)?;
    let meter_records = read_phasor_csv(&paths.meters)?;
    let mut out = Vec::with_capacity(networks.len());
    for network in networks {
        Partition::new(&network, &partition)?;
        crate::measurement::ResolvedPlan::new(&plan, &network)?;
        let pseudo = bus_series_from_records(&pseudo_records, &network, MeterKind::Current)?;
        let meters = meter_stream_from_records(&meter_records, network.phase())?;
        if pseudo.len() < 2 {
            return Err(DseError::Data(format!("pseudo file covers {} samples, at least 2 needed", pseudo.len())));
        }
        if meters.len() < pseudo.len() {
            return Err(DseError::Data(format!("meter file covers {} samples, pseudo file {}", meters.len(), pseudo.len())));
        }
        out.push(PhaseData {
            network,
            partition: partition.clone(),
            plan: plan.clone(),
            pseudo,
            meters,
        });
    }
    Ok(out)
}

fn estimate(a: &EstimateArgs) -> Result<()> {
    let config = resolve_estimator(&a.estimator_opts)?;
    let paths = resolve_inputs(&a.input)?;
    let phases = load_inputs(&paths)?;
    let kind = EstimatorKind::from(a.estimator);
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut real_time = 0.0;
    for ph in &phases {
        let run = run_estimator(&ph.inputs(), kind, &config)?;
        records.extend(bus_series_to_records(&run.voltages, &ph.network, MeterKind::Voltage, ph.phase_tag()));
        real_time += run.timing.real_time_s;
        diagnostics.push(json!({
            "phase": ph.network.phase(),
            "bad_data_flags": run.diagnostics.bad_data.len(),
            "regularized_steps": run.diagnostics.regularized_steps,
            "sf_fallbacks": run.diagnostics.sf_fallbacks,
            "angle_fallbacks": run.diagnostics.angle_fallbacks,
        }));
    }
    let cfg = json!({
        "command": "estimate",
        "estimator": kind,
        "estimator_config": config,
        "inputs": paths,
        "diagnostics": diagnostics,
    });
    write_phasor_csv(&a.out, &csv_header(&cfg), &records)?;
    println!("{kind}: wrote {} estimates to {} (real-time loop {real_time:.3} s)", records.len(), a.out.display());
    Ok(())
}

fn truth_path(explicit: &Option<PathBuf>, bundle: &Option<PathBuf>) -> Result<PathBuf> {
    pick(explicit, bundle, TRUTH_FILE, "truth")
}

fn cases<'a>(phases: &'a [PhaseData], truth: &Path) -> Result<Vec<Case<'a, f64>>> {
    let records = read_phasor_csv(truth)?;
    phases
        .iter()
        .map(|ph| {
            let t = bus_series_from_records(&records, &ph.network, MeterKind::Voltage)?;
            if t.len() < ph.pseudo.len() {
                return Err(DseError::Data(format!("truth covers {} samples, {} needed", t.len(), ph.pseudo.len())));
            }
            Ok(Case {
                inputs: ph.inputs(),
                truth: t,
                area_map: area_map(&ph.network, &ph.partition),
            })
        })
        .collect()
}

fn write_report(report: &BenchmarkReport, out: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => report.write_json(out)?,
        ReportFormat::Csv => report.write_csv(out, &csv_header(&report.config))?,
        ReportFormat::Table => std::fs::write(out, report.table())?,
    }
    Ok(())
}

fn failed(report: &BenchmarkReport) -> Option<DseError> {
    report
        .reports
        .iter()
        .find_map(|r| r.failure.as_ref().map(|f| DseError::Numerical(format!("{} failed: {f}", r.estimator))))
}

fn compare(a: &CompareArgs) -> Result<()> {
    let config = resolve_estimator(&a.estimator_opts)?;
    let paths = resolve_inputs(&a.input)?;
    let truth = truth_path(&a.truth, &a.input.bundle)?;
    let phases = load_inputs(&paths)?;
    let cases = cases(&phases, &truth)?;
    let kinds = [EstimatorKind::from(a.estimator), EstimatorKind::from(a.baseline)];
    let reports = benchmark_cases(&cases, &kinds, 1, &config);
    let cfg = json!({ "command": "compare", "estimators": kinds, "inputs": paths, "truth": truth, "estimator_config": config });
    let report = BenchmarkReport::new(cfg, &config, 1, reports);
    write_report(&report, &a.out, a.format)?;
    print!("{}", report.table());
    match failed(&report) {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn bench(a: &BenchArgs) -> Result<()> {
    if a.repetitions == 0 {
        return Err(DseError::Usage("--repetitions must be at least 1".into()));
    }
    let config = resolve_estimator(&a.estimator_opts)?;
    let paths = resolve_inputs(&a.input)?;
    let truth = truth_path(&a.truth, &a.input.bundle)?;
    let phases = load_inputs(&paths)?;
    let cases = cases(&phases, &truth)?;
    let kinds: Vec<EstimatorKind> = a.estimators.iter().map(|&e| e.into()).collect();
    let reports = benchmark_cases(&cases, &kinds, a.repetitions, &config);
    let cfg = json!({
        "command": "bench",
        "estimators": kinds,
        "repetitions": a.repetitions,
        "inputs": paths,
        "truth": truth,
        "estimator_config": config,
    });
    let report = BenchmarkReport::new(cfg, &config, a.repetitions, reports);
    write_report(&report, &a.out, a.format)?;
    print!("{}", report.table());
    // a failing estimator is part of the report; the run itself succeeded
    Ok(())
}

fn export(a: &ExportArgs) -> Result<()> {
    if let Some(r) = &a.report {
        let report = BenchmarkReport::read_json(r)?;
        if a.format == ReportFormat::Json {
            return Err(DseError::Usage("export writes csv or table".into()));
        }
        return write_report(&report, &a.out, a.format);
    }
    let Some(est_path) = &a.estimates else {
        return Err(DseError::Usage("export needs --report or --estimates".into()));
    };
    if a.format != ReportFormat::Csv {
        return Err(DseError::Usage("per-sample errors export as csv only".into()));
    }
    let network_path = pick(&a.network, &a.bundle, NETWORK_FILE, "network")?;
    let truth_path = truth_path(&a.truth, &a.bundle)?;
    let partition = match (&a.partition, &a.bundle) {
        (Some(p), _) => PartitionFile::read(p)?,
        (None, Some(b)) if b.join(PARTITION_FILE).exists() => PartitionFile::read(&b.join(PARTITION_FILE))?,
        _ => PartitionFile::default(),
    };
    let networks = NetworkFile::read(&network_path)?.into_networks::<f64>()?;
    let est_records = read_phasor_csv(est_path)?;
    let truth_records = read_phasor_csv(&truth_path)?;
    let estimator = estimator_name(est_path)?;
    let mut rows = Vec::new();
    for net in &networks {
        let est = bus_series_from_records(&est_records, net, MeterKind::Voltage)?;
        let mut truth = bus_series_from_records(&truth_records, net, MeterKind::Voltage)?;
        if truth.len() < est.len() {
            return Err(DseError::Data(format!("truth covers {} samples, estimates {}", truth.len(), est.len())));
        }
        truth.truncate(est.len());
        rows.extend(step_errors(&estimator, &est, &truth, net.buses(), &area_map(net, &partition))?);
    }
    let cfg = json!({ "command": "export", "estimates": est_path, "truth": truth_path, "network": network_path });
    write_step_errors(&a.out, &csv_header(&cfg), &rows)?;
    println!("wrote {} per-sample errors to {}", rows.len(), a.out.display());
    Ok(())
}

/// Estimator named in the header of an estimates file.
fn estimator_name(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        if let Some(cfg) = line.strip_prefix("# config: ") {
            let v: Value = serde_json::from_str(cfg)?;
            if let Some(s) = v.get("estimator").and_then(Value::as_str) {
                return Ok(s.to_string());
            }
        }
    }
    Ok("unknown".into())
}
