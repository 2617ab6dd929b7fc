//! Command-line interface for the mixed-model ANCOVA toolkit: simulation
//! studies, ML/REML comparisons, real-data analysis, and ICC diagnostics.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crt_ancova::{
    compare_ml_reml, fit, fit_cluster_ancova, fit_unadjusted, icc_estimate_with_se, read_trial,
    render_report, run_study, ClusterVarianceMode, EstimateReport, EstimationMode, EstimatorSpec,
    Method, ReportFormat, Scenario, ScenarioConfig, SchemaMap, Tabular, TrialDataset,
    VarianceChoice, VarianceMethod,
};

const EXIT_USAGE: i32 = 2;
const EXIT_RUNTIME: i32 = 3;

#[derive(Parser)]
#[command(
    name = "crt-ancova",
    about = "Mixed-model ANCOVA estimation and simulation for cluster-randomized trials",
    version
)]
struct Cli {
    /// Worker threads for simulation (default: logical cores; the
    /// CRT_ANCOVA_THREADS environment variable is used when the flag is
    /// absent). Output is identical for every pool size.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation study and report bias, EmpSE, ASE, CP, and RE per estimator
    Simulate(SimulateArgs),
    /// Run the paired ML/REML mixed-model comparison on shared draws
    CompareReml(CompareArgs),
    /// Estimate the treatment effect from a CSV of individual-level trial data
    Analyze(AnalyzeArgs),
    /// Monte Carlo intracluster correlation for a scenario
    Icc(IccArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario number
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: u8,

    /// Add the Gamma-distributed cluster random effect
    #[arg(long)]
    gamma: bool,

    /// Source-population size per cluster (default: 12 for scenarios 1
    /// and 3, 8 for scenario 2)
    #[arg(long)]
    superpop_n: Option<usize>,

    /// Master seed for the replication streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScenarioArgs {
    fn config(&self, m: usize, pi: f64) -> ScenarioConfig {
        let scenario = match self.scenario {
            1 => Scenario::One,
            2 => Scenario::Two,
            _ => Scenario::Three,
        };
        let mut config = ScenarioConfig::new(scenario, m, self.seed);
        config.pi = pi;
        config.add_gamma = self.gamma;
        if let Some(n) = self.superpop_n {
            config.superpop_n = n;
        }
        config
    }
}

#[derive(Args)]
struct StudyArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,

    /// Number of clusters per replication
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    clusters: u64,

    /// Number of Monte Carlo replications
    #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
    reps: u64,

    /// Randomization probability
    #[arg(long, default_value_t = 0.5)]
    pi: f64,

    /// Write the table here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    study: StudyArgs,

    /// Comma-separated estimators (default: all three, ML estimation
    /// with model-based / classical standard errors)
    #[arg(long, value_delimiter = ',', value_enum)]
    estimators: Option<Vec<EstimatorName>>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    study: StudyArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// CSV file with one row per individual
    #[arg(long)]
    data: PathBuf,

    /// Cluster identifier column
    #[arg(long)]
    cluster: String,

    /// Treatment indicator column (values 0/1)
    #[arg(long)]
    treatment: String,

    /// Outcome column
    #[arg(long)]
    outcome: String,

    /// Comma-separated covariate columns
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,

    /// Estimator to run
    #[arg(long, value_enum, default_value_t = MethodName::All)]
    method: MethodName,

    /// Variance-component estimation for the mixed models
    #[arg(long, value_enum, default_value_t = EstimationName::Ml)]
    estimation: EstimationName,

    /// Standard-error estimator
    #[arg(long, value_enum, default_value_t = VarianceName::Model)]
    variance: VarianceName,

    /// Design randomization probability (used by influence diagnostics)
    #[arg(long, default_value_t = 0.5)]
    pi: f64,

    /// Confidence level
    #[arg(long, default_value_t = 0.95)]
    level: f64,

    /// Write the report here instead of standard output
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
}

#[derive(Args)]
struct IccArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,

    /// Monte Carlo cluster budget
    #[arg(long, default_value_t = 100_000)]
    mc_clusters: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ReportFormat::Csv,
            Format::Markdown => ReportFormat::Markdown,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimatorName {
    MixedUnadj,
    MixedAncova,
    ClusterAncova,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodName {
    MixedUnadj,
    MixedAncova,
    ClusterAncova,
    All,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimationName {
    Ml,
    Reml,
}

impl From<EstimationName> for EstimationMode {
    fn from(e: EstimationName) -> Self {
        match e {
            EstimationName::Ml => EstimationMode::Ml,
            EstimationName::Reml => EstimationMode::Reml,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VarianceName {
    Model,
    Sandwich,
}

fn main() {
    let cli = Cli::parse();

    let threads = cli.threads.or_else(|| {
        std::env::var("CRT_ANCOVA_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            eprintln!("error: worker pool already initialized");
            std::process::exit(EXIT_RUNTIME);
        }
    }

    let code = match run(cli.command) {
        Ok(()) => 0,
        Err(CliError { message, code }) => {
            eprintln!("error: {message}");
            code
        }
    };
    std::process::exit(code);
}

struct CliError {
    message: String,
    code: i32,
}

fn usage(message: impl Into<String>) -> CliError {
    CliError { message: message.into(), code: EXIT_USAGE }
}

impl From<crt_ancova::Error> for CliError {
    fn from(e: crt_ancova::Error) -> Self {
        let code = match &e {
            crt_ancova::Error::Config(_) | crt_ancova::Error::InvalidPi(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        CliError { message: e.to_string(), code }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::CompareReml(args) => cmd_compare_reml(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Icc(args) => cmd_icc(args),
    }
}

fn check_unit_interval(name: &str, value: f64) -> Result<(), CliError> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(usage(format!("--{name} must lie strictly between 0 and 1, got {value}")))
    }
}

fn emit(table: &dyn Tabular, format: Format, out: Option<&PathBuf>) -> Result<(), CliError> {
    let rendered = render_report(table, format.into());
    match out {
        Some(path) => std::fs::write(path, rendered).map_err(|e| CliError {
            message: format!("cannot write output file: {e}"),
            code: EXIT_RUNTIME,
        }),
        None => {
            print!("{rendered}");
            Ok(())
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let study = args.study;
    check_unit_interval("pi", study.pi)?;
    let config = study.scenario.config(study.clusters as usize, study.pi);
    let roster = match args.estimators {
        None => EstimatorSpec::default_roster(),
        Some(names) => names
            .into_iter()
            .map(|name| {
                let (method, variance, label) = match name {
                    EstimatorName::MixedUnadj => {
                        (Method::MixedUnadjusted, VarianceChoice::ModelBased, "mixed-model unadjusted")
                    }
                    EstimatorName::MixedAncova => {
                        (Method::MixedAncova, VarianceChoice::ModelBased, "mixed-model ANCOVA")
                    }
                    EstimatorName::ClusterAncova => {
                        (Method::ClusterAncova, VarianceChoice::ClusterClassical, "cluster-level ANCOVA")
                    }
                };
                EstimatorSpec::new(method, EstimationMode::Ml, variance, label)
            })
            .collect::<crt_ancova::Result<_>>()?,
    };
    let table = run_study(&config, &roster, study.reps as usize, 0.95)?;
    emit(&table, study.format, study.out.as_ref())
}

fn cmd_compare_reml(args: CompareArgs) -> Result<(), CliError> {
    let study = args.study;
    check_unit_interval("pi", study.pi)?;
    let config = study.scenario.config(study.clusters as usize, study.pi);
    let table = compare_ml_reml(&config, study.reps as usize, 0.95)?;
    emit(&table, study.format, study.out.as_ref())
}

/// Analysis rows with the proportion-variance-reduction column that the
/// multi-estimator report carries.
struct AnalysisTable {
    rows: Vec<(EstimateReport, Option<f64>)>,
}

impl Tabular for AnalysisTable {
    fn header(&self) -> Vec<String> {
        ["estimator", "estimate", "se", "ci_low", "ci_high", "level", "pvr"]
            .map(String::from)
            .to_vec()
    }

    fn data_rows(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|(report, pvr)| {
                let mut row = report.data_rows().remove(0);
                row.push(match pvr {
                    Some(v) => format!("{:.1}%", 100.0 * v),
                    None => "-".into(),
                });
                row
            })
            .collect()
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    check_unit_interval("pi", args.pi)?;
    check_unit_interval("level", args.level)?;
    let methods: Vec<MethodName> = match args.method {
        MethodName::All => {
            vec![MethodName::MixedUnadj, MethodName::MixedAncova, MethodName::ClusterAncova]
        }
        single => vec![single],
    };
    if args.covariates.is_empty()
        && methods.iter().any(|m| !matches!(m, MethodName::MixedUnadj))
    {
        return Err(usage("--covariates is required for the ANCOVA estimators"));
    }

    let schema = SchemaMap::new(
        args.cluster.clone(),
        args.treatment.clone(),
        args.outcome.clone(),
        args.covariates.clone(),
    );
    let (data, ingest) = read_trial(&args.data, &schema).map_err(|e| CliError {
        message: format!("ingestion failed: {e}"),
        code: EXIT_RUNTIME,
    })?;
    if ingest.dropped_rows > 0 || ingest.imputed_cells > 0 || ingest.removed_clusters > 0 {
        eprintln!(
            "note: dropped {} rows with missing outcomes, imputed {} covariate cells, removed {} empty clusters",
            ingest.dropped_rows, ingest.imputed_cells, ingest.removed_clusters
        );
    }

    let mode: EstimationMode = args.estimation.into();
    let config = crt_ancova::FitConfig::default();
    let mixed_report = |data: &TrialDataset, label: &str| -> Result<EstimateReport, CliError> {
        let mf = match label {
            "mixed-model unadjusted" => fit_unadjusted(data, mode, &config)?,
            _ => fit(data, mode, &config)?,
        };
        let (variance, method) = match args.variance {
            VarianceName::Model => {
                (crt_ancova::model_based_variance(&mf, data)?.1, VarianceMethod::ModelBased)
            }
            VarianceName::Sandwich => {
                (crt_ancova::sandwich_variance(&mf, data)?.1, VarianceMethod::Sandwich)
            }
        };
        Ok(EstimateReport::new(
            mf.delta_hat(),
            variance.max(0.0).sqrt(),
            args.level,
            method,
            label,
        ))
    };

    let mut reports = Vec::new();
    for method in &methods {
        let report = match method {
            MethodName::MixedUnadj => mixed_report(&data, "mixed-model unadjusted")?,
            MethodName::MixedAncova => mixed_report(&data, "mixed-model ANCOVA")?,
            MethodName::ClusterAncova => {
                let variance_mode = match args.variance {
                    VarianceName::Model => ClusterVarianceMode::Classical,
                    VarianceName::Sandwich => ClusterVarianceMode::Robust,
                };
                let mut f = fit_cluster_ancova(&data, variance_mode, args.level)?;
                f.report.estimator_label = "cluster-level ANCOVA".into();
                f.report
            }
            MethodName::All => unreachable!("expanded above"),
        };
        reports.push(report);
    }

    // PVR compares each adjusted estimator against the unadjusted one
    // from the same run, when both are present
    let unadj_var = methods
        .iter()
        .position(|m| matches!(m, MethodName::MixedUnadj))
        .map(|i| reports[i].se * reports[i].se);
    let rows = reports
        .into_iter()
        .zip(&methods)
        .map(|(report, method)| {
            let pvr = match (unadj_var, method) {
                (Some(vu), m) if !matches!(m, MethodName::MixedUnadj) && methods.len() > 1 => {
                    Some(1.0 - report.se * report.se / vu)
                }
                _ => None,
            };
            (report, pvr)
        })
        .collect();
    emit(&AnalysisTable { rows }, args.format, args.out.as_ref())
}

fn cmd_icc(args: IccArgs) -> Result<(), CliError> {
    let config = args.scenario.config(2, 0.5);
    let (icc, se) = icc_estimate_with_se(&config, args.mc_clusters, 20)?;
    println!("ICC estimate: {icc:.6} (SE {se:.6})");
    Ok(())
}
