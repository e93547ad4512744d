//! `seqcf`: synthetic cohorts, dependency graphs, audits and counterfactuals
//! from the command line.
//!
//! Exit codes: 0 success, 1 bad input, 2 runtime failure.

mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use seqcf_core::cascade::{render_profile, render_steps};
use seqcf_core::cohort::{load_cohort, save_cohort_csv, CohortFormat};
use seqcf_core::depgraph::{estimate_graph, DependencyGraph, GraphParams};
use seqcf_core::engine::{self, Artifacts, CfMode, CfRequest, InterventionSpec};
use seqcf_core::plausibility::{calibrate_epsilon, render_report};
use seqcf_core::riskmodel::{auroc, train, train_test_split, TrainConfig};
use seqcf_core::seqcf::{Intervention, PropagationMode};
use seqcf_core::synth::{generate_detailed, render_calibration, validate_calibration, SynthConfig};
use seqcf_core::{Cohort, FeatureCatalog, RiskModel};
use seqcf_service::{ServeError, ServeOptions};

use output::{write_atomic, Sink};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Engine(#[from] seqcf_core::Error),

    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Serve(#[from] ServeError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        let validation = match self {
            CliError::Engine(e) | CliError::Serve(ServeError::Engine(e)) => e.is_validation(),
            CliError::Serve(ServeError::Origin(_)) => true,
            _ => false,
        };
        if validation {
            1
        } else {
            2
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "seqcf",
    version,
    about = "Sequential counterfactuals over three-period clinical features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a calibrated synthetic cohort and its calibration report.
    Synth(SynthArgs),
    /// Estimate the temporal dependency graph and conditional tables.
    Graph(GraphArgs),
    /// Train the logistic risk scorer.
    Train(TrainArgs),
    /// Violation rates of naive counterfactuals (the chronic-code audit).
    Audit(AuditArgs),
    /// Cascade relative risks and the insulin confounding profile.
    Cascade(CascadeArgs),
    /// Explain one patient, naively or by propagating interventions.
    Cf(CfArgs),
    /// Serve the read-only HTTP API over an artifacts directory.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Args)]
struct CohortArgs {
    /// Cohort file (.csv, or .jsonl for JSON lines).
    #[arg(long)]
    cohort: PathBuf,
    /// Feature catalog JSON; the built-in catalog when omitted.
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_patients: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Calibration report path; defaults to `<out>` with `.calibration.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Also write the catalog used, for use as an artifacts directory.
    #[arg(long)]
    catalog_out: Option<PathBuf>,
    /// Exit 1 when any calibration target misses its tolerance.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Args)]
struct GraphArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    #[arg(long, default_value_t = 25)]
    min_support: usize,
    /// P3 threshold; calibrated to the 1st percentile of the cohort when omitted.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, default_value_t = TrainConfig::default().regularization)]
    l2: f64,
    #[arg(long, default_value_t = TrainConfig::default().iterations)]
    iterations: usize,
    /// Seed of the held-out split used for the AUROC diagnostic.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AuditArgs {
    #[command(flatten)]
    input: CohortArgs,
    /// Checked for consistency with the catalog; the audit itself needs only the cohort.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CascadeArgs {
    #[command(flatten)]
    input: CohortArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Naive,
    Sequential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PropagationArg {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Args)]
struct CfArgs {
    /// Directory holding catalog.json, cohort.csv, graph.json and model.json.
    #[arg(long)]
    artifacts: Option<PathBuf>,
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    patient: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Sequential)]
    mode: ModeArg,
    /// `code@period[:add|:remove]`, repeatable.
    #[arg(long = "intervention")]
    interventions: Vec<String>,
    #[arg(long)]
    theta: Option<f64>,
    /// Monte Carlo samples; implies stochastic propagation.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    propagation: Option<PropagationArg>,
    /// Naive mode change budget.
    #[arg(long)]
    max_changes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long)]
    artifacts: PathBuf,
    /// Origin allowed by CORS (`*` for any).
    #[arg(long)]
    allow_origin: Option<String>,
    /// Built UI assets served for paths outside the API.
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn load_catalog(path: Option<&Path>) -> CliResult<Arc<FeatureCatalog>> {
    Ok(Arc::new(match path {
        Some(p) => FeatureCatalog::from_json(&read(p)?)?,
        None => FeatureCatalog::default_catalog(),
    }))
}

fn load_cohort_file(path: &Path, catalog: Arc<FeatureCatalog>) -> CliResult<Cohort> {
    let load = load_cohort(&read(path)?, catalog, CohortFormat::from_path(path))?;
    if !load.missing_columns.is_empty() {
        log::warn!(
            "{} columns absent, read as 0: {}",
            load.missing_columns.len(),
            load.missing_columns.join(", ")
        );
    }
    Ok(load.cohort)
}

impl CohortArgs {
    fn load(&self) -> CliResult<Cohort> {
        let catalog = load_catalog(self.catalog.as_deref())?;
        load_cohort_file(&self.cohort, catalog)
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult {
    let mut config = match &args.config {
        Some(p) => SynthConfig::from_json(&read(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_patients {
        config.n_patients = n;
    }
    let catalog = Arc::new(FeatureCatalog::default_catalog());
    let generated = generate_detailed(&config, catalog.clone())?;
    for note in &generated.notes {
        log::info!("{note}");
    }
    let report = validate_calibration(&generated.cohort, &config);
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("calibration.json"));
    write_atomic(&args.out, &save_cohort_csv(&generated.cohort))?;
    write_atomic(&report_path, &engine::to_json(&report))?;
    if let Some(p) = &args.catalog_out {
        write_atomic(p, &catalog.to_json())?;
    }
    eprint!("{}", render_calibration(&report));
    let failed: Vec<&str> = report.failures().map(|t| t.name.as_str()).collect();
    if !failed.is_empty() {
        log::warn!("calibration misses: {}", failed.join(", "));
        if args.strict {
            return Err(seqcf_core::Error::Config {
                parameter: failed[0].to_string(),
                reason: "calibration target missed".into(),
            }
            .into());
        }
    }
    Ok(())
}

fn cmd_graph(args: GraphArgs) -> CliResult {
    let cohort = args.input.load()?;
    let params = GraphParams {
        gamma: args.gamma,
        min_support: args.min_support,
        epsilon: args.epsilon.unwrap_or(GraphParams::default().epsilon),
        ..GraphParams::default()
    };
    let mut graph = estimate_graph(&cohort, &params)?;
    if args.epsilon.is_none() {
        graph.epsilon = calibrate_epsilon(&graph, &cohort, 0.01)?;
    }
    let estimated = graph.estimated_edges().count();
    if estimated == 0 {
        log::warn!(
            "no estimated edges pass gamma {} with support {}",
            args.gamma,
            args.min_support
        );
    }
    log::info!(
        "{} edges ({estimated} estimated), epsilon {:.3e}",
        graph.edges().len(),
        graph.epsilon
    );
    write_atomic(&args.out, &graph.to_json())
}

fn cmd_train(args: TrainArgs) -> CliResult {
    let cohort = args.input.load()?;
    let config = TrainConfig {
        regularization: args.l2,
        iterations: args.iterations,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let model: RiskModel = train(&cohort, &config)?;
    let (train_part, test_part) = train_test_split(&cohort, args.seed);
    match train::<f64>(&train_part, &config).and_then(|m| auroc(&m, &test_part)) {
        Ok(a) => log::info!("held-out AUROC {a:.4}"),
        Err(e) => log::warn!("held-out AUROC unavailable: {e}"),
    }
    write_atomic(&args.out, &model.to_json())
}

fn cmd_audit(args: AuditArgs) -> CliResult {
    let cohort = args.input.load()?;
    if let Some(p) = &args.graph {
        DependencyGraph::from_json(&read(p)?, cohort.catalog())?;
    }
    let report = engine::audit(&cohort)?;
    let text = match args.format {
        Format::Json => engine::to_json(&report),
        Format::Text => render_report(&report),
    };
    Sink::new(args.out).emit(&text)
}

fn cmd_cascade(args: CascadeArgs) -> CliResult {
    let cohort = args.input.load()?;
    let summary = engine::cascade(&cohort)?;
    let text = match args.format {
        Format::Json => engine::to_json(&summary),
        Format::Text => {
            let mut t = render_steps(&summary.steps);
            if let Some(p) = &summary.confounding {
                t.push('\n');
                t.push_str(&render_profile(p));
            }
            t
        }
    };
    Sink::new(args.out).emit(&text)
}

impl CfArgs {
    fn path(&self, given: &Option<PathBuf>, file: &str, flag: &str) -> CliResult<PathBuf> {
        given
            .clone()
            .or_else(|| self.artifacts.as_ref().map(|d| d.join(file)))
            .ok_or_else(|| {
                seqcf_core::Error::Config {
                    parameter: flag.to_string(),
                    reason: "required unless --artifacts is given".into(),
                }
                .into()
            })
    }

    fn load(&self) -> CliResult<Artifacts> {
        let catalog_path = self
            .catalog
            .clone()
            .or_else(|| self.artifacts.as_ref().map(|d| d.join(engine::CATALOG_FILE)));
        let catalog = load_catalog(catalog_path.as_deref())?;
        let cohort = load_cohort_file(
            &self.path(&self.cohort, engine::COHORT_FILE, "cohort")?,
            catalog.clone(),
        )?;
        let graph =
            DependencyGraph::from_json(&read(&self.path(&self.graph, engine::GRAPH_FILE, "graph")?)?, &catalog)?;
        let model = RiskModel::from_json(&read(&self.path(&self.model, engine::MODEL_FILE, "model")?)?)?;
        Ok(Artifacts::new(cohort, graph, model)?)
    }

    fn request(&self, catalog: &FeatureCatalog) -> CliResult<CfRequest> {
        let interventions = self
            .interventions
            .iter()
            .map(|s| {
                let iv = Intervention::parse(catalog, s)?;
                Ok(InterventionSpec {
                    code: catalog.code(iv.feature).to_string(),
                    period: iv.period,
                    action: iv.action,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(CfRequest {
            patient_id: self.patient.clone(),
            mode: match self.mode {
                ModeArg::Naive => CfMode::Naive,
                ModeArg::Sequential => CfMode::Sequential,
            },
            interventions,
            theta: self.theta,
            samples: self.samples,
            seed: self.seed,
            propagation: self.propagation.map(|p| match p {
                PropagationArg::Deterministic => PropagationMode::Deterministic,
                PropagationArg::Stochastic => PropagationMode::Stochastic,
            }),
            max_changes: self.max_changes,
        })
    }
}

fn cmd_cf(args: CfArgs) -> CliResult {
    let art = args.load()?;
    let req = args.request(art.catalog())?;
    let result = engine::run_counterfactual(&art, &req)?;
    Sink::new(args.out).emit(&engine::to_json(&result))
}

fn cmd_serve(args: ServeArgs) -> CliResult {
    let options = ServeOptions {
        allow_origin: args.allow_origin,
        static_dir: args.static_dir,
    };
    let runtime = tokio::runtime::Runtime::new().map_err(ServeError::Io)?;
    runtime.block_on(seqcf_service::serve(&args.bind, args.artifacts, options))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Graph(a) => cmd_graph(a),
        Command::Train(a) => cmd_train(a),
        Command::Audit(a) => cmd_audit(a),
        Command::Cascade(a) => cmd_cascade(a),
        Command::Cf(a) => cmd_cf(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQCF_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seqcf: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
