use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use catmi::cart::{CartConfig, CartEngine};
use catmi::chained::{multiple_impute, ChainedConfig, ConditionalEngine};
use catmi::data::{load_csv, write_csv, CategoricalDataset, Codebook};
use catmi::dpm::{dpm_multiple_impute, write_diagnostics, DpmConfig};
use catmi::error::Error;
use catmi::glm::{GlmConfig, GlmEngine};
use catmi::rng::rng_from_seed;
use catmi::simulator::{render_csv, render_text, run_simulation, SimulationConfig, SimulationReport};

const EXIT_VALIDATION: u8 = 2;
const EXIT_ENGINE: u8 = 3;

#[derive(Parser)]
#[command(name = "catmi", version, about = "Multiple imputation for categorical data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Impute a CSV file and write L completed copies.
    Impute(ImputeArgs),
    /// Run a repeated-sampling study and write its JSON report.
    Simulate(SimulateArgs),
    /// Print the summary tables of a study report.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EngineArg {
    Glm,
    Cart,
    Dpm,
}

#[derive(clap::Args)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    #[arg(long, value_enum)]
    engine: EngineArg,
    /// Number of completed datasets.
    #[arg(long = "L", default_value_t = 10)]
    imputations: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Chained-equation cycles (glm, cart).
    #[arg(long, default_value_t = 10)]
    cycles: usize,
    /// Truncation level (dpm).
    #[arg(long, default_value_t = 35)]
    k: usize,
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 2_000)]
    burn_in: usize,
    #[arg(long, default_value_t = 4)]
    min_leaf: usize,
    #[arg(long, default_value_t = 1e-4)]
    cp: f64,
    #[arg(long, default_value_t = 1e-5)]
    ridge: f64,
    #[arg(long, default_value_t = 10)]
    max_levels: usize,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    report: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Serialize)]
#[serde(untagged)]
enum EngineSettings {
    Chained {
        chained: ChainedConfig,
        glm: Option<GlmConfig>,
        cart: Option<CartConfig>,
    },
    Dpm {
        dpm: DpmConfig,
    },
}

#[derive(Serialize)]
struct Manifest {
    status: &'static str,
    engine: EngineArg,
    seed: u64,
    imputations: usize,
    data: PathBuf,
    codebook: PathBuf,
    rows: usize,
    missing_cells: usize,
    config: EngineSettings,
    outputs: Vec<String>,
    warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_occupied_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Engine(_) => EXIT_ENGINE,
            _ => EXIT_VALIDATION,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Impute(args) => impute(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Report(args) => report(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn engine_settings(args: &ImputeArgs) -> EngineSettings {
    match args.engine {
        EngineArg::Dpm => EngineSettings::Dpm {
            dpm: DpmConfig {
                k: args.k,
                iterations: args.iterations,
                burn_in: args.burn_in,
                imputations: args.imputations,
                ..DpmConfig::default()
            },
        },
        EngineArg::Glm | EngineArg::Cart => {
            let chained = ChainedConfig {
                cycles: args.cycles,
                imputations: args.imputations,
                ..ChainedConfig::default()
            };
            let glm = matches!(args.engine, EngineArg::Glm).then(|| GlmConfig {
                ridge: args.ridge,
                max_levels: args.max_levels,
                ..GlmConfig::default()
            });
            let cart = matches!(args.engine, EngineArg::Cart).then(|| CartConfig {
                min_leaf: args.min_leaf,
                cp: args.cp,
                ..CartConfig::default()
            });
            EngineSettings::Chained { chained, glm, cart }
        }
    }
}

fn validate_settings(settings: &EngineSettings) -> Result<(), Error> {
    match settings {
        EngineSettings::Dpm { dpm } => dpm.validate(),
        EngineSettings::Chained { chained, glm, cart } => {
            chained.validate()?;
            if let Some(g) = glm {
                if !(g.ridge >= 0.0) {
                    return Err(Error::Config("--ridge must be non-negative".into()));
                }
                if g.max_levels < 2 {
                    return Err(Error::Config("--max-levels must be at least 2".into()));
                }
            }
            if let Some(c) = cart {
                if c.min_leaf < 1 {
                    return Err(Error::Config("--min-leaf must be at least 1".into()));
                }
                if !(c.cp >= 0.0) {
                    return Err(Error::Config("--cp must be non-negative".into()));
                }
            }
            Ok(())
        }
    }
}

struct Imputed {
    datasets: Vec<CategoricalDataset>,
    warnings: Vec<String>,
    max_occupied: Option<usize>,
}

fn run_engine(args: &ImputeArgs, settings: &EngineSettings, data: &CategoricalDataset) -> Result<Imputed, Error> {
    if data.is_complete() {
        return Ok(Imputed {
            datasets: vec![data.clone(); args.imputations],
            warnings: vec!["no missing cells".into()],
            max_occupied: None,
        });
    }
    match settings {
        EngineSettings::Dpm { dpm } => {
            let run = dpm_multiple_impute(data, dpm, &mut rng_from_seed(args.seed))?;
            write_diagnostics(args.out_dir.join("dpm_diagnostics.csv"), &run.diagnostics)?;
            Ok(Imputed {
                datasets: run.datasets,
                warnings: run.warnings,
                max_occupied: Some(run.max_occupied),
            })
        }
        EngineSettings::Chained { chained, glm, cart } => {
            let engine: Box<dyn ConditionalEngine> = match (glm, cart) {
                (Some(g), _) => Box::new(GlmEngine::new(g.clone())),
                (_, Some(c)) => Box::new(CartEngine::new(c.clone())),
                _ => unreachable!("chained settings always carry one engine"),
            };
            let datasets = multiple_impute(data, chained, engine.as_ref(), args.seed)?;
            Ok(Imputed {
                datasets,
                warnings: Vec::new(),
                max_occupied: None,
            })
        }
    }
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Failure {
        code: EXIT_VALIDATION,
        message: e.to_string(),
    })?;
    fs::write(dir.join("manifest.json"), text + "\n").map_err(|e| Failure::from(Error::from(e)))
}

fn impute(args: &ImputeArgs) -> Result<(), Failure> {
    let codebook = Codebook::from_json_file(&args.codebook)?;
    let data = load_csv(&args.data, &codebook)?;
    let settings = engine_settings(args);
    validate_settings(&settings)?;
    fs::create_dir_all(&args.out_dir).map_err(Error::from)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Failure {
            code: EXIT_VALIDATION,
            message: format!("cannot start worker pool: {e}"),
        })?;
    let result = pool.install(|| run_engine(args, &settings, &data));

    let mut manifest = Manifest {
        status: "ok",
        engine: args.engine,
        seed: args.seed,
        imputations: args.imputations,
        data: args.data.clone(),
        codebook: args.codebook.clone(),
        rows: data.n_rows(),
        missing_cells: data.total_missing(),
        config: settings,
        outputs: Vec::new(),
        warnings: Vec::new(),
        max_occupied_classes: None,
        error: None,
    };
    match result {
        Ok(imputed) => {
            let width = args.imputations.to_string().len().max(2);
            for (l, d) in imputed.datasets.iter().enumerate() {
                let name = format!("imputed_{:0width$}.csv", l + 1);
                write_csv(d, args.out_dir.join(&name))?;
                manifest.outputs.push(name);
            }
            for w in &imputed.warnings {
                eprintln!("warning: {w}");
            }
            manifest.warnings = imputed.warnings;
            manifest.max_occupied_classes = imputed.max_occupied;
            write_manifest(&args.out_dir, &manifest)
        }
        Err(e) => {
            let failure = Failure::from(e);
            manifest.status = "failed";
            manifest.error = Some(failure.message.clone());
            write_manifest(&args.out_dir, &manifest)?;
            Err(failure)
        }
    }
}

fn simulate(args: &SimulateArgs) -> Result<(), Failure> {
    let cfg = SimulationConfig::from_json_file(&args.config)?;
    let out = run_simulation(&cfg, args.jobs)?;
    for e in &out.report.engines {
        if e.failed_replications > 0 {
            eprintln!(
                "warning: {} failed in {} of {} replications",
                e.engine,
                e.failed_replications,
                e.failed_replications + e.successful_replications
            );
        }
        for w in &e.warnings {
            eprintln!("warning: {}: {w}", e.engine);
        }
    }
    let json = out.report.to_json()?;
    fs::write(&args.out, json + "\n").map_err(Error::from)?;
    eprintln!(
        "{} replications finished in {:.1} s",
        out.report.settings.replications, out.timing.total_seconds
    );
    Ok(())
}

fn report(args: &ReportArgs) -> Result<(), Failure> {
    let text = fs::read_to_string(&args.report).map_err(Error::from)?;
    let report = SimulationReport::from_json(&text)?;
    let rendered = match args.format {
        Format::Text => render_text(&report),
        Format::Csv => render_csv(&report),
    };
    print!("{rendered}");
    Ok(())
}
