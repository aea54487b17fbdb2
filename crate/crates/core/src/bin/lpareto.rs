use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lpareto::config::RunConfig;
use lpareto::pipeline::{
    diagnose, fit_models, grid_map, prepare_data, returns_csv, run_pipeline, simulate_fields, site_return_levels,
    write_diagnostics, write_fit, write_map, write_simulation, FitSettings, ModelBundle, OutputDir, Stage,
    StageError,
};
use lpareto::returns::ReturnMethod;
use lpareto::Error;

#[derive(Parser)]
#[command(name = "lpareto", version, about = "Non-stationary extremes with generalized l-Pareto processes")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `preprocess.run_length`.
    #[arg(long)]
    run_length: Option<usize>,
    /// Overrides `preprocess.season`, as `start:end` days of year.
    #[arg(long, value_parser = parse_season)]
    season: Option<(u16, u16)>,
}

#[derive(Args)]
struct BundleArgs {
    /// Fitted bundle; defaults to `bundle.json` in the output directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit margins, trend and dependence; writes `bundle.json`.
    Fit(ConfigArgs),
    /// QQ, extremogram and variogram data for a fitted bundle.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// Draw fields from the fitted dependence model.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        bundle: BundleArgs,
        /// Number of fields (overrides `simulate.n_fields`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Return levels at stations, or over the grid with `--grid`.
    Returns {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        bundle: BundleArgs,
        /// Return periods in years, comma separated.
        #[arg(long, value_delimiter = ',')]
        m: Option<Vec<f64>>,
        #[arg(long)]
        method: Option<ReturnMethod>,
        /// Restrict to one station id.
        #[arg(long, conflicts_with = "grid")]
        site: Option<String>,
        /// Evaluate on the configured grid instead of at stations.
        #[arg(long)]
        grid: bool,
    },
    /// Gridded parameter and return-level map.
    Map {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        bundle: BundleArgs,
    },
    /// fit, diagnose, simulate, returns and map in one run, with a manifest.
    Pipeline(ConfigArgs),
}

fn parse_season(text: &str) -> Result<(u16, u16), String> {
    let (a, b) = text.split_once(':').ok_or("expected start:end")?;
    let a = a.trim().parse::<u16>().map_err(|e| e.to_string())?;
    let b = b.trim().parse::<u16>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

fn load_config(args: &ConfigArgs) -> lpareto::Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(r) = args.run_length {
        cfg.preprocess.run_length = r;
    }
    if let Some(season) = args.season {
        cfg.preprocess.season = season;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_bundle(cfg: &RunConfig, args: &BundleArgs) -> lpareto::Result<ModelBundle> {
    let path = args.bundle.clone().unwrap_or_else(|| cfg.output_dir.join("bundle.json"));
    ModelBundle::load(path)
}

/// Runs `f` and tags any failure with `stage`.
fn staged<T>(stage: Stage, f: impl FnOnce() -> lpareto::Result<T>) -> Result<T, StageError> {
    f().map_err(|source| StageError { stage, source })
}

fn report(out: &OutputDir, warnings: &[String]) {
    let files: BTreeMap<_, _> = out
        .hashes()
        .iter()
        .map(|(name, hash)| (out.path(name).display().to_string(), hash.clone()))
        .collect();
    println!("{}", json!({ "files": files, "warnings": warnings }));
}

fn run(cli: Cli) -> Result<(), StageError> {
    match cli.command {
        Command::Fit(args) => {
            let cfg = staged(Stage::Data, || load_config(&args))?;
            let ds = staged(Stage::Data, || prepare_data(&cfg))?;
            let mut out = staged(Stage::Data, || OutputDir::create(&cfg.output_dir))?;
            let bundle = staged(Stage::Fit, || {
                let settings = FitSettings::from_config(&cfg, ds.stations())?;
                fit_models(&ds, &settings)
            })?;
            staged(Stage::Fit, || write_fit(&mut out, &bundle))?;
            report(&out, &[]);
        }
        Command::Diagnose { cfg: args, bundle } => {
            let cfg = staged(Stage::Data, || load_config(&args))?;
            let ds = staged(Stage::Data, || prepare_data(&cfg))?;
            let mut out = staged(Stage::Data, || OutputDir::create(&cfg.output_dir))?;
            let d = staged(Stage::Diagnose, || {
                let b = load_bundle(&cfg, &bundle)?;
                let d = diagnose(&ds, &b, &cfg)?;
                write_diagnostics(&mut out, &d)?;
                Ok(d)
            })?;
            report(&out, &d.warnings);
        }
        Command::Simulate { cfg: args, bundle, n } => {
            let cfg = staged(Stage::Data, || load_config(&args))?;
            let mut out = staged(Stage::Data, || OutputDir::create(&cfg.output_dir))?;
            staged(Stage::Simulate, || {
                let b = load_bundle(&cfg, &bundle)?;
                let n = n.unwrap_or(cfg.simulate.n_fields);
                if n == 0 {
                    return Err(Error::Config("`--n` must be positive".into()));
                }
                let sim = simulate_fields(&b, n, cfg.seed)?;
                write_simulation(&mut out, &b.stations, &sim)
            })?;
            report(&out, &[]);
        }
        Command::Returns { cfg: args, bundle, m, method, site, grid } => {
            let mut cfg = staged(Stage::Data, || load_config(&args))?;
            if let Some(m) = m {
                cfg.returns.periods = m;
            }
            if let Some(method) = method {
                cfg.returns.method = method;
            }
            staged(Stage::Data, || cfg.validate())?;
            let mut out = staged(Stage::Data, || OutputDir::create(&cfg.output_dir))?;
            let b = staged(Stage::Returns, || load_bundle(&cfg, &bundle))?;
            let warnings = if grid {
                staged(Stage::Map, || {
                    let (map, w) = grid_map(&b, &cfg)?;
                    write_map(&mut out, &map, &b.stations, &cfg.returns.periods)?;
                    Ok(w)
                })?
            } else {
                staged(Stage::Returns, || {
                    let levels = site_return_levels(
                        &b,
                        &cfg.returns.periods,
                        cfg.returns.method,
                        cfg.returns.n_x,
                        site.as_deref(),
                    )?;
                    out.write("returns.csv", &returns_csv(&levels)?)?;
                    Ok(levels.iter().flat_map(|l| l.warnings.iter().map(|w| format!("{}: {w}", l.station))).collect())
                })?
            };
            report(&out, &warnings);
        }
        Command::Map { cfg: args, bundle } => {
            let cfg = staged(Stage::Data, || load_config(&args))?;
            let mut out = staged(Stage::Data, || OutputDir::create(&cfg.output_dir))?;
            let warnings = staged(Stage::Map, || {
                let b = load_bundle(&cfg, &bundle)?;
                let (map, w) = grid_map(&b, &cfg)?;
                write_map(&mut out, &map, &b.stations, &cfg.returns.periods)?;
                Ok(w)
            })?;
            report(&out, &warnings);
        }
        Command::Pipeline(args) => {
            let cfg = staged(Stage::Data, || load_config(&args))?;
            let run = run_pipeline(&cfg)?;
            println!("{}", json!({ "manifest": run.manifest, "warnings": run.warnings }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", json!({ "error": { "kind": "config", "message": e.to_string() } }));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                json!({ "error": {
                    "stage": e.stage.to_string(),
                    "kind": e.source.kind(),
                    "message": e.source.to_string(),
                    "exit_code": code,
                } })
            );
            ExitCode::from(code as u8)
        }
    }
}
