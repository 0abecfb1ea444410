use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cavlex_core::concept_shap::{class_importance, ImportanceReport};
use cavlex_core::pipeline::{
    describe, emit_report, load_report, load_stage, prepare_cavs, run_on_bundle, save_stage,
    with_configured_threads, write_json, CavStage, ConceptEntry, ReportFormat, RunConfig,
};
use cavlex_core::receptive_field::ReceptiveFields;
use cavlex_core::selection::Strategy;
use cavlex_core::synthetic::{planted_bundle, PlantedSpec};
use cavlex_core::tensor_store::{load_bundle, write_bundle, DumpBundle};
use cavlex_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cavlex", version, about = "Describe concept activation vectors of a vision layer with text")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the config and the bundle it points to.
    Validate(Common),
    /// Obtain and deduplicate CAVs and fit the head; writes the stage files.
    Discover(Common),
    /// Relevance sets and text descriptions per CAV and strategy.
    Describe(Common),
    /// Per-class concept importance.
    Shap(Common),
    /// Full pipeline; writes report.json and report.md.
    Run(Common),
    /// Re-render report.md from an existing report.json.
    Report(ReportArgs),
    /// Write a synthetic bundle with planted concept directions.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Selection strategy to run; repeat for several. Overrides the config.
    #[arg(long = "strategy", value_name = "NAME")]
    strategies: Vec<Strategy>,
    /// Number of texts per description.
    #[arg(long)]
    k: Option<usize>,
    /// Seed for discovery, head fitting and Monte Carlo sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, relative to the working directory.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["config", "input"])))]
struct ReportArgs {
    /// Run configuration; reads report.json from its output directory.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Path of a report.json.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the bundle files.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Planted directions (1 to 6); there are 2^directions classes.
    #[arg(long, default_value_t = 4)]
    directions: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_config(args: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if !args.strategies.is_empty() {
        cfg.strategies = args.strategies.clone();
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(seed) = args.seed {
        cfg.discovery.seed = seed;
        cfg.shap.seed = seed;
    }
    if let Some(out) = &args.output {
        cfg.output_dir = std::path::absolute(out).map_err(|e| Error::Config(format!("--output: {e}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn open(args: &Common) -> Result<(RunConfig, DumpBundle)> {
    let cfg = load_config(args)?;
    let bundle = load_bundle(cfg.bundle_path())?;
    cfg.validate_for(&bundle)?;
    Ok((cfg, bundle))
}

/// Reuses the stage files in the output directory when present.
fn stage(cfg: &RunConfig, bundle: &DumpBundle) -> Result<CavStage> {
    let dir = cfg.output_path();
    if let Some(stage) = load_stage(&dir, bundle)? {
        log::info!("using CAVs and head from {}", dir.display());
        return Ok(stage);
    }
    let stage = prepare_cavs(cfg, bundle)?;
    save_stage(&dir, &stage, cfg.dedup_threshold)?;
    Ok(stage)
}

fn print_stage(stage: &CavStage) {
    println!(
        "{} CAVs ({:?}), {} kept after deduplication",
        stage.before_dedup,
        stage.cavs.origin(),
        stage.cavs.len()
    );
    if let Some(last) = stage.discovery_log.as_ref().and_then(|l| l.last()) {
        println!(
            "discovery: cross-entropy {:.4}, R1 {:.4}, R2 {:.4}, train accuracy {:.4}, test accuracy {:.4}",
            last.cross_entropy, last.r1, last.r2, last.train_accuracy, last.test_accuracy
        );
    }
}

fn print_descriptions(entries: &[ConceptEntry]) {
    for entry in entries {
        let label = entry.label.as_deref().map(|l| format!(" [{l}]")).unwrap_or_default();
        for r in &entry.results {
            let top: Vec<&str> = r.ranking.topk.iter().map(|t| t.text.as_str()).collect();
            println!(
                "CAV {}{label} {}: {} | {}",
                entry.index,
                r.ranking.strategy,
                r.ranking.common.text,
                top.join(", ")
            );
        }
    }
}

fn print_importance(importance: &ImportanceReport, class_name: impl Fn(usize) -> String) {
    for (class, values) in importance.per_class.iter().enumerate() {
        let ranked: Vec<String> = importance
            .ranking_for_class(class)
            .into_iter()
            .take(5)
            .map(|j| format!("CAV {j} ({:.3})", values[j]))
            .collect();
        println!(
            "{} (quality {:.3}): {}",
            class_name(class),
            importance.quality[class],
            ranked.join(", ")
        );
    }
}

fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Validate(args) => {
            let (cfg, bundle) = open(args)?;
            let geometry = ReceptiveFields::new(bundle.arch())?.geometry();
            let (h, w) = bundle.grid_hw();
            println!("config {} is valid", args.config.display());
            println!(
                "bundle {}: {} images, {h}x{w} positions, {} channels, {} texts, {} classes",
                cfg.bundle_path().display(),
                bundle.n(),
                bundle.channels(),
                bundle.num_texts(),
                bundle.num_classes()
            );
            println!("receptive field {} px, jump {} px", geometry.rf, geometry.jump);
        }
        Command::Discover(args) => {
            let (cfg, bundle) = open(args)?;
            let stage = prepare_cavs(&cfg, &bundle)?;
            save_stage(cfg.output_path(), &stage, cfg.dedup_threshold)?;
            print_stage(&stage);
            println!("wrote {}", cfg.output_path().display());
        }
        Command::Describe(args) => {
            let (cfg, bundle) = open(args)?;
            let stage = stage(&cfg, &bundle)?;
            let entries = describe(&cfg, &bundle, &stage.cavs)?;
            let path = cfg.output_path().join("descriptions.json");
            write_json(&path, &entries)?;
            print_descriptions(&entries);
            println!("wrote {}", path.display());
        }
        Command::Shap(args) => {
            let (cfg, bundle) = open(args)?;
            let stage = stage(&cfg, &bundle)?;
            let importance = class_importance(&stage.cavs, &stage.head, &bundle, &cfg.shap)?;
            let path = cfg.output_path().join("importance.json");
            write_json(&path, &importance)?;
            print_importance(&importance, |c| bundle.class_name(c));
            println!("wrote {}", path.display());
        }
        Command::Run(args) => {
            let (cfg, bundle) = open(args)?;
            let report = run_on_bundle(&cfg, &bundle)?;
            let written = emit_report(&report, cfg.output_path(), &[ReportFormat::Json, ReportFormat::Markdown])?;
            println!(
                "{} CAVs kept of {}, completeness {:.4}",
                report.cavs.kept, report.cavs.before_dedup, report.completeness
            );
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Report(args) => {
            let input = match (&args.input, &args.config) {
                (Some(input), _) => input.clone(),
                (None, Some(config)) => RunConfig::load(config)?.output_path().join("report.json"),
                (None, None) => unreachable!("clap requires one of --config, --input"),
            };
            let report = load_report(&input)?;
            let dir = input.parent().unwrap_or(Path::new("."));
            for path in emit_report(&report, dir, &[ReportFormat::Markdown])? {
                println!("wrote {}", path.display());
            }
        }
        Command::Synth(args) => {
            if !(1..=6).contains(&args.directions) || args.n == 0 {
                return Err(Error::Config("synth needs n >= 1 and 1 to 6 directions".into()));
            }
            let (bundle, _) = planted_bundle(&PlantedSpec {
                n: args.n,
                directions: args.directions,
                seed: args.seed,
                ..Default::default()
            });
            println!("wrote {}", write_bundle(&args.out, &bundle)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match with_configured_threads(|| execute(&cli.command)).and_then(|r| r) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
