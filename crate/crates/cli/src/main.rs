use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use faircot_core::analysis::{render_agreement, render_runs, ReportFormat};
use faircot_core::backends::remote::RemoteSettings;
use faircot_core::backends::sim::{BiasProfile, SimBackend, SimReasoner};
use faircot_core::backends::stub::{sim_handler, SimHandlerOptions, StubServer};
use faircot_core::runner::{
    self, exit, BackendSpec, BundledLabels, EvalSource, RunError, RunOutcome, Settings,
    StrategyChoice, Workspace,
};
use faircot_core::schema::{load_config, AttributeSchema, ProfessionAreaMap, RunConfig};

/// Iterative chain-of-thought debiasing for text-to-image generation.
#[derive(Debug, Parser)]
#[command(name = "faircot", version)]
struct Cli {
    /// Output directory; runs go to <out>/runs/<run-id>/.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Demonstration pool file [default: <out>/pool.jsonl].
    #[arg(long, global = true)]
    pool: Option<PathBuf>,
    /// Replace an existing run directory with the same run id.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Refine a chain of thought for one profession and archive it.
    CotGen {
        #[arg(long)]
        profession: String,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Select and adapt a pooled chain of thought, then generate and evaluate.
    Infer {
        #[arg(long)]
        profession: String,
        #[arg(long, value_enum, default_value = "area")]
        strategy: Strategy,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        gen: GenFlags,
    },
    /// Classify existing images, optionally scoring agreement with gold labels.
    #[command(group(clap::ArgGroup::new("source").required(true)))]
    Evaluate {
        /// Image directory, or a run manifest whose images to evaluate.
        #[arg(long, group = "source")]
        images: Option<PathBuf>,
        /// Precomputed predictions (image_id,attribute,category).
        #[arg(long, group = "source")]
        predictions: Option<PathBuf>,
        /// Bundled religion agreement fixture.
        #[arg(long, value_enum, group = "source")]
        bundled: Option<Bundled>,
        /// Gold labels (image_id,attribute,category).
        #[arg(long)]
        gold: Option<PathBuf>,
        #[command(flatten)]
        run: RunFlags,
    },
    /// Aggregate finished runs into run tables.
    Analyze {
        /// Manifest files or run directories; glob patterns allowed.
        #[arg(long, num_args = 1.., required = true)]
        manifests: Vec<String>,
        #[arg(long)]
        schema: Option<PathBuf>,
    },
    /// Re-run a recorded run and compare the manifests byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Serve the wire protocol from the simulated backend on localhost.
    ServeStub {
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        sim_profile: Option<PathBuf>,
        /// Also serve /chat with the simulated reasoner.
        #[arg(long)]
        with_reasoner: bool,
        /// Require this bearer token.
        #[arg(long, env = "FAIRCOT_API_KEY", hide_env_values = true)]
        api_key: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Sim,
    Remote,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Strategy {
    Area,
    Cosine,
    Random,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Bundled {
    Attire,
    Vanilla,
}

#[derive(Debug, Args)]
struct RunFlags {
    #[arg(long, value_enum, default_value = "sim")]
    backend: Backend,
    /// Run configuration (TOML); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Attribute schema (TOML).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Profession area map (TOML).
    #[arg(long)]
    areas: Option<PathBuf>,
    /// Bias profile for the simulated backend (TOML).
    #[arg(long)]
    sim_profile: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Count every detected face instead of one label per image.
    #[arg(long)]
    multiface: bool,
    /// Faces planted per simulated image.
    #[arg(long)]
    faces_per_image: Option<u32>,
    #[arg(long)]
    concurrency: Option<u32>,
}

#[derive(Debug, Args)]
struct GenFlags {
    /// Minimum fraction of the baseline CLIP-T to retain, in (0, 1].
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    max_iter: Option<u32>,
    /// Images per generation request.
    #[arg(long)]
    images: Option<u32>,
    /// Generation requests per iteration.
    #[arg(long)]
    n_prompts: Option<u32>,
}

fn schema_from(path: Option<&Path>) -> Result<AttributeSchema, RunError> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => AttributeSchema::default(),
    })
}

fn profile_from(path: Option<&Path>) -> Result<BiasProfile, RunError> {
    Ok(match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| RunError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            toml::from_str(&text).map_err(|e| {
                RunError::Usage(format!("{}: invalid simulation profile: {e}", p.display()))
            })?
        }
        None => BiasProfile::default(),
    })
}

fn settings(run: &RunFlags, gen: Option<&GenFlags>) -> Result<Settings, RunError> {
    let mut config = match &run.config {
        Some(p) => load_config::<RunConfig>(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = run.seed {
        config.rng_seed = seed;
    }
    if run.multiface {
        config.multiface = true;
    }
    if let Some(c) = run.concurrency {
        config.concurrency = c;
    }
    if let Some(gen) = gen {
        if let Some(tau) = gen.tau {
            config.tau = tau;
        }
        if let Some(m) = gen.max_iter {
            config.max_iterations = m;
        }
        if let Some(n) = gen.images {
            config.images_per_prompt = n;
        }
        if let Some(n) = gen.n_prompts {
            config.n_prompts = n;
        }
    }
    let areas = match &run.areas {
        Some(p) => load_config::<ProfessionAreaMap>(p)?,
        None => ProfessionAreaMap::default(),
    };
    let backend = match run.backend {
        Backend::Sim => {
            let mut profile = profile_from(run.sim_profile.as_deref())?;
            if let Some(n) = run.faces_per_image {
                profile.faces_per_image = n;
            }
            BackendSpec::Sim(profile)
        }
        Backend::Remote => BackendSpec::Remote(RemoteSettings::from_env()),
    };
    let settings = Settings {
        config,
        schema: schema_from(run.schema.as_deref())?,
        areas,
        backend,
    };
    settings.validate()?;
    Ok(settings)
}

fn workspace(cli: &Cli) -> Workspace {
    let mut ws = Workspace::new(&cli.out);
    if let Some(pool) = &cli.pool {
        ws.pool_path = pool.clone();
    }
    ws.overwrite = cli.overwrite;
    ws
}

fn report(outcome: &RunOutcome, schema: &AttributeSchema) {
    println!("run: {}", outcome.run_id);
    println!("manifest: {}", outcome.manifest.display());
    if let Some(d) = outcome.final_record.decision {
        let d = serde_json::to_value(d).unwrap_or_default();
        println!("decision: {}", d.as_str().unwrap_or_default());
    }
    if let Some(t) = outcome.final_record.selected_iteration {
        println!("selected iteration: t{t}");
    }
    if let Some(id) = &outcome.final_record.pool_record_id {
        println!("pool record: {id}");
    }
    if let Some(s) = &outcome.summary {
        let attributes: Vec<String> = schema.attribute_names().map(str::to_string).collect();
        println!();
        print!("{}", render_runs(std::slice::from_ref(s), &attributes, ReportFormat::TableText));
    }
    if !outcome.agreement.is_empty() {
        println!();
        print!("{}", render_agreement(&outcome.agreement, ReportFormat::TableText));
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    let ws = workspace(&cli);
    match &cli.command {
        Command::CotGen { profession, run, gen } => {
            let s = settings(run, Some(gen))?;
            report(&runner::run_cot_gen(&s, &ws, profession)?, &s.schema);
        }
        Command::Infer {
            profession,
            strategy,
            run,
            gen,
        } => {
            let s = settings(run, Some(gen))?;
            let strategy = match strategy {
                Strategy::Area => StrategyChoice::Area,
                Strategy::Cosine => StrategyChoice::Cosine,
                Strategy::Random => StrategyChoice::Random,
            };
            report(&runner::run_infer(&s, &ws, profession, strategy)?, &s.schema);
        }
        Command::Evaluate {
            images,
            predictions,
            bundled,
            gold,
            run,
        } => {
            let s = settings(run, None)?;
            let source = match (images, predictions, bundled) {
                (Some(p), _, _) if p.is_file() => EvalSource::Manifest(p.clone()),
                (Some(p), _, _) => EvalSource::Images(p.clone()),
                (_, Some(p), _) => EvalSource::Predictions(p.clone()),
                (_, _, Some(Bundled::Attire)) => EvalSource::Bundled(BundledLabels::Attire),
                (_, _, Some(Bundled::Vanilla)) => EvalSource::Bundled(BundledLabels::Vanilla),
                _ => unreachable!("clap requires one source"),
            };
            report(&runner::run_evaluate(&s, &ws, source, gold.as_deref())?, &s.schema);
        }
        Command::Analyze { manifests, schema } => {
            let schema = schema_from(schema.as_deref())?;
            let outcome = runner::run_analyze(manifests, &cli.out, &schema)?;
            let attributes: Vec<String> = schema.attribute_names().map(str::to_string).collect();
            print!("{}", render_runs(&outcome.runs, &attributes, ReportFormat::TableText));
            for path in &outcome.reports {
                println!("wrote {}", path.display());
            }
        }
        Command::Replay { manifest } => {
            let outcome = runner::run_replay(manifest, &cli.out)?;
            println!(
                "replay identical: {} lines ({})",
                outcome.lines,
                outcome.replayed.display()
            );
        }
        Command::ServeStub {
            schema,
            sim_profile,
            with_reasoner,
            api_key,
        } => {
            let schema = schema_from(schema.as_deref())?;
            let profile = profile_from(sim_profile.as_deref())?;
            let reasoner = with_reasoner
                .then(|| Arc::new(SimReasoner::new(&profile)) as Arc<dyn faircot_core::backends::Reasoner>);
            let sim = Arc::new(SimBackend::new(&schema, profile)?);
            let handler = sim_handler(
                sim,
                SimHandlerOptions {
                    api_key: api_key.clone(),
                    reasoner,
                },
            );
            let server = StubServer::start(handler).map_err(|source| RunError::Io {
                path: PathBuf::from("127.0.0.1"),
                source,
            })?;
            println!("{}", server.url());
            loop {
                std::thread::park();
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
