//! `themetopic`: import a corpus, train, inspect topics, export, serve.

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::net::{IpAddr, SocketAddr};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{ArgGroup, Args, Parser, Subcommand};
use serde_json::{Map, Value};
use themetopic_core::corpus::ingest_jsonl;
use themetopic_core::engine::IterationView;
use themetopic_core::{QueryError, TrainConfig};
use themetopic_service::project::{apply_overrides, TopicView};
use themetopic_service::{Bundle, ErrorKind, ProjectData, ServiceError, Storage, Workbench};

#[derive(Parser)]
#[command(name = "themetopic", version, about = "Semi-supervised topic modelling for qualitative coding")]
struct Cli {
    /// Project directory.
    #[arg(long, global = true, default_value = ".")]
    project: PathBuf,

    #[command(flatten)]
    train: TrainFlags,

    #[command(subcommand)]
    command: Command,
}

/// Training overrides; unset flags keep the project's stored values.
#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long, global = true)]
    rng_seed: Option<u64>,
    /// Topics not bound to a theme.
    #[arg(long, global = true)]
    k_free: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    eta: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    seed_mass: Option<f64>,
    #[arg(long, global = true)]
    max_iters: Option<usize>,
    /// Relative ELBO change that counts as converged.
    #[arg(long, global = true, allow_negative_numbers = true)]
    tol: Option<f64>,
    /// Zero a word's probability in every topic whose theme it was deleted from.
    #[arg(long, global = true)]
    global_exclusion: bool,
}

impl TrainFlags {
    fn overrides(&self) -> Value {
        let mut m = Map::new();
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                m.insert(k.to_owned(), v);
            }
        };
        set("rng_seed", self.rng_seed.map(Value::from));
        set("k_free", self.k_free.map(Value::from));
        set("alpha", self.alpha.map(Value::from));
        set("eta", self.eta.map(Value::from));
        set("seed_mass", self.seed_mass.map(Value::from));
        set("max_em_iters", self.max_iters.map(Value::from));
        set("conv_tol", self.tol.map(Value::from));
        if self.global_exclusion {
            set("global_exclusion", Some(Value::Bool(true)));
        }
        Value::Object(m)
    }

    fn apply(&self, base: &TrainConfig) -> Result<TrainConfig, Failure> {
        Ok(apply_overrides(base, &self.overrides())?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Add documents from a JSONL file, or restore an exported bundle.
    #[command(group(ArgGroup::new("source").required(true).args(["file", "bundle"])))]
    Import {
        /// One JSON object per line with at least a "text" field.
        file: Option<PathBuf>,
        /// A file written by `export`.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Fit the model and print its topics.
    Train {
        /// Words shown per topic.
        #[arg(short, long, default_value_t = 10)]
        n: usize,
        /// Do not print per-iteration progress.
        #[arg(short, long)]
        quiet: bool,
    },
    /// Print the topics of the last trained model.
    Topics {
        #[arg(short, long, default_value_t = 10)]
        n: usize,
    },
    /// Write the project (corpus, codes and model) to one JSON file.
    Export {
        /// Output path, or `-` for stdout.
        out: PathBuf,
    },
    /// Serve the REST API for this project.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
    },
}

/// Exit 1 for problems with the input or the request, 2 for everything else.
#[derive(Debug)]
enum Failure {
    User(String),
    Internal(String),
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Query(QueryError::StaleModel) => {
                Self::User("no trained model yet; run `themetopic train` first".into())
            }
            e if e.kind() == ErrorKind::Internal => Self::Internal(e.to_string()),
            e => Self::User(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let storage = Storage::single(&cli.project)?;
    match cli.command {
        Command::Import { file: Some(path), .. } => import(&storage, &path),
        Command::Import { bundle: Some(path), .. } => import_bundle(&storage, &path),
        Command::Import { .. } => unreachable!("clap requires a source"),
        Command::Train { n, quiet } => train(&storage, &cli.train, n, quiet),
        Command::Topics { n } => {
            let data = load(&storage)?;
            print_topics(&data.topics(n)?);
            Ok(())
        }
        Command::Export { out } => export(&storage, &out),
        Command::Serve { port, host } => serve(storage, SocketAddr::new(host, port)),
    }
}

fn project_id(storage: &Storage) -> &str {
    storage.single_id().expect("single-project storage")
}

fn load(storage: &Storage) -> Result<ProjectData, Failure> {
    if !storage.exists(project_id(storage)) {
        return Err(Failure::User(format!(
            "no project in {}; run `themetopic import` first",
            storage.root().display()
        )));
    }
    Ok(storage.load(project_id(storage))?)
}

fn open_input(path: &Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::User(format!("{}: {e}", path.display())))
}

fn import(storage: &Storage, path: &Path) -> Outcome {
    let docs = ingest_jsonl(BufReader::new(open_input(path)?)).map_err(ServiceError::from)?;
    let id = project_id(storage);
    let mut data = if storage.exists(id) {
        storage.load(id)?
    } else {
        ProjectData::new(id, id)
    };
    let summary = data.import(docs)?;
    storage.save(&data)?;
    println!("{} documents, V={}", summary.documents, summary.vocab_size);
    Ok(())
}

fn import_bundle(storage: &Storage, path: &Path) -> Outcome {
    let id = project_id(storage);
    if storage.exists(id) {
        return Err(Failure::User(format!(
            "{} already holds a project; restore into an empty directory",
            storage.root().display()
        )));
    }
    let bundle: Bundle = serde_json::from_reader(BufReader::new(open_input(path)?))
        .map_err(|e| Failure::User(format!("{}: {e}", path.display())))?;
    let data = bundle.into_project(Some(id.to_owned()))?;
    storage.save(&data)?;
    let s = data.summary();
    println!("{} documents, V={}", s.documents, s.vocab_size);
    Ok(())
}

fn train(storage: &Storage, flags: &TrainFlags, n: usize, quiet: bool) -> Outcome {
    let mut data = load(storage)?;
    let config = flags.apply(&data.config)?;
    let mut observer = |view: &IterationView<'_>| {
        if !quiet {
            eprintln!("iter {:>4}  elbo {:.6}", view.iteration, view.elbo);
        }
        ControlFlow::Continue(())
    };
    let out = data.train(&config, &mut observer)?;
    let trace = out.trace.clone();
    let snapshot = data.publish(out, &config);
    data.config = config;
    storage.save_snapshot(project_id(storage), &snapshot)?;
    storage.save_annotations(&data)?;
    storage.save_config(&data)?;
    if !trace.converged {
        eprintln!(
            "warning: stopped after {} iterations without converging",
            trace.iterations
        );
    }
    print_topics(&data.topics(n)?);
    Ok(())
}

fn print_topics(topics: &[TopicView]) {
    let themed = topics.iter().filter(|t| t.theme_id.is_some()).count();
    let mut out = io::stdout().lock();
    let mut write = || -> io::Result<()> {
        writeln!(
            out,
            "K={} (themes={}, free={})",
            topics.len(),
            themed,
            topics.len() - themed
        )?;
        for t in topics {
            writeln!(out, "topic {}  {}", t.topic, t.name)?;
            for w in &t.words {
                writeln!(out, "  {:<20} {:.6}", w.word, w.prob)?;
            }
        }
        out.flush()
    };
    // a closed pipe is not worth reporting
    let _ = write();
}

fn export(storage: &Storage, out: &Path) -> Outcome {
    let data = load(storage)?;
    data.snapshot()?;
    let bundle = Bundle::export(&data)?;
    let json = serde_json::to_vec_pretty(&bundle).map_err(|e| Failure::Internal(e.to_string()))?;
    if out == Path::new("-") {
        io::stdout()
            .write_all(&json)
            .map_err(|e| Failure::Internal(e.to_string()))?;
    } else {
        std::fs::write(out, &json).map_err(|e| Failure::User(format!("{}: {e}", out.display())))?;
        eprintln!("wrote {}", out.display());
    }
    Ok(())
}

fn serve(storage: Storage, addr: SocketAddr) -> Outcome {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(io::stderr)
        .init();
    let id = project_id(&storage).to_owned();
    if !storage.exists(&id) {
        storage.save(&ProjectData::new(id.clone(), id.clone()))?;
    }
    let workbench = Arc::new(Workbench::open(storage)?);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Internal(e.to_string()))?;
    eprintln!("serving project {id} on http://{addr}/api/v1");
    runtime
        .block_on(themetopic_service::serve(workbench, addr))
        .map_err(|e| Failure::Internal(e.to_string()))
}
