//! `fgu`: federated graph unlearning simulator.

mod output;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fgu_core::checkpoint::{load_checkpoint, save_checkpoint};
use fgu_core::experiment::{
    build_request, partition_dataset, prepare_data, run_attack, run_train, run_unlearn, evaluate_params, DatasetSpec,
    ExperimentConfig, RequestMode,
};
use fgu_core::federation::{load_state, save_state};
use fgu_core::graph::{save_graph, FeatureStorage};
use fgu_core::pipeline::{UnlearnOutcome, UnlearnRequest};
use fgu_core::{FguError, Result, State64};
use log::info;
use serde::Serialize;

use output::RunDir;

#[derive(Parser)]
#[command(name = "fgu", version, about = "Federated graph unlearning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    seed_data: Option<u64>,
    #[arg(long)]
    seed_train: Option<u64>,
    #[arg(long)]
    seed_request: Option<u64>,
    /// Upper bound on the client worker pool.
    #[arg(long)]
    workers: Option<usize>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Meta,
    Client,
}

#[derive(Subcommand)]
enum Command {
    /// Split a graph into client subgraphs.
    Partition {
        #[command(flatten)]
        common: Common,
        /// Graph file, overriding the config's dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Client count, overriding the config.
        #[arg(long)]
        clients: Option<usize>,
    },
    /// Train the federation and write the trained state.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Unlearn a request from a trained state.
    Unlearn {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Output directory of `fgu train`, or a state directory.
        #[arg(long)]
        state: PathBuf,
        /// JSON request file, replacing random sampling.
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long)]
        extra_rounds: Option<usize>,
    },
    /// Poison edges, train, then unlearn the poison.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ratio: Option<f64>,
    },
    /// Score checkpoints on the clients of a state.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: PathBuf,
        /// Checkpoint manifests; each is reported under its file stem.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FGU_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &FguError) -> u8 {
    match e {
        FguError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(FguError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            require(path)?;
            let text = fs::read_to_string(path).map_err(|e| FguError::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| FguError::json(path, e))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed_data {
        cfg.seeds.data = s;
    }
    if let Some(s) = common.seed_train {
        cfg.seeds.train = s;
    }
    if let Some(s) = common.seed_request {
        cfg.seeds.request = s;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    cfg.out = Some(common.out.clone());
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    require(path)?;
    let text = fs::read_to_string(path).map_err(|e| FguError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| FguError::json(path, e))
}

/// Accepts a `fgu train` output directory or the state directory inside it.
fn open_state(path: &Path) -> Result<State64> {
    require(path)?;
    let nested = path.join("state");
    if nested.join("state.json").exists() {
        load_state(&nested)
    } else {
        load_state(path)
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Partition { common, input, clients } => {
            let mut cfg = load_config(&common)?;
            if let Some(path) = input {
                cfg.dataset = DatasetSpec::File { path };
            }
            if let Some(k) = clients {
                cfg.clients = k;
            }
            if let DatasetSpec::File { path } = &cfg.dataset {
                require(path)?;
            }
            cmd_partition(&cfg, &common)
        }
        Command::Train { common } => {
            let cfg = load_config(&common)?;
            cfg.validate()?;
            cmd_train(&cfg, &common)
        }
        Command::Unlearn { common, mode, state, request, extra_rounds } => {
            let mut cfg = load_config(&common)?;
            if let Some(path) = request {
                cfg.request.explicit = Some(read_json(&path)?);
            }
            if let Some(r) = extra_rounds {
                cfg.stages.extra_rounds = r;
            }
            let trained = open_state(&state)?;
            let mode = match mode {
                Mode::Meta => RequestMode::Meta,
                Mode::Client => RequestMode::Client,
            };
            cmd_unlearn(&cfg, &common, &trained, mode)
        }
        Command::Attack { common, ratio } => {
            let mut cfg = load_config(&common)?;
            if let Some(r) = ratio {
                cfg.attack_ratio = r;
            }
            cfg.validate()?;
            cmd_attack(&cfg, &common)
        }
        Command::Evaluate { common, state, checkpoints } => {
            let cfg = load_config(&common)?;
            let st = open_state(&state)?;
            let mut models = BTreeMap::new();
            for path in &checkpoints {
                require(path)?;
                let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                models.insert(name, load_checkpoint(path)?);
            }
            let dir = RunDir::create(&common.out, common.overwrite)?;
            dir.write_json("config.json", &cfg.echo())?;
            dir.write_report(&evaluate_params(&cfg, &models, &st)?)
        }
    }
}

#[derive(Serialize)]
struct PartitionFile<'a> {
    num_clients: usize,
    assignments: &'a [usize],
    client_sizes: Vec<usize>,
    files: Vec<String>,
}

fn cmd_partition(cfg: &ExperimentConfig, common: &Common) -> Result<()> {
    let data = partition_dataset(cfg)?;
    let dir = RunDir::create(&common.out, common.overwrite)?;
    let clients_dir = dir.fresh_dir("clients")?;
    let mut files = Vec::new();
    for (i, g) in data.clients.iter().enumerate() {
        let name = format!("client_{i}.json");
        save_graph(g, clients_dir.join(&name), FeatureStorage::Blob)?;
        files.push(format!("clients/{name}"));
    }
    dir.write_json(
        "partition.json",
        &PartitionFile {
            num_clients: data.partition.num_clients(),
            assignments: data.partition.assignments(),
            client_sizes: data.clients.iter().map(|g| g.num_nodes()).collect(),
            files,
        },
    )?;
    dir.write_json("config.json", &cfg.echo())?;
    info!("partitioned {} nodes into {} clients", data.graph.num_nodes(), data.clients.len());
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, common: &Common) -> Result<()> {
    let data = prepare_data(cfg)?;
    let dir = RunDir::create(&common.out, common.overwrite)?;
    let (state, report) = run_train(cfg, &data)?;
    save_state(&state, &dir.fresh_dir("state")?)?;
    save_checkpoint(&state.global, dir.path("theta_o.json"))?;
    dir.write_json("partition.json", &data.partition)?;
    dir.write_json("config.json", &cfg.echo())?;
    dir.write_report(&report)
}

#[derive(Serialize)]
struct OutcomeFile<'a> {
    request: &'a UnlearnRequest,
    influenced: &'a [usize],
    excluded: &'a [usize],
    timings: BTreeMap<&'static str, f64>,
    requesters: &'a [fgu_core::pipeline::RequesterReport],
    config: serde_json::Value,
}

/// Writes the unlearned global model, each requester's unlearned model and adversarial graph, the
/// post-unlearn state and `outcome.json`.
fn write_outcome(dir: &RunDir, cfg: &ExperimentConfig, request: &UnlearnRequest, outcome: &UnlearnOutcome<f64>) -> Result<()> {
    save_checkpoint(&outcome.global, dir.path("theta_bar.json"))?;
    let requesters = dir.fresh_dir("requesters")?;
    let stages = cfg.stage_config();
    for a in &outcome.artifacts {
        let rdir = requesters.join(a.client.to_string());
        save_checkpoint(&a.unlearned, rdir.join("theta_bar_u.json"))?;
        let adv = fgu_core::adversarial::AdvConfig { seed: stages.adv.seed.wrapping_add(a.client as u64), ..stages.adv.clone() };
        a.adversarial.save(&adv, &rdir, "g_adv")?;
    }
    save_state(&outcome.state, &dir.fresh_dir("state")?)?;
    dir.write_json(
        "outcome.json",
        &OutcomeFile {
            request,
            influenced: &outcome.influenced,
            excluded: &outcome.excluded,
            timings: outcome.timings.entries().into_iter().collect(),
            requesters: &outcome.requesters,
            config: cfg.echo(),
        },
    )
}

fn cmd_unlearn(cfg: &ExperimentConfig, common: &Common, trained: &State64, mode: RequestMode) -> Result<()> {
    cfg.validate()?;
    let request = build_request(cfg, trained, mode)?;
    let dir = RunDir::create(&common.out, common.overwrite)?;
    let run = run_unlearn(cfg, trained, request)?;
    save_checkpoint(&trained.global, dir.path("theta_o.json"))?;
    if let Some(r) = &run.retrain {
        save_checkpoint(&r.global, dir.path("theta_star.json"))?;
    }
    write_outcome(&dir, cfg, &run.request, &run.outcome)?;
    dir.write_json("config.json", &cfg.echo())?;
    dir.write_report(&run.report)
}

fn cmd_attack(cfg: &ExperimentConfig, common: &Common) -> Result<()> {
    let data = prepare_data(cfg)?;
    let dir = RunDir::create(&common.out, common.overwrite)?;
    let run = run_attack(cfg, &data)?;
    save_checkpoint(&run.clean.global, dir.path("theta_clean.json"))?;
    save_checkpoint(&run.poisoned.global, dir.path("theta_o.json"))?;
    let request: UnlearnRequest = match &run.report.request {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| FguError::json("request", e))?,
        None => UnlearnRequest::Meta { removals: Vec::new() },
    };
    write_outcome(&dir, cfg, &request, &run.outcome)?;
    dir.write_json("config.json", &cfg.echo())?;
    dir.write_report(&run.report)
}
