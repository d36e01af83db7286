use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use mgfrec_core::agents::{Policy, RemotePolicy, RemoteUserAgent, ScriptedPolicy, SimulatedUserAgent, UserAgent};
use mgfrec_core::catalog::{self, InteractionSequence, ItemCatalog, ItemId, UserId};
use mgfrec_core::config::{Config, EmbedderKind, RunManifest};
use mgfrec_core::eval;
use mgfrec_core::grpo::{self, LogprobRecord};
use mgfrec_core::index::{self, EmbeddingStore, Grounder};
use mgfrec_core::jsonl;
use mgfrec_core::rollout::{self, Environment, RecallTable, RolloutConfig};
use mgfrec_core::trajectory::Trajectory;
use mgfrec_core::Embedder;

use crate::{AgentArg, Analysis, Cli, Command, EmbedderArg, EnvArgs, PolicyArg};

/// Bad invocation that clap could not catch.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// 1 usage or configuration, 2 data, 3 remote service.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<mgfrec_core::Error>() {
            return match e {
                mgfrec_core::Error::Remote { .. } => 3,
                mgfrec_core::Error::Config(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Collects input checksums before a command runs and writes the manifest after.
struct Run {
    manifest: RunManifest,
    started: SystemTime,
}

impl Run {
    fn start(command: &str, config: &Config, cli: &Cli, inputs: &[&Path]) -> Result<Self> {
        let started = SystemTime::now();
        let mut all: Vec<&Path> = inputs.to_vec();
        if let Some(c) = &cli.config {
            all.push(c);
        }
        let manifest = RunManifest::new(command, config, &all, started)?;
        Ok(Self { manifest, started })
    }

    fn finish(mut self, outputs: &[&Path], manifest_at: &Path) -> Result<()> {
        self.manifest.finish(outputs, self.started)?;
        self.manifest.save(manifest_at)?;
        info!("{} finished in {} ms", self.manifest.command, self.manifest.elapsed_ms);
        Ok(())
    }
}

pub fn run(cli: &Cli, command: &Command) -> Result<()> {
    let config = load_config(cli)?;
    match command {
        Command::Ingest {
            catalog,
            interactions,
            out_dir,
        } => ingest(cli, &config, catalog, interactions, out_dir),
        Command::BuildIndex {
            catalog,
            out,
            dim,
            embedder,
            resume,
        } => build_index(cli, config, catalog, out, *dim, *embedder, *resume),
        Command::Rollout { env, out } => run_rollout(cli, &config, env, out),
        Command::Score {
            traj,
            logprobs,
            targets,
            index,
            out,
        } => score(cli, &config, traj, logprobs, targets, index, out),
        Command::Evaluate {
            traj,
            index,
            targets,
            out,
        } => evaluate(cli, &config, traj, index, targets, out),
        Command::Analyze(Analysis::Difficulty {
            traj,
            targets,
            train,
            out,
        }) => difficulty(cli, &config, traj, targets, train, out),
        Command::Analyze(Analysis::RankVsCap { env, caps, out }) => {
            rank_vs_cap(cli, &config, env, caps.as_deref(), out)
        }
    }
}

fn ingest(cli: &Cli, config: &Config, catalog: &Path, interactions: &Path, out_dir: &Path) -> Result<()> {
    let run = Run::start("ingest", config, cli, &[catalog, interactions])?;
    let outcome = catalog::ingest(catalog, interactions)?;
    if outcome.removed_target_repeats > 0 {
        info!(
            "removed {} history repeat(s) of targets",
            outcome.removed_target_repeats
        );
    }
    let [a, b, c] = config.data.split;
    let split = catalog::split(
        &outcome.sequences,
        (a, b, c),
        mgfrec_core::seeds::derive_seed(config.seed, "split"),
    )?;
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let paths: Vec<PathBuf> = ["train", "valid", "test"]
        .iter()
        .map(|n| out_dir.join(format!("{n}.jsonl")))
        .collect();
    for (path, part) in paths.iter().zip([&split.train, &split.valid, &split.test]) {
        jsonl::write(path, part)?;
    }
    info!(
        "{} sequences: {} train, {} valid, {} test",
        outcome.sequences.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    let outputs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    run.finish(&outputs, &out_dir.join("ingest.manifest.json"))
}

fn partial_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    out.with_file_name(name)
}

fn build_index(
    cli: &Cli,
    mut config: Config,
    catalog: &Path,
    out: &Path,
    dim: Option<usize>,
    embedder: Option<EmbedderArg>,
    resume: bool,
) -> Result<()> {
    if let Some(d) = dim {
        config.embedder.dimension = d;
    }
    if let Some(kind) = embedder {
        config.embedder.kind = match kind {
            EmbedderArg::Toy => EmbedderKind::Toy,
            EmbedderArg::Remote => EmbedderKind::Remote,
        };
    }
    config.validate()?;
    let run = Run::start("build-index", &config, cli, &[catalog])?;
    let items = ItemCatalog::load(catalog)?;
    let embedder = config.embedder.spec(config.seed).build()?;
    let partial = partial_path(out);
    let checkpoint = if resume {
        let cp =
            EmbeddingStore::load(&partial).with_context(|| format!("no usable checkpoint at {}", partial.display()))?;
        info!("resuming from {} embedded rows", cp.len());
        Some(cp)
    } else {
        None
    };
    match index::build_index_resume(&items, embedder.as_ref(), checkpoint) {
        Ok(store) => {
            store.save(out)?;
            if partial.exists() {
                std::fs::remove_file(&partial).with_context(|| format!("removing {}", partial.display()))?;
            }
            run.finish(&[out], &manifest_path(out))
        }
        Err(failure) => {
            failure.checkpoint.save(&partial)?;
            warn!(
                "saved {} embedded rows to {}; rerun with --resume",
                failure.checkpoint.len(),
                partial.display()
            );
            Err(failure.source.into())
        }
    }
}

fn load_grounder(config: &Config, index: &Path) -> Result<Grounder> {
    let store = EmbeddingStore::load(index)?;
    let embedder: Arc<dyn Embedder> = Arc::from(config.embedder.spec(config.seed).build()?);
    Grounder::new(Arc::new(store), embedder)
        .with_context(|| format!("index {} does not match the configured embedder", index.display()))
}

fn load_targets(path: &Path) -> Result<HashMap<UserId, ItemId>> {
    let seqs: Vec<InteractionSequence> = jsonl::read_values(path)?;
    Ok(seqs.into_iter().map(|s| (s.user_id, s.target)).collect())
}

/// Everything an episode needs, owned.
struct Agents {
    catalog: ItemCatalog,
    grounder: Grounder,
    policy: Box<dyn Policy>,
    user_agent: Box<dyn UserAgent>,
    recall: Option<RecallTable>,
    seqs: Vec<InteractionSequence>,
    remote_policy: bool,
}

impl Agents {
    fn load(config: &Config, args: &EnvArgs) -> Result<Self> {
        let catalog = ItemCatalog::load(&args.catalog)?;
        let grounder = load_grounder(config, &args.index)?;
        if grounder.store().len() != catalog.len() {
            bail!(mgfrec_core::Error::Store(format!(
                "index has {} rows but the catalog has {} items",
                grounder.store().len(),
                catalog.len()
            )));
        }
        let seqs: Vec<InteractionSequence> = jsonl::read_values(&args.split)?;
        for s in &seqs {
            if let Some(bad) = s.history.iter().chain([&s.target]).find(|id| !catalog.contains(**id)) {
                bail!(mgfrec_core::Error::UnknownItem {
                    item_id: bad.0,
                    context: format!("split {}, user {}", args.split.display(), s.user_id),
                });
            }
        }
        let (policy, remote_policy): (Box<dyn Policy>, bool) = match &args.policy {
            PolicyArg::Scripted(path) => (Box::new(ScriptedPolicy::load(path)?), false),
            PolicyArg::Remote(url) => {
                let mut c = config.policy.clone();
                c.endpoint.base_url = url.clone();
                (Box::new(RemotePolicy::new(c)?), true)
            }
        };
        let shared_catalog = Arc::new(catalog.clone());
        let simulated = SimulatedUserAgent::with_threshold(shared_catalog, config.user_agent.jaccard_threshold);
        let user_agent: Box<dyn UserAgent> = match &args.user_agent {
            AgentArg::Simulated => Box::new(simulated),
            AgentArg::Remote(url) => {
                let mut c = config.user_agent.remote.clone();
                c.endpoint.base_url = url.clone();
                Box::new(RemoteUserAgent::new(c, simulated)?)
            }
        };
        let recall = args
            .recall
            .as_deref()
            .map(|p| RecallTable::load(p, &catalog))
            .transpose()?;
        Ok(Self {
            catalog,
            grounder,
            policy,
            user_agent,
            recall,
            seqs,
            remote_policy,
        })
    }

    fn env<'a>(&'a self, config: &'a RolloutConfig) -> Environment<'a> {
        Environment {
            catalog: &self.catalog,
            grounder: &self.grounder,
            policy: self.policy.as_ref(),
            user_agent: self.user_agent.as_ref(),
            recall: self.recall.as_ref(),
            config,
        }
    }

    fn inputs(args: &EnvArgs) -> Vec<&Path> {
        let mut v: Vec<&Path> = vec![&args.split, &args.catalog, &args.index];
        if let PolicyArg::Scripted(p) = &args.policy {
            v.push(p);
        }
        if let Some(r) = &args.recall {
            v.push(r);
        }
        v
    }
}

fn run_rollout(cli: &Cli, config: &Config, args: &EnvArgs, out: &Path) -> Result<()> {
    let run = Run::start("rollout", config, cli, &Agents::inputs(args))?;
    let agents = Agents::load(config, args)?;
    let summary = rollout::run_rollouts(&agents.env(&config.rollout), &agents.seqs, config.seed)?;
    if summary.resampled_episodes > 0 {
        warn!("{} aborted episode(s) were re-sampled", summary.resampled_episodes);
    }
    if summary.dropped_groups > 0 {
        warn!("{} of {} group(s) dropped", summary.dropped_groups, agents.seqs.len());
        if summary.episodes.is_empty() {
            let message = "every group was dropped after repeated aborts".to_string();
            if agents.remote_policy {
                bail!(mgfrec_core::Error::Remote {
                    endpoint: "policy".into(),
                    attempts: config.rollout.abort_retries as u32 + 1,
                    message,
                });
            }
            bail!(mgfrec_core::Error::Policy(message));
        }
    }
    Trajectory::save_all(out, &summary.trajectories())?;
    info!("wrote {} trajectories to {}", summary.episodes.len(), out.display());
    run.finish(&[out], &manifest_path(out))
}

fn score(
    cli: &Cli,
    config: &Config,
    traj: &Path,
    logprobs: &Path,
    targets: &Path,
    index: &Path,
    out: &Path,
) -> Result<()> {
    let run = Run::start("score", config, cli, &[traj, logprobs, targets, index])?;
    let grounder = load_grounder(config, index)?;
    let trajectories = Trajectory::load_all(traj)?;
    let records: Vec<LogprobRecord> = jsonl::read_values(logprobs)?;
    let outcome = grpo::score_groups(
        &trajectories,
        &records,
        &load_targets(targets)?,
        &grounder,
        &config.grpo,
        config.rollout.group_size,
    )?;
    if outcome.skipped_groups > 0 {
        warn!("skipped {} incomplete group(s)", outcome.skipped_groups);
    }
    jsonl::write(out, &outcome.rows)?;
    run.finish(&[out], &manifest_path(out))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn evaluate(cli: &Cli, config: &Config, traj: &Path, index: &Path, targets: &Path, out: &Path) -> Result<()> {
    let run = Run::start("evaluate", config, cli, &[traj, index, targets])?;
    let grounder = load_grounder(config, index)?;
    let trajectories = Trajectory::load_all(traj)?;
    let echo = serde_json::json!({
        "seed": config.seed,
        "cutoffs": eval::CUTOFFS,
        "embedder": config.embedder.spec(config.seed),
        "invalid_episodes": "miss",
    });
    let report = eval::evaluate(&trajectories, &grounder, &load_targets(targets)?, echo)?;
    write_json(out, &report)?;
    run.finish(&[out], &manifest_path(out))
}

fn difficulty(cli: &Cli, config: &Config, traj: &Path, targets: &Path, train: &Path, out: &Path) -> Result<()> {
    let run = Run::start("analyze difficulty", config, cli, &[traj, targets, train])?;
    let trajectories = Trajectory::load_all(traj)?;
    let train_seqs: Vec<InteractionSequence> = jsonl::read_values(train)?;
    let report = eval::analyze_difficulty(
        &trajectories,
        &load_targets(targets)?,
        &catalog::popularity(&train_seqs),
    )?;
    write_json(out, &report)?;
    run.finish(&[out], &manifest_path(out))
}

fn rank_vs_cap(cli: &Cli, config: &Config, args: &EnvArgs, caps: Option<&[usize]>, out: &Path) -> Result<()> {
    let caps = caps.unwrap_or(&config.evaluation.caps);
    if caps.is_empty() || caps.contains(&0) || caps.windows(2).any(|w| w[0] > w[1]) {
        bail!(UsageError("--caps must be positive and ascending".into()));
    }
    let run = Run::start("analyze rank-vs-cap", config, cli, &Agents::inputs(args))?;
    let agents = Agents::load(config, args)?;
    let report = eval::analyze_rank_vs_cap(
        &agents.env(&config.rollout),
        &agents.seqs,
        caps,
        config.evaluation.rank_ceiling,
        config.seed,
    )?;
    write_json(out, &report)?;
    run.finish(&[out], &manifest_path(out))
}
