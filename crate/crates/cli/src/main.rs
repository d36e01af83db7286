mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mgfrec_core::config::SCHEMA_VERSIONS;

/// Multi-turn grounded recommendation engine.
#[derive(Parser, Debug)]
#[command(name = "mgfrec", disable_version_flag = true)]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the master seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    /// Prints the tool version and every file schema version.
    #[arg(long)]
    version: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Builds per-user sequences and writes train/valid/test splits.
    Ingest {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        /// Directory receiving train.jsonl, valid.jsonl and test.jsonl.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Embeds every catalog title into a store file.
    BuildIndex {
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, value_enum)]
        embedder: Option<EmbedderArg>,
        /// Continue from the `.partial` checkpoint left by a failed build.
        #[arg(long)]
        resume: bool,
    },
    /// Samples groups of episodes for every sequence of a split.
    Rollout {
        #[command(flatten)]
        env: EnvArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewards, advantages and masked loss for scored trajectories.
    Score {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        logprobs: PathBuf,
        /// Split file providing each user's target.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// HR@K and NDCG@K of trajectory answers.
    Evaluate {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trajectory analyses.
    #[command(subcommand)]
    Analyze(Analysis),
}

#[derive(Subcommand, Debug)]
enum Analysis {
    /// Mean target difficulty per grounding-frequency bin.
    Difficulty {
        #[arg(long)]
        traj: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        /// Training split used for item popularity.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean target rank of the last grounded title under different grounding caps.
    RankVsCap {
        #[command(flatten)]
        env: EnvArgs,
        /// Comma-separated caps; the configuration's list when omitted.
        #[arg(long, value_delimiter = ',')]
        caps: Option<Vec<usize>>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct EnvArgs {
    #[arg(long)]
    split: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    #[arg(long)]
    index: PathBuf,
    /// `scripted:FILE` or `remote:URL`.
    #[arg(long)]
    policy: PolicyArg,
    /// `sim` or `remote:URL`.
    #[arg(long, default_value = "sim")]
    user_agent: AgentArg,
    /// Precomputed initial recall lists.
    #[arg(long)]
    recall: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum EmbedderArg {
    Toy,
    Remote,
}

#[derive(Clone, Debug)]
enum PolicyArg {
    Scripted(PathBuf),
    Remote(String),
}

impl FromStr for PolicyArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => Ok(PolicyArg::Scripted(path.into())),
            Some(("remote", url)) if !url.is_empty() => Ok(PolicyArg::Remote(url.into())),
            _ => Err("expected scripted:FILE or remote:URL".into()),
        }
    }
}

#[derive(Clone, Debug)]
enum AgentArg {
    Simulated,
    Remote(String),
}

impl FromStr for AgentArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "sim" => Ok(AgentArg::Simulated),
            Some(("remote", url)) if !url.is_empty() => Ok(AgentArg::Remote(url.into())),
            _ => Err("expected sim or remote:URL".into()),
        }
    }
}

fn print_versions() {
    println!("mgfrec {}", env!("CARGO_PKG_VERSION"));
    for (format, version) in SCHEMA_VERSIONS {
        println!("{format} schema v{version}");
    }
}

fn main() -> ExitCode {
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
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if cli.version {
        print_versions();
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command.as_ref() else {
        eprintln!("error: a subcommand is required (see --help)");
        return ExitCode::from(1);
    };
    match commands::run(&cli, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
