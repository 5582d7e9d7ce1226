use std::collections::BTreeSet;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedval::error::{Error, Result};
use fedval::experiment::{
    prepare, run_experiment, shards_for_scheme, sweep, write_bundle, ExperimentSpec,
};
use fedval::federation::FederationConfig;
use fedval::transport::LearnerNode;

#[derive(Parser)]
#[command(
    name = "fedval",
    about = "Federated-learning poisoning experiments with validation-weighted aggregation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the experiment once per corruption level.
    Sweep {
        config: PathBuf,
        /// Comma-separated corrupted-learner counts, e.g. 1,3,5.
        #[arg(long, value_delimiter = ',', required = true)]
        corrupted: Vec<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve one learner node for a distributed run.
    ServeLearner {
        /// The same experiment config the controller runs.
        #[arg(long)]
        config: PathBuf,
        /// Address to listen on, host:port.
        #[arg(long)]
        listen: String,
        /// Which learner this node hosts.
        #[arg(long)]
        learner_id: usize,
    },
}

fn load_spec(path: &Path, output: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::from_file(path)?;
    if let Some(out) = output {
        spec.output_dir = out;
    }
    if let Some(s) = seed {
        spec.federation.master_seed = s;
    }
    Ok(spec)
}

fn serve_learner(config: PathBuf, listen: String, learner_id: usize) -> Result<()> {
    let spec = ExperimentSpec::from_file(&config)?;
    if learner_id >= spec.federation.n_learners {
        return Err(Error::Config(format!(
            "learner id {learner_id} out of range [0, {})",
            spec.federation.n_learners
        )));
    }
    let scheme = spec.schemes[0];
    let prepared = prepare(&spec)?;
    let shards = shards_for_scheme(scheme, &prepared.attacked_shards)?;
    let node = LearnerNode {
        learner_id,
        shard: shards[learner_id].clone(),
        config: FederationConfig {
            scheme,
            exclusion_ids: BTreeSet::new(),
            ..spec.federation.clone()
        },
    };
    let listener = TcpListener::bind(&listen)
        .map_err(|e| Error::Transport(format!("cannot listen on {listen}: {e}")))?;
    log::info!("learner {learner_id} listening on {listen}");
    node.serve(listener)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, output, seed } => {
            let spec = load_spec(&config, output, seed)?;
            let bundle = run_experiment(&spec)?;
            write_bundle(&spec, &bundle, &spec.output_dir)?;
            for run in &bundle.runs {
                if let Some(last) = run.records.last() {
                    println!(
                        "{}: final test accuracy {:.4} after {} rounds",
                        run.label,
                        last.community_test_accuracy,
                        run.records.len()
                    );
                }
            }
            println!("results written to {}", spec.output_dir.display());
            Ok(())
        }
        Command::Sweep { config, corrupted, output, seed } => {
            let spec = load_spec(&config, output, seed)?;
            let bundles = sweep(&spec, &corrupted)?;
            for (m, bundle) in corrupted.iter().zip(&bundles) {
                println!(
                    "corrupted={m}: total corruption {:.1}%",
                    bundle.corruption.total_ratio * 100.0
                );
            }
            println!("results written to {}", spec.output_dir.display());
            Ok(())
        }
        Command::ServeLearner { config, listen, learner_id } => {
            serve_learner(config, listen, learner_id)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
