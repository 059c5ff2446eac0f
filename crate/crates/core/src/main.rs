use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedmlp::config::{parse_config, parse_override, ExperimentConfig, OUTPUT_ROOT_ENV};
use fedmlp::experiment::{build_simulation, run_to_dir, sweep_to_dir, INCOMPLETE_MARKER};
use fedmlp::metrics::write_embeddings;
use fedmlp::{gradcheck, Error};

#[derive(Parser)]
#[command(
    version,
    about = "Dynamic heterogeneous federated learning simulator (FedMLP, FedAvg, FedProx, FedProto)"
)]
#[command(after_help = format!(
    "Relative output directories are placed under ${OUTPUT_ROOT_ENV} when it is set.\n\
     Exit codes: 0 success, 1 configuration error, 2 runtime error."
))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics into the output directory.
    Run(ConfigArgs),
    /// Run the experiment once per seed and summarize mean and std.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
    /// Compare analytic gradients against central finite differences.
    CheckGrad {
        /// Random model instances to check (each under every loss combination).
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, then write the global model's features on the balanced test set.
    DumpEmbeddings {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination CSV (default: <output_dir>/embeddings.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set loss.semantic=false`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    gamma: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// fedavg, fedprox, fedproto or fedmlp.
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut overrides = Vec::new();
        let mut errs = Vec::new();
        for s in &self.set {
            match parse_override(s) {
                Ok(kv) => overrides.push(kv),
                Err(e) => errs.push(e),
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let named = [
            ("gamma", &self.gamma),
            ("seed", &self.seed),
            ("strategy", &self.strategy),
            ("epochs", &self.epochs),
            ("output_dir", &self.output_dir),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                overrides.push((key.to_string(), v.clone()));
            }
        }
        parse_config(self.config.as_deref(), &overrides)
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let dir = cfg.resolved_output_dir();
            let summary = run_to_dir(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
            println!("wrote {}", dir.display());
        }
        Command::Sweep { config, seeds } => {
            let cfg = config.load()?;
            let dir = cfg.resolved_output_dir();
            for stat in sweep_to_dir(&cfg, &seeds, &dir)? {
                let f = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!("{:<16} {} ± {}", stat.metric, f(stat.mean), f(stat.std));
            }
            println!("wrote {}", dir.display());
        }
        Command::CheckGrad { instances, seed } => {
            let worst = gradcheck::run(instances, seed)?;
            println!(
                "worst relative error {worst:.3e} (tolerance {:.0e})",
                gradcheck::TOLERANCE
            );
            if worst.is_nan() || worst >= gradcheck::TOLERANCE {
                return Err(Error::InvalidArgument("gradient check failed".into()));
            }
        }
        Command::DumpEmbeddings { config, out } => {
            let cfg = config.load()?;
            let dir = cfg.resolved_output_dir();
            let path = out.unwrap_or_else(|| dir.join("embeddings.csv"));
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            let marker = path.with_file_name(INCOMPLETE_MARKER);
            fs::write(&marker, "")?;
            let mut sim = build_simulation(&cfg)?;
            sim.run()?;
            let file = fs::File::create(&path)?;
            write_embeddings(&sim.server.params, &sim.balanced_test, std::io::BufWriter::new(file))?;
            fs::remove_file(marker)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
