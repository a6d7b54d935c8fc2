use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cbf_diffusion::harness::{commands, HarnessConfig, HarnessError, Method};

#[derive(Parser)]
#[command(name = "cbf-diffusion", version, about = "Safe trajectory diffusion with CBF projection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the maze training dataset.
    GenData(Common),
    /// Train the denoiser on the generated dataset.
    Train(Common),
    /// Plan episodes with one method and write trajectories, logs and plots.
    Plan(Common),
    /// Run the benchmark over the configured methods.
    Bench(Common),
    /// Run the local-trap scenario.
    Trap(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Plan(_) => "plan",
            Command::Bench(_) => "bench",
            Command::Trap(_) => "trap",
        }
    }
}

#[derive(Args)]
struct Common {
    /// TOML configuration file. Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(HarnessConfig, Option<Method>), HarnessError> {
        let mut cfg = match &self.config {
            Some(p) => HarnessConfig::load(p)?,
            None => HarnessConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        let method = self.method.as_deref().map(str::parse).transpose()?;
        if let Some(n) = self.episodes {
            cfg.bench.episodes = n;
            cfg.trap.seeds = n;
        }
        if let Some(m) = method {
            cfg.bench.methods = vec![m];
            cfg.trap.methods = vec![m];
        }
        cfg.validate()?;
        Ok((cfg, method))
    }
}

fn run(command: &Command) -> Result<serde_json::Value, HarnessError> {
    let common = match command {
        Command::GenData(c) | Command::Train(c) | Command::Plan(c) | Command::Bench(c) | Command::Trap(c) => c,
    };
    let (cfg, method) = common.load()?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    match command {
        Command::GenData(_) => commands::gen_data(&cfg),
        Command::Train(_) => commands::train_model(&cfg),
        Command::Plan(_) => commands::plan(&cfg, method, common.episodes),
        Command::Bench(_) => commands::bench(&cfg),
        Command::Trap(_) => commands::trap(&cfg),
    }
}

fn error_record(command: &str, kind: &str, message: &str) -> String {
    json!({ "status": "error", "command": command, "kind": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_record("", "usage", e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    match run(&cli.command) {
        Ok(summary) => {
            println!("{}", json!({ "status": "ok", "command": name, "result": summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(name, e.code(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
