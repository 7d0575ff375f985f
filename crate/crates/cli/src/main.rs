use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ptprobe::Error;
use ptprobe_cli::pipeline::load_spec;
use ptprobe_cli::{exit_code, Command, Overrides, Pipeline, PipelineConfig};

#[derive(Parser)]
#[command(name = "ptprobe", version, about = "Probe and intervene on two-view pointmap transformers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline config. Defaults to `<out>/config.toml` when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-pair and per-probe work.
    #[arg(long)]
    jobs: Option<usize>,
    /// Rerun completed stages and unseal sealed runs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic scene-pair dataset.
    Generate(Common),
    /// Build the model and capture activation traces.
    Capture(Common),
    /// Train one probe per probe point.
    Train(Common),
    /// Error curves, layer contributions and depth metrics.
    Eval(Common),
    /// Attention-head profiles and correspondence recall.
    Heads(Common),
    /// Clean-versus-intervened comparison.
    Knockout {
        #[command(flatten)]
        common: Common,
        /// Knockout spec as JSON; overrides `[knockout]` in the config.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write PTMS pointmap sequences and seal the run.
    Export(Common),
    /// Serve sealed runs over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        /// Directory holding run directories; defaults to the parent of `--out`.
        #[arg(long)]
        runs: Option<PathBuf>,
        #[arg(long)]
        bind: Option<String>,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let implied = common.out.as_ref().map(|o| o.join("config.toml"));
            match implied.filter(|p| p.exists()) {
                Some(p) => PipelineConfig::load(&p)?,
                None => PipelineConfig::default(),
            }
        }
    };
    cfg.apply(&Overrides { seed: common.seed, out: common.out.clone(), jobs: common.jobs });
    Ok(cfg)
}

fn run_stage(cmd: Command, common: &Common, spec: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let spec = spec.map(|p| load_spec(&p)).transpose()?;
    let pipeline = Pipeline::new(cfg, common.force)?;
    let (summary, outcome) = pipeline.run(cmd, spec.as_ref());
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::Json)?);
    outcome
}

fn serve(common: &Common, runs: Option<PathBuf>, bind: Option<String>) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let root = runs.unwrap_or_else(|| cfg.out.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from(".")));
    let opts = ptprobe_server::ServerOptions {
        runs_root: root,
        cors_origin: cfg.serve.cors_origin.clone(),
        live: cfg.serve.live,
    };
    let bind = bind.unwrap_or(cfg.serve.bind.clone());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ptprobe_server::serve(opts, &bind))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Generate(c) => run_stage(Command::Generate, &c, None),
        Cmd::Capture(c) => run_stage(Command::Capture, &c, None),
        Cmd::Train(c) => run_stage(Command::Train, &c, None),
        Cmd::Eval(c) => run_stage(Command::Eval, &c, None),
        Cmd::Heads(c) => run_stage(Command::Heads, &c, None),
        Cmd::Knockout { common, spec } => run_stage(Command::Knockout, &common, spec),
        Cmd::Export(c) => run_stage(Command::Export, &c, None),
        Cmd::Serve { common, runs, bind } => serve(&common, runs, bind),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
