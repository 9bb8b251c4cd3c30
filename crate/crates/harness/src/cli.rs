//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use slpt_core::checks;
use slpt_core::plvae::SampleMode;
use slpt_core::{Error, Result};

use crate::config::TrainingConfig;
use crate::eval::{evaluate, export_latent, render_view_files};
use crate::io::{write_json, Dataset};
use crate::scene::generate_scene;
use crate::train::{load_checkpoint, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "slpt", version, about = "Structural latent pretraining on synthetic point-cloud scenes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed the subcommand uses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and its ground-truth views.
    GenData,
    /// Train on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render one view of a trained model.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view: usize,
    },
    /// Run gradient checks and print the error table.
    Gradcheck {
        /// Run every registered check.
        #[arg(long, conflicts_with = "op", required_unless_present = "op")]
        all: bool,
        /// Run a single check by name.
        #[arg(long)]
        op: Option<String>,
    },
    /// Write the latent representation of the dataset's point cloud.
    ExportLatent {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "deterministic")]
        mode: Mode,
    },
    /// Score a checkpoint on dataset views (held-out views by default).
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Output goes to the given writers.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match execute(cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainingConfig> {
    match path {
        Some(p) => TrainingConfig::from_json(&std::fs::read_to_string(p)?),
        None => Ok(TrainingConfig::default()),
    }
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Input("--out is required for this command".into()))
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    let Common { config, seed, out } = cli.common;
    match cli.command {
        Command::GenData => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.scene.seed = s;
            }
            cfg.scene.validate()?;
            let out = require_out(out)?;
            let scene = generate_scene(&cfg.scene)?;
            Dataset::from_scene(&scene, &cfg.scene)?.save(&out)?;
            writeln!(stdout, "wrote {} views to {}", cfg.scene.views, out.display())?;
        }
        Command::Train { data, steps } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = steps {
                cfg.steps = n;
            }
            cfg.validate()?;
            let out = require_out(out)?;
            let data = Dataset::load(&data)?;
            let result = train(&cfg, &data, &out)?;
            if let Some(last) = result.metrics.last() {
                writeln!(stdout, "step {} l_total {:.6}", last.step, last.l_total)?;
            }
            writeln!(stdout, "checkpoint {}", result.checkpoint.display())?;
        }
        Command::Render { checkpoint, data, view } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let out = require_out(out)?;
            render_view_files(&ckpt.params, &ckpt.config.model, &data, view, &out)?;
            writeln!(stdout, "rendered view {view} to {}", out.display())?;
        }
        Command::Gradcheck { all: _, op } => {
            let results: Vec<(&str, Result<f64>)> = match op {
                Some(name) => {
                    let check = checks::registry()
                        .into_iter()
                        .find(|c| c.name == name)
                        .ok_or_else(|| Error::Input(format!("no gradient check named `{name}`")))?;
                    vec![(check.name, (check.run)())]
                }
                None => checks::run_all(),
            };
            return Ok(print_gradcheck(&results, stdout)?);
        }
        Command::ExportLatent { checkpoint, data, mode } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let out = require_out(out)?;
            let mode = match mode {
                Mode::Deterministic => SampleMode::Deterministic,
                Mode::Stochastic => SampleMode::Stochastic {
                    seed: seed.unwrap_or(ckpt.config.seed),
                },
            };
            let rep = export_latent(&ckpt.params, &ckpt.config.model, &data, mode, &out)?;
            writeln!(stdout, "exported {} latent points to {}", rep.z_f.rows(), out.display())?;
        }
        Command::Evaluate { checkpoint, data, views } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let data = Dataset::load(&data)?;
            let views = views.unwrap_or_else(|| data.heldout_indices());
            let report = evaluate(&ckpt.params, &ckpt.config.model, &data, &views)?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                write_json(out.join("report.json"), &report)?;
            }
            writeln!(stdout, "{text}")?;
        }
    }
    Ok(EXIT_OK)
}

fn print_gradcheck(results: &[(&str, Result<f64>)], stdout: &mut dyn Write) -> Result<i32> {
    writeln!(stdout, "{:<28} {:>12}  status", "check", "max_rel_err")?;
    let mut ok = true;
    for (name, r) in results {
        match r {
            Ok(err) => {
                let pass = *err < checks::TOLERANCE;
                ok &= pass;
                writeln!(stdout, "{name:<28} {err:>12.3e}  {}", if pass { "ok" } else { "FAIL" })?;
            }
            Err(e) => {
                ok = false;
                writeln!(stdout, "{name:<28} {:>12}  FAIL ({e})", "-")?;
            }
        }
    }
    Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
}
