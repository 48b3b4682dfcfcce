//! `eitl`: synthesize tampering data, train, infer, evaluate, gradient-check.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (including a failed gradient check), 3 I/O error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eitl_core::data::dataset::write_synthetic;
use eitl_core::data::{Dataset, SynthSpec};
use eitl_core::gradcheck::{run_scope, Scope};
use eitl_core::infer::{evaluate, infer, Degrade};
use eitl_core::tensor::{set_precision, Precision};
use eitl_core::train::{load_model, train, ModelSpec, TrainConfig};
use eitl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "eitl", version, about = "Two-branch image tampering localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic tampered dataset.
    Synth {
        /// JSON synthesis spec; omitted fields take their defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a dataset directory holding `manifest.jsonl`.
    Train {
        /// JSON training config.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the feature-enhancement module.
        #[arg(long)]
        no_fe: bool,
        /// Fuse the branches by plain concatenation.
        #[arg(long)]
        no_caf: bool,
    },
    /// Write soft and binary masks for images.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Score a manifest, optionally under a degradation.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `jpeg:Q` or `resize:F`.
        #[arg(long)]
        degrade: Option<String>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Report directory; defaults to `eval/` beside the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Run one suite; all suites when omitted.
        #[arg(long)]
        scope: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Gradient checks that fail. Reported as a numerical failure.
#[derive(Debug)]
struct Failed(String);

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else if e.is_io() {
        3
    } else {
        1
    }
}

/// `EITL_PRECISION` wins; otherwise `default`. An unknown value is a usage error.
fn apply_precision(default: Precision) -> Result<Precision> {
    let p = match std::env::var("EITL_PRECISION") {
        Ok(v) => Precision::parse(&v)
            .ok_or_else(|| Error::InvalidArgument(format!("EITL_PRECISION={v:?} is not f32 or f64")))?,
        Err(_) => default,
    };
    set_precision(p);
    Ok(p)
}

fn read_synth_spec(path: &Path) -> Result<SynthSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn run(cmd: Command) -> Result<std::result::Result<(), Failed>> {
    match cmd {
        Command::Synth { spec, out } => {
            apply_precision(Precision::F64)?;
            let spec = read_synth_spec(&spec)?;
            let records = write_synthetic(&spec, &out)?;
            println!("wrote {} pairs to {}", records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            no_fe,
            no_caf,
        } => {
            let p = apply_precision(Precision::F32)?;
            let mut cfg = TrainConfig::load(&config)?;
            let mut model = cfg.model.resolve()?;
            model.use_fe &= !no_fe;
            model.use_caf &= !no_caf;
            cfg.model = ModelSpec::Config(model);
            cfg.validate()?;
            let dataset = Dataset::load_dir(&data)?;
            log::info!("training on {} pairs in {p:?} mode", dataset.len());
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let cfg_path = out.join("config.json");
            fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(&cfg_path, e))?;
            let outcome = train(&cfg, &dataset, Some(&out))?;
            let last = outcome.steps.last().map_or(f64::NAN, |s| s.loss);
            println!(
                "trained {} steps, final loss {last:.6}, checkpoint {}",
                outcome.steps.len(),
                outcome.final_checkpoint.as_deref().unwrap_or(Path::new("-")).display()
            );
        }
        Command::Infer {
            ckpt,
            images,
            out,
            threshold,
        } => {
            apply_precision(Precision::F64)?;
            let model = load_model(&ckpt)?;
            let report = infer(&model, &images, &out, threshold)?;
            println!(
                "wrote masks for {} of {} images to {}",
                report.written.len(),
                images.len(),
                out.display()
            );
            if let Some((path, msg)) = report.failed.first() {
                return Err(Error::Io {
                    path: path.clone(),
                    source: std::io::Error::other(format!(
                        "{} image(s) could not be processed; first: {msg}",
                        report.failed.len()
                    )),
                });
            }
        }
        Command::Eval {
            ckpt,
            manifest,
            degrade,
            threshold,
            out,
        } => {
            apply_precision(Precision::F64)?;
            let degrade = degrade.as_deref().map(str::parse::<Degrade>).transpose()?;
            let model = load_model(&ckpt)?;
            let out = out.unwrap_or_else(|| manifest.parent().unwrap_or(Path::new(".")).join("eval"));
            let outcome = evaluate(&model, &manifest, threshold, degrade, &out)?;
            for s in &outcome.skipped {
                log::warn!("skipped {s}: image and mask sizes differ");
            }
            let csv_path = out.join(eitl_core::infer::EVAL_CSV);
            let csv = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
            print!("{csv}");
        }
        Command::Gradcheck { scope, seed } => {
            let scopes = match scope {
                Some(s) => vec![s.parse::<Scope>()?],
                None => vec![Scope::Ops, Scope::Modules, Scope::End2end],
            };
            // Finite differences need 64-bit arithmetic whatever the environment says.
            set_precision(Precision::F64);
            let mut failed = Vec::new();
            for scope in scopes {
                for r in run_scope(scope, seed)? {
                    println!("{r}");
                    if !r.passed {
                        failed.push(r.name.clone());
                    }
                }
            }
            if !failed.is_empty() {
                return Ok(Err(Failed(failed.join(", "))));
            }
            println!("all gradient checks passed");
        }
    }
    Ok(Ok(()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failed(names))) => {
            eprintln!("error: gradient check failed for: {names}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
