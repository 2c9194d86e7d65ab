use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use paramgen::eval::{self, Experiment, ExperimentConfig, Method, Suite};
use paramgen::universe::{PromptMode, TaskSpec};

#[derive(Parser)]
#[command(name = "paramgen", version, about = "Text-conditioned parameter generation experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root for cached artifacts and reports; each config gets `<runs>/<hash>/`.
    #[arg(long, global = true, default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default config as TOML.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generic model and finetune the p-model dataset.
    BuildPmodels {
        /// Also build the mixed class-count dataset.
        #[arg(long)]
        padded: bool,
    },
    /// Train a generator variant.
    Train {
        #[arg(long, default_value = "main")]
        variant: String,
    },
    /// Generate a p-model for a comma-separated list of class names.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = "name")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the assembled parameters as a checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one evaluation suite and write its reports.
    Eval {
        #[arg(long)]
        suite: String,
    },
    /// Score one method on a suite (OOD by default).
    Baseline {
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "ood")]
        suite: String,
    },
    /// Run every configured suite.
    Run,
}

fn parse_mode(s: &str) -> Result<PromptMode> {
    Ok(match s {
        "name" => PromptMode::Name,
        "description" => PromptMode::Description,
        "image" => PromptMode::Image,
        other => bail!("unknown prompt mode `{other}` (expected name, description or image)"),
    })
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Command::InitConfig { out } = &cli.command {
        std::fs::write(out, ExperimentConfig::default().to_toml()?).with_context(|| format!("writing {}", out.display()))?;
        println!("wrote {}", out.display());
        return Ok(());
    }

    let config = load_config(cli.config.as_deref())?;
    let mut exp = Experiment::open(config, &cli.runs)?;
    log::info!("run directory {}", exp.dir.display());

    match cli.command {
        Command::InitConfig { .. } => unreachable!("handled above"),
        Command::BuildPmodels { padded } => {
            let generic = exp.generic()?;
            println!("generic model: {} classes", generic.num_classes());
            let records = exp.records(false)?;
            let mean = records.iter().map(|r| r.accuracy).sum::<f64>() / records.len().max(1) as f64;
            println!("{} p-models, mean finetuning accuracy {:.2}%", records.len(), 100.0 * mean);
            if padded {
                println!("{} padded p-models", exp.records(true)?.len());
            }
        }
        Command::Train { variant } => {
            let v = exp.variant(&variant)?;
            let model = exp.dit(&v)?;
            println!("generator `{}` ready ({} parameters)", v.name, model.num_params());
        }
        Command::Generate { prompt, mode, seed, out } => {
            let mode = parse_mode(&mode)?;
            let class_ids = prompt
                .split(',')
                .map(|name| {
                    let name = name.trim();
                    exp.universe
                        .vocab
                        .id_of(name)
                        .with_context(|| format!("`{name}` is not in the vocabulary"))
                })
                .collect::<Result<Vec<_>>>()?;
            let task = TaskSpec::new("cli", class_ids, mode)?;
            let main = exp.main_variant();
            let theta = exp
                .generate(&main, std::slice::from_ref(&task), mode, &format!("cli:{seed}"))?
                .remove(0);
            let acc = exp.score(&theta, &task)?;
            println!("generated {} parameters; test accuracy {:.2}%", theta.len(), 100.0 * acc);
            if let Some(out) = out {
                let generic = exp.generic()?;
                let (arch, params) = generic.assemble(&theta)?;
                let meta = serde_json::json!({"kind": "pmodel", "arch": arch, "task": task});
                paramgen::checkpoint::write(&out, &meta, &params.tensors)?;
                println!("wrote {}", out.display());
            }
        }
        Command::Eval { suite } => {
            let suite: Suite = suite.parse()?;
            let reports = exp.run_and_write(suite)?;
            print!("{}", eval::format_table(&reports));
        }
        Command::Baseline { method, suite } => {
            let method: Method = method.parse()?;
            let suite: Suite = suite.parse()?;
            let reports = exp.run_suite_with(suite, &[method])?;
            print!("{}", eval::format_table(&reports));
        }
        Command::Run => {
            let mut all = Vec::new();
            for suite in exp.config.eval.suites.clone() {
                all.extend(exp.run_and_write(suite)?);
            }
            print!("{}", eval::format_table(&all));
            println!("reports in {}", exp.reports_dir().display());
        }
    }
    Ok(())
}
