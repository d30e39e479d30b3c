use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use pheadline::checkpoint;
use pheadline::config::{RunConfig, KEYS};
use pheadline::data::{encode_record, read_jsonl, write_jsonl};
use pheadline::experiment::{self, ablate, prepare, rows_to_jsonl, sweep, SweepAxis};
use pheadline::gradcheck::{op_suite, GradCheck};
use pheadline::metrics::format_table;
use pheadline::synth::generate_synthetic_corpus;
use pheadline::train::{log_to_jsonl, train, VARIANTS};
use pheadline::{Error, Result};

#[derive(Parser)]
#[command(
    name = "pheadline",
    version,
    about = "Personalized headline generation at desk scale"
)]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset: default or micro.
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Override a config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, env = "CAP_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        records: usize,
    },
    /// Train a model and write a checkpoint plus a per-epoch JSONL log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Greedy headlines as `{user_id, headline}` JSON lines.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report as JSON here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and score each ablation variant.
    Ablate {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = VARIANTS.map(String::from))]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score one run per value of a hyperparameter.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        eval: PathBuf,
        /// lambda_fact, lambda_pers or history_cap.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op, the composite blocks and the full objective.
    Gradcheck,
    /// List every config key.
    Keys,
}

#[derive(Serialize)]
struct Generated<'a> {
    user_id: &'a str,
    headline: String,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        cfg = RunConfig::load(path, cfg)?;
    }
    overlay(cfg, cli)
}

fn overlay(mut cfg: RunConfig, cli: &Cli) -> Result<RunConfig> {
    cfg.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes to stdout; a closed pipe (`| head`) ends output quietly.
fn stdout(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => stdout(text),
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out, records } => {
            let cfg = resolve_config(cli)?;
            let mut s = cfg.synth.clone();
            s.n_users = *records;
            write_jsonl(out, &generate_synthetic_corpus(&s)?)?;
            log::info!("wrote {records} records to {}", out.display());
        }
        Command::Train { data, out, log } => {
            let cfg = resolve_config(cli)?;
            let raw = read_jsonl(data)?;
            let prepared = prepare(&cfg, &raw, &[])?;
            let mut model = experiment::build_model(&cfg, &prepared.vocab)?;
            let epochs = train(&mut model, &prepared.train, &cfg.train)?;
            checkpoint::save(out, &cfg, &prepared.vocab, &model)?;
            emit(log.as_deref(), &log_to_jsonl(&epochs))?;
        }
        Command::Generate {
            checkpoint: ckpt,
            data,
            out,
        } => {
            let ck = checkpoint::load(ckpt)?;
            let cfg = overlay(ck.config, cli)?;
            let mut text = String::new();
            for raw in read_jsonl(data)? {
                let r = encode_record(&raw, &ck.vocab, cfg.caps);
                let ids = ck.model.generate_for(&r, &cfg.train.ablation, cfg.gen_max_len)?;
                let line = Generated {
                    user_id: &r.user_id,
                    headline: ck.vocab.detokenize(&ids),
                };
                text.push_str(&serde_json::to_string(&line)?);
                text.push('\n');
            }
            emit(out.as_deref(), &text)?;
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            report,
        } => {
            let ck = checkpoint::load(ckpt)?;
            let cfg = overlay(ck.config, cli)?;
            let records: Vec<_> = read_jsonl(data)?
                .iter()
                .map(|r| encode_record(r, &ck.vocab, cfg.caps))
                .collect();
            let rep = experiment::evaluate(&ck.model, &ck.vocab, &records, &cfg.train.ablation, &cfg)?;
            let label = match cfg.train.ablation.describe().as_str() {
                "none" => "full".to_string(),
                off => format!("no-{off}"),
            };
            stdout(&format_table(&[(label, rep)]))?;
            if let Some(p) = report {
                write(p, &(rep.to_json() + "\n"))?;
            }
        }
        Command::Ablate {
            train: tr,
            eval,
            variants,
            out,
        } => {
            let cfg = resolve_config(cli)?;
            let data = prepare(&cfg, &read_jsonl(tr)?, &read_jsonl(eval)?)?;
            let rows = ablate(&cfg, &data, variants)?;
            let table: Vec<_> = rows.iter().map(|r| (r.variant.clone(), r.report)).collect();
            stdout(&format_table(&table))?;
            if let Some(p) = out {
                write(p, &rows_to_jsonl(&rows))?;
            }
        }
        Command::Sweep {
            train: tr,
            eval,
            axis,
            values,
            out,
        } => {
            let cfg = resolve_config(cli)?;
            let axis = SweepAxis::parse(axis)?;
            let rows = sweep(&cfg, &read_jsonl(tr)?, &read_jsonl(eval)?, axis, values)?;
            let table: Vec<_> = rows
                .iter()
                .map(|r| (format!("{}={}", r.axis, r.value), r.report))
                .collect();
            stdout(&format_table(&table))?;
            if let Some(p) = out {
                write(p, &rows_to_jsonl(&rows))?;
            }
        }
        Command::Gradcheck => {
            let cfg = resolve_config(cli)?;
            let check = GradCheck::default();
            let mut reports = op_suite(&check, cfg.seed)?;
            reports.extend(experiment::gradient_suite(&check, cfg.seed)?);
            let mut failed = false;
            let mut text = String::new();
            for r in reports {
                let status = if r.passed() { "ok" } else { "FAILED" };
                text += &format!(
                    "{:<26} {:>5} coords  max rel err {:.3e}  {status}\n",
                    r.name, r.checked, r.max_rel_error
                );
                failed |= !r.passed();
            }
            stdout(&text)?;
            if failed {
                return Err(Error::Config("gradient check failed".into()));
            }
        }
        Command::Keys => {
            let text: String = KEYS.iter().map(|(k, doc)| format!("{k:<24} {doc}\n")).collect();
            stdout(&text)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
