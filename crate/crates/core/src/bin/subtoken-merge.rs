use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use subtoken_merge::flops::{count_encdec_flops, count_encoder_flops, LengthSchedule};
use subtoken_merge::harness::{
    cell_label, read_jsonl, run_sweep, train, write_outputs, ExperimentConfig, PreparedData,
};
use subtoken_merge::pareto::{efficiency_frontier, knee_distances, knee_point, ConfigPoint};
use subtoken_merge::tokenizer::{inflation_stats, train_bpe};
use subtoken_merge::transformer::{Arch, Checkpoint, MergeKind, MergeSpec, ModelConfig};

#[derive(Parser)]
#[command(version, about = "Subtoken merging experiments for small code Transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train BPE on a JSONL corpus and report subtoken inflation.
    TokenizeStats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic FLOPs of one forward pass, as JSON on stdout.
    Flops {
        /// Model configuration JSON.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        nprime: usize,
        /// Merge position, or `none`.
        #[arg(long)]
        position: String,
        /// Decoder length for encoder-decoder models.
        #[arg(long, default_value_t = 0)]
        tgt_len: usize,
    },
    /// Efficiency frontier and knee of a `label,cost,performance` CSV.
    Pareto {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single configuration and print its summary as JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// `mean` or `learnable`; omit for the unmerged baseline.
        #[arg(long)]
        strategy: Option<MergeKind>,
        #[arg(long, requires = "strategy")]
        position: Option<usize>,
        /// Write the best checkpoint here.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the full strategy x position x seed grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Deserialize)]
struct CorpusLine {
    text: String,
}

#[derive(Serialize)]
struct FrontierEntry {
    label: String,
    cost: f64,
    performance: f64,
    knee_distance: f64,
}

#[derive(Serialize)]
struct FrontierReport {
    frontier: Vec<FrontierEntry>,
    knee: Option<ConfigPoint>,
}

fn parse_position(s: &str) -> Result<Option<usize>> {
    if s == "none" {
        return Ok(None);
    }
    Ok(Some(s.parse().with_context(|| format!("invalid position {s:?}"))?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::TokenizeStats {
            corpus,
            vocab_size,
            out,
        } => {
            let lines: Vec<CorpusLine> = read_jsonl(&corpus)?;
            let texts: Vec<&str> = lines.iter().map(|l| l.text.as_str()).collect();
            let vocab = train_bpe(&texts, vocab_size)?;
            let report = inflation_stats(&texts, &vocab)?;
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
            println!(
                "mean ratio {:.4}, slope {}",
                report.mean_ratio,
                report.slope.map_or("undefined".into(), |s| format!("{s:.4}"))
            );
        }
        Command::Flops {
            config,
            n,
            nprime,
            position,
            tgt_len,
        } => {
            let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
            let position = parse_position(&position)?;
            let schedule = LengthSchedule::new(cfg.layers, n, nprime, position)?;
            let breakdown = match cfg.arch {
                Arch::EncoderOnly => count_encoder_flops(&cfg, &schedule)?,
                Arch::EncoderDecoder => {
                    let memory = if position.is_some() { nprime } else { n };
                    count_encdec_flops(&cfg, &schedule, tgt_len, memory)?
                }
            };
            println!("{}", serde_json::to_string_pretty(&breakdown)?);
        }
        Command::Pareto { input, out } => {
            let mut reader = csv::Reader::from_path(&input)?;
            let points: Vec<ConfigPoint> = reader.deserialize().collect::<Result<_, _>>()?;
            let frontier = efficiency_frontier(&points);
            let distances = knee_distances(&frontier);
            let report = FrontierReport {
                knee: knee_point(&frontier),
                frontier: frontier
                    .into_iter()
                    .zip(distances)
                    .map(|(p, d)| FrontierEntry {
                        label: p.label,
                        cost: p.cost,
                        performance: p.performance,
                        knee_distance: d,
                    })
                    .collect(),
            };
            std::fs::write(&out, serde_json::to_string_pretty(&report)?)?;
        }
        Command::Train {
            config,
            seed,
            strategy,
            position,
            checkpoint,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let merge = match (strategy, position) {
                (Some(s), Some(p)) => Some(MergeSpec::new(s, p)),
                (None, None) => None,
                _ => bail!("--strategy needs --position"),
            };
            let data = PreparedData::from_config(&cfg)?;
            let result = train(&cfg, &data, merge, seed)?;
            if let Some(path) = checkpoint {
                Checkpoint::from_model(&result.model).save(&path)?;
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&serde_json::json!({
                    "label": cell_label(merge),
                    "seed": seed,
                    "metric": result.test_metric,
                    "flops": result.test_flops,
                    "best_epoch": result.best_epoch,
                    "curve": result.curve,
                }))?
            );
        }
        Command::Sweep { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let data = PreparedData::from_config(&cfg)?;
            let report = run_sweep(&cfg, &data)?;
            write_outputs(&report, &out)?;
            for c in &report.cells {
                println!(
                    "{:<14} metric {:>8} flops {:>12} failed {}",
                    c.label,
                    c.mean_metric.map_or("-".into(), |m| format!("{m:.4}")),
                    c.flops,
                    c.failed
                );
            }
            if let Some(k) = &report.knee {
                println!("knee: {} ({}, {:.4})", k.label, k.cost, k.performance);
            }
        }
    }
    Ok(())
}
