// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use medlasa_lab::config::ExperimentConfig;
use medlasa_lab::io::write_atomic;
use medlasa_lab::pipeline;
use medlasa_lab::Result;

#[derive(Parser)]
#[command(
    name = "medlasa",
    version,
    about = "Layer-scaled adapter editing on a synthetic medical benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, audit and split the dataset.
    BuildData(Common),
    /// Train the base model.
    Pretrain(Common),
    /// Causal traces for the edit items.
    Trace(Common),
    /// Train one adapter per edit item.
    Edit(Common),
    /// Score saved adapters.
    Eval(Common),
    /// Strategy and hyper-parameter sweep.
    Ablate(Common),
    /// Render traces as SVG.
    Heatmap(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let (name, common) = match &cli.command {
        Command::BuildData(c) => ("build-data", c),
        Command::Pretrain(c) => ("pretrain", c),
        Command::Trace(c) => ("trace", c),
        Command::Edit(c) => ("edit", c),
        Command::Eval(c) => ("eval", c),
        Command::Ablate(c) => ("ablate", c),
        Command::Heatmap(c) => ("heatmap", c),
    };
    let cfg = load(common)?;
    write_atomic(&cfg.out_dir.join("config.json"), cfg.to_json().as_bytes())?;
    let t = Instant::now();
    match &cli.command {
        Command::BuildData(_) => {
            let d = pipeline::build_data(&cfg)?;
            let [a, b, c] = d.meta.split_sizes;
            eprintln!(
                "{}: {} records ({a}/{b}/{c}), vocabulary {}",
                d.meta.dataset,
                a + b + c,
                d.tokenizer().len()
            );
            for n in &d.meta.notes {
                eprintln!("note: {n}");
            }
        }
        Command::Pretrain(_) => {
            let (_, s) = pipeline::pretrain(&cfg)?;
            eprintln!(
                "pretrained on {} facts: accuracy {:.4} after {} epochs",
                s.facts, s.accuracy, s.epochs
            );
        }
        Command::Trace(_) => {
            let p = pipeline::trace(&cfg)?;
            eprintln!("wrote {} traces", p.len());
        }
        Command::Edit(_) => {
            let logs = pipeline::edit(&cfg)?;
            let steps: usize = logs.iter().map(|l| l.steps).sum();
            eprintln!(
                "{} edits with {}, {steps} steps",
                logs.len(),
                cfg.strategy.as_str()
            );
        }
        Command::Eval(_) => {
            let f = pipeline::eval(&cfg)?;
            let r = &f.row;
            eprintln!(
                "{} eff {:.2} gen {:.2} loc {:.2} flu {:.4} (base {:.4}) avg {:.2}",
                r.strategy.as_str(),
                r.eff,
                r.gen,
                r.locality_mean(),
                r.flu,
                f.pre_edit.fluency,
                r.avg
            );
        }
        Command::Ablate(_) => {
            for r in pipeline::ablate(&cfg)? {
                eprintln!(
                    "{:8} {} a={} r={} seed {}: eff {:.2} gen {:.2} loc {:.2} avg {:.2}",
                    r.strategy.as_str(),
                    r.weights,
                    r.alpha_o,
                    r.r_o,
                    r.seed,
                    r.eff,
                    r.gen,
                    r.locality_mean(),
                    r.avg
                );
            }
        }
        Command::Heatmap(_) => {
            let p = pipeline::heatmap(&cfg)?;
            eprintln!("wrote {} heatmaps", p.len());
        }
    }
    eprintln!("{name} done in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
