use clap::{Parser, Subcommand, ValueEnum};
use mmtrack::harness::analysis::route_analysis;
use mmtrack::harness::checkpoint::{load_checkpoint, save_checkpoint};
use mmtrack::harness::config::TrainConfig;
use mmtrack::harness::data::{sim_config, EvalSet};
use mmtrack::harness::eval::{evaluate, write_metrics};
use mmtrack::harness::train::{trace_header, trace_line, train_with};
use mmtrack::sim::{corrupt_missing, export_sequence, generate_sequence, Missing, Modality, SpeedLevel};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "mmtrack", version, about = "Train and evaluate a multimodal mixture-of-experts tracker on synthetic sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MissingArg {
    None,
    Rgb,
    X,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write loss_trace.csv plus a checkpoint
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the checkpoint (default: <out>/model.dmt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Track the evaluation sequences and write metrics.csv
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Evaluation seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "none")]
        missing: MissingArg,
        /// Comma-separated modalities (rgb, thermal, depth, event, heldout)
        #[arg(long, default_value = "rgb,thermal,depth,event")]
        modalities: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Write router selection frequencies (t_router.csv, m_router.csv, gate_trace.csv)
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "rgb,thermal,depth,event")]
        modalities: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render one sequence per modality and speed level as raw f32 files
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>) -> mmtrack::Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn parse_modalities(list: &str) -> mmtrack::Result<Vec<Modality>> {
    list.split(',').map(|s| s.trim().parse()).collect()
}

/// Evaluation settings come from the checkpoint unless a config file overrides them.
fn eval_config(ckpt: TrainConfig, config: Option<&Path>, seed: Option<u64>) -> mmtrack::Result<TrainConfig> {
    let mut cfg = match config {
        Some(p) => {
            let file = TrainConfig::load(p)?;
            TrainConfig { data: file.data, eval: file.eval, ..ckpt }
        }
        None => ckpt,
    };
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> mmtrack::Result<()> {
    match cli.command {
        Command::Train { config, seed, checkpoint, out } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            std::fs::create_dir_all(&out)?;
            let mut trace = std::io::BufWriter::new(std::fs::File::create(out.join("loss_trace.csv"))?);
            writeln!(trace, "{}", trace_header())?;
            let mut io_err = None;
            let run = train_with(&cfg, |row| {
                if let Err(e) = writeln!(trace, "{}", trace_line(row)) {
                    io_err.get_or_insert(e);
                }
                if row.step % 100 == 0 || row.step + 1 == cfg.steps {
                    eprintln!("step {:>6}  total {:.5}", row.step, row.total);
                }
            })?;
            if let Some(e) = io_err {
                return Err(e.into());
            }
            trace.flush()?;
            let path = checkpoint.unwrap_or_else(|| out.join("model.dmt"));
            save_checkpoint(&cfg, &run.model, &path)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Eval { checkpoint, config, seed, missing, modalities, out } => {
            let (ckpt_cfg, model) = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(ckpt_cfg, config.as_deref(), seed)?;
            let set = EvalSet::from_config(&cfg, &parse_modalities(&modalities)?);
            let mut seqs = set.sequences(&cfg.data)?;
            let drop = match missing {
                MissingArg::None => None,
                MissingArg::Rgb => Some(Missing::Rgb),
                MissingArg::X => Some(Missing::X),
            };
            if let Some(which) = drop {
                seqs = seqs.iter().map(|s| corrupt_missing(s, which)).collect();
            }
            let report = evaluate(&model, &seqs)?;
            std::fs::create_dir_all(&out)?;
            write_metrics(&report, &out.join("metrics.csv"))?;
            println!(
                "mean_iou {:.4}  auc {:.4}  precision {:.4}  frames {}",
                report.overall.mean_iou, report.overall.auc, report.overall.precision, report.overall.frames
            );
        }
        Command::Analyze { checkpoint, config, seed, modalities, out } => {
            let (ckpt_cfg, model) = load_checkpoint(&checkpoint)?;
            let cfg = eval_config(ckpt_cfg, config.as_deref(), seed)?;
            let set = EvalSet::from_config(&cfg, &parse_modalities(&modalities)?);
            let analysis = route_analysis(&model, &set.sequences(&cfg.data)?)?;
            std::fs::create_dir_all(&out)?;
            analysis.write_router_csvs(&out)?;
            analysis.write_gate_trace(&out.join("gate_trace.csv"))?;
            let (intra, inter) = analysis.routing_similarity();
            println!("routing similarity: intra {intra:.4}  inter {inter:.4}");
        }
        Command::Simulate { config, seed, out } => {
            let cfg = read_config(config.as_deref())?;
            for m in Modality::ALL {
                for s in SpeedLevel::ALL {
                    let seq = generate_sequence(&sim_config(&cfg.data, cfg.eval.frames, s, m, seed))?;
                    export_sequence(&seq, &out.join(format!("{m}_{s}")))?;
                }
            }
            eprintln!("wrote {} sequences to {}", Modality::ALL.len() * SpeedLevel::ALL.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
