use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ditto2::autodiff::{AdamConfig, Tensor};
use ditto2::bench::{
    embed_fit, frechet_distance, sweep, ModelZoo, RecordAppender, RunRecord, SweepGrid, SynthDatasetSpec,
};
use ditto2::controls::{read_spectrogram, read_target, write_spectrogram, Task};
use ditto2::diffusion::{train_teacher, TrainConfig};
use ditto2::distill::{distill, write_log_csv, DistillConfig};
use ditto2::ito::{run_method, ItoConfig, Method, OptSteps, DEFAULT_GAMMA, DEFAULT_K, DEFAULT_LR};
use ditto2::scorenet::{load_checkpoint, save_checkpoint, Condition};
use ditto2::Result;

#[derive(Parser)]
#[command(name = "ditto2", version, about = "Toy diffusion distillation and latent optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher noise predictor on synthetic data.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of per-epoch mean loss.
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Distill a trained teacher into a one-step student.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 4000)]
        data_size: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Optimize an initial latent for a control target.
    Optimize(OptimizeArgs),
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    method: Method,
    /// Teacher checkpoint for `ditto`, student checkpoint otherwise.
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "1")]
    steps_opt: OptSteps,
    #[arg(long, default_value_t = 1)]
    steps_decode: usize,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    #[arg(long, default_value_t = 4.0)]
    w: f64,
    /// `null` or `TEMPO,MOOD`.
    #[arg(long, default_value = "null")]
    cond: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a speed/quality grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fréchet distance between two folders of spectrogram CSVs.
    Fad {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Write a synthetic dataset as spectrogram CSVs plus `tags.csv`.
    Data {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_cond(s: &str) -> Result<Condition> {
    if s == "null" {
        return Ok(Condition::Null);
    }
    let bad = || ditto2::Error::InvalidArgument(format!("condition '{s}' is not 'null' or 'TEMPO,MOOD'"));
    let (a, b) = s.split_once(',').ok_or_else(bad)?;
    let c = Condition::tags(a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    c.validate()?;
    Ok(c)
}

fn load_folder(dir: &Path) -> Result<Tensor> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv") && p.file_name().is_some_and(|n| n != "tags.csv"))
        .collect();
    paths.sort();
    let xs = paths.iter().map(|p| read_spectrogram(p)).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&xs)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out, loss_log } => {
            let cfg = config.as_deref().map(TrainConfig::from_toml_file).transpose()?.unwrap_or_default();
            let data = SynthDatasetSpec::new(cfg.dataset_size, cfg.seed).generate();
            let trained = train_teacher(&data, &cfg)?;
            save_checkpoint(&trained.model, &out)?;
            if let Some(p) = loss_log {
                let mut w = csv::Writer::from_path(p)?;
                w.write_record(["epoch", "loss"])?;
                for (i, l) in trained.loss_curve.iter().enumerate() {
                    w.write_record([(i + 1).to_string(), l.to_string()])?;
                }
                w.flush()?;
            }
            println!(
                "trained {} parameters; final epoch loss {:.5}",
                trained.model.param_count(),
                trained.loss_curve.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Distill { config, teacher, out, log, data_size, data_seed } => {
            let cfg = config.as_deref().map(DistillConfig::from_toml_file).transpose()?.unwrap_or_default();
            let teacher = load_checkpoint(&teacher)?;
            let data = SynthDatasetSpec::new(data_size, data_seed).generate();
            let d = distill(&teacher, &data, &cfg)?;
            save_checkpoint(&d.shadow, &out)?;
            if let Some(p) = log {
                write_log_csv(&p, &d.log)?;
            }
            println!("{} distillation: {} forward calls", cfg.method, d.calls.forward);
        }
        Command::Optimize(a) => {
            let model = load_checkpoint(&a.model)?;
            let target = read_target(a.task, &a.target)?;
            let config = ItoConfig {
                k: a.k,
                m: a.steps_opt,
                t_decode: a.steps_decode,
                gamma: a.gamma,
                w: a.w,
                cond: parse_cond(&a.cond)?,
                adam: AdamConfig::with_lr(a.lr),
                seed: a.seed,
            };
            let r = run_method(&model, a.method, &target, &config)?;
            fs::create_dir_all(&a.out)?;
            write_spectrogram(&a.out.join("latent.csv"), &r.latent)?;
            write_spectrogram(&a.out.join("x0.csv"), &r.x0)?;
            let mut w = csv::Writer::from_path(a.out.join("trajectory.csv"))?;
            w.write_record(["iteration", "m", "loss"])?;
            for (i, (l, m)) in r.loss_trajectory.iter().zip(&r.m_schedule).enumerate() {
                w.write_record([i.to_string(), m.to_string(), l.to_string()])?;
            }
            w.flush()?;
            let metric = target.metric(&r.x0)?;
            let record = RunRecord::from_result(a.task, &config, &r, metric, f64::NAN);
            RecordAppender::open(&a.out.join("record.csv"))?.append(&record)?;
            println!(
                "{} {}: loss {:.5} -> {:.5}, metric {:.5}, {} accounted units, {:.3}s",
                a.task,
                a.method,
                r.loss_trajectory.first().copied().unwrap_or(f64::NAN),
                r.final_loss,
                metric,
                r.accounted_units,
                r.wall_clock_s
            );
        }
        Command::Bench(BenchCommand::Sweep { grid, out }) => {
            let grid = SweepGrid::from_toml_file(&grid)?;
            let zoo = ModelZoo::load(&grid)?;
            let rows = sweep(&grid, &zoo, &out)?;
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            println!("{} runs, {failed} failed; results in {}", rows.len(), out.display());
        }
        Command::Bench(BenchCommand::Fad { samples, reference }) => {
            let a = embed_fit(&load_folder(&samples)?)?;
            let b = embed_fit(&load_folder(&reference)?)?;
            println!("{:.6}", frechet_distance(&a, &b)?);
        }
        Command::Bench(BenchCommand::Data { spec, out }) => {
            let spec = SynthDatasetSpec::from_toml_file(&spec)?;
            fs::create_dir_all(&out)?;
            let mut tags = csv::Writer::from_path(out.join("tags.csv"))?;
            tags.write_record(["index", "tempo", "mood"])?;
            for i in 0..spec.count {
                let (x, c) = spec.sample(i as u64);
                write_spectrogram(&out.join(format!("sample_{i:05}.csv")), &x)?;
                if let Condition::Tags { tempo, mood } = c {
                    tags.write_record([i.to_string(), tempo.to_string(), mood.to_string()])?;
                }
            }
            tags.flush()?;
            println!("wrote {} samples to {}", spec.count, out.display());
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
