//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_network, load_student, save_network, save_student};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{comparison_csv, per_class_comparison};
use crate::pipeline::{
    cka_dataset, cka_report, distill, evaluate, make_datasets, train_teacher, warmup, RunOptions, RunReport,
    StudentState, TeacherCache,
};
use crate::report::{parse_per_class_csv, per_class_csv, rows_csv, write_run_outputs};
use crate::tensor::{DType, Tensor};
use crate::tensor_io::save_tensor;

#[derive(Debug, Parser)]
#[command(name = "hetero-akd", version, about = "Heterogeneous-architecture distillation for segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Key = value configuration file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the student seed from the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dump teaching signals at the first and last distillation iteration.
    #[arg(long)]
    pub dump_intermediates: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train and validation splits.
    GenData(Common),
    /// Train the teacher and save its checkpoint under OUT/checkpoint.
    TrainTeacher(Common),
    /// Train the student on the task loss through the warm-up window.
    Warmup(Common),
    /// Warm up (or resume) and distill a student from a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint directory; overrides `teacher_checkpoint`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Resume from a student checkpoint written by `warmup`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// List classes where the student beats the teacher.
    CompareClasses {
        #[command(flatten)]
        common: Common,
        /// Teacher per-class CSV written by `eval` or `train-teacher`.
        #[arg(long)]
        teacher: PathBuf,
        /// Student per-class CSV written by `eval` or `distill`.
        #[arg(long)]
        student: PathBuf,
    },
    /// Layer-by-layer similarity heatmap between two checkpoints.
    Cka {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Number of samples; defaults to `cka_samples`.
        #[arg(long)]
        samples: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(common: &Common, cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("config.txt"), cfg.to_text())?;
    Ok(common.out.clone())
}

fn save_labels(path: &Path, dims: &[usize], labels: &[u8]) -> Result<()> {
    let t = Tensor::new(dims, labels.iter().map(|&l| l as f64).collect())?.to_dtype(DType::F32);
    save_tensor(path, &t)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let data = make_datasets(&cfg)?;
            for ds in [&data.train, &data.val] {
                let name = ds.split.as_str();
                save_tensor(out.join(format!("{name}_images.hakd")), &ds.images)?;
                save_labels(&out.join(format!("{name}_labels.hakd")), ds.labels.dims(), ds.labels.data())?;
            }
            println!("wrote {} train and {} val samples to {}", data.train.len(), data.val.len(), out.display());
        }
        Command::TrainTeacher(common) => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let data = make_datasets(&cfg)?;
            let (teacher, losses) = train_teacher(&cfg, &data.train)?;
            save_network(&out.join("checkpoint"), &teacher)?;
            let (eval, _) = evaluate(&teacher.model, &data.val)?;
            std::fs::write(out.join("per_class.csv"), per_class_csv(&eval))?;
            let log: String = std::iter::once("iter,task\n".to_string())
                .chain(losses.iter().enumerate().map(|(i, l)| format!("{i},{l:.16e}\n")))
                .collect();
            std::fs::write(out.join("loss.csv"), log)?;
            println!("teacher val mIoU {:.4}", eval.miou);
        }
        Command::Warmup(common) => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let data = make_datasets(&cfg)?;
            let mut state = StudentState::init(&cfg)?;
            warmup(&cfg, &mut state, &data.train)?;
            save_student(&out.join("checkpoint"), &state)?;
            std::fs::write(out.join("run_report.csv"), rows_csv(&state.rows))?;
            println!("warm-up finished after {} iterations", state.iter);
        }
        Command::Distill { common, teacher, resume } => {
            let mut cfg = load_config(&common)?;
            if teacher.is_some() {
                cfg.teacher_checkpoint = teacher;
            }
            let ckpt = cfg
                .teacher_checkpoint
                .clone()
                .ok_or_else(|| Error::Config("distill needs a teacher checkpoint (--teacher or teacher_checkpoint)".into()))?;
            let out = prepare_out(&common, &cfg)?;
            let teacher = load_network(&ckpt)?;
            if teacher.model.classes != cfg.classes {
                return Err(Error::Config(format!(
                    "teacher predicts {} classes, config has {}",
                    teacher.model.classes, cfg.classes
                )));
            }
            let start = std::time::Instant::now();
            let data = make_datasets(&cfg)?;
            let cache = TeacherCache::build(&teacher, &data.train, cfg.flip)?;
            let mut state = match &resume {
                Some(dir) => load_student(dir, &cfg)?,
                None => StudentState::init(&cfg)?,
            };
            warmup(&cfg, &mut state, &data.train)?;
            let opts = RunOptions {
                dump_intermediates: common.dump_intermediates.then(|| out.join("intermediates")),
                instrument: false,
            };
            distill(&cfg, &mut state, &data.train, &cache, &opts)?;
            let (eval, predictions) = evaluate(&state.net.model, &data.val)?;
            save_labels(&out.join("predictions.hakd"), data.val.labels.dims(), &predictions)?;
            save_student(&out.join("checkpoint"), &state)?;
            let report = RunReport {
                rows: state.rows,
                eval,
                seed: cfg.seed,
                config: cfg,
                wall_clock_secs: start.elapsed().as_secs_f64(),
                predictions,
                student: state.net,
            };
            write_run_outputs(&out, &report)?;
            println!("student val mIoU {:.4}", report.eval.miou);
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let net = load_network(&checkpoint)?;
            let data = make_datasets(&cfg)?;
            let (eval, predictions) = evaluate(&net.model, &data.val)?;
            std::fs::write(out.join("per_class.csv"), per_class_csv(&eval))?;
            save_labels(&out.join("predictions.hakd"), data.val.labels.dims(), &predictions)?;
            println!("val mIoU {:.4}", eval.miou);
        }
        Command::CompareClasses { common, teacher, student } => {
            std::fs::create_dir_all(&common.out)?;
            let read = |p: &Path| -> Result<_> { parse_per_class_csv(&std::fs::read_to_string(p)?) };
            let rows = per_class_comparison(&read(&teacher)?.per_class, &read(&student)?.per_class)?;
            let csv = comparison_csv(&rows);
            std::fs::write(common.out.join("class_comparison.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Cka { common, a, b, samples } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&common, &cfg)?;
            let (a, b) = (load_network(&a)?, load_network(&b)?);
            let ds = cka_dataset(&cfg, samples.unwrap_or(cfg.cka_samples))?;
            let heatmap = cka_report(&a.model, &b.model, &ds, cfg.cka_minibatch)?;
            let csv = heatmap.to_csv();
            std::fs::write(out.join("cka.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

/// Parses the process arguments, runs the command and returns the exit
/// code.
pub fn main_with_exit_code() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
