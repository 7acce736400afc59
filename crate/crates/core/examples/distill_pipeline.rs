//! A complete, shortened experiment: train a teacher, then train students
//! with and without distillation from the same seeds and compare.
//!
//! Pass `--full` to use the default schedule (a few minutes on one core).

use hetero_akd::checkpoint::{load_network, save_network};
use hetero_akd::config::ExperimentConfig;
use hetero_akd::metrics::per_class_comparison;
use hetero_akd::pipeline::{evaluate, make_datasets, run_distillation, train_teacher, RunOptions, TeacherCache};
use hetero_akd::report::write_run_outputs;
use hetero_akd::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::default();
    if !std::env::args().any(|a| a == "--full") {
        cfg.teacher_iters = 300;
        cfg.total_iters = 150;
        cfg.teacher_d = 32;
    }
    let data = make_datasets(&cfg)?;
    let (teacher, losses) = train_teacher(&cfg, &data.train)?;
    let (teacher_eval, _) = evaluate(&teacher.model, &data.val)?;
    println!(
        "{} teacher: loss {:.3} -> {:.3}, val mIoU {:.4}",
        cfg.teacher_arch,
        losses[0],
        losses[losses.len() - 1],
        teacher_eval.miou
    );

    let out = std::env::temp_dir().join("hetero_akd_pipeline");
    save_network(&out.join("teacher"), &teacher)?;
    let teacher = load_network(&out.join("teacher"))?;
    let cache = TeacherCache::build(&teacher, &data.train, cfg.flip)?;

    for seed in 0..2 {
        let mut base = cfg.clone();
        base.seed = seed;
        base.distill.lambda1 = 0.0;
        base.distill.lambda2 = 0.0;
        let mut full = cfg.clone();
        full.seed = seed;
        let b = run_distillation(&base, &data, &cache, &RunOptions::default())?;
        let d = run_distillation(&full, &data, &cache, &RunOptions::default())?;
        let wins = per_class_comparison(&teacher_eval.per_class, &d.eval.per_class)?;
        println!(
            "seed {seed}: {} student without distillation {:.4}, distilled {:.4}; classes beating the teacher: {:?}",
            cfg.student_arch,
            b.eval.miou,
            d.eval.miou,
            wins.iter().map(|r| r.class).collect::<Vec<_>>()
        );
        write_run_outputs(&out.join(format!("seed_{seed}")), &d)?;
    }
    println!("reports written under {}", out.display());
    Ok(())
}
