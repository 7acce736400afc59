//! End-to-end experiment stages: data, teacher training, student warm-up,
//! distillation, evaluation and representation similarity.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cka::{self, CkaHeatmap, LayerStreams};
use crate::config::ExperimentConfig;
use crate::data::{gen_synthetic_with, ShapeStyle, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::losses::{kd_loss_var, task_loss_var, total_loss_var};
use crate::mechanisms::{hakd_loss_var, TeachingSignals};
use crate::metrics::{evaluate_miou, MiouReport};
use crate::models::{Arch, ModelParams};
use crate::optim::{collect_grads, poly_lr, with_diagnostics, Optimizer, OptimizerKind};
use crate::projection::{align_spatial, project_to_logits, resize_bilinear, Mode, ProjectorParams, ResampleMethod};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::tensor_io::save_tensor;

const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_VAL_DATA: u64 = 2;
const STREAM_MODEL_INIT: u64 = 3;
const STREAM_PROJECTOR_INIT: u64 = 4;
const STREAM_ORDER: u64 = 5;
const STREAM_FLIP: u64 = 6;
const STREAM_CKA: u64 = 7;

/// Independent generator for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
}

pub fn make_datasets(cfg: &ExperimentConfig) -> Result<Datasets> {
    make_datasets_with(cfg, &ShapeStyle::default())
}

pub fn make_datasets_with(cfg: &ExperimentConfig, style: &ShapeStyle) -> Result<Datasets> {
    let seed_of = |stream| stream_rng(cfg.data_seed, stream, 0).next_u64();
    let gen = |stream, n, split| gen_synthetic_with(seed_of(stream), n, cfg.height, cfg.width, cfg.classes, split, style);
    Ok(Datasets {
        train: gen(STREAM_TRAIN_DATA, cfg.train_samples, Split::Train)?,
        val: gen(STREAM_VAL_DATA, cfg.val_samples, Split::Val)?,
    })
}

/// A backbone together with its logits-space projector.
#[derive(Debug, Clone)]
pub struct Network {
    pub model: ModelParams,
    pub projector: ProjectorParams,
}

impl Network {
    pub fn init(arch: Arch, d: usize, classes: usize, seed: u64) -> Result<Self> {
        let model = ModelParams::init(arch, d, classes, &mut stream_rng(seed, STREAM_MODEL_INIT, 0))?;
        let projector = ProjectorParams::init(d, classes, &mut stream_rng(seed, STREAM_PROJECTOR_INIT, 0));
        Ok(Self { model, projector })
    }
}

pub fn optimizer_kind(arch: Arch, momentum: f64, weight_decay: f64) -> OptimizerKind {
    match arch {
        Arch::Conv => OptimizerKind::sgd(momentum, weight_decay),
        Arch::Attention => OptimizerKind::adamw(weight_decay),
    }
}

/// Sample indices and flip flags of iteration `iter`.
pub fn batch_plan(seed: u64, iter: usize, n: usize, batch: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let per_epoch = (n / batch).max(1);
    let (epoch, slot) = (iter / per_epoch, iter % per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, STREAM_ORDER, epoch as u64));
    let idx = order[slot * batch..(slot * batch + batch).min(n)].to_vec();
    let mut rng = stream_rng(seed, STREAM_FLIP, iter as u64);
    let flips = idx.iter().map(|_| flip && rng.gen_bool(0.5)).collect();
    (idx, flips)
}

/// One row of the per-iteration loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRow {
    pub iter: usize,
    pub lr: f64,
    pub task: f64,
    pub kd: f64,
    pub hakd: f64,
    pub total: f64,
    /// L2 norm of the gradient the distillation terms alone send to the
    /// backbone; only filled when instrumentation is enabled.
    pub distill_grad_norm: f64,
}

/// Optimizes a network with the task loss on its output plus a
/// calibration loss for the projector on detached features. Used for the
/// teacher and for the student's warm-up; the calibration term never
/// reaches the backbone.
struct SupervisedStep<'a> {
    net: &'a mut Network,
    opt_model: &'a mut Optimizer,
    opt_proj: &'a mut Optimizer,
}

impl SupervisedStep<'_> {
    fn run(self, images: &Tensor, labels: &LabelMap, lr: f64, proj_lr: f64, batch_id: usize) -> Result<f64> {
        let net = self.net;
        let (h, w) = (images.dims()[1], images.dims()[2]);
        let mut tape = Tape::new();
        let mv = net.model.params.bind(&mut tape, true);
        let pv = net.projector.params.bind(&mut tape, true);
        let result = (|| -> Result<_> {
            let x = tape.constant(images.clone());
            let out = net.model.forward_tape(&mut tape, &mv, x, Mode::Train)?;
            let task = task_loss_var(&mut tape, out.logits, labels)?;
            let feature = tape.detach(out.feature);
            let (z, stats) = net.projector.forward_logits(&mut tape, &pv, feature)?;
            let z = resize_bilinear(&mut tape, z, h, w)?;
            let calib = task_loss_var(&mut tape, z, labels)?;
            let loss = tape.add(task, calib)?;
            let grads = tape.backward(loss)?;
            Ok((
                tape.value(task).item()?,
                collect_grads(&grads, &mv, &net.model.params),
                collect_grads(&grads, &pv, &net.projector.params),
                out.bn_updates,
                stats,
            ))
        })();
        let (task, gm, gp, bn, stats) = with_diagnostics(result, batch_id, &net.model.params)?;
        net.model.apply_bn_updates(&bn)?;
        if let Some(s) = stats {
            net.projector.apply_batch_stats(&s);
        }
        with_diagnostics(self.opt_model.step(&mut net.model.params, &gm, lr), batch_id, &net.model.params)?;
        self.opt_proj.step(&mut net.projector.params, &gp, proj_lr)?;
        Ok(task)
    }
}

/// Trains the teacher network from scratch; returns it with its loss
/// curve.
pub fn train_teacher(cfg: &ExperimentConfig, train: &SyntheticDataset) -> Result<(Network, Vec<f64>)> {
    let mut net = Network::init(cfg.teacher_arch, cfg.teacher_d, cfg.classes, cfg.teacher_seed)?;
    let kind = optimizer_kind(cfg.teacher_arch, cfg.momentum, cfg.teacher_weight_decay);
    let mut opt_model = Optimizer::new(kind, &net.model.params);
    let mut opt_proj = Optimizer::new(kind, &net.projector.params);
    let mut losses = Vec::with_capacity(cfg.teacher_iters);
    for iter in 0..cfg.teacher_iters {
        let (idx, flips) = batch_plan(cfg.teacher_seed, iter, train.len(), cfg.batch_size, cfg.flip);
        let (images, labels) = train.batch(&idx, &flips)?;
        let lr = poly_lr(cfg.teacher_lr, iter, cfg.teacher_iters);
        let step = SupervisedStep {
            net: &mut net,
            opt_model: &mut opt_model,
            opt_proj: &mut opt_proj,
        };
        losses.push(step.run(&images, &labels, lr, lr, iter)?);
    }
    net.projector.mode = Mode::Eval;
    Ok((net, losses))
}

/// Student network, its optimizers and the position in the schedule.
#[derive(Debug, Clone)]
pub struct StudentState {
    pub net: Network,
    pub opt_model: Optimizer,
    pub opt_projector: Optimizer,
    pub iter: usize,
    pub rows: Vec<IterRow>,
}

impl StudentState {
    pub fn init(cfg: &ExperimentConfig) -> Result<Self> {
        let net = Network::init(cfg.student_arch, cfg.student_d, cfg.classes, cfg.seed)?;
        let kind = optimizer_kind(cfg.student_arch, cfg.momentum, cfg.weight_decay);
        Ok(Self {
            opt_model: Optimizer::new(kind, &net.model.params),
            opt_projector: Optimizer::new(kind, &net.projector.params),
            net,
            iter: 0,
            rows: Vec::new(),
        })
    }
}

/// Task-only training of the student up to the end of the warm-up window.
pub fn warmup(cfg: &ExperimentConfig, state: &mut StudentState, train: &SyntheticDataset) -> Result<()> {
    let end = cfg.warmup_iters().min(cfg.total_iters);
    while state.iter < end {
        let iter = state.iter;
        let (idx, flips) = batch_plan(cfg.seed, iter, train.len(), cfg.batch_size, cfg.flip);
        let (images, labels) = train.batch(&idx, &flips)?;
        let lr = poly_lr(cfg.student_lr, iter, cfg.total_iters);
        let proj_lr = poly_lr(cfg.projector_lr, iter, cfg.total_iters);
        let step = SupervisedStep {
            net: &mut state.net,
            opt_model: &mut state.opt_model,
            opt_proj: &mut state.opt_projector,
        };
        let task = step.run(&images, &labels, lr, proj_lr, iter)?;
        state.rows.push(IterRow {
            iter,
            lr,
            task,
            kd: 0.0,
            hakd: 0.0,
            total: task,
            distill_grad_norm: 0.0,
        });
        state.iter += 1;
    }
    Ok(())
}

/// Teacher outputs for every training sample in both orientations.
#[derive(Debug, Clone)]
pub struct TeacherCache {
    /// `[H, W, C]` output logits, indexed by `2 * sample + flip`.
    out_logits: Vec<Tensor>,
    /// `[H, W, C]` projected logits aligned to label resolution.
    aligned: Vec<Tensor>,
}

impl TeacherCache {
    pub fn build(teacher: &Network, train: &SyntheticDataset, flip: bool) -> Result<Self> {
        let mut projector = teacher.projector.clone();
        projector.mode = Mode::Eval;
        let (h, w) = (train.height(), train.width());
        let n = train.len();
        let mut out_logits = vec![Tensor::zeros(&[0]); 2 * n];
        let mut aligned = out_logits.clone();
        let chunk = 25;
        for flipped in [false, true] {
            if flipped && !flip {
                continue;
            }
            for start in (0..n).step_by(chunk) {
                let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
                let (images, _) = train.batch(&idx, &vec![flipped; idx.len()])?;
                let out = teacher.model.forward(&images, Mode::Eval)?;
                let z = project_to_logits(&out.last_feature, &mut projector)?;
                let z = align_spatial(&z, (h, w), ResampleMethod::Bilinear)?;
                let c = z.last_dim();
                for (k, &i) in idx.iter().enumerate() {
                    let slot = 2 * i + flipped as usize;
                    let per = h * w * c;
                    out_logits[slot] = Tensor::new(&[h, w, c], out.out_logits.data()[k * per..(k + 1) * per].to_vec())?;
                    aligned[slot] = Tensor::new(&[h, w, c], z.data()[k * per..(k + 1) * per].to_vec())?;
                }
            }
        }
        Ok(Self { out_logits, aligned })
    }

    fn gather(maps: &[Tensor], idx: &[usize], flips: &[bool]) -> Result<Tensor> {
        let first = &maps[2 * idx[0] + flips[0] as usize];
        let mut dims = vec![idx.len()];
        dims.extend_from_slice(first.dims());
        let mut data = Vec::with_capacity(first.len() * idx.len());
        for (&i, &f) in idx.iter().zip(flips) {
            let t = &maps[2 * i + f as usize];
            if t.is_empty() {
                return Err(Error::Contract(format!("teacher cache has no entry for sample {i}")));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(&dims, data)
    }

    pub fn batch(&self, idx: &[usize], flips: &[bool]) -> Result<(Tensor, Tensor)> {
        Ok((Self::gather(&self.out_logits, idx, flips)?, Self::gather(&self.aligned, idx, flips)?))
    }
}

/// Extra behaviour of a distillation run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for teaching-signal dumps at the first and last
    /// distillation iteration.
    pub dump_intermediates: Option<PathBuf>,
    /// Record the gradient norm sent to the backbone by the distillation
    /// terms alone (costs one extra backward pass per iteration).
    pub instrument: bool,
}

fn dump_signals(dir: &Path, iter: usize, sig: &TeachingSignals, z_s: &Tensor) -> Result<()> {
    let dir = dir.join(format!("iter_{iter:05}"));
    std::fs::create_dir_all(&dir)?;
    for (name, t) in sig.named_maps() {
        save_tensor(dir.join(format!("{name}.hakd")), t)?;
    }
    save_tensor(dir.join("student_aligned_logits.hakd"), z_s)
}

/// Joint optimization with task, logits KD and reweighted distillation
/// terms from the current iteration to the end of the schedule.
pub fn distill(
    cfg: &ExperimentConfig,
    state: &mut StudentState,
    train: &SyntheticDataset,
    teacher: &TeacherCache,
    opts: &RunOptions,
) -> Result<()> {
    let d = &cfg.distill;
    let first = state.iter;
    while state.iter < cfg.total_iters {
        let iter = state.iter;
        let (idx, flips) = batch_plan(cfg.seed, iter, train.len(), cfg.batch_size, cfg.flip);
        let (images, labels) = train.batch(&idx, &flips)?;
        let lr = poly_lr(cfg.student_lr, iter, cfg.total_iters);
        let proj_lr = poly_lr(cfg.projector_lr, iter, cfg.total_iters);
        let net = &mut state.net;
        let (h, w) = (images.dims()[1], images.dims()[2]);
        let mut tape = Tape::new();
        let mv = net.model.params.bind(&mut tape, true);
        let pv = net.projector.params.bind(&mut tape, true);
        let need_teacher = d.lambda1 > 0.0 || d.lambda2 > 0.0;
        let result = (|| -> Result<_> {
            let x = tape.constant(images.clone());
            let out = net.model.forward_tape(&mut tape, &mv, x, Mode::Train)?;
            let task = task_loss_var(&mut tape, out.logits, &labels)?;
            let (t_out, t_aligned) = if need_teacher {
                teacher.batch(&idx, &flips)?
            } else {
                (Tensor::zeros(&[0]), Tensor::zeros(&[0]))
            };
            let kd = if d.lambda1 > 0.0 {
                Some(kd_loss_var(&mut tape, out.logits, &t_out, d.tau, d.kd_direction, Some(&labels))?)
            } else {
                None
            };
            let mut proj_stats = None;
            let hakd = if d.lambda2 > 0.0 {
                let (z, stats) = net.projector.forward_logits(&mut tape, &pv, out.feature)?;
                proj_stats = stats;
                let z_s = resize_bilinear(&mut tape, z, h, w)?;
                let sig = TeachingSignals::compute(&t_aligned, tape.value(z_s), &labels)?;
                if let Some(dir) = &opts.dump_intermediates {
                    if iter == first || iter + 1 == cfg.total_iters {
                        dump_signals(dir, iter, &sig, tape.value(z_s))?;
                    }
                }
                Some(hakd_loss_var(&mut tape, &sig.hybrid, z_s, &sig.weights, d.tau, Some(&labels))?)
            } else {
                None
            };
            let total = total_loss_var(&mut tape, task, kd, hakd, d)?;
            let grads = tape.backward(total)?;
            let mut distill_norm = 0.0;
            if opts.instrument {
                if let Some(dv) = total_loss_var_distill_only(&mut tape, kd, hakd, d)? {
                    let g = tape.backward(dv)?;
                    distill_norm = collect_grads(&g, &mv, &net.model.params)
                        .iter()
                        .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
                        .sum::<f64>()
                        .sqrt();
                }
            }
            let value = |v: Option<crate::tape::Var>| v.map(|v| tape.value(v).data()[0]).unwrap_or(0.0);
            Ok((
                IterRow {
                    iter,
                    lr,
                    task: tape.value(task).item()?,
                    kd: value(kd),
                    hakd: value(hakd),
                    total: tape.value(total).item()?,
                    distill_grad_norm: distill_norm,
                },
                collect_grads(&grads, &mv, &net.model.params),
                collect_grads(&grads, &pv, &net.projector.params),
                out.bn_updates,
                proj_stats,
            ))
        })();
        let (row, gm, gp, bn, stats) = with_diagnostics(result, iter, &net.model.params)?;
        net.model.apply_bn_updates(&bn)?;
        if let Some(s) = stats {
            net.projector.apply_batch_stats(&s);
        }
        with_diagnostics(state.opt_model.step(&mut net.model.params, &gm, lr), iter, &net.model.params)?;
        if d.lambda2 > 0.0 {
            state.opt_projector.step(&mut net.projector.params, &gp, proj_lr)?;
        }
        state.rows.push(row);
        state.iter += 1;
    }
    Ok(())
}

fn total_loss_var_distill_only(
    tape: &mut Tape,
    kd: Option<crate::tape::Var>,
    hakd: Option<crate::tape::Var>,
    d: &crate::losses::DistillConfig,
) -> Result<Option<crate::tape::Var>> {
    let mut acc = None;
    for (term, w) in [(kd, d.kd_weight()), (hakd, d.hakd_weight())] {
        if let Some(v) = term {
            let s = tape.scale(v, w)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
    }
    Ok(acc)
}

/// Eval-mode predictions for a whole dataset, `[N * H * W]` class ids.
pub fn predict_dataset(model: &ModelParams, ds: &SyntheticDataset) -> Result<Vec<u8>> {
    let mut preds = Vec::with_capacity(ds.labels.len());
    let n = ds.len();
    for start in (0..n).step_by(25) {
        let idx: Vec<usize> = (start..(start + 25).min(n)).collect();
        let (images, _) = ds.batch(&idx, &vec![false; idx.len()])?;
        preds.extend(model.predict(&images)?);
    }
    Ok(preds)
}

pub fn evaluate(model: &ModelParams, ds: &SyntheticDataset) -> Result<(MiouReport, Vec<u8>)> {
    let preds = predict_dataset(model, ds)?;
    Ok((evaluate_miou(&preds, ds.labels.data(), ds.classes)?, preds))
}

/// Everything recorded about one student run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<IterRow>,
    pub eval: MiouReport,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub wall_clock_secs: f64,
    pub predictions: Vec<u8>,
    pub student: Network,
}

/// Warm-up followed by distillation and evaluation on the validation split.
pub fn run_distillation(
    cfg: &ExperimentConfig,
    data: &Datasets,
    teacher: &TeacherCache,
    opts: &RunOptions,
) -> Result<RunReport> {
    let start = Instant::now();
    let mut state = StudentState::init(cfg)?;
    warmup(cfg, &mut state, &data.train)?;
    distill(cfg, &mut state, &data.train, teacher, opts)?;
    let (eval, predictions) = evaluate(&state.net.model, &data.val)?;
    Ok(RunReport {
        rows: state.rows,
        eval,
        config: cfg.clone(),
        seed: cfg.seed,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        predictions,
        student: state.net,
    })
}

/// Samples drawn for similarity analysis: `cka_samples` fresh synthetic
/// images from the data seed.
pub fn cka_dataset(cfg: &ExperimentConfig, samples: usize) -> Result<SyntheticDataset> {
    let seed = stream_rng(cfg.data_seed, STREAM_CKA, 0).next_u64();
    gen_synthetic_with(seed, samples, cfg.height, cfg.width, cfg.classes, Split::Val, &ShapeStyle::default())
}

/// Pooled per-layer features of `model` on `ds`, split into minibatches of
/// size `n`.
pub fn layer_streams(model: &ModelParams, ds: &SyntheticDataset, n: usize) -> Result<LayerStreams> {
    let mut pooled: Vec<(&'static str, Vec<f64>, usize)> = Vec::new();
    let total = ds.len();
    for start in (0..total).step_by(50) {
        let idx: Vec<usize> = (start..(start + 50).min(total)).collect();
        let (images, _) = ds.batch(&idx, &vec![false; idx.len()])?;
        let out = model.forward(&images, Mode::Eval)?;
        for (k, (name, t)) in out.taps.iter().enumerate() {
            let p = cka::pool_features(t)?;
            if pooled.len() <= k {
                pooled.push((name, Vec::new(), p.dims()[1]));
            }
            pooled[k].1.extend_from_slice(p.data());
        }
    }
    pooled
        .into_iter()
        .map(|(name, data, d)| {
            let t = Tensor::new(&[data.len() / d, d], data)?;
            Ok((name.to_string(), cka::minibatches(&t, n)?))
        })
        .collect()
}

pub fn cka_report(a: &ModelParams, b: &ModelParams, ds: &SyntheticDataset, n: usize) -> Result<CkaHeatmap> {
    cka::cka_heatmap(&layer_streams(a, ds, n)?, &layer_streams(b, ds, n)?)
}
