//! Flat `key = value` experiment configuration.
//!
//! One key per line, `#` starts a comment, blank lines are skipped and
//! unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::{DistillConfig, KdDirection};
use crate::models::Arch;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Student initialization, batch order and augmentation.
    pub seed: u64,
    pub data_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub flip: bool,

    pub teacher_arch: Arch,
    pub teacher_d: usize,
    pub teacher_iters: usize,
    pub teacher_lr: f64,
    pub teacher_weight_decay: f64,
    pub teacher_seed: u64,
    pub teacher_checkpoint: Option<PathBuf>,

    pub student_arch: Arch,
    pub student_d: usize,
    pub total_iters: usize,
    pub student_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub projector_lr: f64,

    pub distill: DistillConfig,

    pub cka_samples: usize,
    pub cka_minibatch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_seed: 0,
            train_samples: 200,
            val_samples: 50,
            height: 32,
            width: 32,
            classes: 3,
            batch_size: 8,
            flip: true,
            teacher_arch: Arch::Attention,
            teacher_d: 64,
            teacher_iters: 1200,
            teacher_lr: 2e-3,
            teacher_weight_decay: 1e-2,
            teacher_seed: 1000,
            teacher_checkpoint: None,
            student_arch: Arch::Conv,
            student_d: 32,
            total_iters: 600,
            student_lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            projector_lr: 5e-3,
            distill: DistillConfig::default(),
            cka_samples: crate::cka::DEFAULT_SAMPLES,
            cka_minibatch: crate::cka::DEFAULT_MINIBATCH,
        }
    }
}

const KEYS: &[&str] = &[
    "seed",
    "data_seed",
    "train_samples",
    "val_samples",
    "height",
    "width",
    "classes",
    "batch_size",
    "flip",
    "teacher_arch",
    "teacher_d",
    "teacher_iters",
    "teacher_lr",
    "teacher_weight_decay",
    "teacher_seed",
    "teacher_checkpoint",
    "student_arch",
    "student_d",
    "total_iters",
    "student_lr",
    "momentum",
    "weight_decay",
    "projector_lr",
    "tau",
    "lambda1",
    "lambda2",
    "kd_direction",
    "warmup_fraction",
    "tau2_scaling",
    "cka_samples",
    "cka_minibatch",
];

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("invalid value {raw:?} for key {key}")))
}

fn parse_arch(key: &str, raw: &str) -> Result<Arch> {
    Arch::parse(raw).ok_or_else(|| Error::Config(format!("{key} must be conv or attention, got {raw:?}")))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        let mut cfg = Self::default();
        if let Some(v) = map.get("teacher_arch") {
            cfg.teacher_arch = parse_arch("teacher_arch", v)?;
            if cfg.teacher_arch == Arch::Conv {
                cfg.distill = DistillConfig::conv_teacher();
            }
        }
        for (k, v) in &map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "data_seed" => self.data_seed = parse_value(key, v)?,
            "train_samples" => self.train_samples = parse_value(key, v)?,
            "val_samples" => self.val_samples = parse_value(key, v)?,
            "height" => self.height = parse_value(key, v)?,
            "width" => self.width = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "flip" => self.flip = parse_value(key, v)?,
            "teacher_arch" => self.teacher_arch = parse_arch(key, v)?,
            "teacher_d" => self.teacher_d = parse_value(key, v)?,
            "teacher_iters" => self.teacher_iters = parse_value(key, v)?,
            "teacher_lr" => self.teacher_lr = parse_value(key, v)?,
            "teacher_weight_decay" => self.teacher_weight_decay = parse_value(key, v)?,
            "teacher_seed" => self.teacher_seed = parse_value(key, v)?,
            "teacher_checkpoint" => self.teacher_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "student_arch" => self.student_arch = parse_arch(key, v)?,
            "student_d" => self.student_d = parse_value(key, v)?,
            "total_iters" => self.total_iters = parse_value(key, v)?,
            "student_lr" => self.student_lr = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "projector_lr" => self.projector_lr = parse_value(key, v)?,
            "tau" => self.distill.tau = parse_value(key, v)?,
            "lambda1" => self.distill.lambda1 = parse_value(key, v)?,
            "lambda2" => self.distill.lambda2 = parse_value(key, v)?,
            "kd_direction" => {
                self.distill.kd_direction = KdDirection::parse(v).ok_or_else(|| {
                    Error::Config(format!("kd_direction must be teacher-to-student or student-to-teacher, got {v:?}"))
                })?
            }
            "warmup_fraction" => self.distill.warmup_fraction = parse_value(key, v)?,
            "tau2_scaling" => self.distill.tau2_scaling = parse_value(key, v)?,
            "cka_samples" => self.cka_samples = parse_value(key, v)?,
            "cka_minibatch" => self.cka_minibatch = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.distill.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes must lie in [2, 255], got {}", self.classes));
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return bad(format!("height and width must be positive multiples of 4, got {}x{}", self.height, self.width));
        }
        if self.batch_size == 0 || self.batch_size > self.train_samples {
            return bad(format!(
                "batch_size must lie in [1, train_samples], got {} with {} samples",
                self.batch_size, self.train_samples
            ));
        }
        if self.val_samples == 0 {
            return bad("val_samples must be positive".into());
        }
        for (k, v) in [
            ("teacher_lr", self.teacher_lr),
            ("student_lr", self.student_lr),
            ("projector_lr", self.projector_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        for (k, v) in [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("teacher_weight_decay", self.teacher_weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be non-negative, got {v}"));
            }
        }
        if self.cka_minibatch < crate::cka::MIN_MINIBATCH {
            return bad(format!("cka_minibatch must be >= 4, got {}", self.cka_minibatch));
        }
        Ok(())
    }

    /// Iterations of task-only training before distillation starts.
    pub fn warmup_iters(&self) -> usize {
        (self.distill.warmup_fraction * self.total_iters as f64).round() as usize
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.distill;
        let ckpt = self
            .teacher_checkpoint
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let values = [
            self.seed.to_string(),
            self.data_seed.to_string(),
            self.train_samples.to_string(),
            self.val_samples.to_string(),
            self.height.to_string(),
            self.width.to_string(),
            self.classes.to_string(),
            self.batch_size.to_string(),
            self.flip.to_string(),
            self.teacher_arch.to_string(),
            self.teacher_d.to_string(),
            self.teacher_iters.to_string(),
            self.teacher_lr.to_string(),
            self.teacher_weight_decay.to_string(),
            self.teacher_seed.to_string(),
            ckpt,
            self.student_arch.to_string(),
            self.student_d.to_string(),
            self.total_iters.to_string(),
            self.student_lr.to_string(),
            self.momentum.to_string(),
            self.weight_decay.to_string(),
            self.projector_lr.to_string(),
            d.tau.to_string(),
            d.lambda1.to_string(),
            d.lambda2.to_string(),
            d.kd_direction.as_str().to_string(),
            d.warmup_fraction.to_string(),
            d.tau2_scaling.to_string(),
            self.cka_samples.to_string(),
            self.cka_minibatch.to_string(),
        ];
        KEYS.iter().copied().zip(values).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
