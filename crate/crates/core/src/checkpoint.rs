//! On-disk checkpoints: a directory holding `manifest.txt` plus one HAKD
//! tensor file per parameter, buffer and optimizer slot.
//!
//! ```text
//! manifest.txt              key = value lines
//! model/<name>.hakd         backbone parameters
//! buffers/<name>.hakd       normalization running statistics
//! projector/<name>.hakd     projector parameters and running statistics
//! optim/<group>.<slot>/<name>.hakd   optimizer moments (students only)
//! log.csv                   loss log so far (students only)
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::{Arch, ModelParams};
use crate::optim::Optimizer;
use crate::params::ParamStore;
use crate::pipeline::{optimizer_kind, Network, StudentState};
use crate::projection::{Mode, ProjectorParams};
use crate::report::{parse_rows_csv, rows_csv};
use crate::tensor::Tensor;
use crate::tensor_io::{load_tensor, save_tensor};

const FORMAT: &str = "hetero-akd-checkpoint";
const VERSION: &str = "1";

fn save_store(dir: &Path, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, t) in store.iter() {
        save_tensor(dir.join(format!("{name}.hakd")), t)?;
    }
    Ok(())
}

/// Overwrites every tensor of `store` from `dir`, checking shapes.
fn load_store(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let names = store.names().to_vec();
    for (name, slot) in names.iter().zip(store.tensors_mut()) {
        let t = load_tensor(dir.join(format!("{name}.hakd")))?;
        if t.dims() != slot.dims() {
            return Err(Error::Format(format!(
                "checkpoint tensor {name} has shape {:?}, expected {:?}",
                t.dims(),
                slot.dims()
            )));
        }
        *slot = t;
    }
    Ok(())
}

fn save_optimizer(dir: &Path, group: &str, opt: &Optimizer, params: &ParamStore) -> Result<()> {
    for (slot, state) in [("first", &opt.first), ("second", &opt.second)] {
        if state.is_empty() {
            continue;
        }
        let mut store = ParamStore::new();
        for ((name, p), v) in params.iter().zip(state) {
            store.insert(name, Tensor::new(p.dims(), v.clone())?);
        }
        save_store(&dir.join("optim").join(format!("{group}.{slot}")), &store)?;
    }
    Ok(())
}

fn load_optimizer(dir: &Path, group: &str, opt: &mut Optimizer, params: &ParamStore, steps: u64) -> Result<()> {
    opt.steps = steps;
    for (slot, state) in [("first", &mut opt.first), ("second", &mut opt.second)] {
        if state.is_empty() {
            continue;
        }
        let mut store = params.clone();
        load_store(&dir.join("optim").join(format!("{group}.{slot}")), &mut store)?;
        *state = store.tensors().iter().map(|t| t.data().to_vec()).collect();
    }
    Ok(())
}

fn manifest_text(entries: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path)?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed manifest line {line:?} in {}", path.display())))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    if map.get("format").map(String::as_str) != Some(FORMAT) || map.get("version").map(String::as_str) != Some(VERSION) {
        return Err(Error::Format(format!("{} is not a version {VERSION} checkpoint", path.display())));
    }
    Ok(map)
}

fn field<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks {key}")))
}

fn number<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    field(m, key)?
        .parse()
        .map_err(|_| Error::Format(format!("checkpoint manifest field {key} is malformed")))
}

fn network_entries(net: &Network) -> Vec<(&'static str, String)> {
    vec![
        ("format", FORMAT.to_string()),
        ("version", VERSION.to_string()),
        ("arch", net.model.arch.to_string()),
        ("d", net.model.d.to_string()),
        ("classes", net.model.classes.to_string()),
        (
            "projector_mode",
            match net.projector.mode {
                Mode::Train => "train",
                Mode::Eval => "eval",
            }
            .to_string(),
        ),
    ]
}

fn save_network_tensors(dir: &Path, net: &Network) -> Result<()> {
    save_store(&dir.join("model"), &net.model.params)?;
    save_store(&dir.join("buffers"), &net.model.buffers)?;
    let p = &net.projector;
    let mut store = p.params.clone();
    store.insert("running_mean", Tensor::new(&[p.out_dim()], p.bn_running_mean.clone())?);
    store.insert("running_var", Tensor::new(&[p.out_dim()], p.bn_running_var.clone())?);
    save_store(&dir.join("projector"), &store)
}

/// Saves a trained network (used for teachers).
pub fn save_network(dir: &Path, net: &Network) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_network_tensors(dir, net)?;
    std::fs::write(dir.join("manifest.txt"), manifest_text(&network_entries(net)))?;
    Ok(())
}

fn load_network_from(dir: &Path, m: &BTreeMap<String, String>) -> Result<Network> {
    let arch = Arch::parse(field(m, "arch")?).ok_or_else(|| Error::Format("unknown architecture in checkpoint".into()))?;
    let d: usize = number(m, "d")?;
    let classes: usize = number(m, "classes")?;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut model = ModelParams::init(arch, d, classes, &mut rng)?;
    load_store(&dir.join("model"), &mut model.params)?;
    load_store(&dir.join("buffers"), &mut model.buffers)?;
    let mut projector = ProjectorParams::init(d, classes, &mut rng);
    let mut store = projector.params.clone();
    store.insert("running_mean", Tensor::zeros(&[classes]));
    store.insert("running_var", Tensor::zeros(&[classes]));
    load_store(&dir.join("projector"), &mut store)?;
    for (name, t) in store.iter() {
        match name {
            "running_mean" => projector.bn_running_mean = t.data().to_vec(),
            "running_var" => projector.bn_running_var = t.data().to_vec(),
            _ => *projector.params.get_mut(name)? = t.clone(),
        }
    }
    projector.mode = match field(m, "projector_mode")? {
        "train" => Mode::Train,
        "eval" => Mode::Eval,
        other => return Err(Error::Format(format!("unknown projector mode {other:?}"))),
    };
    Ok(Network { model, projector })
}

/// Loads a network saved by [`save_network`] or [`save_student`]. A
/// missing directory is reported as a configuration error.
pub fn load_network(dir: &Path) -> Result<Network> {
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::Config(format!("no checkpoint at {}", dir.display())));
    }
    load_network_from(dir, &read_manifest(dir)?)
}

/// Saves a student mid-schedule, including optimizer state and loss log,
/// so a resumed run continues exactly where this one stopped.
pub fn save_student(dir: &Path, state: &StudentState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_network_tensors(dir, &state.net)?;
    save_optimizer(dir, "model", &state.opt_model, &state.net.model.params)?;
    save_optimizer(dir, "projector", &state.opt_projector, &state.net.projector.params)?;
    std::fs::write(dir.join("log.csv"), rows_csv(&state.rows))?;
    let mut entries = network_entries(&state.net);
    entries.push(("iter", state.iter.to_string()));
    entries.push(("steps_model", state.opt_model.steps.to_string()));
    entries.push(("steps_projector", state.opt_projector.steps.to_string()));
    std::fs::write(dir.join("manifest.txt"), manifest_text(&entries))?;
    Ok(())
}

/// Restores a student saved by [`save_student`]; the optimizers are
/// rebuilt from `cfg` and must match the saved architecture.
pub fn load_student(dir: &Path, cfg: &ExperimentConfig) -> Result<StudentState> {
    if !dir.join("manifest.txt").is_file() {
        return Err(Error::Config(format!("no student checkpoint at {}", dir.display())));
    }
    let m = read_manifest(dir)?;
    let net = load_network_from(dir, &m)?;
    if net.model.arch != cfg.student_arch || net.model.d != cfg.student_d || net.model.classes != cfg.classes {
        return Err(Error::Config(format!(
            "checkpoint holds a {} net with d={} and {} classes, config asks for {} with d={} and {} classes",
            net.model.arch, net.model.d, net.model.classes, cfg.student_arch, cfg.student_d, cfg.classes
        )));
    }
    let kind = optimizer_kind(cfg.student_arch, cfg.momentum, cfg.weight_decay);
    let mut opt_model = Optimizer::new(kind, &net.model.params);
    let mut opt_projector = Optimizer::new(kind, &net.projector.params);
    load_optimizer(dir, "model", &mut opt_model, &net.model.params, number(&m, "steps_model")?)?;
    load_optimizer(dir, "projector", &mut opt_projector, &net.projector.params, number(&m, "steps_projector")?)?;
    let rows = parse_rows_csv(&std::fs::read_to_string(dir.join("log.csv"))?)?;
    Ok(StudentState {
        net,
        opt_model,
        opt_projector,
        iter: number(&m, "iter")?,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::stream_rng;
    use rand::Rng;

    fn perturbed_student(cfg: &ExperimentConfig) -> StudentState {
        let mut s = StudentState::init(cfg).unwrap();
        let mut rng = stream_rng(9, 0, 0);
        for t in s.net.model.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
        }
        for buf in s.opt_model.first.iter_mut().chain(s.opt_model.second.iter_mut()) {
            buf.iter_mut().for_each(|v| *v = rng.gen());
        }
        s.opt_model.steps = 17;
        s.opt_projector.steps = 17;
        s.net.projector.bn_running_mean[1] = 0.25;
        s.iter = 17;
        s
    }

    #[test]
    fn student_roundtrip_is_exact() {
        for arch in [Arch::Conv, Arch::Attention] {
            let cfg = ExperimentConfig {
                student_arch: arch,
                student_d: 8,
                ..Default::default()
            };
            let s = perturbed_student(&cfg);
            let dir = tempfile::tempdir().unwrap();
            save_student(dir.path(), &s).unwrap();
            let r = load_student(dir.path(), &cfg).unwrap();
            assert_eq!(r.net.model, s.net.model);
            assert_eq!(r.net.projector.params, s.net.projector.params);
            assert_eq!(r.net.projector.bn_running_mean, s.net.projector.bn_running_mean);
            assert_eq!(r.opt_model, s.opt_model);
            assert_eq!(r.opt_projector, s.opt_projector);
            assert_eq!(r.iter, 17);
        }
    }

    #[test]
    fn missing_or_mismatched_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_network(&dir.path().join("none")), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            student_d: 8,
            ..Default::default()
        };
        save_student(dir.path(), &StudentState::init(&cfg).unwrap()).unwrap();
        let other = ExperimentConfig {
            student_d: 16,
            ..Default::default()
        };
        assert!(matches!(load_student(dir.path(), &other), Err(Error::Config(_))));
        std::fs::write(dir.path().join("model/head.bias.hakd"), b"junk").unwrap();
        assert!(matches!(load_student(dir.path(), &cfg), Err(Error::Format(_))));
    }
}
