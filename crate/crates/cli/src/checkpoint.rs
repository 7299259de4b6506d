//! Single-file checkpoints.
//!
//! Layout (little-endian): the 8-byte magic `FDNCKPT1`, a `u64` byte length
//! and the UTF-8 config text, then records of a `u32` path length, the path
//! and an FDT1 tensor until end of file. Model parameters use their canonical
//! paths; bookkeeping lives under `state.`, `mask.` and `optim.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use fdn_core::{AdamConfig, AdamState, FdnError, FlowModel, LatentMask, Result, Rng, Tensor};

use crate::config::Config;

pub const MAGIC: &[u8; 8] = b"FDNCKPT1";

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: Config,
    pub model: FlowModel,
    pub mask: LatentMask,
    pub adam: AdamState,
    /// Completed training iterations.
    pub iteration: u64,
    pub rng: Rng,
}

pub fn adam_config(config: &Config) -> AdamConfig {
    AdamConfig {
        base_lr: config.lr,
        halving_interval: config.halve_every,
        ..AdamConfig::default()
    }
}

impl TrainState {
    /// Fresh state: random model, zero optimizer moments, seeded RNG.
    pub fn new(config: Config) -> Result<Self> {
        let mut rng = Rng::new(config.seed);
        let model = FlowModel::new(config.model_config(), &mut rng)?;
        let adam = AdamState::for_params(adam_config(&config), &model.params());
        let mask = config.mask()?;
        Ok(TrainState {
            config,
            model,
            mask,
            adam,
            iteration: 0,
            rng,
        })
    }
}

fn scalar(v: f64) -> Tensor {
    Tensor::from_vec([1, 1, 1, 1], vec![v]).expect("finite scalar")
}

fn write_record(out: &mut Vec<u8>, path: &str, t: &Tensor) -> Result<()> {
    out.extend_from_slice(&(path.len() as u32).to_le_bytes());
    out.extend_from_slice(path.as_bytes());
    t.write_fdt1(&mut *out)
}

pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let text = state.config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());

    let paths = state.model.param_paths();
    let params = state.model.params();
    for (path, p) in paths.iter().zip(&params) {
        write_record(&mut out, path, p)?;
    }
    for (b, steps) in state.model.blocks().iter().enumerate() {
        for (s, step) in steps.iter().enumerate() {
            let flag = if step.actnorm.initialized { 1.0 } else { 0.0 };
            write_record(
                &mut out,
                &format!("block{b}.sof{s}.actnorm.initialized"),
                &scalar(flag),
            )?;
        }
    }
    let mask = state.mask.values();
    write_record(
        &mut out,
        "mask.values",
        &Tensor::from_vec([1, mask.len(), 1, 1], mask)?,
    )?;
    write_record(&mut out, "state.iteration", &scalar(state.iteration as f64))?;
    let words = state.rng.state_to_f64();
    write_record(
        &mut out,
        "state.rng",
        &Tensor::from_vec([1, 1, 1, words.len()], words)?,
    )?;
    write_record(&mut out, "optim.t", &scalar(state.adam.t as f64))?;
    for (i, (path, p)) in paths.iter().zip(&params).enumerate() {
        write_record(
            &mut out,
            &format!("optim.m.{path}"),
            &Tensor::from_vec(p.dims(), state.adam.m[i].clone())?,
        )?;
        write_record(
            &mut out,
            &format!("optim.v.{path}"),
            &Tensor::from_vec(p.dims(), state.adam.v[i].clone())?,
        )?;
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(FdnError::Format(format!("checkpoint truncated in {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> Result<TrainState> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != MAGIC {
        if magic.starts_with(b"FDNCKPT") {
            return Err(FdnError::Format(format!(
                "checkpoint version {:?} is not supported (expected {:?})",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        return Err(FdnError::Format("not a checkpoint file".into()));
    }
    let len =
        u64::from_le_bytes(take(&mut bytes, 8, "config length")?.try_into().unwrap()) as usize;
    let text = std::str::from_utf8(take(&mut bytes, len, "config")?)
        .map_err(|_| FdnError::Format("config snapshot is not UTF-8".into()))?;
    let config = Config::parse(text)?;

    let mut records = BTreeMap::new();
    while !bytes.is_empty() {
        let n =
            u32::from_le_bytes(take(&mut bytes, 4, "record header")?.try_into().unwrap()) as usize;
        let path = String::from_utf8(take(&mut bytes, n, "record path")?.to_vec())
            .map_err(|_| FdnError::Format("record path is not UTF-8".into()))?;
        let mut reader = bytes;
        let t = Tensor::read_fdt1(&mut reader)?;
        bytes = reader;
        if records.insert(path.clone(), t).is_some() {
            return Err(FdnError::Format(format!("duplicate record {path}")));
        }
    }
    let mut get = |path: &str| {
        records
            .remove(path)
            .ok_or_else(|| FdnError::Format(format!("checkpoint lacks record {path}")))
    };
    let get_scalar = |t: Tensor, path: &str| -> Result<f64> {
        if t.len() != 1 {
            return Err(FdnError::Format(format!("{path} must be a scalar")));
        }
        Ok(t.data()[0])
    };

    let mut model = FlowModel::new(config.model_config(), &mut Rng::new(0))?;
    let paths = model.param_paths();
    for (path, p) in paths.iter().zip(model.params_mut()) {
        let t = get(path)?;
        if t.dims() != p.dims() {
            return Err(FdnError::Format(format!(
                "{path} has dims {:?}, expected {:?}",
                t.dims(),
                p.dims()
            )));
        }
        *p = t;
    }
    let n_sof = config.n_sof;
    for (i, step) in model.steps_mut().enumerate() {
        let path = format!("block{}.sof{}.actnorm.initialized", i / n_sof, i % n_sof);
        step.actnorm.initialized = get_scalar(get(&path)?, &path)? != 0.0;
    }
    let mask = config.mask()?;
    if get("mask.values")?.data() != mask.values().as_slice() {
        return Err(FdnError::Format("stored mask does not match config".into()));
    }
    let iteration = get_scalar(get("state.iteration")?, "state.iteration")? as u64;
    let rng = Rng::state_from_f64(get("state.rng")?.data())?;
    let mut adam = AdamState::for_params(adam_config(&config), &model.params());
    adam.t = get_scalar(get("optim.t")?, "optim.t")? as u64;
    for (i, path) in paths.iter().enumerate() {
        adam.m[i] = get(&format!("optim.m.{path}"))?.into_vec();
        adam.v[i] = get(&format!("optim.v.{path}"))?.into_vec();
        if adam.m[i].len() != adam.v[i].len() || adam.m[i].len() != model.params()[i].len() {
            return Err(FdnError::Format(format!(
                "optimizer state for {path} has the wrong size"
            )));
        }
    }
    if let Some(extra) = records.keys().next() {
        return Err(FdnError::Format(format!("unexpected record {extra}")));
    }
    Ok(TrainState {
        config,
        model,
        mask,
        adam,
        iteration,
        rng,
    })
}

/// Writes atomically: a temporary file is renamed over the target.
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = encode(state)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:08}.fdn")
}

/// Checkpoints in `dir` written by [`save_rotating`], oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".fdn"))
        })
        .collect();
    found.sort();
    Ok(found)
}

/// Saves `ckpt_<iteration>.fdn` in `dir` and deletes all but the newest `keep`.
pub fn save_rotating(dir: &Path, state: &TrainState, keep: usize) -> Result<PathBuf> {
    let path = dir.join(checkpoint_name(state.iteration));
    save(&path, state)?;
    let all = list_checkpoints(dir)?;
    for old in &all[..all.len().saturating_sub(keep)] {
        fs::remove_file(old)?;
    }
    Ok(path)
}
