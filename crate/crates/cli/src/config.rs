//! Flat `section.key = value` configuration files.

use std::fmt::Write as _;
use std::path::PathBuf;

use fdn_core::data::{AugPolicy, CropPolicy, SigmaPolicy};
use fdn_core::{FdnError, LatentMask, LossWeights, ModelConfig, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub n_flow_blocks: usize,
    pub n_sof: usize,
    pub dense_width: usize,
    pub clamp: f64,
    pub in_channels: usize,

    pub lr: f64,
    pub halve_every: u64,
    pub batch: usize,
    pub iters: u64,
    /// `None` means one over `dim * ln 2`.
    pub lambda1: Option<f64>,
    pub lambda2: f64,
    pub seed: u64,
    pub sigma: SigmaPolicy,
    pub patch: usize,
    pub aug: AugPolicy,
    pub crop: CropPolicy,
    /// Global gradient-norm limit; `None` disables clipping.
    pub clip: Option<f64>,
    pub checkpoint_every: u64,
    pub val_every: u64,
    pub val_seed: u64,
    pub out_dir: PathBuf,

    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,

    pub clean_fraction: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            n_flow_blocks: 2,
            n_sof: 8,
            dense_width: 32,
            clamp: 2.0,
            in_channels: 3,
            lr: 2e-4,
            halve_every: 50_000,
            batch: 16,
            iters: 0,
            lambda1: None,
            lambda2: 1.0,
            seed: 0,
            sigma: SigmaPolicy::Fixed(25.0),
            patch: 64,
            aug: AugPolicy::None,
            crop: CropPolicy::Random,
            clip: Some(50.0),
            checkpoint_every: 5000,
            val_every: 1000,
            val_seed: 12345,
            out_dir: PathBuf::from("run"),
            train_dir: None,
            val_dir: None,
            clean_fraction: 0.75,
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> FdnError {
    FdnError::Config(format!("line {line}: {msg}"))
}

fn num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| bad(line, format!("{key}: cannot parse {v:?}")))
}

fn real(line: usize, key: &str, v: &str) -> Result<f64> {
    let x: f64 = num(line, key, v)?;
    if !x.is_finite() {
        return Err(bad(line, format!("{key} must be finite")));
    }
    Ok(x)
}

/// Accepts a decimal or a fraction such as `3/4`.
fn fraction(line: usize, key: &str, v: &str) -> Result<f64> {
    match v.split_once('/') {
        Some((a, b)) => {
            let (a, b) = (real(line, key, a.trim())?, real(line, key, b.trim())?);
            if b == 0.0 {
                return Err(bad(line, format!("{key}: zero denominator")));
            }
            Ok(a / b)
        }
        None => real(line, key, v),
    }
}

pub fn aug_name(a: AugPolicy) -> &'static str {
    match a {
        AugPolicy::None => "none",
        AugPolicy::FlipH => "flip_h",
        AugPolicy::FlipHV => "flip_hv",
        AugPolicy::FlipRot => "flip_rot",
    }
}

pub fn crop_name(c: CropPolicy) -> &'static str {
    match c {
        CropPolicy::Random => "random",
        CropPolicy::CenterResize => "center_resize",
    }
}

/// Parses `lo,hi`.
pub fn parse_range(v: &str) -> Option<(f64, f64)> {
    let (a, b) = v.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

impl Config {
    pub fn parse(text: &str) -> Result<Config> {
        let mut c = Config::default();
        let mut seen = std::collections::HashSet::new();
        let mut iters_set = false;
        let mut sigma_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| {
                bad(
                    line,
                    format!("expected `section.key = value`, got {body:?}"),
                )
            })?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(bad(line, format!("duplicate key {key}")));
            }
            match key {
                "model.n_flow_blocks" => c.n_flow_blocks = num(line, key, v)?,
                "model.n_sof" => c.n_sof = num(line, key, v)?,
                "model.dense_width" => c.dense_width = num(line, key, v)?,
                "model.clamp" => c.clamp = real(line, key, v)?,
                "model.in_channels" => c.in_channels = num(line, key, v)?,
                "train.lr" => c.lr = real(line, key, v)?,
                "train.halve_every" => c.halve_every = num(line, key, v)?,
                "train.batch" => c.batch = num(line, key, v)?,
                "train.iters" => {
                    c.iters = num(line, key, v)?;
                    iters_set = true;
                }
                "train.lambda1" => {
                    c.lambda1 = if v == "auto" {
                        None
                    } else {
                        Some(real(line, key, v)?)
                    }
                }
                "train.lambda2" => c.lambda2 = real(line, key, v)?,
                "train.seed" => c.seed = num(line, key, v)?,
                "train.sigma" | "train.sigma_range" => {
                    if sigma_set {
                        return Err(bad(
                            line,
                            "give only one of train.sigma and train.sigma_range",
                        ));
                    }
                    sigma_set = true;
                    c.sigma = if key == "train.sigma" {
                        SigmaPolicy::Fixed(real(line, key, v)?)
                    } else {
                        let (lo, hi) = parse_range(v)
                            .ok_or_else(|| bad(line, "sigma_range must be `lo,hi`"))?;
                        SigmaPolicy::Blind(lo, hi)
                    };
                }
                "train.patch" => c.patch = num(line, key, v)?,
                "train.aug" => {
                    c.aug = match v {
                        "none" => AugPolicy::None,
                        "flip_h" => AugPolicy::FlipH,
                        "flip_hv" => AugPolicy::FlipHV,
                        "flip_rot" => AugPolicy::FlipRot,
                        _ => return Err(bad(line, format!("unknown aug policy {v:?}"))),
                    }
                }
                "train.crop" => {
                    c.crop = match v {
                        "random" => CropPolicy::Random,
                        "center_resize" => CropPolicy::CenterResize,
                        _ => return Err(bad(line, format!("unknown crop policy {v:?}"))),
                    }
                }
                "train.clip" => {
                    c.clip = if v == "none" {
                        None
                    } else {
                        Some(real(line, key, v)?)
                    }
                }
                "train.checkpoint_every" => c.checkpoint_every = num(line, key, v)?,
                "train.val_every" => c.val_every = num(line, key, v)?,
                "train.val_seed" => c.val_seed = num(line, key, v)?,
                "train.out_dir" => c.out_dir = PathBuf::from(v),
                "data.train_dir" => c.train_dir = Some(PathBuf::from(v)),
                "data.val_dir" => c.val_dir = Some(PathBuf::from(v)),
                "mask.clean_fraction" => c.clean_fraction = fraction(line, key, v)?,
                _ => return Err(bad(line, format!("unknown key {key:?}"))),
            }
        }
        if !iters_set {
            return Err(FdnError::Config("train.iters is required".into()));
        }
        if !sigma_set {
            return Err(FdnError::Config(
                "one of train.sigma or train.sigma_range is required".into(),
            ));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(FdnError::Config(msg));
        if self.n_flow_blocks == 0
            || self.n_sof == 0
            || self.dense_width == 0
            || self.in_channels == 0
        {
            return fail("model sizes must be positive".into());
        }
        if !(self.clamp > 0.0) {
            return fail(format!("model.clamp must be positive, got {}", self.clamp));
        }
        if !(self.lr > 0.0) {
            return fail(format!("train.lr must be positive, got {}", self.lr));
        }
        if self.halve_every == 0
            || self.batch == 0
            || self.checkpoint_every == 0
            || self.val_every == 0
        {
            return fail(
                "train.halve_every, batch, checkpoint_every and val_every must be positive".into(),
            );
        }
        if let Some(l1) = self.lambda1 {
            if !(l1 >= 0.0) {
                return fail(format!("train.lambda1 must be >= 0, got {l1}"));
            }
        }
        if !(self.lambda2 >= 0.0) {
            return fail(format!("train.lambda2 must be >= 0, got {}", self.lambda2));
        }
        match self.sigma {
            SigmaPolicy::Fixed(s) if !(s >= 0.0) => {
                return fail(format!("train.sigma must be >= 0, got {s}"))
            }
            SigmaPolicy::Blind(lo, hi) if !(0.0 <= lo && lo <= hi) => {
                return fail(format!(
                    "train.sigma_range needs 0 <= lo <= hi, got {lo},{hi}"
                ))
            }
            _ => {}
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return fail(format!("train.clip must be positive or none, got {c}"));
            }
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return fail(format!(
                "mask.clean_fraction must be in (0, 1], got {}",
                self.clean_fraction
            ));
        }
        self.model_config()
            .validate()
            .map_err(|e| FdnError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            height: self.patch,
            width: self.patch,
            n_flow_blocks: self.n_flow_blocks,
            n_sof: self.n_sof,
            dense_width: self.dense_width,
            clamp: self.clamp,
        }
    }

    pub fn mask(&self) -> Result<LatentMask> {
        LatentMask::new(self.model_config().latent_channels(), self.clean_fraction)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        let dim = self.in_channels * self.patch * self.patch;
        let auto = LossWeights::default_for_dim(dim);
        LossWeights::new(self.lambda1.unwrap_or(auto.lambda1), self.lambda2)
    }

    /// Canonical text form; `parse(to_text())` gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>, none: &str| v.map_or(none.to_string(), |x| x.to_string());
        let _ = writeln!(s, "model.n_flow_blocks = {}", self.n_flow_blocks);
        let _ = writeln!(s, "model.n_sof = {}", self.n_sof);
        let _ = writeln!(s, "model.dense_width = {}", self.dense_width);
        let _ = writeln!(s, "model.clamp = {}", self.clamp);
        let _ = writeln!(s, "model.in_channels = {}", self.in_channels);
        let _ = writeln!(s, "train.lr = {}", self.lr);
        let _ = writeln!(s, "train.halve_every = {}", self.halve_every);
        let _ = writeln!(s, "train.batch = {}", self.batch);
        let _ = writeln!(s, "train.iters = {}", self.iters);
        let _ = writeln!(s, "train.lambda1 = {}", opt(self.lambda1, "auto"));
        let _ = writeln!(s, "train.lambda2 = {}", self.lambda2);
        let _ = writeln!(s, "train.seed = {}", self.seed);
        match self.sigma {
            SigmaPolicy::Fixed(v) => writeln!(s, "train.sigma = {v}"),
            SigmaPolicy::Blind(lo, hi) => writeln!(s, "train.sigma_range = {lo},{hi}"),
        }
        .ok();
        let _ = writeln!(s, "train.patch = {}", self.patch);
        let _ = writeln!(s, "train.aug = {}", aug_name(self.aug));
        let _ = writeln!(s, "train.crop = {}", crop_name(self.crop));
        let _ = writeln!(s, "train.clip = {}", opt(self.clip, "none"));
        let _ = writeln!(s, "train.checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "train.val_every = {}", self.val_every);
        let _ = writeln!(s, "train.val_seed = {}", self.val_seed);
        let _ = writeln!(s, "train.out_dir = {}", self.out_dir.display());
        if let Some(d) = &self.train_dir {
            let _ = writeln!(s, "data.train_dir = {}", d.display());
        }
        if let Some(d) = &self.val_dir {
            let _ = writeln!(s, "data.val_dir = {}", d.display());
        }
        let _ = writeln!(s, "mask.clean_fraction = {}", self.clean_fraction);
        s
    }
}
