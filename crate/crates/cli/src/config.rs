//! Plain-text `key = value` files for runs and degradation specs.
//!
//! Blank lines and `#` comments are ignored. Every key is optional, unknown
//! or repeated keys are errors, and an empty value means "unset" for the
//! optional ones. `serialize` writes every key in a fixed order.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use elf_core::synth::{Range, RainSpec};
use elf_core::{DegradationSpec, ElfConfig, LossConfig, TrainConfig};

pub type ConfigResult<T> = Result<T, String>;

/// `(line number, key, value)` in file order, duplicates rejected.
fn entries(text: &str) -> ConfigResult<Vec<(usize, String, String)>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
        let key = key.trim().to_string();
        if let Some(first) = seen.insert(key.clone(), i + 1) {
            return Err(format!("line {}: `{key}` already set on line {first}", i + 1));
        }
        out.push((i + 1, key, value.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> ConfigResult<T> {
    value.parse().map_err(|_| format!("`{key}`: cannot parse `{value}`"))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> ConfigResult<Option<T>> {
    if value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn parse_pair<T: FromStr>(key: &str, value: &str) -> ConfigResult<(T, T)> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| format!("`{key}`: expected `low, high`, got `{value}`"))?;
    Ok((parse(key, a.trim())?, parse(key, b.trim())?))
}

fn parse_range(key: &str, value: &str) -> ConfigResult<Range> {
    let (lo, hi) = parse_pair(key, value)?;
    Ok(Range::new(lo, hi))
}

fn show_opt<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn show_range(r: &Range) -> String {
    format!("{}, {}", r.lo, r.hi)
}

fn render(pairs: Vec<(&str, String)>) -> String {
    pairs
        .into_iter()
        .map(|(k, v)| if v.is_empty() { format!("{k} =\n") } else { format!("{k} = {v}\n") })
        .collect()
}

/// Everything `elf train` needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ElfConfig,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub train: TrainConfig,
    /// Directory written by `elf synth`.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            model: ElfConfig::default(),
            ssim_window: loss.window,
            ssim_sigma: loss.sigma,
            train: TrainConfig {
                checkpoint_dir: Some(PathBuf::from("checkpoints")),
                log_path: Some(PathBuf::from("train_log.csv")),
                ..TrainConfig::default()
            },
            train_dir: None,
            val_dir: None,
        }
    }
}

impl RunConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            ..LossConfig::from(&self.model)
        }
    }

    fn set(&mut self, key: &str, v: &str) -> ConfigResult<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "base_channels" => m.base_channels = parse(key, v)?,
            "rtb_depth" => m.rtb_depth = parse(key, v)?,
            "rcab_per_stage" => m.rcab_per_stage = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn_expansion" => m.ffn_expansion = parse(key, v)?,
            "ca_reduction" => m.ca_reduction = parse(key, v)?,
            "subsample" => m.subsample = parse(key, v)?,
            "use_sa" => m.use_sa = parse(key, v)?,
            "use_dsc" => m.use_dsc = parse(key, v)?,
            "use_hfb" => m.use_hfb = parse(key, v)?,
            "use_mam" => m.use_mam = parse(key, v)?,
            "use_ssim_loss" => m.use_ssim_loss = parse(key, v)?,
            "use_sr" => m.use_sr = parse(key, v)?,
            "alpha" => m.alpha = parse(key, v)?,
            "lambda" => m.lambda = parse(key, v)?,
            "eps" => m.eps = parse(key, v)?,
            "ssim_window" => self.ssim_window = parse(key, v)?,
            "ssim_sigma" => self.ssim_sigma = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "max_steps" => t.max_steps = parse_opt(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "patch" => t.patch = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "lr" => t.base_lr = parse(key, v)?,
            "lr_decay" => t.lr_decay = parse(key, v)?,
            "lr_interval" => t.lr_interval = parse(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "checkpoint_dir" => t.checkpoint_dir = parse_opt(key, v)?,
            "log_path" => t.log_path = parse_opt(key, v)?,
            "train_dir" => self.train_dir = parse_opt(key, v)?,
            "val_dir" => self.val_dir = parse_opt(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let t = &self.train;
        vec![
            ("base_channels", m.base_channels.to_string()),
            ("rtb_depth", m.rtb_depth.to_string()),
            ("rcab_per_stage", m.rcab_per_stage.to_string()),
            ("heads", m.heads.to_string()),
            ("ffn_expansion", m.ffn_expansion.to_string()),
            ("ca_reduction", m.ca_reduction.to_string()),
            ("subsample", m.subsample.to_string()),
            ("use_sa", m.use_sa.to_string()),
            ("use_dsc", m.use_dsc.to_string()),
            ("use_hfb", m.use_hfb.to_string()),
            ("use_mam", m.use_mam.to_string()),
            ("use_ssim_loss", m.use_ssim_loss.to_string()),
            ("use_sr", m.use_sr.to_string()),
            ("alpha", m.alpha.to_string()),
            ("lambda", m.lambda.to_string()),
            ("eps", m.eps.to_string()),
            ("ssim_window", self.ssim_window.to_string()),
            ("ssim_sigma", self.ssim_sigma.to_string()),
            ("epochs", t.epochs.to_string()),
            ("max_steps", show_opt(&t.max_steps)),
            ("batch", t.batch.to_string()),
            ("patch", t.patch.to_string()),
            ("seed", t.seed.to_string()),
            ("lr", t.base_lr.to_string()),
            ("lr_decay", t.lr_decay.to_string()),
            ("lr_interval", t.lr_interval.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("checkpoint_dir", show_path(&t.checkpoint_dir)),
            ("log_path", show_path(&t.log_path)),
            ("train_dir", show_path(&self.train_dir)),
            ("val_dir", show_path(&self.val_dir)),
        ]
    }

    /// Parses and validates. Keys not present keep their defaults.
    pub fn parse(text: &str) -> ConfigResult<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in entries(text)? {
            cfg.set(&key, &value).map_err(|e| format!("line {line}: {e}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> ConfigResult<()> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.loss().validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        let m = self.model.required_multiple();
        if !self.train.patch.is_multiple_of(m) {
            return Err(format!("patch {} must be a multiple of {m}", self.train.patch));
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        render(self.pairs())
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.train.checkpoint_dir);
        fix(&mut self.train.log_path);
        fix(&mut self.train_dir);
        fix(&mut self.val_dir);
    }
}

fn spec_set(spec: &mut DegradationSpec, key: &str, v: &str) -> ConfigResult<()> {
    let r: &mut RainSpec = &mut spec.rain;
    let l = &mut spec.lowlight;
    match key {
        "kind" => spec.kind = v.parse().map_err(|e: elf_core::Error| e.to_string())?,
        "streak_count" => r.streak_count = parse_pair(key, v)?,
        "angle" => r.angle = parse_range(key, v)?,
        "angle_jitter" => r.angle_jitter = parse(key, v)?,
        "length" => r.length = parse_range(key, v)?,
        "width" => r.width = parse_range(key, v)?,
        "intensity" => r.intensity = parse_range(key, v)?,
        "blur_sigma" => r.blur_sigma = parse_range(key, v)?,
        "gamma" => l.gamma = parse_range(key, v)?,
        "gain" => l.gain = parse_range(key, v)?,
        "noise_sigma" => l.noise_sigma = parse(key, v)?,
        _ => return Err(format!("unknown key `{key}`")),
    }
    Ok(())
}

pub fn parse_spec(text: &str) -> ConfigResult<DegradationSpec> {
    let mut spec = DegradationSpec::default();
    for (line, key, value) in entries(text)? {
        spec_set(&mut spec, &key, &value).map_err(|e| format!("line {line}: {e}"))?;
    }
    spec.validate().map_err(|e| e.to_string())?;
    Ok(spec)
}

pub fn serialize_spec(spec: &DegradationSpec) -> String {
    let r = &spec.rain;
    let l = &spec.lowlight;
    render(vec![
        ("kind", spec.kind.to_string()),
        ("streak_count", format!("{}, {}", r.streak_count.0, r.streak_count.1)),
        ("angle", show_range(&r.angle)),
        ("angle_jitter", r.angle_jitter.to_string()),
        ("length", show_range(&r.length)),
        ("width", show_range(&r.width)),
        ("intensity", show_range(&r.intensity)),
        ("blur_sigma", show_range(&r.blur_sigma)),
        ("gamma", show_range(&l.gamma)),
        ("gain", show_range(&l.gain)),
        ("noise_sigma", l.noise_sigma.to_string()),
    ])
}
