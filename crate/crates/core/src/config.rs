//! `key = value` run configuration with `--set` style overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{SynthConfig, TextureKind};
use crate::train::TrainConfig;

/// Environment variable read for the worker thread count.
pub const THREADS_ENV: &str = "FSTEREO_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `toy`, `micro` or `full`; selects the model defaults before other keys apply.
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub samples: usize,
    pub data_seed: u64,
    pub threshold: f64,
    pub rounds: usize,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "micro" => Ok(ModelConfig::micro()),
        "full" => Ok(ModelConfig::default()),
        _ => Err(Error::Config(format!("unknown preset `{name}` (toy, micro, full)"))),
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::toy();
        RunConfig {
            preset: "toy".into(),
            train: TrainConfig { iters: model.train_iters, lr: 1e-3, steps: 2000, freeze_bn_at: 0.5, ..Default::default() },
            synth: SynthConfig { height: 64, width: 96, max_disp: 28, n_layers: 3, texture: None },
            model,
            samples: 200,
            data_seed: 1000,
            threshold: 60.0,
            rounds: 2,
            data_dir: "data".into(),
            out_dir: "run".into(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got {v:?}"))),
    }
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
    let items: Vec<usize> = v.split(',').map(|s| parse_num(key, s.trim())).collect::<Result<_>>()?;
    items.try_into().map_err(|_| Error::Config(format!("`{key}`: expected {N} comma-separated values")))
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (k, v) = (key.trim(), value.trim());
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match k {
            "preset" => {
                self.model = preset(v)?;
                self.preset = v.to_string();
                self.train.iters = self.model.train_iters;
            }
            "max_disp" => m.max_disp = parse_num(k, v)?,
            "groups" => m.groups = parse_num(k, v)?,
            "prior_channels" => m.prior_channels = parse_num(k, v)?,
            "prior_seed" => m.prior_seed = parse_num(k, v)?,
            "stem_channels" => m.stem_channels = parse_num(k, v)?,
            "feature_channels" => m.feature_channels = parse_list(k, v)?,
            "context_channels" => m.context_channels = parse_num(k, v)?,
            "hidden" => m.hidden = parse_list(k, v)?,
            "hourglass" => m.hourglass = parse_list(k, v)?,
            "spatial_kernel" => m.spatial_kernel = parse_num(k, v)?,
            "disparity_kernel" => m.disparity_kernel = parse_num(k, v)?,
            "dt_blocks" => m.dt_blocks = parse_num(k, v)?,
            "dt_heads" => m.dt_heads = parse_num(k, v)?,
            "dt_ffn_mult" => m.dt_ffn_mult = parse_num(k, v)?,
            "use_dt" => m.use_dt = parse_bool(k, v)?,
            "radius" => m.radius = parse_num(k, v)?,
            "motion_channels" => m.motion_channels = parse_num(k, v)?,
            "train_iters" => {
                m.train_iters = parse_num(k, v)?;
                t.iters = m.train_iters;
            }
            "infer_iters" => m.infer_iters = parse_num(k, v)?,
            "gamma" => m.gamma = parse_num(k, v)?,
            "detach_disparity" => m.detach_disparity = parse_bool(k, v)?,
            "model_seed" => m.seed = parse_num(k, v)?,
            "steps" => t.steps = parse_num(k, v)?,
            "batch_size" => t.batch_size = parse_num(k, v)?,
            "lr" => t.lr = parse_num(k, v)?,
            "weight_decay" => t.weight_decay = parse_num(k, v)?,
            "clip_norm" => t.clip_norm = parse_num(k, v)?,
            "decay_at" => t.decay_at = parse_num(k, v)?,
            "decay_factor" => t.decay_factor = parse_num(k, v)?,
            "freeze_bn_at" => t.freeze_bn_at = parse_num(k, v)?,
            "train_seed" => t.seed = parse_num(k, v)?,
            "height" => s.height = parse_num(k, v)?,
            "width" => s.width = parse_num(k, v)?,
            "gen_max_disp" => s.max_disp = parse_num(k, v)?,
            "n_layers" => s.n_layers = parse_num(k, v)?,
            "texture" => {
                s.texture = match v {
                    "random" => None,
                    _ => Some(TextureKind::parse(v).ok_or_else(|| Error::Config(format!("`texture`: unknown kind {v:?}")))?),
                }
            }
            "samples" => self.samples = parse_num(k, v)?,
            "data_seed" => self.data_seed = parse_num(k, v)?,
            "threshold" => self.threshold = parse_num(k, v)?,
            "rounds" => self.rounds = parse_num(k, v)?,
            "data_dir" => self.data_dir = v.into(),
            "out_dir" => self.out_dir = v.into(),
            _ => return Err(Error::Config(format!("unknown key `{k}`"))),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, sets: &[S]) -> Result<()> {
        for kv in sets {
            let kv = kv.as_ref();
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Parse text; `preset` is applied first wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut c = RunConfig::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "preset") {
            c.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Read a file; relative paths in it are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut c = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.data_dir, &mut c.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        if self.synth.max_disp > self.model.max_disp {
            return Err(Error::Config(format!(
                "generated disparities up to {} exceed the model range {}",
                self.synth.max_disp, self.model.max_disp
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 100.0) {
            return Err(Error::Config(format!("threshold {} must lie in (0, 100)", self.threshold)));
        }
        if self.rounds == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("rounds and batch_size must be at least 1".into()));
        }
        for (k, v) in [("decay_at", self.train.decay_at), ("freeze_bn_at", self.train.freeze_bn_at)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("`{k}` = {v} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("preset", self.preset.clone());
        kv("max_disp", m.max_disp.to_string());
        kv("groups", m.groups.to_string());
        kv("prior_channels", m.prior_channels.to_string());
        kv("prior_seed", m.prior_seed.to_string());
        kv("stem_channels", m.stem_channels.to_string());
        kv("feature_channels", list(&m.feature_channels));
        kv("context_channels", m.context_channels.to_string());
        kv("hidden", list(&m.hidden));
        kv("hourglass", list(&m.hourglass));
        kv("spatial_kernel", m.spatial_kernel.to_string());
        kv("disparity_kernel", m.disparity_kernel.to_string());
        kv("dt_blocks", m.dt_blocks.to_string());
        kv("dt_heads", m.dt_heads.to_string());
        kv("dt_ffn_mult", m.dt_ffn_mult.to_string());
        kv("use_dt", m.use_dt.to_string());
        kv("radius", m.radius.to_string());
        kv("motion_channels", m.motion_channels.to_string());
        kv("train_iters", m.train_iters.to_string());
        kv("infer_iters", m.infer_iters.to_string());
        kv("gamma", m.gamma.to_string());
        kv("detach_disparity", m.detach_disparity.to_string());
        kv("model_seed", m.seed.to_string());
        kv("steps", t.steps.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("decay_at", t.decay_at.to_string());
        kv("decay_factor", t.decay_factor.to_string());
        kv("freeze_bn_at", t.freeze_bn_at.to_string());
        kv("train_seed", t.seed.to_string());
        kv("height", s.height.to_string());
        kv("width", s.width.to_string());
        kv("gen_max_disp", s.max_disp.to_string());
        kv("n_layers", s.n_layers.to_string());
        kv("texture", s.texture.map_or("random", |k| k.name()).to_string());
        kv("samples", self.samples.to_string());
        kv("data_seed", self.data_seed.to_string());
        kv("threshold", self.threshold.to_string());
        kv("rounds", self.rounds.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        o
    }
}

/// Thread count from the environment, if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(None),
    }
}
