use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kvfile::KvFile;
use crate::losses::LossWeights;
use crate::refine::ReliabilityConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SupOnly,
    SemiNoRefine,
    SemiRepl,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sup-only" => Ok(Mode::SupOnly),
            "semi-no-refine" => Ok(Mode::SemiNoRefine),
            "semi-repl" => Ok(Mode::SemiRepl),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (sup-only, semi-no-refine, semi-repl)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::SupOnly => "sup-only",
            Mode::SemiNoRefine => "semi-no-refine",
            Mode::SemiRepl => "semi-repl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub mode: Mode,
    pub steps: u64,
    pub eval_interval: u64,
    pub seed: u64,
    pub hidden: usize,
    pub alpha: f64,
    pub reliability: ReliabilityConfig,
    pub weights: LossWeights,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub batch_mix: usize,
    /// Fraction of `steps` run as supervised warm-up before semi-supervised
    /// training begins.
    pub warmup_frac: f64,
    pub base_lr: f64,
    pub weight_decay: f64,
    /// Voxel-inclination origin for mixing, in scene coordinates.
    pub sensor_origin: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out_dir: None,
            mode: Mode::SemiRepl,
            steps: 2000,
            eval_interval: 200,
            seed: 0,
            hidden: 16,
            alpha: 0.994,
            reliability: ReliabilityConfig::default(),
            weights: LossWeights::default(),
            batch_labeled: 2,
            batch_unlabeled: 2,
            batch_mix: 2,
            warmup_frac: 0.1,
            base_lr: 5e-3,
            weight_decay: 1e-3,
            sensor_origin: [0.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.eval_interval == 0 || !self.steps.is_multiple_of(self.eval_interval) {
            return Err(Error::Config(format!(
                "eval_interval {} must divide steps {}",
                self.eval_interval, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup_frac {} outside [0, 1)", self.warmup_frac)));
        }
        if self.hidden == 0 || self.batch_labeled == 0 {
            return Err(Error::Config("hidden and batch_labeled must be positive".into()));
        }
        if self.mode != Mode::SupOnly && (self.batch_unlabeled == 0 || self.batch_mix == 0) {
            return Err(Error::Config("semi-supervised modes need unlabeled and mix batches".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("base_lr must be positive, weight_decay non-negative".into()));
        }
        if self.sensor_origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("sensor_origin must be finite".into()));
        }
        self.reliability.validate(num_classes)
    }

    /// Supervised warm-up steps before the semi-supervised phase.
    pub fn warmup_steps(&self) -> u64 {
        match self.mode {
            Mode::SupOnly => self.steps,
            _ => (self.warmup_frac * self.steps as f64).round() as u64,
        }
    }

    /// Overrides defaults with every key present in `kv`; unknown keys are
    /// rejected.
    pub fn apply(&mut self, kv: &KvFile) -> Result<()> {
        for key in kv.keys() {
            match key {
                "manifest" => self.manifest = Some(PathBuf::from(kv.require_str(key)?)),
                "out_dir" => self.out_dir = Some(PathBuf::from(kv.require_str(key)?)),
                "mode" => self.mode = kv.require_str(key)?.parse()?,
                "steps" => self.steps = kv.require(key)?,
                "eval_interval" => self.eval_interval = kv.require(key)?,
                "seed" => self.seed = kv.require(key)?,
                "hidden" => self.hidden = kv.require(key)?,
                "alpha" => self.alpha = kv.require(key)?,
                "kappa" => self.reliability.kappa = kv.require(key)?,
                "sigma" => self.reliability.sigma = kv.require(key)?,
                "top_k" => self.reliability.top_k = kv.require(key)?,
                "mix_ratio" => self.reliability.mix_ratio = kv.require(key)?,
                "lambda_ls" => self.weights.lambda_ls = kv.require(key)?,
                "sce_clamp" => self.weights.sce_clamp = kv.require(key)?,
                "batch_labeled" => self.batch_labeled = kv.require(key)?,
                "batch_unlabeled" => self.batch_unlabeled = kv.require(key)?,
                "batch_mix" => self.batch_mix = kv.require(key)?,
                "warmup_frac" => self.warmup_frac = kv.require(key)?,
                "base_lr" => self.base_lr = kv.require(key)?,
                "weight_decay" => self.weight_decay = kv.require(key)?,
                "sensor_origin" => {
                    let v: Vec<f64> = kv.get_list(key)?;
                    self.sensor_origin = v
                        .try_into()
                        .map_err(|_| Error::Config("sensor_origin needs three values".into()))?;
                }
                other => return Err(Error::Config(format!("unknown config key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(kv)?;
        Ok(cfg)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        if let Some(m) = &self.manifest {
            kv.set("manifest", m.display());
        }
        if let Some(o) = &self.out_dir {
            kv.set("out_dir", o.display());
        }
        kv.set("mode", self.mode);
        kv.set("steps", self.steps);
        kv.set("eval_interval", self.eval_interval);
        kv.set("seed", self.seed);
        kv.set("hidden", self.hidden);
        kv.set("alpha", self.alpha);
        kv.set("kappa", self.reliability.kappa);
        kv.set("sigma", self.reliability.sigma);
        kv.set("top_k", self.reliability.top_k);
        kv.set("mix_ratio", self.reliability.mix_ratio);
        kv.set("lambda_ls", self.weights.lambda_ls);
        kv.set("sce_clamp", self.weights.sce_clamp);
        kv.set("batch_labeled", self.batch_labeled);
        kv.set("batch_unlabeled", self.batch_unlabeled);
        kv.set("batch_mix", self.batch_mix);
        kv.set("warmup_frac", self.warmup_frac);
        kv.set("base_lr", self.base_lr);
        kv.set("weight_decay", self.weight_decay);
        let o = self.sensor_origin;
        kv.set("sensor_origin", format!("{},{},{}", o[0], o[1], o[2]));
        kv
    }

    /// Writes the fully resolved configuration as `config.resolved.txt`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.resolved.txt");
        std::fs::write(&path, self.to_kv().render("resolved training configuration"))?;
        Ok(path)
    }
}
