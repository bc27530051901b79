//! Plain-text run configuration.
//!
//! Files are lines of `key = value` under `[section]` headers; `#` starts a
//! comment. Keys are addressed as `section.key`. A top-level `preset = name`
//! line (or the first override) selects a named base configuration that the
//! remaining keys modify.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::continuous::Sharing;
use crate::data::Binarization;
use crate::error::{Error, Result};
use crate::eval::LogZSource;
use crate::model::ModelConfig;
use crate::posterior::PosteriorConfig;
use crate::smoothing::SmoothingKind;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic { modes: usize, samples: usize, noise: f64, seed: u64 },
    Idx(PathBuf),
    Raw(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Optional separate held-out file in the same format.
    pub test_path: Option<PathBuf>,
    pub binarization: Binarization,
    pub train: usize,
    pub valid: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub k: usize,
    pub logz: LogZSource,
    pub zeta_is_z: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogZSettings {
    pub rungs: usize,
    pub samples: usize,
    pub repeats: usize,
    pub target_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub logz: LogZSettings,
    pub output: OutputSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            data: DataConfig {
                source: DataSource::Synthetic {
                    modes: 4,
                    samples: 5000,
                    noise: 0.05,
                    seed: 1,
                },
                test_path: None,
                binarization: Binarization::None,
                train: 4000,
                valid: 500,
            },
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings {
                k: 100,
                logz: LogZSource::Exact,
                zeta_is_z: false,
                seed: 7,
            },
            logz: LogZSettings {
                rungs: 16,
                samples: 10_000,
                repeats: 10,
                target_rate: 0.5,
            },
            output: OutputSettings {
                dir: PathBuf::from("run"),
                checkpoint_every: 10,
            },
        }
    }
}

/// Names accepted by `preset`.
pub const PRESETS: &[&str] = &["desk", "mnist_dyn", "mnist_static", "omniglot", "caltech"];

fn full_scale(layers: usize, vars: usize, prior_hidden: usize, sharing: Sharing) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.x_dim = 784;
    c.model.rbm_units = 128;
    c.model.posterior = PosteriorConfig::default();
    c.model.continuous.layers = layers;
    c.model.continuous.vars = vars;
    c.model.continuous.prior_hidden = prior_hidden;
    c.model.continuous.posterior_hidden = vec![2000];
    c.model.continuous.sharing = sharing;
    c.train.gibbs_sweeps = 100;
    c.train.chains_per_element = 20;
    c.train.epochs = 500;
    c.eval.k = 10_000;
    c.eval.logz = LogZSource::Bridge;
    c
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let mut c = match name {
        "desk" => RunConfig::default(),
        "mnist_dyn" => {
            let mut c = full_scale(18, 64, 1000, Sharing::None);
            c.data.binarization = Binarization::Dynamic;
            c
        }
        "mnist_static" => {
            // Already-binary files pass through a static draw unchanged.
            let mut c = full_scale(20, 256, 2000, Sharing::Groups(2));
            c.data.binarization = Binarization::Static(1);
            c
        }
        "omniglot" => {
            let mut c = full_scale(16, 256, 800, Sharing::Groups(2));
            c.model.decoder_hidden = vec![1000];
            c.data.binarization = Binarization::Dynamic;
            c
        }
        "caltech" => {
            let mut c = full_scale(12, 80, 100, Sharing::Complete);
            c.data.binarization = Binarization::None;
            c
        }
        _ => {
            return Err(Error::Config(format!(
                "unknown preset {name:?}{}",
                suggest(name, PRESETS.iter().copied())
            )))
        }
    };
    if name != "desk" {
        c.data.source = DataSource::Idx(PathBuf::from("train.idx"));
        c.data.train = 50_000;
        c.data.valid = 10_000;
    }
    c.preset = name.into();
    Ok(c)
}

/// Every accepted key with its type and meaning, in file order.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data.source", "synthetic|idx|raw", "where examples come from"),
    ("data.path", "path", "input file for idx/raw sources"),
    ("data.test_path", "path", "separate held-out file; otherwise the tail of data.path"),
    ("data.modes", "uint", "synthetic: number of prototypes"),
    ("data.dim", "uint", "pixels per example; checked against loaded files"),
    ("data.samples", "uint", "synthetic: number of examples"),
    ("data.noise", "float", "synthetic: pixel flip probability"),
    ("data.seed", "uint", "synthetic: generator seed"),
    ("data.binarization", "static[:seed]|dynamic|none", "how intensities become bits"),
    ("data.train", "uint", "training examples (leading rows)"),
    ("data.valid", "uint", "validation examples (next rows); the rest is test"),
    ("rbm.units", "even uint", "machine size, split evenly between the two sides"),
    ("posterior.groups", "uint", "hierarchy groups; must divide rbm.units"),
    ("posterior.hidden", "uint list", "hidden widths of each group network"),
    ("posterior.batch_norm", "bool", "batch normalization in the encoder"),
    ("smoothing.kind", "spike_exp|ramps|spike_slab|spike_gauss", "smoothing transformation"),
    ("smoothing.prior_sigma", "float", "spike_gauss: prior standard deviation"),
    ("smoothing.beta_start", "float", "spike_exp: bound on beta at epoch 0"),
    ("smoothing.beta_slope", "float", "spike_exp: bound increase per epoch"),
    ("smoothing.beta_cap", "float", "spike_exp: largest bound"),
    ("smoothing.beta_floor", "float", "spike_exp: lower bound on beta"),
    ("continuous.layers", "uint", "Gaussian latent layers"),
    ("continuous.vars", "uint", "variables per Gaussian layer"),
    ("continuous.prior_hidden", "uint", "hidden units of each prior network"),
    ("continuous.posterior_hidden", "uint list", "hidden widths of each posterior network"),
    ("continuous.sharing", "none|groups:<g>|complete", "prior parameter sharing"),
    ("decoder.hidden", "uint list", "hidden widths of the decoder"),
    ("train.batch", "uint", "minibatch size"),
    ("train.epochs", "uint", "passes over the training set"),
    ("train.lr", "float", "initial Adam step size"),
    ("train.lr_tau", "float", "step size decays as lr / (1 + t / tau)"),
    ("train.beta1", "float", "Adam first-moment decay"),
    ("train.beta2", "float", "Adam second-moment decay"),
    ("train.eps", "float", "Adam denominator offset"),
    ("train.gibbs_sweeps", "uint", "block Gibbs sweeps per step"),
    ("train.chains_per_element", "uint", "persistent chains per minibatch element"),
    ("train.warmup_strength", "float", "KL warm-up strength"),
    ("train.warmup_epochs", "float", "KL warm-up length"),
    ("train.rbm_warmup_strength", "float", "extra warm-up strength on the machine term"),
    ("train.rbm_warmup_epochs", "float", "extra warm-up length"),
    ("train.seed", "uint", "seed of every training stream"),
    ("ablation.no_continuous", "bool", "drop the Gaussian layers"),
    ("ablation.linear_decoder", "bool", "decoder without hidden layers"),
    ("ablation.no_lateral_w", "bool", "fix machine couplings at zero"),
    ("ablation.factorial_posterior", "bool", "single posterior group"),
    ("eval.k", "uint", "importance samples per example"),
    ("eval.logz", "exact|bridge|<number>", "log partition function source"),
    ("eval.zeta_is_z", "bool", "evaluate with zeta replaced by z"),
    ("eval.seed", "uint", "seed of the evaluation streams"),
    ("logz.rungs", "uint", "initial tempering rungs"),
    ("logz.samples", "uint", "recorded sweeps per repeat (after equal burn-in)"),
    ("logz.repeats", "uint", "independent estimates"),
    ("logz.target_rate", "float", "target swap acceptance"),
    ("output.dir", "path", "directory for checkpoints and metrics"),
    ("output.checkpoint_every", "uint", "epochs between checkpoints"),
];

fn suggest<'a>(word: &str, candidates: impl Iterator<Item = &'a str>) -> String {
    candidates
        .map(|c| (strsim::jaro_winkler(word, c), c))
        .filter(|(s, _)| *s > 0.7)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| format!(" (did you mean `{c}`?)"))
        .unwrap_or_default()
}

fn mismatch(key: &str, expected: &str, token: &str) -> Error {
    Error::Config(format!("key `{key}` expects {expected}, got `{token}`"))
}

fn parse_uint(key: &str, v: &str) -> Result<usize> {
    v.parse().map_err(|_| mismatch(key, "an unsigned integer", v))
}

fn parse_u64(key: &str, v: &str) -> Result<u64> {
    v.parse().map_err(|_| mismatch(key, "an unsigned integer", v))
}

fn parse_float(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| mismatch(key, "a finite number", v))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(mismatch(key, "a boolean", v)),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| t.trim().parse().map_err(|_| mismatch(key, "a comma-separated list of unsigned integers", v)))
        .collect()
}

fn list_text(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn smoothing_name(k: SmoothingKind) -> &'static str {
    match k {
        SmoothingKind::SpikeExponential => "spike_exp",
        SmoothingKind::MixtureOfRamps => "ramps",
        SmoothingKind::SpikeSlab => "spike_slab",
        SmoothingKind::SpikeGaussian { .. } => "spike_gauss",
    }
}

impl RunConfig {
    /// Sets one `section.key` from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data.source" => {
                let path = match &self.data.source {
                    DataSource::Idx(p) | DataSource::Raw(p) => p.clone(),
                    DataSource::Synthetic { .. } => PathBuf::new(),
                };
                self.data.source = match v {
                    "synthetic" => RunConfig::default().data.source,
                    "idx" => DataSource::Idx(path),
                    "raw" => DataSource::Raw(path),
                    _ => return Err(mismatch(key, "one of synthetic, idx, raw", v)),
                };
            }
            "data.path" => match &mut self.data.source {
                DataSource::Idx(p) | DataSource::Raw(p) => *p = PathBuf::from(v),
                DataSource::Synthetic { .. } => self.data.source = DataSource::Idx(PathBuf::from(v)),
            },
            "data.test_path" => self.data.test_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.dim" => m.x_dim = parse_uint(key, v)?,
            "data.modes" | "data.samples" | "data.noise" | "data.seed" => {
                let DataSource::Synthetic { modes, samples, noise, seed } = &mut self.data.source else {
                    return Err(Error::Config(format!("key `{key}` applies only to data.source = synthetic")));
                };
                match key {
                    "data.modes" => *modes = parse_uint(key, v)?,
                    "data.samples" => *samples = parse_uint(key, v)?,
                    "data.noise" => *noise = parse_float(key, v)?,
                    _ => *seed = parse_u64(key, v)?,
                }
            }
            "data.binarization" => self.data.binarization = v.parse()?,
            "data.train" => self.data.train = parse_uint(key, v)?,
            "data.valid" => self.data.valid = parse_uint(key, v)?,
            "rbm.units" => {
                let n = parse_uint(key, v)?;
                if n == 0 || n % 2 != 0 {
                    return Err(Error::Config(format!(
                        "rbm.units = {n} must be a positive even number (two equal sides)"
                    )));
                }
                m.rbm_units = n;
            }
            "posterior.groups" => m.posterior.groups = parse_uint(key, v)?,
            "posterior.hidden" => m.posterior.hidden = parse_list(key, v)?,
            "posterior.batch_norm" => m.posterior.batch_norm = parse_bool(key, v)?,
            "smoothing.kind" => {
                let sigma = match m.smoothing {
                    SmoothingKind::SpikeGaussian { prior_sigma } => prior_sigma,
                    _ => 1.0,
                };
                m.smoothing = match v {
                    "spike_exp" => SmoothingKind::SpikeExponential,
                    "ramps" => SmoothingKind::MixtureOfRamps,
                    "spike_slab" => SmoothingKind::SpikeSlab,
                    "spike_gauss" => SmoothingKind::SpikeGaussian { prior_sigma: sigma },
                    _ => return Err(mismatch(key, "one of spike_exp, ramps, spike_slab, spike_gauss", v)),
                };
            }
            "smoothing.prior_sigma" => {
                let s = parse_float(key, v)?;
                if s <= 0.0 {
                    return Err(mismatch(key, "a positive number", v));
                }
                if let SmoothingKind::SpikeGaussian { prior_sigma } = &mut m.smoothing {
                    *prior_sigma = s;
                } else {
                    m.smoothing = SmoothingKind::SpikeGaussian { prior_sigma: s };
                }
            }
            "smoothing.beta_start" => m.beta.start = parse_float(key, v)?,
            "smoothing.beta_slope" => m.beta.slope = parse_float(key, v)?,
            "smoothing.beta_cap" => m.beta.cap = parse_float(key, v)?,
            "smoothing.beta_floor" => m.beta.floor = parse_float(key, v)?,
            "continuous.layers" => m.continuous.layers = parse_uint(key, v)?,
            "continuous.vars" => m.continuous.vars = parse_uint(key, v)?,
            "continuous.prior_hidden" => m.continuous.prior_hidden = parse_uint(key, v)?,
            "continuous.posterior_hidden" => m.continuous.posterior_hidden = parse_list(key, v)?,
            "continuous.sharing" => m.continuous.sharing = v.parse()?,
            "decoder.hidden" => m.decoder_hidden = parse_list(key, v)?,
            "train.batch" => t.batch = parse_uint(key, v)?,
            "train.epochs" => t.epochs = parse_uint(key, v)?,
            "train.lr" => t.adam.lr = parse_float(key, v)?,
            "train.lr_tau" => t.adam.tau = parse_float(key, v)?,
            "train.beta1" => t.adam.beta1 = parse_float(key, v)?,
            "train.beta2" => t.adam.beta2 = parse_float(key, v)?,
            "train.eps" => t.adam.eps = parse_float(key, v)?,
            "train.gibbs_sweeps" => t.gibbs_sweeps = parse_uint(key, v)?,
            "train.chains_per_element" => t.chains_per_element = parse_uint(key, v)?,
            "train.warmup_strength" => t.warmup.kl_strength = parse_float(key, v)?,
            "train.warmup_epochs" => t.warmup.kl_epochs = parse_float(key, v)?,
            "train.rbm_warmup_strength" => t.warmup.rbm_strength = parse_float(key, v)?,
            "train.rbm_warmup_epochs" => t.warmup.rbm_epochs = parse_float(key, v)?,
            "train.seed" => t.seed = parse_u64(key, v)?,
            "ablation.no_continuous" => m.ablation.no_continuous = parse_bool(key, v)?,
            "ablation.linear_decoder" => m.ablation.linear_decoder = parse_bool(key, v)?,
            "ablation.no_lateral_w" => m.ablation.no_lateral_w = parse_bool(key, v)?,
            "ablation.factorial_posterior" => m.ablation.factorial_posterior = parse_bool(key, v)?,
            "eval.k" => {
                let k = parse_uint(key, v)?;
                if k == 0 {
                    return Err(mismatch(key, "a positive integer", v));
                }
                self.eval.k = k;
            }
            "eval.logz" => self.eval.logz = v.parse()?,
            "eval.zeta_is_z" => self.eval.zeta_is_z = parse_bool(key, v)?,
            "eval.seed" => self.eval.seed = parse_u64(key, v)?,
            "logz.rungs" => self.logz.rungs = parse_uint(key, v)?,
            "logz.samples" => self.logz.samples = parse_uint(key, v)?,
            "logz.repeats" => self.logz.repeats = parse_uint(key, v)?,
            "logz.target_rate" => self.logz.target_rate = parse_float(key, v)?,
            "output.dir" => self.output.dir = PathBuf::from(v),
            "output.checkpoint_every" => self.output.checkpoint_every = parse_uint(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`{}",
                    suggest(key, KEYS.iter().map(|k| k.0).chain(["preset"]))
                )))
            }
        }
        Ok(())
    }

    /// Current value of a key in the textual form accepted by [`set`](Self::set).
    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        let synth = match &self.data.source {
            DataSource::Synthetic { modes, samples, noise, seed } => Some((*modes, *samples, *noise, *seed)),
            _ => None,
        };
        Some(match key {
            "data.source" => match &self.data.source {
                DataSource::Synthetic { .. } => "synthetic".into(),
                DataSource::Idx(_) => "idx".into(),
                DataSource::Raw(_) => "raw".into(),
            },
            "data.path" => match &self.data.source {
                DataSource::Idx(p) | DataSource::Raw(p) => p.display().to_string(),
                DataSource::Synthetic { .. } => String::new(),
            },
            "data.test_path" => self.data.test_path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "data.modes" => synth.map(|s| s.0.to_string()).unwrap_or_default(),
            "data.dim" => m.x_dim.to_string(),
            "data.samples" => synth.map(|s| s.1.to_string()).unwrap_or_default(),
            "data.noise" => synth.map(|s| s.2.to_string()).unwrap_or_default(),
            "data.seed" => synth.map(|s| s.3.to_string()).unwrap_or_default(),
            "data.binarization" => self.data.binarization.to_string(),
            "data.train" => self.data.train.to_string(),
            "data.valid" => self.data.valid.to_string(),
            "rbm.units" => m.rbm_units.to_string(),
            "posterior.groups" => m.posterior.groups.to_string(),
            "posterior.hidden" => list_text(&m.posterior.hidden),
            "posterior.batch_norm" => m.posterior.batch_norm.to_string(),
            "smoothing.kind" => smoothing_name(m.smoothing).into(),
            "smoothing.prior_sigma" => match m.smoothing {
                SmoothingKind::SpikeGaussian { prior_sigma } => prior_sigma.to_string(),
                _ => String::new(),
            },
            "smoothing.beta_start" => m.beta.start.to_string(),
            "smoothing.beta_slope" => m.beta.slope.to_string(),
            "smoothing.beta_cap" => m.beta.cap.to_string(),
            "smoothing.beta_floor" => m.beta.floor.to_string(),
            "continuous.layers" => m.continuous.layers.to_string(),
            "continuous.vars" => m.continuous.vars.to_string(),
            "continuous.prior_hidden" => m.continuous.prior_hidden.to_string(),
            "continuous.posterior_hidden" => list_text(&m.continuous.posterior_hidden),
            "continuous.sharing" => m.continuous.sharing.to_string(),
            "decoder.hidden" => list_text(&m.decoder_hidden),
            "train.batch" => t.batch.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr" => t.adam.lr.to_string(),
            "train.lr_tau" => t.adam.tau.to_string(),
            "train.beta1" => t.adam.beta1.to_string(),
            "train.beta2" => t.adam.beta2.to_string(),
            "train.eps" => t.adam.eps.to_string(),
            "train.gibbs_sweeps" => t.gibbs_sweeps.to_string(),
            "train.chains_per_element" => t.chains_per_element.to_string(),
            "train.warmup_strength" => t.warmup.kl_strength.to_string(),
            "train.warmup_epochs" => t.warmup.kl_epochs.to_string(),
            "train.rbm_warmup_strength" => t.warmup.rbm_strength.to_string(),
            "train.rbm_warmup_epochs" => t.warmup.rbm_epochs.to_string(),
            "train.seed" => t.seed.to_string(),
            "ablation.no_continuous" => m.ablation.no_continuous.to_string(),
            "ablation.linear_decoder" => m.ablation.linear_decoder.to_string(),
            "ablation.no_lateral_w" => m.ablation.no_lateral_w.to_string(),
            "ablation.factorial_posterior" => m.ablation.factorial_posterior.to_string(),
            "eval.k" => self.eval.k.to_string(),
            "eval.logz" => match self.eval.logz {
                LogZSource::Exact => "exact".into(),
                LogZSource::Bridge => "bridge".into(),
                LogZSource::Value(v) => v.to_string(),
            },
            "eval.zeta_is_z" => self.eval.zeta_is_z.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            "logz.rungs" => self.logz.rungs.to_string(),
            "logz.samples" => self.logz.samples.to_string(),
            "logz.repeats" => self.logz.repeats.to_string(),
            "logz.target_rate" => self.logz.target_rate.to_string(),
            "output.dir" => self.output.dir.display().to_string(),
            "output.checkpoint_every" => self.output.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Parses config text and applies `overrides` (key, value) on top.
    pub fn parse(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') { k.to_string() } else { format!("{section}.{k}") };
            pairs.push((key, v.trim().to_string()));
        }
        pairs.extend(overrides.iter().cloned());
        let preset_name = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| "desk".into());
        let mut cfg = preset(&preset_name)?;
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let units = self.model.rbm_units;
        let groups = if self.model.ablation.factorial_posterior { 1 } else { self.model.posterior.groups };
        if groups == 0 || !units.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "posterior.groups = {groups} must divide rbm.units = {units}"
            )));
        }
        if let DataSource::Synthetic { samples, .. } = self.data.source {
            if self.data.train + self.data.valid > samples {
                return Err(Error::Config(format!(
                    "data.train + data.valid = {} exceeds data.samples = {samples}",
                    self.data.train + self.data.valid
                )));
            }
        }
        Ok(())
    }

    /// Full `key = value` echo, grouped by section; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset);
        let mut section = "";
        for (key, _, _) in KEYS {
            let (sec, name) = key.split_once('.').expect("sectioned key");
            let value = self.get(key).expect("known key");
            let synthetic_only = matches!(*key, "data.modes" | "data.samples" | "data.noise" | "data.seed");
            if value.is_empty() && (synthetic_only || key.starts_with("smoothing.") || key.ends_with("path")) {
                continue;
            }
            if sec != section {
                let _ = write!(out, "\n[{sec}]\n");
                section = sec;
            }
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Markdown table of keys, types, defaults and meanings.
    pub fn defaults_table() -> String {
        let d = RunConfig::default();
        let mut out = String::from("| key | type | default | meaning |\n|---|---|---|---|\n");
        for (key, ty, doc) in KEYS {
            let v = d.get(key).unwrap_or_default();
            let v = if v.is_empty() { "(unset)".to_string() } else { format!("`{v}`") };
            let ty = ty.replace('|', "\\|");
            let _ = writeln!(out, "| `{key}` | {ty} | {v} | {doc} |");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("", &[]).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# only a comment\n\n", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn machine_size_splits_evenly() {
        let c = RunConfig::parse("[rbm]\nunits = 128\n", &[]).unwrap();
        assert_eq!(c.model.rbm_units, 128);
        assert_eq!(c.model.n_left(), 64);
        let err = RunConfig::parse("[rbm]\nunits = 7\n", &[]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("even"), "{err}");
    }

    #[test]
    fn unknown_keys_get_suggestions() {
        let err = RunConfig::parse("[train]\nbtach = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("did you mean `train.batch`"), "{err}");
    }

    #[test]
    fn type_errors_name_key_and_token() {
        let err = RunConfig::parse("[train]\nbatch = many\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.batch") && msg.contains("unsigned integer") && msg.contains("many"), "{msg}");
    }

    #[test]
    fn overrides_win_over_file() {
        let ov = vec![("train.epochs".to_string(), "3".to_string())];
        let c = RunConfig::parse("[train]\nepochs = 9\n", &ov).unwrap();
        assert_eq!(c.train.epochs, 3);
    }

    #[test]
    fn presets_follow_the_architecture_table() {
        let c = preset("mnist_dyn").unwrap();
        assert_eq!(
            (c.model.continuous.layers, c.model.continuous.vars, c.model.continuous.prior_hidden),
            (18, 64, 1000)
        );
        assert_eq!(c.model.continuous.sharing, Sharing::None);
        assert_eq!(c.model.rbm_units, 128);
        assert_eq!(preset("caltech").unwrap().model.continuous.sharing, Sharing::Complete);
        assert_eq!(preset("omniglot").unwrap().model.continuous.sharing, Sharing::Groups(2));
        assert!(preset("mnist").unwrap_err().to_string().contains("mnist_dyn"));
    }

    #[test]
    fn text_echo_round_trips() {
        for name in PRESETS {
            let mut c = preset(name).unwrap();
            c.set("smoothing.kind", "spike_gauss").unwrap();
            c.set("ablation.no_lateral_w", "true").unwrap();
            let back = RunConfig::parse(&c.to_text(), &[]).unwrap();
            assert_eq!(back, c, "{name}");
        }
    }

    #[test]
    fn every_key_has_a_getter() {
        let c = RunConfig::default();
        for (k, _, _) in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}
