//! End-to-end drivers shared by the command line and integration tests.

use std::fmt;

use crate::config::{DataSource, LogZSettings, RunConfig};
use crate::data::{load_idx_images, load_raw, synthetic_modes, Dataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalConfig, LogZSource};
use crate::model::Model;
use crate::numerics::Tensor;
use crate::partition::{estimate_log_z, tune_ladder, TuneOptions};
use crate::trainer::{StepMetrics, Trainer};

pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    /// Generating prototypes for synthetic data.
    pub prototypes: Option<Tensor>,
}

fn load_images(source: &DataSource, path_key: &str) -> Result<Tensor> {
    match source {
        DataSource::Idx(p) => load_idx_images(p),
        DataSource::Raw(p) => load_raw(p),
        DataSource::Synthetic { .. } => Err(Error::Config(format!("{path_key} needs an idx or raw source"))),
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Splits> {
    let d = &cfg.data;
    let (images, prototypes) = match &d.source {
        DataSource::Synthetic { modes, samples, noise, seed } => {
            let s = synthetic_modes(*modes, cfg.model.x_dim, *samples, *noise, *seed)?;
            (s.samples, Some(s.prototypes))
        }
        other => (load_images(other, "data.path")?, None),
    };
    if images.cols() != cfg.model.x_dim {
        return Err(Error::Config(format!(
            "data has {} pixels per example but data.dim = {}",
            images.cols(),
            cfg.model.x_dim
        )));
    }
    let all = Dataset::new(images, d.binarization)?;
    let (train, valid, mut test) = all.split(d.train, d.valid)?;
    if let Some(path) = &d.test_path {
        let source = match &d.source {
            DataSource::Raw(_) => DataSource::Raw(path.clone()),
            _ => DataSource::Idx(path.clone()),
        };
        let images = load_images(&source, "data.test_path")?;
        if images.cols() != cfg.model.x_dim {
            return Err(Error::Config(format!(
                "test data has {} pixels per example but data.dim = {}",
                images.cols(),
                cfg.model.x_dim
            )));
        }
        test = Dataset::new(images, d.binarization)?;
    }
    Ok(Splits {
        train,
        valid,
        test,
        prototypes,
    })
}

/// A log partition value and how it was obtained.
#[derive(Clone, Debug, PartialEq)]
pub struct LogZReport {
    pub value: f64,
    pub stderr: f64,
    pub source: String,
    /// Per-repeat `(estimate, stderr)` for bridge estimates.
    pub repeats: Vec<(f64, f64)>,
}

impl fmt::Display for LogZReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6} +- {:.6} ({})", self.value, self.stderr, self.source)
    }
}

pub fn log_partition(model: &Model, source: LogZSource, settings: &LogZSettings, seed: u64) -> Result<LogZReport> {
    let rbm = model.rbm();
    match source {
        LogZSource::Exact => Ok(LogZReport {
            value: rbm.log_partition_exact()?,
            stderr: 0.0,
            source: "exact".into(),
            repeats: Vec::new(),
        }),
        LogZSource::Value(v) => Ok(LogZReport {
            value: v,
            stderr: 0.0,
            source: "supplied".into(),
            repeats: Vec::new(),
        }),
        LogZSource::Bridge => {
            let opts = TuneOptions {
                target: settings.target_rate,
                initial_rungs: settings.rungs,
                ..TuneOptions::default()
            };
            let ladder = tune_ladder(&rbm, &opts, seed)?;
            let est = estimate_log_z(&rbm, &ladder, settings.samples, settings.repeats, seed)?;
            let tuned = if ladder.converged { "" } else { ", ladder outside the swap-rate band" };
            Ok(LogZReport {
                value: est.mean,
                stderr: est.stderr,
                source: format!("bridge, {} rungs{tuned}", ladder.rungs()),
                repeats: est.repeats,
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub elbo: f64,
    pub iw: f64,
    pub k: usize,
    pub log_z: LogZReport,
}

impl fmt::Display for Evaluation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "elbo {:.4}  iw_ll(K={}) {:.4}  log_z {}",
            self.elbo, self.k, self.iw, self.log_z
        )
    }
}

/// Mean ELBO and IW bound over `data` with the given `log Z`.
pub fn evaluate_with(model: &Model, data: &Dataset, cfg: &RunConfig, log_z: LogZReport) -> Result<Evaluation> {
    let x = data.evaluation_view(cfg.eval.seed);
    let ec = EvalConfig {
        k: cfg.eval.k,
        seed: cfg.eval.seed,
        zeta_is_z: cfg.eval.zeta_is_z,
        ..EvalConfig::default()
    };
    let w = eval::log_weights(model, &x, log_z.value, &ec, 0)?;
    let iw: Vec<f64> = (0..w.rows()).map(|r| eval::log_mean_exp(w.row(r))).collect();
    let elbo: Vec<f64> = (0..w.rows()).map(|r| w.get(r, 0)).collect();
    Ok(Evaluation {
        elbo: eval::mean(&elbo),
        iw: eval::mean(&iw),
        k: cfg.eval.k,
        log_z,
    })
}

pub fn evaluate(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<Evaluation> {
    let log_z = log_partition(model, cfg.eval.logz, &cfg.logz, cfg.eval.seed)?;
    evaluate_with(model, data, cfg, log_z)
}

/// Fresh trainer with the decoder bias matched to the training data.
pub fn new_trainer(cfg: &RunConfig, train: &Dataset) -> Result<Trainer> {
    let mut t = Trainer::new(&cfg.model, &cfg.train)?;
    t.init_from_data(train)?;
    Ok(t)
}

/// Trains until `cfg.train.epochs`, calling `on_epoch` after every epoch.
pub fn train_until(
    trainer: &mut Trainer,
    cfg: &RunConfig,
    train: &Dataset,
    mut on_epoch: impl FnMut(&Trainer, &[StepMetrics]) -> Result<()>,
) -> Result<()> {
    while trainer.epoch < cfg.train.epochs {
        let rows = trainer.train_epoch(train)?;
        on_epoch(trainer, &rows)?;
    }
    Ok(())
}

/// Hyperparameter varied by a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    GibbsIters,
    RbmSize,
    PosteriorLayers,
}

impl Experiment {
    pub fn key(&self) -> &'static str {
        match self {
            Experiment::GibbsIters => "train.gibbs_sweeps",
            Experiment::RbmSize => "rbm.units",
            Experiment::PosteriorLayers => "posterior.groups",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gibbs_iters" => Ok(Experiment::GibbsIters),
            "rbm_size" => Ok(Experiment::RbmSize),
            "posterior_layers" => Ok(Experiment::PosteriorLayers),
            _ => Err(Error::Config(format!(
                "unknown experiment {s:?}; expected gibbs_iters, rbm_size or posterior_layers"
            ))),
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::GibbsIters => "gibbs_iters",
            Experiment::RbmSize => "rbm_size",
            Experiment::PosteriorLayers => "posterior_layers",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: usize,
    pub eval: Evaluation,
}

/// One training run per grid value, all sharing `base`'s seeds; each row
/// reports the held-out bounds after the final epoch.
pub fn sweep(base: &RunConfig, experiment: Experiment, grid: &[usize]) -> Result<Vec<SweepRow>> {
    let configs = grid
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            c.set(experiment.key(), &v.to_string())?;
            c.validate()?;
            Ok((v, c))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    for (value, cfg) in configs {
        let data = load_data(&cfg)?;
        let mut trainer = new_trainer(&cfg, &data.train)?;
        train_until(&mut trainer, &cfg, &data.train, |_, _| Ok(()))?;
        let eval = evaluate(&trainer.model, &data.test, &cfg)?;
        rows.push(SweepRow { value, eval });
    }
    Ok(rows)
}

/// Whitespace-separated table with a header line.
pub fn sweep_table(experiment: Experiment, rows: &[SweepRow]) -> String {
    let mut out = format!("{experiment} iw_ll elbo k\n");
    for r in rows {
        out.push_str(&format!("{} {:.6} {:.6} {}\n", r.value, r.eval.iw, r.eval.elbo, r.eval.k));
    }
    out
}
