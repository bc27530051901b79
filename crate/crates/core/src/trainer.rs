//! Training loop: persistent chains, warm-up, Adam updates, metrics.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{LossWeights, Model, ModelConfig};
use crate::numerics::nn::apply_bn_updates;
use crate::numerics::{AdamConfig, AdamState, Ctx, Tensor};
use crate::rbm::GibbsChains;
use crate::rng::{self, Purpose};

/// KL down-weighting early in training. A strength `s` over `E` epochs
/// gives weight `1 / (1 + s * max(0, 1 - epoch / E))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Warmup {
    pub kl_strength: f64,
    pub kl_epochs: f64,
    pub rbm_strength: f64,
    pub rbm_epochs: f64,
}

impl Default for Warmup {
    fn default() -> Self {
        Self {
            kl_strength: 20.0,
            kl_epochs: 5.0,
            rbm_strength: 2.0,
            rbm_epochs: 20.0,
        }
    }
}

fn ramp_weight(strength: f64, epochs: f64, epoch: f64) -> f64 {
    if epochs <= 0.0 {
        return 1.0;
    }
    1.0 / (1.0 + strength * (1.0 - epoch / epochs).max(0.0))
}

impl Warmup {
    pub fn weights(&self, epoch: f64) -> LossWeights {
        LossWeights {
            kl: ramp_weight(self.kl_strength, self.kl_epochs, epoch),
            rbm: ramp_weight(self.rbm_strength, self.rbm_epochs, epoch),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub adam: AdamConfig,
    pub gibbs_sweeps: usize,
    pub chains_per_element: usize,
    pub warmup: Warmup,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 100,
            epochs: 30,
            adam: AdamConfig::default(),
            gibbs_sweeps: 20,
            chains_per_element: 1,
            warmup: Warmup::default(),
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::Config(format!("train.batch = {} must be at least 2", self.batch)));
        }
        if self.chains_per_element == 0 {
            return Err(Error::Config("train.chains_per_element must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be positive", self.adam.lr)));
        }
        Ok(())
    }
}

/// One row of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub epoch: usize,
    pub step: u64,
    /// Batch-mean ELBO; includes `log Z` whenever it is exactly computable.
    pub elbo: f64,
    pub recon: f64,
    pub kl_gauss: f64,
    pub kl_discrete: f64,
    pub beta: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "epoch step elbo recon kl_gauss kl_discrete beta lr";
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6e}",
            self.epoch, self.step, self.elbo, self.recon, self.kl_gauss, self.kl_discrete, self.beta, self.lr
        )
    }
}

/// Everything needed to continue training bit-for-bit.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub adam: AdamState,
    pub chains: GibbsChains,
    pub epoch: usize,
    pub step: u64,
    /// Fractional epoch used by the warm-up schedule.
    pub progress: f64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = rng::stream(cfg.seed, Purpose::Init, 0, 0);
        let model = Model::new(model_cfg, &mut init)?;
        let adam = AdamState::new(&model.store);
        let mut chain_rng = rng::stream(cfg.seed, Purpose::ChainInit, 0, 0);
        let n = model.units();
        let chains = GibbsChains::random(cfg.batch * cfg.chains_per_element, n / 2, n - n / 2, &mut chain_rng);
        Ok(Self {
            model,
            cfg: cfg.clone(),
            adam,
            chains,
            epoch: 0,
            step: 0,
            progress: 0.0,
        })
    }

    /// Starts the decoder output at the training data's pixel means.
    pub fn init_from_data(&mut self, data: &Dataset) -> Result<()> {
        self.model.init_decoder_bias(&data.mean_pixel())
    }

    /// `log Z` when one side of the machine is small enough to sum out.
    fn tracked_log_z(&self) -> Option<f64> {
        let rbm = self.model.rbm();
        if rbm.n_left().min(rbm.n_right()) <= 20 {
            rbm.log_partition_exact().ok()
        } else {
            None
        }
    }

    /// One Adam update on minibatch `x`.
    pub fn train_step(&mut self, x: &Tensor) -> Result<StepMetrics> {
        let rbm = self.model.rbm();
        self.chains.advance(&rbm, self.cfg.gibbs_sweeps, self.cfg.seed, self.step)?;
        let negative = self.chains.negative_phase(&rbm)?;
        let mut noise_rng = rng::stream(self.cfg.seed, Purpose::Noise, self.step, 0);
        let noise = self.model.draw_noise(&mut noise_rng, x.rows());
        let weights = self.cfg.warmup.weights(self.progress);

        let mut ctx = Ctx::new(&self.model.store, true);
        let pass = self.model.forward(&mut ctx, x, &noise, false)?;
        let loss = self.model.loss(&mut ctx, &pass, &negative, weights)?;
        let bn = ctx.take_bn_updates();
        let (recon, kl_gauss, kl_discrete) = (loss.recon, loss.kl_gauss, loss.kl_discrete);
        let grads = ctx.backward(loss.loss)?;
        let log_z = self.tracked_log_z().unwrap_or(0.0);
        self.adam.step(&self.cfg.adam, &mut self.model.store, &grads)?;
        apply_bn_updates(&mut self.model.store, &bn);

        let m = StepMetrics {
            epoch: self.epoch,
            step: self.step,
            elbo: recon - kl_gauss - kl_discrete - log_z,
            recon,
            kl_gauss,
            kl_discrete,
            beta: self.model.beta_value(),
            lr: self.cfg.adam.step_size(self.adam.t),
        };
        self.step += 1;
        Ok(m)
    }

    /// One pass over `data` in a seeded random order. A trailing partial
    /// batch is dropped.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<StepMetrics>> {
        let b = self.cfg.batch;
        let steps = data.len() / b;
        if steps == 0 {
            return Err(Error::Config(format!(
                "dataset of {} examples is smaller than one batch of {b}",
                data.len()
            )));
        }
        self.model.set_beta_cap(self.epoch as f64);
        let order = shuffled(data.len(), self.cfg.seed, self.epoch as u64);
        let mut rows = Vec::with_capacity(steps);
        for s in 0..steps {
            self.progress = self.epoch as f64 + s as f64 / steps as f64;
            let x = data.batch(&order[s * b..(s + 1) * b], self.cfg.seed, self.epoch as u64);
            rows.push(self.train_step(&x)?);
        }
        self.epoch += 1;
        self.progress = self.epoch as f64;
        Ok(rows)
    }
}

/// Fisher-Yates permutation from the shuffle stream of `epoch`.
pub fn shuffled(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous::ContinuousConfig;
    use crate::data::{synthetic_modes, Binarization};
    use crate::posterior::PosteriorConfig;

    fn small() -> (ModelConfig, TrainConfig) {
        let m = ModelConfig {
            x_dim: 16,
            rbm_units: 8,
            posterior: PosteriorConfig {
                groups: 2,
                hidden: vec![16],
                batch_norm: true,
            },
            continuous: ContinuousConfig {
                layers: 1,
                vars: 4,
                prior_hidden: 8,
                posterior_hidden: vec![8],
                ..ContinuousConfig::default()
            },
            ..ModelConfig::default()
        };
        let t = TrainConfig {
            batch: 20,
            epochs: 2,
            gibbs_sweeps: 5,
            ..TrainConfig::default()
        };
        (m, t)
    }

    #[test]
    fn warmup_reaches_one_exactly() {
        let w = Warmup::default();
        assert_eq!(w.weights(0.0).kl, 1.0 / 21.0);
        assert_eq!(w.weights(0.0).rbm, 1.0 / 3.0);
        assert_eq!(w.weights(5.0).kl, 1.0);
        assert_eq!(w.weights(7.5).kl, 1.0);
        assert!(w.weights(7.5).rbm < 1.0);
        assert_eq!(w.weights(20.0).rbm, 1.0);
        assert_eq!(w.weights(33.0), LossWeights::FULL);
    }

    #[test]
    fn identical_steps_give_identical_parameters() {
        let (m, t) = small();
        let x = synthetic_modes(2, 16, 20, 0.1, 3).unwrap().samples;
        let mut a = Trainer::new(&m, &t).unwrap();
        let mut b = Trainer::new(&m, &t).unwrap();
        let ma = a.train_step(&x).unwrap();
        let mb = b.train_step(&x).unwrap();
        assert_eq!(ma, mb);
        for (ea, eb) in a.model.store.entries().iter().zip(b.model.store.entries()) {
            assert_eq!(ea.value, eb.value, "{}", ea.name);
        }
        assert_eq!(a.chains.as_bytes(), b.chains.as_bytes());
    }

    #[test]
    fn epoch_runs_and_reports_every_step() {
        let (m, t) = small();
        let data = synthetic_modes(2, 16, 100, 0.1, 3).unwrap();
        let ds = Dataset::new(data.samples, Binarization::None).unwrap();
        let mut tr = Trainer::new(&m, &t).unwrap();
        let rows = tr.train_epoch(&ds).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.elbo.is_finite()));
        assert_eq!(tr.epoch, 1);
        assert_eq!(rows[4].step, 4);
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let a = shuffled(50, 1, 2);
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
        assert_eq!(a, shuffled(50, 1, 2));
        assert_ne!(a, shuffled(50, 1, 3));
    }
}
