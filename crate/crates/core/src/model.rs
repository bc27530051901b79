//! The full discrete VAE: posterior, machine prior, continuous layers, decoder.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::continuous::{ContinuousConfig, Hierarchy, LayerPass};
use crate::error::{Error, Result};
use crate::numerics::nn::Constraint;
use crate::numerics::{Ctx, Mlp, MlpSpec, ParamId, ParamStore, Tensor, Var};
use crate::posterior::{self, DiscreteKl, Encoder, PosteriorConfig, PosteriorPass};
use crate::rbm::{PhaseStats, RbmParams};
use crate::smoothing::{BetaSchedule, SmoothingKind, Q_MAX};

/// Switches that progressively remove model components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_continuous: bool,
    pub linear_decoder: bool,
    pub no_lateral_w: bool,
    pub factorial_posterior: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub x_dim: usize,
    /// Total machine units, split evenly between the two sides.
    pub rbm_units: usize,
    pub posterior: PosteriorConfig,
    pub smoothing: SmoothingKind,
    pub beta: BetaSchedule,
    pub continuous: ContinuousConfig,
    pub decoder_hidden: Vec<usize>,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            x_dim: 64,
            rbm_units: 16,
            posterior: PosteriorConfig {
                groups: 2,
                hidden: vec![64],
                batch_norm: true,
            },
            smoothing: SmoothingKind::SpikeExponential,
            beta: BetaSchedule::default(),
            continuous: ContinuousConfig::default(),
            decoder_hidden: Vec::new(),
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rbm_units == 0 || !self.rbm_units.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "rbm.units = {} must be a positive even number (two equal sides)",
                self.rbm_units
            )));
        }
        if self.x_dim == 0 {
            return Err(Error::Config("data dimension must be positive".into()));
        }
        Ok(())
    }

    /// The configuration after applying the ablation switches.
    pub fn effective(&self) -> ModelConfig {
        let mut c = self.clone();
        if c.ablation.no_continuous {
            c.continuous.layers = 0;
        }
        if c.ablation.linear_decoder {
            c.decoder_hidden.clear();
        }
        if c.ablation.factorial_posterior {
            c.posterior.groups = 1;
        }
        c
    }

    pub fn n_left(&self) -> usize {
        self.rbm_units / 2
    }
}

/// Random inputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    pub rho: Tensor,
    pub aux: Tensor,
    pub normals: Vec<Tensor>,
}

impl Noise {
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, batch: usize, units: usize, layers: usize, vars: usize) -> Self {
        let rho = Tensor::from_fn(batch, units, |_, _| rng.random::<f64>());
        let aux = Tensor::from_fn(batch, units, |_, _| rng.random::<f64>());
        let normals = (0..layers)
            .map(|_| Tensor::from_fn(batch, vars, |_, _| rng.sample(StandardNormal)))
            .collect();
        Self { rho, aux, normals }
    }
}

/// Everything produced by one posterior pass and decode.
pub struct ForwardPass {
    pub posterior: PosteriorPass,
    pub layers: Vec<LayerPass>,
    /// Clamped decoder logits.
    pub logits: Var,
    /// `B x 1` Bernoulli log-likelihood of the input.
    pub recon: Var,
    pub weights: Var,
    pub bias: Var,
}

/// Per-term weights applied during warm-up.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kl: f64,
    /// Extra factor on the machine's cross-entropy term.
    pub rbm: f64,
}

impl LossWeights {
    pub const FULL: LossWeights = LossWeights { kl: 1.0, rbm: 1.0 };
}

/// Scalar loss plus batch-mean reporting values.
pub struct Loss {
    pub loss: Var,
    pub recon: f64,
    pub kl_gauss: f64,
    /// Discrete KL without `log Z`.
    pub kl_discrete: f64,
    pub discrete: DiscreteKl,
}

/// Logit bound matching probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn logit_bound() -> f64 {
    (Q_MAX / (1.0 - Q_MAX)).ln()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub hierarchy: Hierarchy,
    pub decoder: Mlp,
    pub weights: ParamId,
    pub bias: ParamId,
    pub beta: ParamId,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let eff = cfg.effective();
        let n = eff.rbm_units;
        let nl = eff.n_left();
        let mut store = ParamStore::new();
        let w0 = if eff.ablation.no_lateral_w {
            Tensor::zeros(nl, n - nl)
        } else {
            Tensor::from_fn(nl, n - nl, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal))
        };
        let weights = store.add("rbm.weights", w0);
        if eff.ablation.no_lateral_w {
            store.set_trainable(weights, false);
        }
        let bias = store.add("rbm.bias", Tensor::zeros(1, n));
        let beta0 = eff.beta.max_at(0.0);
        let beta = store.add("smoothing.beta", Tensor::scalar(beta0));
        store.set_constraint(
            beta,
            Constraint::Range {
                lo: eff.beta.floor,
                hi: beta0,
            },
        );
        if !matches!(eff.smoothing, SmoothingKind::SpikeExponential) {
            store.set_trainable(beta, false);
        }
        let encoder = Encoder::new(&mut store, eff.x_dim, n, &eff.posterior, eff.smoothing, rng)?;
        let hierarchy = Hierarchy::new(&mut store, eff.x_dim, n, &eff.continuous, eff.posterior.batch_norm, rng)?;
        let spec = MlpSpec {
            inputs: hierarchy.decoder_inputs(n),
            hidden: &eff.decoder_hidden,
            outputs: eff.x_dim,
            hidden_bn: true,
            output_bn: None,
            output_gain: 1.0,
        };
        let decoder = Mlp::new(&mut store, "decoder", &spec, rng);
        Ok(Self {
            cfg: eff,
            store,
            encoder,
            hierarchy,
            decoder,
            weights,
            bias,
            beta,
        })
    }

    pub fn units(&self) -> usize {
        self.cfg.rbm_units
    }

    pub fn rbm(&self) -> RbmParams {
        RbmParams {
            weights: self.store.get(self.weights).clone(),
            bias: self.store.get(self.bias).clone(),
        }
    }

    pub fn beta_value(&self) -> f64 {
        self.store.get(self.beta).item()
    }

    /// Moves the upper bound of `beta` for the given epoch and projects.
    pub fn set_beta_cap(&mut self, epoch: f64) {
        let cap = self.cfg.beta.max_at(epoch);
        self.store.set_constraint(
            self.beta,
            Constraint::Range {
                lo: self.cfg.beta.floor,
                hi: cap.max(self.cfg.beta.floor),
            },
        );
        self.store.project();
    }

    /// Starts the decoder bias at the logit of the mean pixel intensity.
    pub fn init_decoder_bias(&mut self, mean: &[f64]) -> Result<()> {
        let id = self
            .store
            .find("decoder.out.bias")
            .ok_or_else(|| Error::contract("decoder has no output bias"))?;
        let b = self.store.get_mut(id);
        if b.len() != mean.len() {
            return Err(Error::Length(format!("{} means for {} pixels", mean.len(), b.len())));
        }
        let eps = 1e-3;
        for (o, &m) in b.data_mut().iter_mut().zip(mean) {
            let m = m.clamp(eps, 1.0 - eps);
            *o = (m / (1.0 - m)).ln();
        }
        Ok(())
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> Noise {
        Noise::draw(rng, batch, self.units(), self.hierarchy.layers(), self.cfg.continuous.vars)
    }

    /// Posterior pass and decode of `x`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: &Tensor, noise: &Noise, zeta_is_z: bool) -> Result<ForwardPass> {
        if x.cols() != self.cfg.x_dim {
            return Err(Error::Dimension {
                op: "model input",
                left: (x.rows(), self.cfg.x_dim),
                right: x.shape(),
            });
        }
        let xv = ctx.tape.constant(x.clone())?;
        let beta = ctx.param(self.beta)?;
        let post = self.encoder.sample(ctx, xv, beta, &noise.rho, &noise.aux, zeta_is_z)?;
        let (layers, dec_in) = self.hierarchy.forward(ctx, xv, post.zeta, &noise.normals)?;
        let raw = self.decoder.forward(ctx, dec_in)?;
        let bound = logit_bound();
        let logits = ctx.tape.clamp(raw, -bound, bound)?;
        let recon = bernoulli_log_likelihood(ctx, xv, logits)?;
        let weights = ctx.param(self.weights)?;
        let bias = ctx.param(self.bias)?;
        Ok(ForwardPass {
            posterior: post,
            layers,
            logits,
            recon,
            weights,
            bias,
        })
    }

    /// Negative ELBO surrogate (without `log Z`) with warm-up weights.
    pub fn loss(&self, ctx: &mut Ctx<'_>, pass: &ForwardPass, negative: &PhaseStats, w: LossWeights) -> Result<Loss> {
        let batch = ctx.tape.shape(pass.recon).0 as f64;
        let recon_sum = ctx.tape.sum(pass.recon)?;
        let recon_mean = ctx.tape.scale(recon_sum, 1.0 / batch)?;
        let discrete = posterior::discrete_kl(ctx, &pass.posterior, pass.weights, pass.bias, negative, self.cfg.smoothing)?;

        let mut kl_gauss_value = 0.0;
        let mut kl = discrete.negentropy;
        if let Some(g) = discrete.gauss_kl {
            kl = ctx.tape.add(kl, g)?;
        }
        let cross = ctx.tape.scale(discrete.cross_entropy, w.rbm)?;
        kl = ctx.tape.add(kl, cross)?;
        for layer in &pass.layers {
            let s = ctx.tape.sum(layer.kl)?;
            let m = ctx.tape.scale(s, 1.0 / batch)?;
            kl_gauss_value += ctx.tape.value(m).item();
            kl = ctx.tape.add(kl, m)?;
        }
        let weighted = ctx.tape.scale(kl, w.kl)?;
        let loss = ctx.tape.sub(weighted, recon_mean)?;
        let recon = ctx.tape.value(recon_mean).item();
        let loss_value = ctx.tape.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss = {loss_value} (recon {recon}, kl_gauss {kl_gauss_value}, kl_discrete {})",
                discrete.value
            )));
        }
        Ok(Loss {
            loss,
            recon,
            kl_gauss: kl_gauss_value,
            kl_discrete: discrete.value,
            discrete,
        })
    }

    /// Decodes `zeta` through the prior side of the continuous layers.
    /// Returns pixel probabilities.
    pub fn decode_prior(&self, ctx: &mut Ctx<'_>, zeta: &Tensor, normals: &[Tensor]) -> Result<Tensor> {
        let z = ctx.tape.constant(zeta.clone())?;
        let dec_in = self.hierarchy.generate(ctx, z, normals)?;
        let raw = self.decoder.forward(ctx, dec_in)?;
        let bound = logit_bound();
        let logits = ctx.tape.clamp(raw, -bound, bound)?;
        Ok(ctx.tape.value(logits).map(crate::numerics::logistic))
    }
}

/// `sum_d x_d l_d - softplus(l_d)` per row.
pub fn bernoulli_log_likelihood(ctx: &mut Ctx<'_>, x: Var, logits: Var) -> Result<Var> {
    let xl = ctx.tape.mul(x, logits)?;
    let sp = ctx.tape.softplus(logits)?;
    let ll = ctx.tape.sub(xl, sp)?;
    ctx.tape.sum_cols(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            x_dim: 6,
            rbm_units: 4,
            posterior: PosteriorConfig {
                groups: 2,
                hidden: vec![5],
                batch_norm: true,
            },
            continuous: ContinuousConfig {
                layers: 1,
                vars: 2,
                prior_hidden: 4,
                posterior_hidden: vec![3],
                ..ContinuousConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn odd_machine_size_is_rejected() {
        let cfg = ModelConfig {
            rbm_units: 7,
            ..tiny()
        };
        let err = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("rbm.units"), "{err}");
    }

    #[test]
    fn ablations_compose() {
        let cfg = ModelConfig {
            ablation: Ablation {
                no_continuous: true,
                linear_decoder: true,
                no_lateral_w: true,
                factorial_posterior: true,
            },
            decoder_hidden: vec![8],
            ..tiny()
        };
        let m = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.hierarchy.layers(), 0);
        assert_eq!(m.encoder.groups(), 1);
        assert!(m.cfg.decoder_hidden.is_empty());
        assert!(!m.store.is_trainable(m.weights));
        assert!(m.rbm().weights.data().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn perfect_reconstruction_has_zero_log_loss() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let b = logit_bound();
        let x = ctx.tape.constant(Tensor::row_vector(vec![1.0, 0.0])).unwrap();
        let l = ctx.tape.constant(Tensor::row_vector(vec![b, -b])).unwrap();
        let ll = bernoulli_log_likelihood(&mut ctx, x, l).unwrap();
        let v = ctx.tape.value(ll).item();
        assert!(v < 0.0 && v > -3e-7, "{v}");
    }

    #[test]
    fn forward_is_deterministic_for_fixed_noise() {
        let m = Model::new(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Tensor::from_fn(3, 6, |r, c| ((r + c) % 2) as f64);
        let noise = m.draw_noise(&mut ChaCha8Rng::seed_from_u64(2), 3);
        let neg = m.rbm().exact_stats().unwrap();
        let run = || {
            let mut ctx = Ctx::new(&m.store, true);
            let pass = m.forward(&mut ctx, &x, &noise, false).unwrap();
            let loss = m.loss(&mut ctx, &pass, &neg, LossWeights::FULL).unwrap();
            ctx.tape.value(loss.loss).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
