//! Autoregressive hierarchy of Gaussian latent layers above the decoder.
//!
//! Posterior layer `m` sees `concat(x, zeta, u_1..u_{m-1})`; the matching
//! prior layer sees the same without `x`. With parameter sharing the prior
//! input becomes `M zeta + sum_{l<m} u_l` for a trainable projection `M`,
//! and one network serves every layer in a sharing group.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Ctx, Mlp, MlpSpec, ParamId, ParamStore, Tensor, Var};
use crate::posterior::{LOG_SIGMA_MAX, LOG_SIGMA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sharing {
    None,
    /// Layers split into this many consecutive groups, one prior network each.
    Groups(usize),
    Complete,
}

impl fmt::Display for Sharing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sharing::None => write!(f, "none"),
            Sharing::Groups(g) => write!(f, "groups:{g}"),
            Sharing::Complete => write!(f, "complete"),
        }
    }
}

impl FromStr for Sharing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Sharing::None),
            "complete" => Ok(Sharing::Complete),
            _ => {
                let g = s
                    .strip_prefix("groups:")
                    .and_then(|g| g.parse::<usize>().ok())
                    .filter(|&g| g > 0)
                    .ok_or_else(|| {
                        Error::Config(format!("sharing must be none, complete or groups:<g>, got {s:?}"))
                    })?;
                Ok(Sharing::Groups(g))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousConfig {
    pub layers: usize,
    pub vars: usize,
    pub prior_hidden: usize,
    pub posterior_hidden: Vec<usize>,
    pub sharing: Sharing,
}

impl Default for ContinuousConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            vars: 16,
            prior_hidden: 64,
            posterior_hidden: vec![64],
            sharing: Sharing::None,
        }
    }
}

/// `u = mu + exp(log_sigma) * noise`.
pub fn gaussian_sample(ctx: &mut Ctx<'_>, mu: Var, log_sigma: Var, noise: &Tensor) -> Result<Var> {
    let sigma = ctx.tape.exp(log_sigma)?;
    let eps = ctx.tape.constant(noise.clone())?;
    let spread = ctx.tape.mul(sigma, eps)?;
    ctx.tape.add(mu, spread)
}

/// Closed-form `KL[N(mu_q, s_q^2) || N(mu_p, s_p^2)]` summed over elements.
pub fn gaussian_kl(mu_q: &[f64], sigma_q: &[f64], mu_p: &[f64], sigma_p: &[f64]) -> Result<f64> {
    let n = mu_q.len();
    if sigma_q.len() != n || mu_p.len() != n || sigma_p.len() != n {
        return Err(Error::Length("gaussian_kl arguments differ in length".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        if !(sigma_q[i] > 0.0 && sigma_p[i] > 0.0) {
            return Err(Error::contract(format!("non-positive sigma at element {i}")));
        }
        let d = mu_q[i] - mu_p[i];
        total += sigma_p[i].ln() - sigma_q[i].ln() + (sigma_q[i] * sigma_q[i] + d * d) / (2.0 * sigma_p[i] * sigma_p[i])
            - 0.5;
    }
    Ok(total)
}

/// Per-row Gaussian KL on the tape from `(mu, log sigma)` pairs, `B x 1`.
pub fn gaussian_kl_rows(ctx: &mut Ctx<'_>, mu_q: Var, ls_q: Var, mu_p: Var, ls_p: Var) -> Result<Var> {
    let t = &mut ctx.tape;
    let ls_diff = t.sub(ls_p, ls_q)?;
    let two_q = t.scale(ls_q, 2.0)?;
    let var_q = t.exp(two_q)?;
    let d = t.sub(mu_q, mu_p)?;
    let d2 = t.square(d)?;
    let num = t.add(var_q, d2)?;
    let two_p = t.scale(ls_p, -2.0)?;
    let inv_var_p = t.exp(two_p)?;
    let ratio = t.mul(num, inv_var_p)?;
    let half = t.scale(ratio, 0.5)?;
    let kl = t.add(ls_diff, half)?;
    let kl = t.add_scalar(kl, -0.5)?;
    t.sum_cols(kl)
}

/// Log-density of `u` under a diagonal Gaussian, per row.
pub fn gaussian_log_density(u: &Tensor, mu: &Tensor, log_sigma: &Tensor) -> Vec<f64> {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..u.rows())
        .map(|r| {
            let mut s = 0.0;
            for c in 0..u.cols() {
                let ls = log_sigma.get(r, c);
                let w = (u.get(r, c) - mu.get(r, c)) * (-ls).exp();
                s += -0.5 * w * w - ls - half_ln_2pi;
            }
            s
        })
        .collect()
}

/// Values of one layer's pass.
#[derive(Clone, Debug)]
pub struct LayerPass {
    pub sample: Var,
    pub mu_q: Var,
    pub log_sigma_q: Var,
    pub mu_p: Var,
    pub log_sigma_p: Var,
    /// `B x 1` closed-form KL.
    pub kl: Var,
}

#[derive(Clone, Debug)]
pub struct Hierarchy {
    cfg: ContinuousConfig,
    posterior: Vec<Mlp>,
    prior: Vec<Mlp>,
    prior_of_layer: Vec<usize>,
    projection: Option<ParamId>,
}

impl Hierarchy {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        x_dim: usize,
        units: usize,
        cfg: &ContinuousConfig,
        posterior_bn: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.layers > 0 && cfg.vars == 0 {
            return Err(Error::Config("continuous.vars must be positive".into()));
        }
        let groups = match cfg.sharing {
            Sharing::None => cfg.layers,
            Sharing::Complete => cfg.layers.min(1),
            Sharing::Groups(g) => {
                if g > cfg.layers.max(1) {
                    return Err(Error::Config(format!(
                        "sharing groups:{g} exceeds the {} continuous layers",
                        cfg.layers
                    )));
                }
                g.min(cfg.layers)
            }
        };
        let shared = cfg.sharing != Sharing::None;
        let projection = (shared && cfg.layers > 0).then(|| {
            let scale = 1.0 / (units as f64).sqrt();
            let m = Tensor::from_fn(units, cfg.vars, |_, _| scale * sample_normal(rng));
            store.add("continuous.projection", m)
        });
        let mut posterior = Vec::with_capacity(cfg.layers);
        for m in 0..cfg.layers {
            let spec = MlpSpec {
                inputs: x_dim + units + m * cfg.vars,
                hidden: &cfg.posterior_hidden,
                outputs: 2 * cfg.vars,
                hidden_bn: posterior_bn,
                output_bn: None,
                output_gain: 0.1,
            };
            posterior.push(Mlp::new(store, &format!("continuous.posterior{m}"), &spec, rng));
        }
        let mut prior = Vec::with_capacity(groups);
        let mut prior_of_layer = Vec::with_capacity(cfg.layers);
        let hidden = [cfg.prior_hidden];
        for g in 0..groups {
            let inputs = if shared { cfg.vars } else { units + g * cfg.vars };
            let spec = MlpSpec {
                inputs,
                hidden: &hidden,
                outputs: 2 * cfg.vars,
                hidden_bn: true,
                output_bn: None,
                output_gain: 0.1,
            };
            prior.push(Mlp::new(store, &format!("continuous.prior{g}"), &spec, rng));
        }
        for m in 0..cfg.layers {
            prior_of_layer.push(if groups == 0 { 0 } else { m * groups / cfg.layers });
        }
        Ok(Self {
            cfg: cfg.clone(),
            posterior,
            prior,
            prior_of_layer,
            projection,
        })
    }

    pub fn layers(&self) -> usize {
        self.cfg.layers
    }

    pub fn config(&self) -> &ContinuousConfig {
        &self.cfg
    }

    /// Width of the decoder input.
    pub fn decoder_inputs(&self, units: usize) -> usize {
        if self.projection.is_some() {
            self.cfg.vars
        } else {
            units + self.cfg.layers * self.cfg.vars
        }
    }

    /// Names of every parameter owned by the prior side.
    pub fn prior_param_prefixes(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.prior.len()).map(|g| format!("continuous.prior{g}.")).collect();
        if self.projection.is_some() {
            v.push("continuous.projection".into());
        }
        v
    }

    fn split(ctx: &mut Ctx<'_>, out: Var, vars: usize) -> Result<(Var, Var)> {
        let mu = ctx.tape.slice_cols(out, 0, vars)?;
        let ls = ctx.tape.slice_cols(out, vars, 2 * vars)?;
        let ls = ctx.tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, ls))
    }

    /// Runs posterior and prior layers with posterior samples feeding the
    /// priors of later layers. Returns the layers and the decoder input.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, zeta: Var, noise: &[Tensor]) -> Result<(Vec<LayerPass>, Var)> {
        if noise.len() != self.cfg.layers {
            return Err(Error::Length(format!(
                "{} noise tensors for {} continuous layers",
                noise.len(),
                self.cfg.layers
            )));
        }
        let projected = match self.projection {
            Some(id) => {
                let m = ctx.param(id)?;
                Some(ctx.tape.matmul(zeta, m)?)
            }
            None => None,
        };
        let mut samples: Vec<Var> = Vec::with_capacity(self.cfg.layers);
        let mut running = projected;
        let mut out = Vec::with_capacity(self.cfg.layers);
        for m in 0..self.cfg.layers {
            let mut post_in = vec![x, zeta];
            post_in.extend_from_slice(&samples);
            let post_in = ctx.tape.concat_cols(&post_in)?;
            let post = self.posterior[m].forward(ctx, post_in)?;
            let (mu_q, ls_q) = Self::split(ctx, post, self.cfg.vars)?;
            let prior_in = match running {
                Some(r) => r,
                None => {
                    let mut parts = vec![zeta];
                    parts.extend_from_slice(&samples);
                    if parts.len() == 1 {
                        zeta
                    } else {
                        ctx.tape.concat_cols(&parts)?
                    }
                }
            };
            let prior = self.prior[self.prior_of_layer[m]].forward(ctx, prior_in)?;
            let (mu_p, ls_p) = Self::split(ctx, prior, self.cfg.vars)?;
            let sample = gaussian_sample(ctx, mu_q, ls_q, &noise[m])?;
            let kl = gaussian_kl_rows(ctx, mu_q, ls_q, mu_p, ls_p)?;
            if let Some(r) = running {
                running = Some(ctx.tape.add(r, sample)?);
            }
            samples.push(sample);
            out.push(LayerPass {
                sample,
                mu_q,
                log_sigma_q: ls_q,
                mu_p,
                log_sigma_p: ls_p,
                kl,
            });
        }
        let decoder_in = match running {
            Some(r) => r,
            None => {
                let mut parts = vec![zeta];
                parts.extend_from_slice(&samples);
                if parts.len() == 1 {
                    zeta
                } else {
                    ctx.tape.concat_cols(&parts)?
                }
            }
        };
        Ok((out, decoder_in))
    }

    /// Ancestral sampling from the prior given `zeta`; returns the decoder input.
    pub fn generate(&self, ctx: &mut Ctx<'_>, zeta: Var, noise: &[Tensor]) -> Result<Var> {
        let projected = match self.projection {
            Some(id) => {
                let m = ctx.param(id)?;
                Some(ctx.tape.matmul(zeta, m)?)
            }
            None => None,
        };
        let mut running = projected;
        let mut samples: Vec<Var> = Vec::new();
        for m in 0..self.cfg.layers {
            let prior_in = match running {
                Some(r) => r,
                None => {
                    let mut parts = vec![zeta];
                    parts.extend_from_slice(&samples);
                    if parts.len() == 1 {
                        zeta
                    } else {
                        ctx.tape.concat_cols(&parts)?
                    }
                }
            };
            let prior = self.prior[self.prior_of_layer[m]].forward(ctx, prior_in)?;
            let (mu_p, ls_p) = Self::split(ctx, prior, self.cfg.vars)?;
            let sample = gaussian_sample(ctx, mu_p, ls_p, &noise[m])?;
            if let Some(r) = running {
                running = Some(ctx.tape.add(r, sample)?);
            }
            samples.push(sample);
        }
        match running {
            Some(r) => Ok(r),
            None => {
                let mut parts = vec![zeta];
                parts.extend_from_slice(&samples);
                if parts.len() == 1 {
                    Ok(zeta)
                } else {
                    ctx.tape.concat_cols(&parts)
                }
            }
        }
    }
}

fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_examples() {
        assert_eq!(gaussian_kl(&[0.3], &[1.5], &[0.3], &[1.5]).unwrap(), 0.0);
        assert!((gaussian_kl(&[1.0], &[1.0], &[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = gaussian_kl(&[0.0], &[2.0], &[0.0], &[1.0]).unwrap();
        assert!((v - 0.80685).abs() < 1e-5, "{v}");
        assert!(gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_noise_returns_mean() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let mu = ctx.tape.constant(Tensor::row_vector(vec![0.4, -2.0])).unwrap();
        let ls = ctx.tape.constant(Tensor::row_vector(vec![0.1, 1.0])).unwrap();
        let u = gaussian_sample(&mut ctx, mu, ls, &Tensor::zeros(1, 2)).unwrap();
        assert_eq!(ctx.tape.value(u).data(), &[0.4, -2.0]);
    }

    #[test]
    fn standard_sample_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let noise = Tensor::from_fn(n, 1, |_, _| sample_normal(&mut rng));
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let mu = ctx.tape.constant(Tensor::zeros(1, 1)).unwrap();
        let ls = ctx.tape.constant(Tensor::zeros(1, 1)).unwrap();
        let u = gaussian_sample(&mut ctx, mu, ls, &noise).unwrap();
        let mean = ctx.tape.value(u).sum() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn sample_gradients_match_reparameterization() {
        let eps = 0.7;
        let mut tape = Tape::new();
        let mu = tape.leaf(Tensor::scalar(0.2)).unwrap();
        let ls = tape.leaf(Tensor::scalar(-0.3)).unwrap();
        let s = tape.exp(ls).unwrap();
        let e = tape.constant(Tensor::scalar(eps)).unwrap();
        let se = tape.mul(s, e).unwrap();
        let u = tape.add(mu, se).unwrap();
        let uv = tape.value(u).item();
        let g = tape.backward(u).unwrap();
        assert_eq!(g.wrt(mu).item(), 1.0);
        let fd = ((0.2 + (-0.3f64 + 1e-6).exp() * eps) - (0.2 + (-0.3f64 - 1e-6).exp() * eps)) / 2e-6;
        assert!((g.wrt(ls).item() - (uv - 0.2)).abs() < 1e-14);
        assert!((g.wrt(ls).item() - fd).abs() < 1e-8);
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let store = ParamStore::new();
        let mut ctx = Ctx::new(&store, true);
        let vals = [[0.3, -1.0], [0.1, 0.4], [-0.2, 0.9], [0.5, -0.1]];
        let vars: Vec<Var> = vals
            .iter()
            .map(|v| ctx.tape.constant(Tensor::row_vector(v.to_vec())).unwrap())
            .collect();
        let kl = gaussian_kl_rows(&mut ctx, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let sq: Vec<f64> = vals[1].iter().map(|l| l.exp()).collect();
        let sp: Vec<f64> = vals[3].iter().map(|l| l.exp()).collect();
        let oracle = gaussian_kl(&vals[0], &sq, &vals[2], &sp).unwrap();
        assert!((ctx.tape.value(kl).item() - oracle).abs() < 1e-14);
    }

    #[test]
    fn sharing_parses_and_prints() {
        for s in ["none", "complete", "groups:3"] {
            assert_eq!(s.parse::<Sharing>().unwrap().to_string(), s);
        }
        assert!("groups:0".parse::<Sharing>().is_err());
        assert!("some".parse::<Sharing>().is_err());
    }

    fn prior_param_count(layers: usize, sharing: Sharing) -> usize {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ContinuousConfig {
            layers,
            vars: 3,
            prior_hidden: 5,
            posterior_hidden: vec![4],
            sharing,
        };
        let h = Hierarchy::new(&mut store, 6, 4, &cfg, false, &mut rng).unwrap();
        let prefixes = h.prior_param_prefixes();
        store
            .entries()
            .iter()
            .filter(|e| e.trainable && prefixes.iter().any(|p| e.name.starts_with(p.as_str())))
            .map(|e| e.value.len())
            .sum()
    }

    #[test]
    fn complete_sharing_prior_size_is_constant_in_depth() {
        let base = prior_param_count(1, Sharing::Complete);
        for layers in 2..6 {
            assert_eq!(prior_param_count(layers, Sharing::Complete), base);
        }
        assert!(prior_param_count(3, Sharing::None) > prior_param_count(2, Sharing::None));
        assert_eq!(prior_param_count(4, Sharing::Groups(2)), prior_param_count(6, Sharing::Groups(2)));
    }

    #[test]
    fn zero_layers_pass_zeta_straight_to_decoder() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ContinuousConfig {
            layers: 0,
            ..ContinuousConfig::default()
        };
        let h = Hierarchy::new(&mut store, 3, 4, &cfg, false, &mut rng).unwrap();
        let mut ctx = Ctx::new(&store, true);
        let x = ctx.tape.constant(Tensor::zeros(2, 3)).unwrap();
        let zeta = ctx.tape.constant(Tensor::filled(2, 4, 0.5)).unwrap();
        let (layers, dec) = h.forward(&mut ctx, x, zeta, &[]).unwrap();
        assert!(layers.is_empty());
        assert_eq!(dec, zeta);
        assert_eq!(h.decoder_inputs(4), 4);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(
            mq in -3.0f64..3.0, sq in 0.05f64..4.0, mp in -3.0f64..3.0, sp in 0.05f64..4.0,
        ) {
            let kl = gaussian_kl(&[mq], &[sq], &[mp], &[sp]).unwrap();
            prop_assert!(kl >= -1e-12);
            prop_assert!(gaussian_kl(&[mq], &[sq], &[mq], &[sq]).unwrap().abs() < 1e-12);
        }

        #[test]
        fn kl_vanishes_only_at_equality(d in prop::sample::select(vec![0.5f64, -0.25, 1.0])) {
            prop_assert!(gaussian_kl(&[d], &[1.0], &[0.0], &[1.0]).unwrap() > 0.0);
            prop_assert!(gaussian_kl(&[0.0], &[1.0 + d.abs()], &[0.0], &[1.0]).unwrap() > 0.0);
        }
    }
}
