//! Evaluation: single-sample ELBO and importance-weighted log-likelihood.
//!
//! Sample `k` of example `i` always draws its noise from the stream
//! `(seed, Eval, i, k)`, so bounds at different `K` share their first draws
//! and `K = 1` reproduces the single-sample ELBO exactly.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::continuous::gaussian_log_density;
use crate::error::{Error, Result};
use crate::model::{Model, Noise};
use crate::numerics::{Ctx, Tensor};
use crate::posterior::log_q_of_z;
use crate::rng::{self, Purpose};
use crate::smoothing::{normal_log_pdf, SmoothingKind};

/// Where `log Z` comes from during evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LogZSource {
    Exact,
    Bridge,
    Value(f64),
}

impl std::str::FromStr for LogZSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(LogZSource::Exact),
            "bridge" => Ok(LogZSource::Bridge),
            _ => s
                .parse::<f64>()
                .map(LogZSource::Value)
                .map_err(|_| Error::Config(format!("log Z source must be exact, bridge or a number, got {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub seed: u64,
    /// Replace `zeta` by `z` (infinitely sharp smoothing).
    pub zeta_is_z: bool,
    /// Rows per forward pass.
    pub chunk_rows: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 100,
            seed: 7,
            zeta_is_z: false,
            chunk_rows: 2000,
        }
    }
}

fn noise_rows(model: &Model, keys: &[(u64, u64)], seed: u64) -> Noise {
    let n = model.units();
    let layers = model.hierarchy.layers();
    let vars = model.cfg.continuous.vars;
    let mut rho = Tensor::zeros(keys.len(), n);
    let mut aux = Tensor::zeros(keys.len(), n);
    let mut normals = vec![Tensor::zeros(keys.len(), vars); layers];
    for (r, &(i, k)) in keys.iter().enumerate() {
        let mut g = rng::stream(seed, Purpose::Eval, i, k);
        for v in rho.row_mut(r) {
            *v = g.random();
        }
        for v in aux.row_mut(r) {
            *v = g.random();
        }
        for layer in normals.iter_mut() {
            for v in layer.row_mut(r) {
                *v = g.sample(StandardNormal);
            }
        }
    }
    Noise { rho, aux, normals }
}

/// `log p(x, zeta, z, u) - log q(zeta, z, u | x)` for each row of `x`,
/// with noise keyed by `keys`.
fn log_weights_rows(model: &Model, x: &Tensor, keys: &[(u64, u64)], log_z: f64, cfg: &EvalConfig) -> Result<Vec<f64>> {
    let noise = noise_rows(model, keys, cfg.seed);
    let mut ctx = Ctx::new(&model.store, false);
    let pass = model.forward(&mut ctx, x, &noise, cfg.zeta_is_z)?;
    let t = &ctx.tape;
    let recon = t.value(pass.recon);
    let q = t.value(pass.posterior.q);
    let z = &pass.posterior.z;
    let log_q = log_q_of_z(q, z);
    let rbm = model.rbm();
    let mut out: Vec<f64> = (0..x.rows())
        .map(|r| recon.get(r, 0) + rbm.neg_energy(z.row(r)) - log_z - log_q[r])
        .collect();
    for layer in &pass.layers {
        let u = t.value(layer.sample);
        let lp = gaussian_log_density(u, t.value(layer.mu_p), t.value(layer.log_sigma_p));
        let lq = gaussian_log_density(u, t.value(layer.mu_q), t.value(layer.log_sigma_q));
        for (o, (p, q)) in out.iter_mut().zip(lp.iter().zip(&lq)) {
            *o += p - q;
        }
    }
    if let (SmoothingKind::SpikeGaussian { prior_sigma }, Some((mu, ls)), false) =
        (model.cfg.smoothing, pass.posterior.gauss, cfg.zeta_is_z)
    {
        let zeta = t.value(pass.posterior.zeta);
        let (mu, ls) = (t.value(mu), t.value(ls));
        for (r, o) in out.iter_mut().enumerate() {
            for c in 0..zeta.cols() {
                if z.get(r, c) > 0.5 {
                    let v = zeta.get(r, c);
                    *o += normal_log_pdf(v, 0.0, prior_sigma) - normal_log_pdf(v, mu.get(r, c), ls.get(r, c).exp());
                }
            }
        }
    }
    if let Some(bad) = out.iter().position(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("importance weight of row {bad} is {}", out[bad])));
    }
    Ok(out)
}

/// Log importance weights, `n x k`, sample `k` of row `i` keyed by
/// `(offset + i, k)`.
pub fn log_weights(model: &Model, x: &Tensor, log_z: f64, cfg: &EvalConfig, offset: u64) -> Result<Tensor> {
    if cfg.k == 0 {
        return Err(Error::contract("importance sample count K must be at least 1"));
    }
    let k = cfg.k;
    let per_chunk = (cfg.chunk_rows / k).max(1);
    let mut out = Tensor::zeros(x.rows(), k);
    let mut start = 0;
    while start < x.rows() {
        let end = (start + per_chunk).min(x.rows());
        let idx: Vec<usize> = (start..end).flat_map(|i| std::iter::repeat_n(i, k)).collect();
        let keys: Vec<(u64, u64)> = (start..end)
            .flat_map(|i| (0..k).map(move |s| (offset + i as u64, s as u64)))
            .collect();
        let rows = x.select_rows(&idx);
        let w = log_weights_rows(model, &rows, &keys, log_z, cfg)?;
        for (j, v) in w.into_iter().enumerate() {
            out.set(start + j / k, j % k, v);
        }
        start = end;
    }
    Ok(out)
}

pub fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + (values.iter().map(|v| (v - max).exp()).sum::<f64>() / values.len() as f64).ln()
}

/// Per-example importance-weighted bound with `cfg.k` samples.
pub fn iw_log_likelihood(model: &Model, x: &Tensor, log_z: f64, cfg: &EvalConfig) -> Result<Vec<f64>> {
    let w = log_weights(model, x, log_z, cfg, 0)?;
    Ok((0..w.rows()).map(|r| log_mean_exp(w.row(r))).collect())
}

/// Per-example single-sample ELBO estimate on the first draw.
pub fn elbo_estimate(model: &Model, x: &Tensor, log_z: f64, cfg: &EvalConfig) -> Result<Vec<f64>> {
    let one = EvalConfig { k: 1, ..*cfg };
    let w = log_weights(model, x, log_z, &one, 0)?;
    Ok(w.data().to_vec())
}

/// Exact `log p(x)` for a model without continuous layers evaluated with
/// `zeta = z`, by summing over every machine state.
pub fn exact_log_likelihood_discrete(model: &Model, x: &Tensor) -> Result<Vec<f64>> {
    if model.hierarchy.layers() != 0 {
        return Err(Error::contract("exact likelihood needs a model without continuous layers"));
    }
    let rbm = model.rbm();
    let dist = rbm.exact_distribution()?;
    let n = rbm.units();
    let states = Tensor::from_fn(dist.probs.len(), n, |s, c| ((s >> c) & 1) as f64);
    let mut ctx = Ctx::new(&model.store, false);
    let probs = model.decode_prior(&mut ctx, &states, &[])?;
    let mut out = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let terms: Vec<f64> = (0..states.rows())
            .map(|s| {
                let ll: f64 = probs
                    .row(s)
                    .iter()
                    .zip(x.row(r))
                    .map(|(&p, &v)| if v > 0.5 { p.ln() } else { (1.0 - p).ln() })
                    .sum();
                dist.probs[s].ln() + ll
            })
            .collect();
        out.push(log_mean_exp(&terms) + (terms.len() as f64).ln());
    }
    Ok(out)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
