//! Hierarchical approximating posterior over the discrete latents.
//!
//! Units are split into `groups` consecutive blocks. Group `j` is a
//! factorial Bernoulli whose logits come from a network fed with
//! `concat(x, zeta_1, ..., zeta_{j-1})`; each unit is then smoothed into a
//! continuous `zeta` through the inverse CDF of its smoothed marginal.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{logistic, Ctx, Mlp, MlpSpec, ParamStore, ScaleBounds, Tensor, Var};
use crate::rbm::{accumulate_stats, PhaseStats, RbmParams};
use crate::smoothing::{self, SmoothingKind, Transform, Q_MAX, Q_MIN};

#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorConfig {
    /// Number of hierarchy groups; must divide the number of units.
    pub groups: usize,
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
}

impl Default for PosteriorConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            hidden: vec![2000, 2000],
            batch_norm: true,
        }
    }
}

/// Log-sigma range for every Gaussian produced by a network.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 5.0;

/// Networks of the discrete posterior.
#[derive(Clone, Debug)]
pub struct Encoder {
    units: usize,
    group_size: usize,
    logit_nets: Vec<Mlp>,
    /// Per-group `(mu, log sigma)` heads, spike-and-Gaussian only.
    gauss_nets: Vec<Mlp>,
    kind: SmoothingKind,
}

/// One sampled pass through the posterior for a minibatch.
#[derive(Clone, Debug)]
pub struct PosteriorPass {
    /// `B x n` logits.
    pub logits: Var,
    /// `B x n` clamped probabilities.
    pub q: Var,
    /// `B x n` smoothed continuous variables.
    pub zeta: Var,
    /// `B x n` binary samples.
    pub z: Tensor,
    /// `B x n` uniforms used for the inverse CDF.
    pub rho: Tensor,
    /// Responsibilities `P(z = 1 | zeta)`, mixture of ramps only.
    pub gamma: Option<Var>,
    /// `(mu, log sigma)` of the Gaussian branch, spike-and-Gaussian only.
    pub gauss: Option<(Var, Var)>,
    pub group_size: usize,
}

impl PosteriorPass {
    pub fn group_of(&self, unit: usize) -> usize {
        unit / self.group_size
    }
}

/// How a partner unit enters the chain-rule coefficient of a unit's `q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    /// Use the sampled `z` of the partner unless it precedes the unit.
    Sampled,
    /// Use the partner's `q` unless it precedes the unit (lower variance).
    Expected,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        x_dim: usize,
        units: usize,
        cfg: &PosteriorConfig,
        kind: SmoothingKind,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.groups == 0 || !units.is_multiple_of(cfg.groups) {
            return Err(Error::Config(format!(
                "posterior.groups = {} must divide the {units} latent units",
                cfg.groups
            )));
        }
        let gs = units / cfg.groups;
        let mut logit_nets = Vec::with_capacity(cfg.groups);
        let mut gauss_nets = Vec::new();
        for j in 0..cfg.groups {
            let inputs = x_dim + j * gs;
            let spec = MlpSpec {
                inputs,
                hidden: &cfg.hidden,
                outputs: gs,
                hidden_bn: cfg.batch_norm,
                output_bn: cfg.batch_norm.then_some(Some(ScaleBounds::POSTERIOR)),
                output_gain: 1.0,
            };
            logit_nets.push(Mlp::new(store, &format!("posterior.g{j}"), &spec, rng));
            if matches!(kind, SmoothingKind::SpikeGaussian { .. }) {
                let spec = MlpSpec {
                    outputs: 2 * gs,
                    output_bn: None,
                    output_gain: 0.1,
                    ..spec
                };
                gauss_nets.push(Mlp::new(store, &format!("posterior.g{j}.gauss"), &spec, rng));
            }
        }
        Ok(Self {
            units,
            group_size: gs,
            logit_nets,
            gauss_nets,
            kind,
        })
    }

    pub fn groups(&self) -> usize {
        self.logit_nets.len()
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn kind(&self) -> SmoothingKind {
        self.kind
    }

    /// Samples all groups in order.
    ///
    /// `rho` holds the inverse-CDF uniforms and `aux` the uniforms that pick
    /// `z` from the responsibilities under the mixture of ramps. With
    /// `zeta_is_z`, `zeta` is replaced by the binary sample (the infinitely
    /// sharp limit of the smoothing).
    pub fn sample(
        &self,
        ctx: &mut Ctx<'_>,
        x: Var,
        beta: Var,
        rho: &Tensor,
        aux: &Tensor,
        zeta_is_z: bool,
    ) -> Result<PosteriorPass> {
        let batch = ctx.tape.shape(x).0;
        if rho.shape() != (batch, self.units) || aux.shape() != rho.shape() {
            return Err(Error::Dimension {
                op: "posterior sample",
                left: (batch, self.units),
                right: rho.shape(),
            });
        }
        let gs = self.group_size;
        let beta_value = ctx.tape.value(beta).item();
        let mut logits_parts = Vec::new();
        let mut q_parts = Vec::new();
        let mut zeta_parts: Vec<Var> = Vec::new();
        let mut gamma_parts = Vec::new();
        let mut mu_parts = Vec::new();
        let mut ls_parts = Vec::new();
        let mut z = Tensor::zeros(batch, self.units);
        for (j, net) in self.logit_nets.iter().enumerate() {
            let mut inputs = vec![x];
            inputs.extend_from_slice(&zeta_parts);
            let input = if inputs.len() == 1 { x } else { ctx.tape.concat_cols(&inputs)? };
            let logits = net.forward(ctx, input)?;
            let q_raw = ctx.tape.logistic(logits)?;
            let q = ctx.tape.clamp(q_raw, Q_MIN, Q_MAX)?;
            let gauss = match self.gauss_nets.get(j) {
                Some(g) => {
                    let out = g.forward(ctx, input)?;
                    let mu = ctx.tape.slice_cols(out, 0, gs)?;
                    let ls = ctx.tape.slice_cols(out, gs, 2 * gs)?;
                    let ls = ctx.tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
                    Some((mu, ls))
                }
                None => None,
            };
            let qv = ctx.tape.value(q).clone();
            let mut zeta_val = Tensor::zeros(batch, gs);
            let mut d_q = Tensor::zeros(batch, gs);
            let mut d_beta = Tensor::zeros(batch, gs);
            let mut d_mu = Tensor::zeros(batch, gs);
            let mut d_ls = Tensor::zeros(batch, gs);
            for r in 0..batch {
                for c in 0..gs {
                    let unit = j * gs + c;
                    let transform = match self.kind {
                        SmoothingKind::SpikeExponential => Transform::SpikeExp { beta: beta_value },
                        SmoothingKind::MixtureOfRamps => Transform::Ramps,
                        SmoothingKind::SpikeSlab => Transform::SpikeSlab,
                        SmoothingKind::SpikeGaussian { .. } => {
                            let (mu, ls) = gauss.expect("gaussian head");
                            Transform::SpikeGauss {
                                mu: ctx.tape.value(mu).get(r, c),
                                sigma: ctx.tape.value(ls).get(r, c).exp(),
                            }
                        }
                    };
                    let s = transform.inverse(qv.get(r, c), rho.get(r, unit))?;
                    zeta_val.set(r, c, s.zeta);
                    d_q.set(r, c, s.d_q);
                    d_beta.set(r, c, s.d_beta);
                    d_mu.set(r, c, s.d_mu);
                    d_ls.set(r, c, s.d_log_sigma);
                    if self.kind.is_spike() {
                        z.set(r, unit, if s.spike { 0.0 } else { 1.0 });
                    }
                }
            }
            let gamma = if matches!(self.kind, SmoothingKind::MixtureOfRamps) {
                let mut g = Tensor::zeros(batch, gs);
                let mut gq = Tensor::zeros(batch, gs);
                let mut gz = Tensor::zeros(batch, gs);
                for r in 0..batch {
                    for c in 0..gs {
                        let (v, dq, dz) = smoothing::ramps_responsibility(qv.get(r, c), zeta_val.get(r, c));
                        g.set(r, c, v);
                        gq.set(r, c, dq);
                        gz.set(r, c, dz);
                        let unit = j * gs + c;
                        z.set(r, unit, if aux.get(r, unit) < v { 1.0 } else { 0.0 });
                    }
                }
                Some((g, gq, gz))
            } else {
                None
            };
            let zeta = if zeta_is_z {
                ctx.tape.constant(z.slice_cols(j * gs, (j + 1) * gs))?
            } else {
                let mut parents = vec![(q, d_q)];
                if matches!(self.kind, SmoothingKind::SpikeExponential) {
                    parents.push((beta, d_beta));
                }
                if let Some((mu, ls)) = gauss {
                    parents.push((mu, d_mu));
                    parents.push((ls, d_ls));
                }
                ctx.tape.custom("inverse_cdf", zeta_val, parents)?
            };
            if let Some((g, gq, gz)) = gamma {
                let gv = ctx.tape.custom("responsibility", g, vec![(q, gq), (zeta, gz)])?;
                gamma_parts.push(gv);
            }
            if let Some((mu, ls)) = gauss {
                mu_parts.push(mu);
                ls_parts.push(ls);
            }
            logits_parts.push(logits);
            q_parts.push(q);
            zeta_parts.push(zeta);
        }
        let cat = |ctx: &mut Ctx<'_>, parts: &[Var]| -> Result<Var> {
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                ctx.tape.concat_cols(parts)
            }
        };
        let logits = cat(ctx, &logits_parts)?;
        let q = cat(ctx, &q_parts)?;
        let zeta = cat(ctx, &zeta_parts)?;
        let gamma = if gamma_parts.is_empty() { None } else { Some(cat(ctx, &gamma_parts)?) };
        let gauss = if mu_parts.is_empty() {
            None
        } else {
            Some((cat(ctx, &mu_parts)?, cat(ctx, &ls_parts)?))
        };
        Ok(PosteriorPass {
            logits,
            q,
            zeta,
            z,
            rho: rho.clone(),
            gamma,
            gauss,
            group_size: gs,
        })
    }
}

/// `log q(z | x)` per row for the sampled binary states.
pub fn log_q_of_z(q: &Tensor, z: &Tensor) -> Vec<f64> {
    (0..q.rows())
        .map(|r| {
            q.row(r)
                .iter()
                .zip(z.row(r))
                .map(|(&p, &b)| if b > 0.5 { p.ln() } else { (1.0 - p).ln() })
                .sum()
        })
        .collect()
}

/// Positive-phase statistics: for a coupling `(a, b)` the unit from the
/// earlier group contributes its sample and the other its probability.
pub fn positive_phase(q: &Tensor, z: &Tensor, n_left: usize, group_size: usize) -> PhaseStats {
    let n = q.cols();
    let n_right = n - n_left;
    let mut stats = PhaseStats::zeros(n_left, n_right);
    let w = 1.0 / q.rows() as f64;
    for r in 0..q.rows() {
        let (qr, zr) = (q.row(r), z.row(r));
        for a in 0..n_left {
            let ga = a / group_size;
            for b in 0..n_right {
                let gb = (n_left + b) / group_size;
                let val = if ga < gb {
                    zr[a] * qr[n_left + b]
                } else if ga > gb {
                    qr[a] * zr[n_left + b]
                } else {
                    qr[a] * qr[n_left + b]
                };
                stats.pairwise.set(a, b, stats.pairwise.get(a, b) + w * val);
            }
        }
        for (o, v) in stats.unary.data_mut().iter_mut().zip(qr) {
            *o += w * v;
        }
    }
    stats
}

/// Chain-rule coefficients `c` such that `sum_a c_a dq_a/dphi` estimates
/// `d/dphi E[sum_ab W_ab z_a z_b]` for one example.
///
/// For a coupling between `a` and a partner `b`: if `b` sits in a later
/// group, the term is `W_ab (1 - z_a)/(1 - q_a) v_b`; otherwise `W_ab v_b`.
/// `v_b` is `z_b` when `b` precedes `a`, and `z_b` or `q_b` (per `partner`)
/// otherwise.
pub fn chain_rule_coefficients(
    q: &[f64],
    z: &[f64],
    weights: &Tensor,
    group_size: usize,
    partner: Partner,
) -> Vec<f64> {
    let n_left = weights.rows();
    let n = q.len();
    let mut coeff = vec![0.0; n];
    let group = |u: usize| u / group_size;
    let value = |unit: usize, other: usize| -> f64 {
        if group(unit) < group(other) {
            z[unit]
        } else {
            match partner {
                Partner::Sampled => z[unit],
                Partner::Expected => q[unit],
            }
        }
    };
    let omega = |unit: usize, other: usize| -> f64 {
        if group(other) > group(unit) {
            (1.0 - z[unit]) / (1.0 - q[unit])
        } else {
            1.0
        }
    };
    for a in 0..n_left {
        let row = weights.row(a);
        for (bi, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let b = n_left + bi;
            coeff[a] += w * omega(a, b) * value(b, a);
            coeff[b] += w * omega(b, a) * value(a, b);
        }
    }
    coeff
}

/// Tape pieces of the discrete KL term for one minibatch.
pub struct DiscreteKl {
    /// Mean over the batch of `sum q ln q + (1 - q) ln(1 - q)`.
    pub negentropy: Var,
    /// Surrogate whose gradient is the cross-entropy gradient (both the
    /// posterior and the machine's parameters), including the model phase.
    pub cross_entropy: Var,
    /// Extra Gaussian KL for spike-and-Gaussian smoothing, batch mean.
    pub gauss_kl: Option<Var>,
    /// Estimate of `KL[q || p]` without `log Z`, batch mean.
    pub value: f64,
    pub positive: PhaseStats,
}

/// Builds the discrete KL surrogate.
///
/// `weights` and `bias` are the machine's tape variables; `negative` holds
/// model-side statistics from the persistent chains.
pub fn discrete_kl(
    ctx: &mut Ctx<'_>,
    pass: &PosteriorPass,
    weights: Var,
    bias: Var,
    negative: &PhaseStats,
    kind: SmoothingKind,
) -> Result<DiscreteKl> {
    let batch = ctx.tape.shape(pass.q).0;
    let inv_b = 1.0 / batch as f64;
    let n_left = ctx.tape.shape(weights).0;
    let n = ctx.tape.shape(pass.q).1;

    // Negative entropy of the per-group factorial conditionals.
    let ln_q = ctx.tape.ln(pass.q)?;
    let q_ln_q = ctx.tape.mul(pass.q, ln_q)?;
    let one_minus = {
        let neg = ctx.tape.neg(pass.q)?;
        ctx.tape.add_scalar(neg, 1.0)?
    };
    let ln_1mq = ctx.tape.ln(one_minus)?;
    let r_ln_r = ctx.tape.mul(one_minus, ln_1mq)?;
    let h = ctx.tape.add(q_ln_q, r_ln_r)?;
    let h_sum = ctx.tape.sum(h)?;
    let negentropy = ctx.tape.scale(h_sum, inv_b)?;

    let q_val = ctx.tape.value(pass.q).clone();
    let w_val = ctx.tape.value(weights).clone();
    let b_val = ctx.tape.value(bias).clone();

    // Bias term, analytic in q for every unit.
    let qb = ctx.tape.mul(pass.q, bias)?;
    let qb_sum = ctx.tape.sum(qb)?;
    let bias_term = ctx.tape.scale(qb_sum, -inv_b)?;

    let (coupling_term, positive) = match pass.gamma {
        Some(gamma) => {
            let g_left = ctx.tape.slice_cols(gamma, 0, n_left)?;
            let g_right = ctx.tape.slice_cols(gamma, n_left, n)?;
            let gw = ctx.tape.matmul(g_left, weights)?;
            let prod = ctx.tape.mul(gw, g_right)?;
            let s = ctx.tape.sum(prod)?;
            let term = ctx.tape.scale(s, -inv_b)?;
            let gv = ctx.tape.value(gamma).clone();
            let mut stats = PhaseStats::zeros(n_left, n - n_left);
            for r in 0..batch {
                let row = gv.row(r);
                accumulate_stats(&mut stats, &row[..n_left], &row[n_left..], inv_b);
            }
            (term, stats)
        }
        None => {
            let positive = positive_phase(&q_val, &pass.z, n_left, pass.group_size);
            let pos_pair = ctx.freeze(positive.pairwise.clone())?;
            let mut coeff = Tensor::zeros(batch, n);
            for r in 0..batch {
                let c = chain_rule_coefficients(q_val.row(r), pass.z.row(r), &w_val, pass.group_size, Partner::Expected);
                coeff.row_mut(r).copy_from_slice(&c);
            }
            let coeff = ctx.freeze(coeff)?;
            let pos_var = ctx.tape.constant(pos_pair)?;
            let wp = ctx.tape.mul(weights, pos_var)?;
            let wp_sum = ctx.tape.sum(wp)?;
            let theta_part = ctx.tape.neg(wp_sum)?;
            let coeff_var = ctx.tape.constant(coeff)?;
            let cq = ctx.tape.mul(coeff_var, pass.q)?;
            let cq_sum = ctx.tape.sum(cq)?;
            let phi_part = ctx.tape.scale(cq_sum, -inv_b)?;
            (ctx.tape.add(theta_part, phi_part)?, positive)
        }
    };

    // Model phase: + W . E_p[z_L z_R^T] + b . E_p[z].
    let neg_pair = ctx.tape.constant(negative.pairwise.clone())?;
    let neg_unary = ctx.tape.constant(negative.unary.clone())?;
    let wn = ctx.tape.mul(weights, neg_pair)?;
    let wn_sum = ctx.tape.sum(wn)?;
    let bn = ctx.tape.mul(bias, neg_unary)?;
    let bn_sum = ctx.tape.sum(bn)?;
    let model_phase = ctx.tape.add(wn_sum, bn_sum)?;

    let cross = ctx.tape.add(coupling_term, bias_term)?;
    let cross_entropy = ctx.tape.add(cross, model_phase)?;

    let gauss_kl = match (kind, pass.gauss) {
        (SmoothingKind::SpikeGaussian { prior_sigma }, Some((mu, ls))) => {
            Some(spike_gauss_kl_tape(ctx, pass.q, mu, ls, prior_sigma, inv_b)?)
        }
        _ => None,
    };

    let energy_expect: f64 = -(positive
        .pairwise
        .data()
        .iter()
        .zip(w_val.data())
        .map(|(p, w)| p * w)
        .sum::<f64>()
        + positive.unary.data().iter().zip(b_val.data()).map(|(p, b)| p * b).sum::<f64>());
    let mut value = ctx.tape.value(negentropy).item() + energy_expect;
    if let Some(g) = gauss_kl {
        value += ctx.tape.value(g).item();
    }
    Ok(DiscreteKl {
        negentropy,
        cross_entropy,
        gauss_kl,
        value,
        positive,
    })
}

/// `mean_batch sum_i q_i KL(N(mu_i, sigma_i^2) || N(0, prior_sigma^2))`.
fn spike_gauss_kl_tape(
    ctx: &mut Ctx<'_>,
    q: Var,
    mu: Var,
    log_sigma: Var,
    prior_sigma: f64,
    inv_b: f64,
) -> Result<Var> {
    let t = &mut ctx.tape;
    let two_ls = t.scale(log_sigma, 2.0)?;
    let var_q = t.exp(two_ls)?;
    let mu2 = t.square(mu)?;
    let num = t.add(var_q, mu2)?;
    let quad = t.scale(num, 1.0 / (2.0 * prior_sigma * prior_sigma))?;
    let neg_ls = t.neg(log_sigma)?;
    let kl = t.add(quad, neg_ls)?;
    let kl = t.add_scalar(kl, prior_sigma.ln() - 0.5)?;
    let weighted = t.mul(q, kl)?;
    let s = t.sum(weighted)?;
    t.scale(s, inv_b)
}

/// `-dH/dg` for factorial Bernoulli groups: `g * q * (1 - q)` per logit,
/// averaged over rows.
pub fn entropy_grad_logits(logits: &Tensor) -> Tensor {
    let b = logits.rows() as f64;
    logits.map(|g| {
        let q = logistic(g);
        g * q * (1.0 - q) / b
    })
}

/// Exact `KL[q || p]` for a factorial `q` over a small machine, including `log Z`.
pub fn kl_discrete_exact(q: &[f64], rbm: &RbmParams) -> Result<f64> {
    let n = rbm.units();
    if q.len() != n {
        return Err(Error::Length(format!("{} probabilities for {n} units", q.len())));
    }
    if n > 16 {
        return Err(Error::contract(format!("exact discrete KL supports at most 16 units, got {n}")));
    }
    let dist = rbm.exact_distribution()?;
    let mut kl = 0.0;
    for (s, &p) in dist.probs.iter().enumerate() {
        let z = crate::rbm::state_bits(s, n);
        let qz: f64 = z.iter().zip(q).map(|(&b, &p)| if b > 0.5 { p } else { 1.0 - p }).product();
        if qz > 0.0 {
            kl += qz * (qz.ln() - p.ln());
        }
    }
    Ok(kl)
}

/// Baseline for the score-function estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    None,
    /// Exponential moving average of past rewards with the given decay.
    RunningMean { decay: f64 },
}

/// Score-function gradient estimator `(reward - B) d log q(z) / dq` for a
/// factorial Bernoulli posterior parameterized by its probabilities.
#[derive(Clone, Debug)]
pub struct Reinforce {
    baseline: Baseline,
    running: Option<f64>,
}

impl Reinforce {
    pub fn new(baseline: Baseline) -> Self {
        Self {
            baseline,
            running: None,
        }
    }

    pub fn estimate(&mut self, z: &[f64], q: &[f64], reward: f64) -> Vec<f64> {
        let b = match self.baseline {
            Baseline::None => 0.0,
            Baseline::RunningMean { .. } => self.running.unwrap_or(0.0),
        };
        if let Baseline::RunningMean { decay } = self.baseline {
            self.running = Some(match self.running {
                Some(m) => decay * m + (1.0 - decay) * reward,
                None => reward,
            });
        }
        z.iter()
            .zip(q)
            .map(|(&zi, &qi)| (reward - b) * if zi > 0.5 { 1.0 / qi } else { -1.0 / (1.0 - qi) })
            .collect()
    }
}

/// Per-sample score-function gradient of `E_q[sum_ab W_ab z_a z_b]` with
/// respect to `q`: every coupling multiplies every unit's score.
pub fn reinforce_coupling_grad(z: &[f64], q: &[f64], weights: &Tensor) -> Vec<f64> {
    let n_left = weights.rows();
    let mut reward = 0.0;
    for a in 0..n_left {
        for (bi, &w) in weights.row(a).iter().enumerate() {
            reward += w * z[a] * z[n_left + bi];
        }
    }
    Reinforce::new(Baseline::None).estimate(z, q, reward)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn entropy_gradient_formula_examples() {
        assert_eq!(entropy_grad_logits(&Tensor::scalar(0.0)).item(), 0.0);
        let g = entropy_grad_logits(&Tensor::scalar(2.0)).item();
        assert!((g - 0.20998).abs() < 1e-5, "{g}");
    }

    #[test]
    fn tape_negentropy_gradient_equals_formula() {
        let logits = Tensor::from_fn(3, 4, |r, c| (r as f64 - 1.0) * 0.7 + c as f64 * 0.3 - 0.5);
        let mut tape = Tape::new();
        let g = tape.leaf(logits.clone()).unwrap();
        let q = tape.logistic(g).unwrap();
        let ln_q = tape.ln(q).unwrap();
        let a = tape.mul(q, ln_q).unwrap();
        let nq = tape.neg(q).unwrap();
        let r = tape.add_scalar(nq, 1.0).unwrap();
        let ln_r = tape.ln(r).unwrap();
        let b = tape.mul(r, ln_r).unwrap();
        let s = tape.add(a, b).unwrap();
        let s = tape.sum(s).unwrap();
        let s = tape.scale(s, 1.0 / 3.0).unwrap();
        let grads = tape.backward(s).unwrap();
        let expect = entropy_grad_logits(&logits);
        for (x, y) in grads.wrt(g).data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn chain_rule_estimator_is_unbiased_on_factorial_pair() {
        // d E[W z1 z2] / d q1 = W q2 = 0.3 for independent units.
        let w = Tensor::scalar(1.0);
        let q = [0.5, 0.3];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 1_000_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = [(rng.random::<f64>() < q[0]) as u8 as f64, (rng.random::<f64>() < q[1]) as u8 as f64];
            let c = chain_rule_coefficients(&q, &z, &w, 2, Partner::Sampled)[0];
            sum += c;
            sq += c * c;
        }
        let mean = sum / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 0.3).abs() < 3.0 * se, "{mean} (se {se})");
    }

    #[test]
    fn zero_coupling_leaves_only_bias_term() {
        let w = Tensor::zeros(2, 2);
        let c = chain_rule_coefficients(&[0.2, 0.4, 0.6, 0.8], &[1.0, 0.0, 1.0, 0.0], &w, 1, Partner::Sampled);
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn active_earlier_unit_masks_its_coupling_term() {
        // Unit 0 in group 0 is active, partner unit 1 in group 1 is later.
        let w = Tensor::scalar(2.0);
        let c = chain_rule_coefficients(&[0.4, 0.7], &[1.0, 1.0], &w, 1, Partner::Sampled);
        assert_eq!(c[0], 0.0);
        assert_eq!(c[1], 2.0);
    }

    #[test]
    fn reinforce_constant_reward_has_zero_mean() {
        let q = [0.3, 0.8];
        let mut est = Reinforce::new(Baseline::None);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut acc = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z: Vec<f64> = q.iter().map(|&p| (rng.random::<f64>() < p) as u8 as f64).collect();
            let g = est.estimate(&z, &q, 3.5);
            for k in 0..2 {
                acc[k] += g[k];
                sq[k] += g[k] * g[k];
            }
        }
        for k in 0..2 {
            let mean = acc[k] / n as f64;
            let se = ((sq[k] / n as f64 - mean * mean) / n as f64).sqrt();
            assert!(mean.abs() < 4.0 * se, "component {k}: {mean} (se {se})");
        }
    }

    #[test]
    fn reinforce_single_bernoulli_matches_two_point_gradient() {
        let q = [0.35];
        let f = |z: f64| if z > 0.5 { 2.0 } else { -1.0 };
        let exact = f(1.0) - f(0.0);
        let mut est = Reinforce::new(Baseline::RunningMean { decay: 0.99 });
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 200_000;
        let (mut acc, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let z = (rng.random::<f64>() < q[0]) as u8 as f64;
            let g = est.estimate(&[z], &q, f(z))[0];
            acc += g;
            sq += g * g;
        }
        let mean = acc / n as f64;
        let se = ((sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn exact_kl_examples() {
        let flat = RbmParams::zeros(1, 1);
        assert!(kl_discrete_exact(&[0.5, 0.5], &flat).unwrap().abs() < 1e-15);
        let p = RbmParams::new(Tensor::scalar(1.0), Tensor::zeros(1, 2)).unwrap();
        // q = p: p is not factorial for W != 0, so use a factorial machine instead.
        let fact = RbmParams::new(Tensor::scalar(0.0), Tensor::row_vector(vec![0.4, -1.1])).unwrap();
        let kl = kl_discrete_exact(&[logistic(0.4), logistic(-1.1)], &fact).unwrap();
        assert!(kl.abs() < 1e-14);
        let kl = kl_discrete_exact(&[0.8, 0.8], &p).unwrap();
        let lz = (3.0 + 1f64.exp()).ln();
        let probs = [0.04, 0.16, 0.16, 0.64];
        let energies = [0.0, 0.0, 0.0, -1.0];
        let oracle: f64 = probs.iter().zip(energies).map(|(&q, e): (&f64, f64)| q * (q.ln() + e)).sum::<f64>() + lz;
        assert!((kl - oracle).abs() < 1e-14);
    }

    #[test]
    fn positive_phase_uses_sample_for_earlier_group() {
        let q = Tensor::row_vector(vec![0.25, 0.6]);
        let z = Tensor::row_vector(vec![1.0, 0.0]);
        let hier = positive_phase(&q, &z, 1, 1);
        assert_eq!(hier.pairwise.item(), 0.6);
        let flat = positive_phase(&q, &z, 1, 2);
        assert_eq!(flat.pairwise.item(), 0.25 * 0.6);
        assert_eq!(flat.unary.data(), &[0.25, 0.6]);
    }

    #[test]
    fn hierarchical_sampler_is_deterministic_and_shifts_with_earlier_zeta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = PosteriorConfig {
            groups: 2,
            hidden: vec![],
            batch_norm: false,
        };
        let enc = Encoder::new(&mut store, 1, 2, &cfg, SmoothingKind::SpikeExponential, &mut rng).unwrap();
        // Group 1 logit = 3 * zeta_0 - 1.5 ignoring x.
        let w1 = store.find("posterior.g1.out.weight").unwrap();
        store.get_mut(w1).data_mut().copy_from_slice(&[0.0, 3.0]);
        let b1 = store.find("posterior.g1.out.bias").unwrap();
        store.get_mut(b1).data_mut()[0] = -1.5;
        let run = |rho0: f64| {
            let mut ctx = Ctx::new(&store, true);
            let x = ctx.tape.constant(Tensor::scalar(0.0)).unwrap();
            let beta = ctx.tape.constant(Tensor::scalar(2.0)).unwrap();
            let rho = Tensor::row_vector(vec![rho0, 0.5]);
            let pass = enc.sample(&mut ctx, x, beta, &rho, &Tensor::zeros(1, 2), false).unwrap();
            (ctx.tape.value(pass.q).clone(), ctx.tape.value(pass.zeta).clone())
        };
        assert_eq!(run(0.99), run(0.99));
        let (q_on, _) = run(0.999);
        let (q_off, _) = run(0.0);
        assert!((q_off.get(0, 1) - logistic(-1.5)).abs() < 1e-12);
        assert!(q_on.get(0, 1) > q_off.get(0, 1));
    }

    #[test]
    fn group_count_must_divide_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = PosteriorConfig {
            groups: 3,
            hidden: vec![],
            batch_norm: false,
        };
        assert!(Encoder::new(&mut store, 2, 4, &cfg, SmoothingKind::SpikeExponential, &mut rng).is_err());
    }

}
