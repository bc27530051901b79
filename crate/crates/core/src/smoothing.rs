//! Smoothing transforms `r(zeta | z)` and the inverse CDFs of the smoothed
//! posterior marginal `(1 - q) r(zeta | 0) + q r(zeta | 1)`.
//!
//! Every inverse CDF returns the sample together with its partial
//! derivatives, so callers can record it on the tape as a single node.

use std::sync::atomic::{AtomicU64, Ordering};

use statrs::function::erf::{erf_inv, erfc};

use crate::error::{Error, Result};

/// Lower and upper clamp for posterior probabilities before inversion.
pub const Q_MIN: f64 = 1e-7;
pub const Q_MAX: f64 = 1.0 - 1e-7;

/// Magnitude bound on the argument of `erf_inv`.
const ERF_ARG_LIMIT: f64 = 1.0 - 1e-12;

static ERF_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an `erf_inv` argument had to be clamped, process-wide.
pub fn erf_clamp_count() -> u64 {
    ERF_CLAMPS.load(Ordering::Relaxed)
}

pub fn clamp_q(q: f64) -> f64 {
    q.clamp(Q_MIN, Q_MAX)
}

/// Which smoothing family is used for every discrete unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothingKind {
    SpikeExponential,
    MixtureOfRamps,
    SpikeSlab,
    /// Spike at zero for `z = 0`, Gaussian for `z = 1`. The prior Gaussian
    /// is `N(0, prior_sigma^2)`; the posterior Gaussian is input dependent.
    SpikeGaussian { prior_sigma: f64 },
}

impl SmoothingKind {
    pub fn is_spike(&self) -> bool {
        !matches!(self, SmoothingKind::MixtureOfRamps)
    }

    pub fn name(&self) -> &'static str {
        match self {
            SmoothingKind::SpikeExponential => "spike_exp",
            SmoothingKind::MixtureOfRamps => "ramps",
            SmoothingKind::SpikeSlab => "spike_slab",
            SmoothingKind::SpikeGaussian { .. } => "spike_gauss",
        }
    }
}

/// Upper bound on the sharpness `beta`, growing linearly with epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaSchedule {
    pub start: f64,
    pub slope: f64,
    pub cap: f64,
    pub floor: f64,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            slope: 0.25,
            cap: 10.0,
            floor: 0.5,
        }
    }
}

impl BetaSchedule {
    /// `min(cap, start + slope * epoch)`; `epoch` may be fractional.
    pub fn max_at(&self, epoch: f64) -> f64 {
        (self.start + self.slope * epoch.max(0.0)).min(self.cap)
    }

    pub fn clamp(&self, beta: f64, epoch: f64) -> f64 {
        beta.clamp(self.floor, self.max_at(epoch).max(self.floor))
    }
}

/// A smoothing transform instantiated for one unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    SpikeExp { beta: f64 },
    Ramps,
    SpikeSlab,
    SpikeGauss { mu: f64, sigma: f64 },
}

/// An inverse-CDF sample and its partial derivatives.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Smoothed {
    pub zeta: f64,
    /// True when the sample sits on the spike at zero.
    pub spike: bool,
    pub d_q: f64,
    pub d_beta: f64,
    pub d_mu: f64,
    pub d_log_sigma: f64,
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("probability {q} outside (0, 1)")))
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        Err(Error::contract(format!("uniform draw {rho} outside [0, 1]")))
    }
}

/// Spike at zero mixed with `r(zeta|1) = beta e^{beta zeta} / (e^beta - 1)` on `[0, 1]`.
pub fn spike_exp(q: f64, rho: f64, beta: f64) -> Result<Smoothed> {
    check_q(q)?;
    check_rho(rho)?;
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be positive, got {beta}")));
    }
    if rho < 1.0 - q {
        return Ok(Smoothed {
            spike: true,
            ..Smoothed::default()
        });
    }
    let a = beta.exp_m1();
    let t = (rho + q - 1.0) / q;
    let inner = 1.0 + t * a;
    let log_inner = (t * a).ln_1p();
    let zeta = log_inner / beta;
    let d_q = a * (1.0 - rho) / (beta * q * q * inner);
    let d_beta = t * beta.exp() / (inner * beta) - log_inner / (beta * beta);
    Ok(Smoothed {
        zeta,
        spike: false,
        d_q,
        d_beta,
        ..Smoothed::default()
    })
}

pub fn inverse_cdf_spike_exp(q: f64, rho: f64, beta: f64) -> Result<f64> {
    spike_exp(q, rho, beta).map(|s| s.zeta)
}

/// Mixture of the ramps `2(1 - zeta)` and `2 zeta` on `[0, 1]`.
pub fn ramps(q: f64, rho: f64) -> Result<Smoothed> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("probability {q} outside [0, 1]")));
    }
    check_rho(rho)?;
    if (q - 0.5).abs() < 1e-9 {
        return Ok(Smoothed {
            zeta: rho,
            d_q: 2.0 * rho * (1.0 - rho),
            ..Smoothed::default()
        });
    }
    // Rationalized root of (2q - 1) zeta^2 + 2(1 - q) zeta - rho = 0.
    let disc = ((q - 1.0) * (q - 1.0) + (2.0 * q - 1.0) * rho).max(0.0);
    let root = disc.sqrt();
    let denom = root + 1.0 - q;
    if denom <= 0.0 {
        return Ok(Smoothed {
            zeta: if rho > 0.0 { 1.0 } else { 0.0 },
            ..Smoothed::default()
        });
    }
    let zeta = (rho / denom).clamp(0.0, 1.0);
    let d_denom = if root > 0.0 { (q - 1.0 + rho) / root - 1.0 } else { -1.0 };
    Ok(Smoothed {
        zeta,
        d_q: -rho * d_denom / (denom * denom),
        ..Smoothed::default()
    })
}

pub fn inverse_cdf_mixture_ramps(q: f64, rho: f64) -> Result<f64> {
    ramps(q, rho).map(|s| s.zeta)
}

/// Spike at zero mixed with a uniform slab on `[0, 1]`.
pub fn spike_slab(q: f64, rho: f64) -> Result<Smoothed> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("probability {q} outside [0, 1]")));
    }
    check_rho(rho)?;
    if q == 0.0 || rho < 1.0 - q {
        return Ok(Smoothed {
            spike: true,
            ..Smoothed::default()
        });
    }
    Ok(Smoothed {
        // Rounding at rho = 1 - q can dip below the support.
        zeta: ((rho - 1.0) / q + 1.0).clamp(0.0, 1.0),
        spike: false,
        d_q: (1.0 - rho) / (q * q),
        ..Smoothed::default()
    })
}

pub fn inverse_cdf_spike_slab(q: f64, rho: f64) -> Result<f64> {
    spike_slab(q, rho).map(|s| s.zeta)
}

/// Standard normal quantile via `erf_inv`, clamping the argument.
fn normal_quantile(p: f64) -> (f64, bool) {
    let arg = 2.0 * p - 1.0;
    let clamped = arg.clamp(-ERF_ARG_LIMIT, ERF_ARG_LIMIT);
    let hit = clamped != arg;
    if hit {
        ERF_CLAMPS.fetch_add(1, Ordering::Relaxed);
    }
    let mut w = std::f64::consts::SQRT_2 * erf_inv(clamped);
    if !hit {
        // One Newton step on Phi(w) = p tightens erf_inv's rational approximation.
        let density = (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt();
        if density > 1e-300 {
            w -= (normal_cdf(w) - p) / density;
        }
    }
    (w, hit)
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Spike at zero mixed with `N(mu, sigma^2)`, using the ordering that puts
/// the spike first: `zeta = mu + sigma Phi^{-1}(1 + (rho - 1)/q)` for
/// `rho > 1 - q`.
pub fn spike_gauss(q: f64, rho: f64, mu: f64, sigma: f64) -> Result<Smoothed> {
    if !(sigma > 0.0) {
        return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::contract(format!("probability {q} outside [0, 1]")));
    }
    check_rho(rho)?;
    if q == 0.0 || rho <= 1.0 - q {
        return Ok(Smoothed {
            spike: true,
            ..Smoothed::default()
        });
    }
    let p = 1.0 + (rho - 1.0) / q;
    let (w, clamped) = normal_quantile(p);
    let d_q = if clamped {
        0.0
    } else {
        // dPhi^{-1}/dp = sqrt(2 pi) exp(w^2 / 2)
        let dw_dp = (2.0 * std::f64::consts::PI).sqrt() * (0.5 * w * w).exp();
        sigma * dw_dp * (1.0 - rho) / (q * q)
    };
    Ok(Smoothed {
        zeta: mu + sigma * w,
        spike: false,
        d_q,
        d_mu: 1.0,
        d_log_sigma: sigma * w,
        ..Smoothed::default()
    })
}

pub fn inverse_cdf_spike_gaussian(q: f64, rho: f64, mu: f64, sigma: f64) -> Result<f64> {
    spike_gauss(q, rho, mu, sigma).map(|s| s.zeta)
}

/// `q * sum_i KL(N(mu_q, sigma_q^2) || N(mu_p, sigma_p^2))` per unit, summed.
/// The `z = 0` branch contributes nothing: both sides share the spike.
pub fn spike_gaussian_kl_term(q: &[f64], mu_q: &[f64], sigma_q: &[f64], mu_p: f64, sigma_p: f64) -> f64 {
    q.iter()
        .zip(mu_q)
        .zip(sigma_q)
        .map(|((&q, &m), &s)| q * gaussian_kl_scalar(m, s, mu_p, sigma_p))
        .sum()
}

pub fn gaussian_kl_scalar(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    sigma_p.ln() - sigma_q.ln() + (sigma_q * sigma_q + (mu_q - mu_p).powi(2)) / (2.0 * sigma_p * sigma_p) - 0.5
}

impl Transform {
    pub fn inverse(&self, q: f64, rho: f64) -> Result<Smoothed> {
        match *self {
            Transform::SpikeExp { beta } => spike_exp(q, rho, beta),
            Transform::Ramps => ramps(q, rho),
            Transform::SpikeSlab => spike_slab(q, rho),
            Transform::SpikeGauss { mu, sigma } => spike_gauss(q, rho, mu, sigma),
        }
    }

    /// Mixture CDF. For the spike-and-Gaussian transform this is the CDF in
    /// the spike-first ordering that its inverse uses: `1 - q + q Phi`.
    pub fn forward_cdf(&self, q: f64, zeta: f64) -> f64 {
        match *self {
            Transform::SpikeExp { beta } => {
                if zeta < 0.0 {
                    0.0
                } else if zeta >= 1.0 {
                    1.0
                } else {
                    q * ((beta * zeta).exp_m1() / beta.exp_m1() - 1.0) + 1.0
                }
            }
            Transform::Ramps => {
                let z = zeta.clamp(0.0, 1.0);
                2.0 * q * (z * z - z) + 2.0 * z - z * z
            }
            Transform::SpikeSlab => {
                if zeta < 0.0 {
                    0.0
                } else {
                    q * (zeta.min(1.0) - 1.0) + 1.0
                }
            }
            Transform::SpikeGauss { mu, sigma } => 1.0 - q + q * normal_cdf((zeta - mu) / sigma),
        }
    }

    /// Draws from `r(zeta | z)` given a uniform `u` (prior side).
    pub fn sample_conditional(&self, z: bool, u: f64) -> f64 {
        match *self {
            Transform::SpikeExp { beta } => {
                if z {
                    (u * beta.exp_m1()).ln_1p() / beta
                } else {
                    0.0
                }
            }
            Transform::Ramps => {
                if z {
                    u.sqrt()
                } else {
                    1.0 - (1.0 - u).sqrt()
                }
            }
            Transform::SpikeSlab => {
                if z {
                    u
                } else {
                    0.0
                }
            }
            Transform::SpikeGauss { mu, sigma } => {
                if z {
                    mu + sigma * normal_quantile(u.clamp(1e-300, 1.0)).0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `P(z = 1 | zeta)` for the mixture of ramps, with derivatives with
/// respect to `q` and `zeta`.
pub fn ramps_responsibility(q: f64, zeta: f64) -> (f64, f64, f64) {
    let one = q * zeta;
    let zero = (1.0 - q) * (1.0 - zeta);
    let total = one + zero;
    if total <= 0.0 {
        return (q, 0.0, 0.0);
    }
    let g = one / total;
    // d/dq: (zeta * total - one * (2 zeta - 1)) / total^2
    let d_q = (zeta * total - one * (2.0 * zeta - 1.0)) / (total * total);
    // d/dzeta: (q * total - one * (2q - 1)) / total^2
    let d_zeta = (q * total - one * (2.0 * q - 1.0)) / (total * total);
    (g, d_q, d_zeta)
}
