//! Log-partition estimation by parallel tempering and bridge sampling.
//!
//! Rung `t` targets `p_t(z) ∝ exp(-beta_t E(z))` with `beta_0 = 0` (uniform,
//! `log Z_0 = n ln 2`) and `beta_T = 1`. Adjacent free-energy differences are
//! solved from Bennett's acceptance-ratio condition and summed.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::logistic;
use crate::rbm::RbmParams;
use crate::rng::{self, Purpose};

/// Swap rates inside this band count as tuned.
pub const RATE_BAND: (f64, f64) = (0.35, 0.65);

#[derive(Clone, Debug, PartialEq)]
pub struct TemperingLadder {
    /// Strictly increasing, from 0 to 1.
    pub betas: Vec<f64>,
    /// Measured acceptance rate of each adjacent swap.
    pub swap_rates: Vec<f64>,
    /// `false` when tuning stopped before every rate entered the band.
    pub converged: bool,
}

impl TemperingLadder {
    pub fn linear(rungs: usize) -> Result<Self> {
        if rungs < 2 {
            return Err(Error::contract("a tempering ladder needs at least 2 rungs"));
        }
        let betas = (0..rungs).map(|t| t as f64 / (rungs - 1) as f64).collect();
        Ok(Self {
            betas,
            swap_rates: vec![f64::NAN; rungs - 1],
            converged: false,
        })
    }

    pub fn rungs(&self) -> usize {
        self.betas.len()
    }

    fn rates_ok(&self) -> bool {
        let (lo, hi) = RATE_BAND;
        self.swap_rates.iter().all(|&r| r >= lo && (r <= hi || self.rungs() == 2))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TuneOptions {
    pub target: f64,
    pub initial_rungs: usize,
    pub sweeps_per_round: usize,
    pub max_rounds: usize,
    pub max_rungs: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        Self {
            target: 0.5,
            initial_rungs: 16,
            sweeps_per_round: 2000,
            max_rounds: 20,
            max_rungs: 512,
        }
    }
}

/// Replicas of one tempering run: one binary state per rung.
struct Replicas {
    n_left: usize,
    states: Vec<Vec<f64>>,
    left_p: Vec<f64>,
    right_p: Vec<f64>,
}

impl Replicas {
    fn new<R: Rng + ?Sized>(params: &RbmParams, rungs: usize, rng: &mut R) -> Self {
        let n = params.units();
        let states = (0..rungs)
            .map(|_| (0..n).map(|_| (rng.random::<f64>() < 0.5) as u8 as f64).collect())
            .collect();
        Self {
            n_left: params.n_left(),
            states,
            left_p: vec![0.0; params.n_left()],
            right_p: vec![0.0; params.n_right()],
        }
    }

    /// One block-Gibbs sweep of every rung at its own temperature.
    fn sweep<R: Rng + ?Sized>(&mut self, params: &RbmParams, betas: &[f64], rng: &mut R) {
        let nl = self.n_left;
        let bias = params.bias.data();
        for (state, &beta) in self.states.iter_mut().zip(betas) {
            for (j, p) in self.right_p.iter_mut().enumerate() {
                let mut a = bias[nl + j];
                for (l, &zl) in state[..nl].iter().enumerate() {
                    if zl != 0.0 {
                        a += params.weights.get(l, j);
                    }
                }
                *p = logistic(beta * a);
            }
            for (dst, &p) in state[nl..].iter_mut().zip(&self.right_p) {
                *dst = (rng.random::<f64>() < p) as u8 as f64;
            }
            for (l, p) in self.left_p.iter_mut().enumerate() {
                let row = params.weights.row(l);
                let a = bias[l] + row.iter().zip(&state[nl..]).map(|(w, r)| w * r).sum::<f64>();
                *p = logistic(beta * a);
            }
            for (dst, &p) in state[..nl].iter_mut().zip(&self.left_p) {
                *dst = (rng.random::<f64>() < p) as u8 as f64;
            }
        }
    }

    /// Attempts swaps between all adjacent pairs, alternating even and odd
    /// pairs by `parity`. Returns which pairs were attempted and accepted.
    fn swap<R: Rng + ?Sized>(
        &mut self,
        energies: &mut [f64],
        betas: &[f64],
        parity: usize,
        attempts: &mut [u64],
        accepts: &mut [u64],
        rng: &mut R,
    ) {
        let mut t = parity;
        while t + 1 < betas.len() {
            attempts[t] += 1;
            let log_a = (betas[t + 1] - betas[t]) * (energies[t + 1] - energies[t]);
            if log_a >= 0.0 || rng.random::<f64>() < log_a.exp() {
                accepts[t] += 1;
                self.states.swap(t, t + 1);
                energies.swap(t, t + 1);
            }
            t += 2;
        }
    }

    fn energies(&self, params: &RbmParams, out: &mut [f64]) {
        for (e, s) in out.iter_mut().zip(&self.states) {
            *e = -params.neg_energy(s);
        }
    }
}

/// Runs tempering and records the energy of every rung after each sweep.
/// Returns the energy trace (`sweeps x rungs`) and the swap rates.
fn run_tempering(
    params: &RbmParams,
    betas: &[f64],
    sweeps: usize,
    seed: u64,
    repeat: u64,
    record: bool,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut init = rng::stream(seed, Purpose::Tempering, repeat, u64::MAX);
    let mut rng = rng::stream(seed, Purpose::Tempering, repeat, 0);
    let mut reps = Replicas::new(params, betas.len(), &mut init);
    let mut energies = vec![0.0; betas.len()];
    let mut attempts = vec![0u64; betas.len() - 1];
    let mut accepts = vec![0u64; betas.len() - 1];
    let mut trace = Vec::with_capacity(if record { sweeps } else { 0 });
    for s in 0..sweeps {
        reps.sweep(params, betas, &mut rng);
        reps.energies(params, &mut energies);
        reps.swap(&mut energies, betas, s % 2, &mut attempts, &mut accepts, &mut rng);
        if record {
            trace.push(energies.clone());
        }
    }
    let rates = attempts
        .iter()
        .zip(&accepts)
        .map(|(&a, &c)| if a == 0 { f64::NAN } else { c as f64 / a as f64 })
        .collect();
    (trace, rates)
}

/// Places rungs so every adjacent swap is expected to accept at `target`.
pub fn tune_ladder(params: &RbmParams, opts: &TuneOptions, seed: u64) -> Result<TemperingLadder> {
    if !(opts.target > 0.0 && opts.target < 1.0) {
        return Err(Error::contract(format!("target swap rate {} outside (0, 1)", opts.target)));
    }
    let mut ladder = TemperingLadder::linear(opts.initial_rungs.max(2))?;
    let mut best: Option<(f64, TemperingLadder)> = None;
    for round in 0..opts.max_rounds {
        let (_, rates) = run_tempering(params, &ladder.betas, opts.sweeps_per_round, seed, round as u64, false);
        ladder.swap_rates = rates;
        let worst = ladder
            .swap_rates
            .iter()
            .map(|&r| (r - opts.target).abs())
            .fold(0.0, f64::max);
        if best.as_ref().is_none_or(|(w, _)| worst < *w) {
            best = Some((worst, ladder.clone()));
        }
        if ladder.rates_ok() {
            ladder.converged = true;
            return Ok(ladder);
        }
        ladder = redistribute(&ladder, opts)?;
    }
    let mut out = best.map(|(_, l)| l).expect("at least one round");
    out.converged = false;
    Ok(out)
}

/// Treats `-ln(rate)` as the length of each gap and places the new rungs at
/// equal length `-ln(target)` along the cumulative profile.
fn redistribute(ladder: &TemperingLadder, opts: &TuneOptions) -> Result<TemperingLadder> {
    let floor = 1e-3;
    let lengths: Vec<f64> = ladder.swap_rates.iter().map(|&r| -(r.clamp(floor, 1.0 - 1e-9)).ln()).collect();
    let total: f64 = lengths.iter().sum();
    let step = -opts.target.ln();
    let gaps = ((total / step).round() as usize).clamp(1, opts.max_rungs - 1);
    let mut cumulative = vec![0.0];
    for l in &lengths {
        cumulative.push(cumulative.last().unwrap() + l);
    }
    let mut betas = Vec::with_capacity(gaps + 1);
    for k in 0..=gaps {
        let target = total * k as f64 / gaps as f64;
        let i = cumulative.partition_point(|&c| c < target).clamp(1, lengths.len());
        let (c0, c1) = (cumulative[i - 1], cumulative[i]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        betas.push(ladder.betas[i - 1] + frac * (ladder.betas[i] - ladder.betas[i - 1]));
    }
    betas[0] = 0.0;
    *betas.last_mut().unwrap() = 1.0;
    betas.dedup_by(|a, b| *a <= *b);
    if betas.len() < 2 {
        betas = vec![0.0, 1.0];
    }
    let rungs = betas.len();
    Ok(TemperingLadder {
        betas,
        swap_rates: vec![f64::NAN; rungs - 1],
        converged: false,
    })
}

/// Result of a bridge-sampling fixed point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarSolution {
    /// `ln(Z_1 / Z_0)`.
    pub log_ratio: f64,
    pub residual: f64,
    pub iterations: usize,
}

fn fermi(x: f64) -> f64 {
    logistic(-x)
}

/// Solves Bennett's condition for `ln(Z_1/Z_0)` given forward works
/// `-ln(q_1/q_0)` on samples from `p_0` and reverse works `-ln(q_0/q_1)` on
/// samples from `p_1`. Uses Newton steps guarded by a bisection bracket.
pub fn bar_log_ratio(forward: &[f64], reverse: &[f64]) -> Result<BarSolution> {
    if forward.is_empty() || reverse.is_empty() {
        return Err(Error::contract("bridge sampling needs samples on both sides"));
    }
    let m = (forward.len() as f64 / reverse.len() as f64).ln();
    // g(df) is increasing in df, where df = -ln(Z_1/Z_0).
    let g = |df: f64| -> (f64, f64) {
        let mut val = 0.0;
        let mut der = 0.0;
        for &w in forward {
            let f = fermi(m + w - df);
            val += f;
            der += f * (1.0 - f);
        }
        for &w in reverse {
            let f = fermi(-m + w + df);
            val -= f;
            der += f * (1.0 - f);
        }
        (val / forward.len().max(reverse.len()) as f64, der / forward.len().max(reverse.len()) as f64)
    };
    let scale = forward
        .iter()
        .chain(reverse)
        .map(|w| w.abs())
        .fold(1.0, f64::max)
        + m.abs();
    let (mut lo, mut hi) = (-scale, scale);
    let mut expand = 0;
    while g(lo).0 > 0.0 || g(hi).0 < 0.0 {
        lo *= 2.0;
        hi *= 2.0;
        expand += 1;
        if expand > 60 {
            return Err(Error::Convergence(0, 1));
        }
    }
    let mut x = 0.5 * (lo + hi);
    let tol = 1e-12;
    for it in 1..=10_000 {
        let (val, der) = g(x);
        if val.abs() <= tol {
            return Ok(BarSolution {
                log_ratio: -x,
                residual: val.abs(),
                iterations: it,
            });
        }
        if val > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let newton = if der > 0.0 { x - val / der } else { f64::NAN };
        x = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= f64::EPSILON * x.abs().max(1.0) {
            let (val, _) = g(x);
            return Ok(BarSolution {
                log_ratio: -x,
                residual: val.abs(),
                iterations: it,
            });
        }
    }
    Err(Error::Convergence(0, 1))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogZEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// `(estimate, stderr)` for every repeat.
    pub repeats: Vec<(f64, f64)>,
}

/// Number of consecutive blocks used for the per-repeat standard error.
const BLOCKS: usize = 10;

fn chain_log_z(betas: &[f64], trace: &[Vec<f64>], units: usize) -> Result<f64> {
    let mut log_z = units as f64 * std::f64::consts::LN_2;
    for t in 0..betas.len() - 1 {
        let d = betas[t + 1] - betas[t];
        let forward: Vec<f64> = trace.iter().map(|e| d * e[t]).collect();
        let reverse: Vec<f64> = trace.iter().map(|e| -d * e[t + 1]).collect();
        let sol = bar_log_ratio(&forward, &reverse).map_err(|e| match e {
            Error::Convergence(..) => Error::Convergence(t, t + 1),
            other => other,
        })?;
        log_z += sol.log_ratio;
    }
    Ok(log_z)
}

/// Estimates `log Z` with `n_repeats` independent tempering runs of
/// `2 * n_samples` sweeps each; the first half of every run is burn-in.
pub fn estimate_log_z(
    params: &RbmParams,
    ladder: &TemperingLadder,
    n_samples: usize,
    n_repeats: usize,
    seed: u64,
) -> Result<LogZEstimate> {
    if n_samples < BLOCKS || n_repeats == 0 {
        return Err(Error::contract(format!(
            "need at least {BLOCKS} samples and one repeat, got {n_samples} and {n_repeats}"
        )));
    }
    let b = &ladder.betas;
    if b.len() < 2 || b[0] != 0.0 || *b.last().unwrap() != 1.0 || b.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::contract("ladder must increase strictly from 0 to 1"));
    }
    let n = params.units();
    let run = |r: usize| -> Result<(f64, f64)> {
        let (trace, _) = run_tempering(params, b, 2 * n_samples, seed, 1_000_000 + r as u64, true);
        let kept = &trace[n_samples..];
        let est = chain_log_z(b, kept, n)?;
        let per = kept.len() / BLOCKS;
        let blocks: Vec<f64> = (0..BLOCKS)
            .map(|k| chain_log_z(b, &kept[k * per..(k + 1) * per], n))
            .collect::<Result<_>>()?;
        let mean = blocks.iter().sum::<f64>() / BLOCKS as f64;
        let var = blocks.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (BLOCKS - 1) as f64;
        Ok((est, (var / BLOCKS as f64).sqrt()))
    };
    let threads = crate::threads().min(n_repeats).max(1);
    let repeats: Vec<(f64, f64)> = if threads == 1 {
        (0..n_repeats).map(run).collect::<Result<_>>()?
    } else {
        let results: Vec<Result<(f64, f64)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let run = &run;
                    scope.spawn(move || (t..n_repeats).step_by(threads).map(|r| (r, run(r))).collect::<Vec<_>>())
                })
                .collect();
            let mut all: Vec<(usize, Result<(f64, f64)>)> =
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect();
            all.sort_by_key(|(r, _)| *r);
            all.into_iter().map(|(_, v)| v).collect()
        });
        results.into_iter().collect::<Result<_>>()?
    };
    let k = repeats.len() as f64;
    let mean = repeats.iter().map(|r| r.0).sum::<f64>() / k;
    let stderr = if repeats.len() > 1 {
        (repeats.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (k - 1.0) / k).sqrt()
    } else {
        repeats[0].1
    };
    Ok(LogZEstimate { mean, stderr, repeats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_rbm(nl: usize, nr: usize, scale: f64, seed: u64) -> RbmParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(nl, nr, |_, _| scale * (2.0 * rng.random::<f64>() - 1.0));
        let b = Tensor::from_fn(1, nl + nr, |_, _| 0.5 * scale * (2.0 * rng.random::<f64>() - 1.0));
        RbmParams::new(w, b).unwrap()
    }

    #[test]
    fn bar_recovers_known_ratio_between_gaussians() {
        // q0 = N(0,1), q1 = exp(-(x-1)^2/2) * e^0.7, so ln(Z1/Z0) = 0.7.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let draw = |rng: &mut ChaCha8Rng, mu: f64| mu + rng.sample::<f64, _>(rand_distr::StandardNormal);
        let log_q0 = |x: f64| -0.5 * x * x;
        let log_q1 = |x: f64| -0.5 * (x - 1.0) * (x - 1.0) + 0.7;
        let fwd: Vec<f64> = (0..n).map(|_| draw(&mut rng, 0.0)).map(|x| log_q0(x) - log_q1(x)).collect();
        let rev: Vec<f64> = (0..n).map(|_| draw(&mut rng, 1.0)).map(|x| log_q1(x) - log_q0(x)).collect();
        let sol = bar_log_ratio(&fwd, &rev).unwrap();
        assert!((sol.log_ratio - 0.7).abs() < 0.03, "{sol:?}");
        assert!(sol.residual <= 1e-10);
    }

    #[test]
    fn flat_model_two_rungs_swap_always() {
        let p = RbmParams::zeros(4, 4);
        let opts = TuneOptions {
            initial_rungs: 2,
            sweeps_per_round: 500,
            ..TuneOptions::default()
        };
        let ladder = tune_ladder(&p, &opts, 1).unwrap();
        assert_eq!(ladder.rungs(), 2);
        assert_eq!(ladder.swap_rates, vec![1.0]);
        assert!(ladder.converged);
        let est = estimate_log_z(&p, &ladder, 200, 3, 2).unwrap();
        assert!((est.mean - 8.0 * 2f64.ln()).abs() < 1e-12, "{est:?}");
    }

    #[test]
    fn tuned_ladder_is_monotone_and_in_band() {
        let p = random_rbm(8, 8, 1.0, 3);
        let ladder = tune_ladder(&p, &TuneOptions::default(), 4).unwrap();
        assert!(ladder.betas.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(ladder.betas[0], 0.0);
        assert_eq!(*ladder.betas.last().unwrap(), 1.0);
        assert!(ladder.converged, "{ladder:?}");
        for &r in &ladder.swap_rates {
            assert!((RATE_BAND.0..=RATE_BAND.1).contains(&r), "{r}");
        }
    }

    #[test]
    fn small_machine_matches_enumeration() {
        let p = random_rbm(4, 4, 1.0, 8);
        let exact = p.exact_distribution().unwrap().log_z;
        let ladder = tune_ladder(&p, &TuneOptions::default(), 9).unwrap();
        let est = estimate_log_z(&p, &ladder, 2000, 4, 10).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.stderr, "{} vs {exact} ({})", est.mean, est.stderr);
    }

    #[test]
    fn malformed_ladders_are_rejected() {
        let p = RbmParams::zeros(1, 1);
        let bad = TemperingLadder {
            betas: vec![0.0, 0.6, 0.5, 1.0],
            swap_rates: vec![],
            converged: true,
        };
        assert!(estimate_log_z(&p, &bad, 100, 1, 0).is_err());
        assert!(TemperingLadder::linear(1).is_err());
    }
}
