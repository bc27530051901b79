//! Bipartite Boltzmann machine prior over binary latents.
//!
//! Units `0..n_left` form the left side and `n_left..n_left + n_right` the
//! right side. The energy is `E(z) = -(z_L^T W z_R + b^T z)` and
//! `p(z) = exp(-E(z)) / Z`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{logistic, Tensor};
use crate::rng::{self, Purpose};

/// Largest machine accepted by [`RbmParams::exact_distribution`].
pub const MAX_EXACT_UNITS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct RbmParams {
    /// `n_left x n_right` couplings.
    pub weights: Tensor,
    /// `1 x (n_left + n_right)` biases.
    pub bias: Tensor,
}

/// Normalized probabilities of all `2^n` states; bit `i` of the index is unit `i`.
#[derive(Clone, Debug)]
pub struct ExactDistribution {
    pub probs: Vec<f64>,
    pub log_z: f64,
}

/// Expected sufficient statistics `E[z_L z_R^T]` and `E[z]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStats {
    pub pairwise: Tensor,
    pub unary: Tensor,
}

impl PhaseStats {
    pub fn zeros(n_left: usize, n_right: usize) -> Self {
        Self {
            pairwise: Tensor::zeros(n_left, n_right),
            unary: Tensor::zeros(1, n_left + n_right),
        }
    }
}

/// Gradient of the discrete KL term with respect to `(W, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaGrad {
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn state_bits(index: usize, n: usize) -> Vec<f64> {
    (0..n).map(|i| ((index >> i) & 1) as f64).collect()
}

impl RbmParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        let n = weights.rows() + weights.cols();
        if bias.shape() != (1, n) {
            return Err(Error::Dimension {
                op: "RbmParams::new",
                left: weights.shape(),
                right: bias.shape(),
            });
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(n_left: usize, n_right: usize) -> Self {
        Self {
            weights: Tensor::zeros(n_left, n_right),
            bias: Tensor::zeros(1, n_left + n_right),
        }
    }

    pub fn n_left(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_right(&self) -> usize {
        self.weights.cols()
    }

    pub fn units(&self) -> usize {
        self.weights.rows() + self.weights.cols()
    }

    /// `-E(z)` without validating that `z` is binary.
    pub fn neg_energy(&self, z: &[f64]) -> f64 {
        let nl = self.n_left();
        let mut acc: f64 = z.iter().zip(self.bias.data()).map(|(a, b)| a * b).sum();
        for (l, &zl) in z[..nl].iter().enumerate() {
            if zl != 0.0 {
                let row = self.weights.row(l);
                acc += zl * row.iter().zip(&z[nl..]).map(|(w, r)| w * r).sum::<f64>();
            }
        }
        acc
    }

    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.units() {
            return Err(Error::Length(format!(
                "state has {} entries, machine has {} units",
                z.len(),
                self.units()
            )));
        }
        if let Some(bad) = z.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract(format!("state entry {bad} is not binary")));
        }
        Ok(-self.neg_energy(z))
    }

    pub fn exact_distribution(&self) -> Result<ExactDistribution> {
        let n = self.units();
        if n > MAX_EXACT_UNITS {
            return Err(Error::contract(format!(
                "exact enumeration supports at most {MAX_EXACT_UNITS} units, got {n}"
            )));
        }
        let neg: Vec<f64> = (0..1usize << n).map(|s| self.neg_energy(&state_bits(s, n))).collect();
        let max = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = neg.iter().map(|e| (e - max).exp()).sum();
        let log_z = max + total.ln();
        let probs = neg.iter().map(|e| (e - log_z).exp()).collect();
        Ok(ExactDistribution { probs, log_z })
    }

    /// `log Z` by enumerating the smaller side and summing the other out
    /// analytically. Feasible whenever one side has at most 24 units.
    pub fn log_partition_exact(&self) -> Result<f64> {
        let (nl, nr) = (self.n_left(), self.n_right());
        let small = nl.min(nr);
        if small > 24 {
            return Err(Error::contract(format!(
                "exact log Z needs a side of at most 24 units, got {nl}+{nr}"
            )));
        }
        let bias = self.bias.data();
        let (b_small, b_big) = if nl <= nr { (&bias[..nl], &bias[nl..]) } else { (&bias[nl..], &bias[..nl]) };
        let coupling = |i: usize, j: usize| if nl <= nr { self.weights.get(i, j) } else { self.weights.get(j, i) };
        let big = nl.max(nr);
        let mut act = vec![0.0; big];
        let terms: Vec<f64> = (0..1usize << small)
            .map(|s| {
                act.copy_from_slice(b_big);
                let mut lin = 0.0;
                for i in 0..small {
                    if s >> i & 1 == 1 {
                        lin += b_small[i];
                        for (j, a) in act.iter_mut().enumerate() {
                            *a += coupling(i, j);
                        }
                    }
                }
                lin + act.iter().map(|&a| crate::numerics::softplus(a)).sum::<f64>()
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
    }

    /// Exact `E_p[z_L z_R^T]` and `E_p[z]` by enumeration.
    pub fn exact_stats(&self) -> Result<PhaseStats> {
        let dist = self.exact_distribution()?;
        let n = self.units();
        let nl = self.n_left();
        let mut stats = PhaseStats::zeros(nl, self.n_right());
        for (s, &p) in dist.probs.iter().enumerate() {
            let z = state_bits(s, n);
            accumulate_stats(&mut stats, &z[..nl], &z[nl..], p);
        }
        Ok(stats)
    }

    /// Conditional probabilities of the right side given the left.
    pub fn right_probs(&self, left: &[f64], out: &mut [f64]) {
        let nl = self.n_left();
        out.copy_from_slice(&self.bias.data()[nl..]);
        for (l, &zl) in left.iter().enumerate() {
            if zl != 0.0 {
                for (o, w) in out.iter_mut().zip(self.weights.row(l)) {
                    *o += zl * w;
                }
            }
        }
        for o in out.iter_mut() {
            *o = logistic(*o);
        }
    }

    /// Conditional probabilities of the left side given the right.
    pub fn left_probs(&self, right: &[f64], out: &mut [f64]) {
        for (l, o) in out.iter_mut().enumerate() {
            let row = self.weights.row(l);
            let act: f64 = row.iter().zip(right).map(|(w, r)| w * r).sum();
            *o = logistic(self.bias.data()[l] + act);
        }
    }

    /// `dKL/dtheta = E_q[dE/dtheta] - E_p[dE/dtheta]` with `dE/dW = -z_L z_R^T`
    /// and `dE/db = -z`.
    pub fn kl_grad_theta(&self, positive: &PhaseStats, negative: &PhaseStats) -> ThetaGrad {
        let sub = |n: &Tensor, p: &Tensor| {
            Tensor::new(
                n.rows(),
                n.cols(),
                n.data().iter().zip(p.data()).map(|(a, b)| a - b).collect(),
            )
            .expect("matching shapes")
        };
        ThetaGrad {
            weights: sub(&negative.pairwise, &positive.pairwise),
            bias: sub(&negative.unary, &positive.unary),
        }
    }
}

/// Adds `weight * (left right^T, [left, right])` into `stats`.
pub fn accumulate_stats(stats: &mut PhaseStats, left: &[f64], right: &[f64], weight: f64) {
    let nr = right.len();
    for (l, &a) in left.iter().enumerate() {
        if a != 0.0 {
            let row = &mut stats.pairwise.row_mut(l)[..nr];
            for (o, &b) in row.iter_mut().zip(right) {
                *o += weight * a * b;
            }
        }
    }
    let u = stats.unary.data_mut();
    for (o, &v) in u.iter_mut().zip(left.iter().chain(right)) {
        *o += weight * v;
    }
}

/// Persistent block-Gibbs chains.
#[derive(Clone, Debug, PartialEq)]
pub struct GibbsChains {
    n_left: usize,
    n_right: usize,
    /// Row-major `n_chains x units`, entries 0 or 1.
    states: Vec<u8>,
}

impl GibbsChains {
    /// Uniformly random binary initial states.
    pub fn random<R: Rng + ?Sized>(n_chains: usize, n_left: usize, n_right: usize, rng: &mut R) -> Self {
        let n = n_left + n_right;
        let states = (0..n_chains * n).map(|_| rng.random_range(0..2u8)).collect();
        Self {
            n_left,
            n_right,
            states,
        }
    }

    pub fn from_states(n_left: usize, n_right: usize, states: Vec<u8>) -> Result<Self> {
        let n = n_left + n_right;
        if n == 0 || !states.len().is_multiple_of(n) || states.is_empty() {
            return Err(Error::Length(format!(
                "chain buffer of {} bytes does not hold whole states of {n} units",
                states.len()
            )));
        }
        if states.iter().any(|&s| s > 1) {
            return Err(Error::Format("chain state byte other than 0/1".into()));
        }
        Ok(Self {
            n_left,
            n_right,
            states,
        })
    }

    pub fn n_chains(&self) -> usize {
        self.states.len() / self.units()
    }

    pub fn units(&self) -> usize {
        self.n_left + self.n_right
    }

    pub fn n_left(&self) -> usize {
        self.n_left
    }

    pub fn n_right(&self) -> usize {
        self.n_right
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.states
    }

    pub fn state(&self, chain: usize) -> Vec<f64> {
        let n = self.units();
        self.states[chain * n..(chain + 1) * n].iter().map(|&b| b as f64).collect()
    }

    pub fn set_state(&mut self, chain: usize, z: &[f64]) {
        let n = self.units();
        for (dst, &v) in self.states[chain * n..(chain + 1) * n].iter_mut().zip(z) {
            *dst = (v != 0.0) as u8;
        }
    }

    fn check(&self, params: &RbmParams) -> Result<()> {
        if params.n_left() != self.n_left || params.n_right() != self.n_right {
            return Err(Error::Dimension {
                op: "gibbs",
                left: (self.n_left, self.n_right),
                right: params.weights.shape(),
            });
        }
        Ok(())
    }

    fn sweep_chain<R: Rng + ?Sized>(
        params: &RbmParams,
        state: &mut [u8],
        n_left: usize,
        sweeps: usize,
        rng: &mut R,
        scratch: &mut Scratch,
    ) {
        for _ in 0..sweeps {
            for (dst, &b) in scratch.left.iter_mut().zip(&state[..n_left]) {
                *dst = b as f64;
            }
            params.right_probs(&scratch.left, &mut scratch.right_p);
            for (dst, &p) in state[n_left..].iter_mut().zip(&scratch.right_p) {
                *dst = (rng.random::<f64>() < p) as u8;
            }
            for (dst, &b) in scratch.right.iter_mut().zip(&state[n_left..]) {
                *dst = b as f64;
            }
            params.left_probs(&scratch.right, &mut scratch.left_p);
            for (dst, &p) in state[..n_left].iter_mut().zip(&scratch.left_p) {
                *dst = (rng.random::<f64>() < p) as u8;
            }
        }
    }

    /// One full alternation (right side, then left side) for every chain,
    /// all drawing from `rng`.
    pub fn block_gibbs_step<R: Rng + ?Sized>(&mut self, params: &RbmParams, rng: &mut R) -> Result<()> {
        self.check(params)?;
        let n = self.units();
        let mut scratch = Scratch::new(self.n_left, self.n_right);
        for state in self.states.chunks_mut(n) {
            Self::sweep_chain(params, state, self.n_left, 1, rng, &mut scratch);
        }
        Ok(())
    }

    /// `sweeps` alternations per chain, chain `c` drawing from its own
    /// stream `(seed, Chain, step, c)`.
    pub fn advance(&mut self, params: &RbmParams, sweeps: usize, seed: u64, step: u64) -> Result<()> {
        self.check(params)?;
        let n = self.units();
        let (n_left, n_right) = (self.n_left, self.n_right);
        let run = |first: usize, block: &mut [u8]| {
            let mut scratch = Scratch::new(n_left, n_right);
            for (i, state) in block.chunks_mut(n).enumerate() {
                let mut r = rng::stream(seed, Purpose::Chain, step, (first + i) as u64);
                Self::sweep_chain(params, state, n_left, sweeps, &mut r, &mut scratch);
            }
        };
        let threads = crate::threads().min(self.n_chains()).max(1);
        if threads == 1 {
            run(0, &mut self.states);
        } else {
            let per = self.n_chains().div_ceil(threads);
            std::thread::scope(|scope| {
                for (t, block) in self.states.chunks_mut(per * n).enumerate() {
                    let run = &run;
                    scope.spawn(move || run(t * per, block));
                }
            });
        }
        Ok(())
    }

    /// Model-side statistics from the current chain states. The left side,
    /// resampled last, is replaced by its conditional probabilities.
    pub fn negative_phase(&self, params: &RbmParams) -> Result<PhaseStats> {
        self.check(params)?;
        let n = self.units();
        let mut stats = PhaseStats::zeros(self.n_left, self.n_right);
        let mut right = vec![0.0; self.n_right];
        let mut left_p = vec![0.0; self.n_left];
        let w = 1.0 / self.n_chains() as f64;
        for state in self.states.chunks(n) {
            for (dst, &b) in right.iter_mut().zip(&state[self.n_left..]) {
                *dst = b as f64;
            }
            params.left_probs(&right, &mut left_p);
            accumulate_stats(&mut stats, &left_p, &right, w);
        }
        Ok(stats)
    }
}

struct Scratch {
    left: Vec<f64>,
    right: Vec<f64>,
    left_p: Vec<f64>,
    right_p: Vec<f64>,
}

impl Scratch {
    fn new(nl: usize, nr: usize) -> Self {
        Self {
            left: vec![0.0; nl],
            right: vec![0.0; nr],
            left_p: vec![0.0; nl],
            right_p: vec![0.0; nr],
        }
    }
}

/// Total-variation distance between two distributions on the same support.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, proptest, Strategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_one(w: f64, b: [f64; 2]) -> RbmParams {
        RbmParams::new(Tensor::scalar(w), Tensor::row_vector(b.to_vec())).unwrap()
    }

    #[test]
    fn energy_examples() {
        let p = one_one(1.0, [0.5, -0.5]);
        assert_eq!(p.energy(&[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(p.energy(&[1.0, 1.0]).unwrap(), -1.0);
        assert_eq!(p.energy(&[1.0, 0.0]).unwrap(), -0.5);
        assert!(matches!(p.energy(&[0.5, 1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn exact_log_partition_examples() {
        let single = RbmParams::new(Tensor::zeros(1, 0), Tensor::zeros(1, 1)).unwrap();
        assert!((single.exact_distribution().unwrap().log_z - 2f64.ln()).abs() < 1e-15);
        let flat = RbmParams::zeros(2, 2);
        assert!((flat.exact_distribution().unwrap().log_z - 4.0 * 2f64.ln()).abs() < 1e-14);
        let p = one_one(1.0, [0.0, 0.0]);
        let lz = p.exact_distribution().unwrap().log_z;
        assert!((lz - (3.0 + 1f64.exp()).ln()).abs() < 1e-14);
        assert!((lz - 1.7438).abs() < 2e-4);
    }

    #[test]
    fn half_marginal_log_z_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (nl, nr) in [(3, 5), (5, 3), (4, 4), (1, 1)] {
            let w = Tensor::from_fn(nl, nr, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let b = Tensor::from_fn(1, nl + nr, |_, _| rng.random::<f64>() - 0.5);
            let p = RbmParams::new(w, b).unwrap();
            let full = p.exact_distribution().unwrap().log_z;
            assert!((p.log_partition_exact().unwrap() - full).abs() < 1e-12, "{nl}+{nr}");
        }
        assert!(RbmParams::zeros(64, 64).log_partition_exact().is_err());
        let wide = RbmParams::zeros(4, 60).log_partition_exact().unwrap();
        assert!((wide - 64.0 * 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn exact_rejects_large_machines() {
        let p = RbmParams::zeros(11, 10);
        assert!(matches!(p.exact_distribution(), Err(Error::Contract(_))));
    }

    #[test]
    fn decoupled_units_follow_their_bias() {
        let bias = vec![-1.0, 0.3, 0.0, 2.0];
        let p = RbmParams::new(Tensor::zeros(2, 2), Tensor::row_vector(bias.clone())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut chains = GibbsChains::random(1, 2, 2, &mut rng);
        let steps = 100_000;
        let mut counts = [0.0; 4];
        for _ in 0..steps {
            chains.block_gibbs_step(&p, &mut rng).unwrap();
            for (c, v) in counts.iter_mut().zip(chains.state(0)) {
                *c += v;
            }
        }
        for (i, &b) in bias.iter().enumerate() {
            let pi = logistic(b);
            let se = (pi * (1.0 - pi) / steps as f64).sqrt();
            let mean = counts[i] / steps as f64;
            assert!((mean - pi).abs() < 3.0 * se, "unit {i}: {mean} vs {pi}");
        }
    }

    #[test]
    fn saturated_bias_pins_unit() {
        let p = RbmParams::new(Tensor::zeros(1, 1), Tensor::row_vector(vec![50.0, 0.0])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut chains = GibbsChains::random(1, 1, 1, &mut rng);
        for _ in 0..10_000 {
            chains.block_gibbs_step(&p, &mut rng).unwrap();
            assert_eq!(chains.state(0)[0], 1.0);
        }
    }

    #[test]
    fn deterministic_posterior_positive_phase_is_minus_one() {
        let p = one_one(0.4, [0.0, 0.0]);
        let mut pos = PhaseStats::zeros(1, 1);
        accumulate_stats(&mut pos, &[1.0], &[1.0], 1.0);
        let neg = PhaseStats::zeros(1, 1);
        let g = p.kl_grad_theta(&pos, &neg);
        assert_eq!(g.weights.item(), -1.0);
    }

    #[test]
    fn theta_gradient_matches_enumeration_for_factorial_q() {
        // KL(q || p) for factorial q = (0.7, 0.4) on a 1+1 machine; exact gradient
        // dKL/dW = -q1 q2 + E_p[z1 z2].
        let p = one_one(0.8, [-0.3, 0.2]);
        let q = [0.7, 0.4];
        let exact = -q[0] * q[1] + p.exact_stats().unwrap().pairwise.item();
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut chains = GibbsChains::random(n, 1, 1, &mut rng);
        chains.advance(&p, 50, 5, 0).unwrap();
        let neg = chains.negative_phase(&p).unwrap();
        let mut samples = Vec::with_capacity(n);
        let mut pos = PhaseStats::zeros(1, 1);
        for c in 0..n {
            let z1 = (rng.random::<f64>() < q[0]) as u8 as f64;
            let z2 = (rng.random::<f64>() < q[1]) as u8 as f64;
            accumulate_stats(&mut pos, &[z1], &[z2], 1.0 / n as f64);
            let zr = chains.state(c)[1];
            let pl = logistic(0.8 * zr - 0.3);
            samples.push(-z1 * z2 + pl * zr);
        }
        let g = p.kl_grad_theta(&pos, &neg).weights.item();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((g - mean).abs() < 1e-12);
        assert!((g - exact).abs() < 3.0 * se, "{g} vs {exact} (se {se})");
    }

    #[test]
    fn prior_samples_give_zero_mean_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = RbmParams::new(
            Tensor::from_fn(2, 2, |r, c| 0.5 * (r as f64 - c as f64) + 0.2),
            Tensor::row_vector(vec![0.1, -0.2, 0.3, 0.0]),
        )
        .unwrap();
        let n = 100_000;
        let mut pos_chains = GibbsChains::random(n, 2, 2, &mut rng);
        pos_chains.advance(&p, 30, 1, 0).unwrap();
        let mut neg_chains = GibbsChains::random(n, 2, 2, &mut rng);
        neg_chains.advance(&p, 30, 2, 0).unwrap();
        let neg = neg_chains.negative_phase(&p).unwrap();
        let mut pos = PhaseStats::zeros(2, 2);
        let mut sq = PhaseStats::zeros(2, 2);
        for c in 0..n {
            let z = pos_chains.state(c);
            accumulate_stats(&mut pos, &z[..2], &z[2..], 1.0 / n as f64);
            let zz: Vec<f64> = z.iter().map(|v| v * v).collect();
            accumulate_stats(&mut sq, &zz[..2], &zz[2..], 1.0 / n as f64);
        }
        let g = p.kl_grad_theta(&pos, &neg);
        for (k, &gv) in g.weights.data().iter().enumerate() {
            let m = pos.pairwise.data()[k];
            // Both phases contribute variance; each term is Bernoulli with mean m.
            let se = (2.0 * m * (1.0 - m) / n as f64).sqrt();
            assert!(gv.abs() < 4.0 * se, "W[{k}] = {gv}, se {se}");
        }
        for (k, &gv) in g.bias.data().iter().enumerate() {
            let m = pos.unary.data()[k];
            let se = (2.0 * m * (1.0 - m) / n as f64).sqrt();
            assert!(gv.abs() < 4.0 * se, "b[{k}] = {gv}, se {se}");
        }
    }

    #[test]
    fn chain_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = GibbsChains::random(3, 2, 3, &mut rng);
        let d = GibbsChains::from_states(2, 3, c.as_bytes().to_vec()).unwrap();
        assert_eq!(c, d);
        assert!(GibbsChains::from_states(2, 3, vec![0; 7]).is_err());
    }

    fn params_strategy() -> impl Strategy<Value = (RbmParams, RbmParams, Vec<f64>)> {
        (
            prop::collection::vec(-2.0f64..2.0, 6),
            prop::collection::vec(-2.0f64..2.0, 5),
            prop::collection::vec(-2.0f64..2.0, 6),
            prop::collection::vec(-2.0f64..2.0, 5),
            prop::collection::vec(0u8..2, 5),
        )
            .prop_map(|(w1, b1, w2, b2, z)| {
                let a = RbmParams::new(Tensor::new(2, 3, w1).unwrap(), Tensor::row_vector(b1)).unwrap();
                let b = RbmParams::new(Tensor::new(2, 3, w2).unwrap(), Tensor::row_vector(b2)).unwrap();
                (a, b, z.into_iter().map(f64::from).collect())
            })
    }

    proptest! {
        #[test]
        fn energy_is_linear_in_parameters((a, b, z) in params_strategy()) {
            let sum = RbmParams::new(
                Tensor::new(2, 3, a.weights.data().iter().zip(b.weights.data()).map(|(x, y)| x + y).collect()).unwrap(),
                Tensor::row_vector(a.bias.data().iter().zip(b.bias.data()).map(|(x, y)| x + y).collect()),
            ).unwrap();
            let lhs = sum.energy(&z).unwrap();
            let rhs = a.energy(&z).unwrap() + b.energy(&z).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn exact_distribution_is_normalized((a, _, _) in params_strategy()) {
            let d = a.exact_distribution().unwrap();
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
