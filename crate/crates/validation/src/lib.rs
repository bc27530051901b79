//! Independent oracles for the acceptance target: quadrature, a sign test
//! and exact expectations under a two-group hierarchical posterior.

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; m];
    let mut weights = vec![0.0; m];
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 1 { x } else { p1 };
            let prev = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (x * p - prev) / (x * x - 1.0);
            let step = p / dp;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        weights[i] = 1.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// One-sided sign test: `P(X >= successes)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(successes: usize, n: usize) -> f64 {
    let mut log_c = 0.0f64;
    let mut tail = 0.0;
    for k in 0..=n {
        if k > 0 {
            log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
        }
        if k >= successes {
            tail += (log_c - n as f64 * std::f64::consts::LN_2).exp();
        }
    }
    tail.min(1.0)
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn neg_entropy(q: f64) -> f64 {
    q * q.ln() + (1.0 - q) * (1.0 - q).ln()
}

/// Posterior with two groups of `g` units over a `g + g` machine.
///
/// Group 0 (the machine's left side) has logits `bias0`; group 1 (the right
/// side) has logits `bias1 + zeta0 . mix`, where `zeta0` is group 0's
/// spike-and-exponential smoothed sample with sharpness `beta`.
#[derive(Clone, Debug)]
pub struct TwoGroupToy {
    pub bias0: Vec<f64>,
    pub bias1: Vec<f64>,
    /// `g x g`, row = group-0 unit.
    pub mix: Vec<Vec<f64>>,
    pub beta: f64,
    /// Machine couplings, row = left unit.
    pub weights: Vec<Vec<f64>>,
    /// Machine biases, left then right.
    pub bias: Vec<f64>,
}

/// `E[sum q ln q + (1-q) ln(1-q)]` and `E[-sum W z z - sum b z]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Expectations {
    pub negentropy: f64,
    pub cross_entropy: f64,
}

impl TwoGroupToy {
    pub fn group_size(&self) -> usize {
        self.bias0.len()
    }

    /// Exact expectations with `nodes` quadrature points per active unit.
    pub fn expectations(&self, nodes: usize) -> Expectations {
        let g = self.group_size();
        let q0: Vec<f64> = self.bias0.iter().map(|&v| logistic(v)).collect();
        let (x, w) = gauss_legendre(nodes);
        let norm = self.beta.exp_m1();
        let density: Vec<f64> = x.iter().map(|&t| self.beta * (self.beta * t).exp() / norm).collect();
        let mut out = Expectations {
            negentropy: q0.iter().map(|&q| neg_entropy(q)).sum(),
            cross_entropy: -q0.iter().zip(&self.bias).map(|(q, b)| q * b).sum::<f64>(),
        };
        // Every unit of group 0 is either on the spike (index 0) or at a
        // quadrature node (index k + 1).
        let mut choice = vec![0usize; g];
        loop {
            let mut mass = 1.0;
            let mut zeta = vec![0.0; g];
            let mut z = vec![0.0; g];
            for (a, &c) in choice.iter().enumerate() {
                if c == 0 {
                    mass *= 1.0 - q0[a];
                } else {
                    mass *= q0[a] * w[c - 1] * density[c - 1];
                    zeta[a] = x[c - 1];
                    z[a] = 1.0;
                }
            }
            for b in 0..g {
                let logit = self.bias1[b] + (0..g).map(|a| zeta[a] * self.mix[a][b]).sum::<f64>();
                let q1 = logistic(logit);
                let field = self.bias[g + b] + (0..g).map(|a| z[a] * self.weights[a][b]).sum::<f64>();
                out.negentropy += mass * neg_entropy(q1);
                out.cross_entropy -= mass * q1 * field;
            }
            let mut a = 0;
            loop {
                if a == g {
                    return out;
                }
                choice[a] += 1;
                if choice[a] <= nodes {
                    break;
                }
                choice[a] = 0;
                a += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrature_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        for p in 0..16 {
            let v: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            assert!((v - 1.0 / (p + 1) as f64).abs() < 1e-14, "degree {p}: {v}");
        }
    }

    #[test]
    fn sign_test_tails() {
        assert!((sign_test_p(0, 10) - 1.0).abs() < 1e-15);
        assert!((sign_test_p(10, 10) - 1.0 / 1024.0).abs() < 1e-15);
        assert!((sign_test_p(9, 10) - 11.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn independent_groups_reduce_to_closed_forms() {
        let toy = TwoGroupToy {
            bias0: vec![0.3, -0.4],
            bias1: vec![0.1, 0.7],
            mix: vec![vec![0.0; 2]; 2],
            beta: 3.0,
            weights: vec![vec![0.5, -1.0], vec![0.2, 0.8]],
            bias: vec![0.1, -0.2, 0.3, 0.4],
        };
        let e = toy.expectations(12);
        let q: Vec<f64> = toy.bias0.iter().chain(&toy.bias1).map(|&v| logistic(v)).collect();
        let neg: f64 = q.iter().map(|&v| neg_entropy(v)).sum();
        let mut cross = -q.iter().zip(&toy.bias).map(|(q, b)| q * b).sum::<f64>();
        for a in 0..2 {
            for b in 0..2 {
                cross -= toy.weights[a][b] * q[a] * q[2 + b];
            }
        }
        assert!((e.negentropy - neg).abs() < 1e-13);
        assert!((e.cross_entropy - cross).abs() < 1e-13);
    }
}
