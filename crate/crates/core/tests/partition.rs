use dvae::numerics::Tensor;
use dvae::partition::{bar_log_ratio, estimate_log_z, tune_ladder, TuneOptions};
use dvae::rbm::RbmParams;
use dvae::rng::{self, Purpose};
use rand::Rng;
use rand_distr::StandardNormal;

fn random_rbm(side: usize, scale: f64, seed: u64) -> RbmParams {
    let mut g = rng::stream(seed, Purpose::Test, 0, 0);
    let mut draw = || scale * g.sample::<f64, _>(StandardNormal);
    let w = Tensor::from_fn(side, side, |_, _| draw());
    let b = Tensor::from_fn(1, 2 * side, |_, _| draw());
    RbmParams::new(w, b).unwrap()
}

#[test]
fn independent_estimates_average_to_the_exact_value() {
    let rbm = random_rbm(6, 1.0, 1);
    let exact = rbm.log_partition_exact().unwrap();
    let ladder = tune_ladder(&rbm, &TuneOptions::default(), 1).unwrap();
    let runs: Vec<(f64, f64)> = (0..50)
        .map(|s| {
            let e = estimate_log_z(&rbm, &ladder, 2000, 1, 100 + s).unwrap();
            (e.mean, e.stderr)
        })
        .collect();
    let mean = runs.iter().map(|r| r.0).sum::<f64>() / 50.0;
    let pooled = (runs.iter().map(|r| r.1 * r.1).sum::<f64>() / 50.0).sqrt();
    let bound = 3.0 * pooled / 50f64.sqrt();
    assert!((mean - exact).abs() <= bound, "mean {mean} exact {exact} bound {bound}");
}

#[test]
fn doubling_samples_shrinks_stderr_by_root_two() {
    let rbm = random_rbm(6, 1.0, 2);
    let ladder = tune_ladder(&rbm, &TuneOptions::default(), 2).unwrap();
    let avg_se = |n: usize| {
        let e = estimate_log_z(&rbm, &ladder, n, 20, 7).unwrap();
        e.repeats.iter().map(|r| r.1).sum::<f64>() / e.repeats.len() as f64
    };
    let ratio = avg_se(4000) / avg_se(8000);
    assert!((1.2..=1.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn relabeling_units_leaves_the_estimate_unchanged() {
    let rbm = random_rbm(5, 1.0, 3);
    let (nl, nr) = (rbm.n_left(), rbm.n_right());
    let left = [3, 0, 4, 1, 2];
    let right = [1, 4, 2, 0, 3];
    let w = Tensor::from_fn(nl, nr, |i, j| rbm.weights.get(left[i], right[j]));
    let b = Tensor::from_fn(1, nl + nr, |_, c| {
        if c < nl {
            rbm.bias.get(0, left[c])
        } else {
            rbm.bias.get(0, nl + right[c - nl])
        }
    });
    let permuted = RbmParams::new(w, b).unwrap();
    let opts = TuneOptions::default();
    let a = estimate_log_z(&rbm, &tune_ladder(&rbm, &opts, 4).unwrap(), 4000, 5, 4).unwrap();
    let p = estimate_log_z(&permuted, &tune_ladder(&permuted, &opts, 5).unwrap(), 4000, 5, 5).unwrap();
    let tol = 3.0 * (a.stderr.powi(2) + p.stderr.powi(2)).sqrt();
    assert!((a.mean - p.mean).abs() <= tol, "{} vs {} (tol {tol})", a.mean, p.mean);
    let exact = rbm.log_partition_exact().unwrap();
    assert!((permuted.log_partition_exact().unwrap() - exact).abs() < 1e-12);
}

#[test]
fn bar_fixed_point_residual_is_tiny() {
    let mut g = rng::stream(6, Purpose::Test, 0, 0);
    let forward: Vec<f64> = (0..5000).map(|_| 0.3 + g.sample::<f64, _>(StandardNormal)).collect();
    let reverse: Vec<f64> = (0..4000).map(|_| -0.2 + 1.3 * g.sample::<f64, _>(StandardNormal)).collect();
    let s = bar_log_ratio(&forward, &reverse).unwrap();
    assert!(s.residual <= 1e-10, "residual {}", s.residual);
}
