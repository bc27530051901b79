use dvae::config::RunConfig;
use dvae::eval::{self, EvalConfig};
use dvae::experiment::{evaluate, load_data, new_trainer, train_until, Splits};
use dvae::trainer::Trainer;

fn desk(seed: u64, overrides: &[(&str, &str)]) -> RunConfig {
    let mut c = RunConfig::default();
    c.set("train.seed", &seed.to_string()).unwrap();
    c.set("eval.k", "100").unwrap();
    for (k, v) in overrides {
        c.set(k, v).unwrap();
    }
    c
}

fn trained(cfg: &RunConfig) -> (Trainer, Splits, Vec<f64>) {
    let data = load_data(cfg).unwrap();
    let mut t = new_trainer(cfg, &data.train).unwrap();
    let mut epoch_elbo = Vec::new();
    train_until(&mut t, cfg, &data.train, |_, rows| {
        epoch_elbo.push(rows.iter().map(|r| r.elbo).sum::<f64>() / rows.len() as f64);
        Ok(())
    })
    .unwrap();
    (t, data, epoch_elbo)
}

fn moving_average(v: &[f64], window: usize) -> Vec<f64> {
    v.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[test]
fn smoothed_training_elbo_rises_over_thirty_epochs() {
    let mut rising = 0;
    let mut report = Vec::new();
    for seed in 1..=10 {
        let (_, _, elbo) = trained(&desk(seed, &[("train.epochs", "30")]));
        let smooth = moving_average(&elbo, 10);
        let drops = smooth.windows(2).filter(|w| w[1] < w[0]).count();
        if drops == 0 {
            rising += 1;
        }
        report.push(format!("seed {seed}: {drops} drops, {:.3} -> {:.3}", smooth[0], smooth[smooth.len() - 1]));
    }
    assert!(rising >= 9, "{rising}/10 seeds rising\n{}", report.join("\n"));
}

#[test]
fn importance_weighted_bound_dominates_the_elbo() {
    for seed in [1, 2] {
        let cfg = desk(seed, &[("train.epochs", "10")]);
        let (t, data, _) = trained(&cfg);
        let ev = evaluate(&t.model, &data.test, &cfg).unwrap();
        assert!(ev.iw >= ev.elbo, "seed {seed}: iw {} elbo {}", ev.iw, ev.elbo);
    }
}

#[test]
fn hierarchical_posterior_beats_factorial_posterior() {
    let mut gaps = Vec::new();
    for seed in 1..=5 {
        let scores: Vec<f64> = ["false", "true"]
            .iter()
            .map(|flag| {
                let cfg = desk(seed, &[("train.epochs", "20"), ("ablation.factorial_posterior", flag)]);
                let (t, data, _) = trained(&cfg);
                evaluate(&t.model, &data.test, &cfg).unwrap().iw
            })
            .collect();
        gaps.push(scores[0] - scores[1]);
    }
    gaps.sort_by(f64::total_cmp);
    assert!(gaps[2] >= 0.0, "gaps {gaps:?}");
}

#[test]
fn fully_ablated_model_still_trains() {
    let flags = [
        ("ablation.no_continuous", "true"),
        ("ablation.linear_decoder", "true"),
        ("ablation.no_lateral_w", "true"),
        ("ablation.factorial_posterior", "true"),
        ("train.epochs", "10"),
    ];
    let (_, _, elbo) = trained(&desk(3, &flags));
    assert!(elbo.iter().all(|v| v.is_finite()));
    assert!(elbo[9] > elbo[0], "{elbo:?}");
}

#[test]
fn importance_weighting_recovers_exact_likelihood_on_an_enumerable_toy() {
    let cfg = desk(
        4,
        &[
            ("data.dim", "16"),
            ("data.samples", "1200"),
            ("data.train", "1000"),
            ("data.valid", "100"),
            ("rbm.units", "8"),
            ("posterior.groups", "2"),
            ("posterior.hidden", "16"),
            ("continuous.layers", "0"),
            ("decoder.hidden", ""),
            ("train.epochs", "15"),
        ],
    );
    let (t, data, _) = trained(&cfg);
    let x = data.test.evaluation_view(5).select_rows(&(0..20).collect::<Vec<_>>());
    let exact = eval::mean(&eval::exact_log_likelihood_discrete(&t.model, &x).unwrap());
    let log_z = t.model.rbm().log_partition_exact().unwrap();
    let ec = EvalConfig {
        k: 10_000,
        seed: 5,
        zeta_is_z: true,
        ..EvalConfig::default()
    };
    let iw = eval::mean(&eval::iw_log_likelihood(&t.model, &x, log_z, &ec).unwrap());
    assert!((iw - exact).abs() <= 0.02, "iw {iw} exact {exact}");
}
