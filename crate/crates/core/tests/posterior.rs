use dvae::numerics::{Ctx, ParamStore, Tensor};
use dvae::posterior::{Encoder, PosteriorConfig};
use dvae::rbm::total_variation;
use dvae::rng::{self, Purpose};
use dvae::smoothing::SmoothingKind;
use rand::Rng;

#[test]
fn hierarchy_without_cross_group_weights_matches_the_factorial_posterior() {
    let (units, groups, x_dim) = (6, 3, 2);
    let per = units / groups;
    let kind = SmoothingKind::SpikeExponential;
    let mut store = ParamStore::new();
    let cfg = PosteriorConfig {
        groups,
        hidden: vec![],
        batch_norm: false,
    };
    let enc = Encoder::new(&mut store, x_dim, units, &cfg, kind, &mut rng::stream(1, Purpose::Init, 0, 0)).unwrap();
    let x = [0.7, -0.4];
    let mut g = rng::stream(1, Purpose::Test, 0, 0);
    let mut q = Vec::new();
    for j in 0..groups {
        let w = store.find(&format!("posterior.g{j}.out.weight")).unwrap();
        let b = store.find(&format!("posterior.g{j}.out.bias")).unwrap();
        let rows = store.get(w).rows();
        assert_eq!(rows, x_dim + j * per);
        let weights = Tensor::from_fn(rows, per, |r, _| if r < x_dim { g.random_range(-1.0..1.0) } else { 0.0 });
        let bias = Tensor::from_fn(1, per, |_, _| g.random_range(-1.5..1.5));
        for c in 0..per {
            let logit = bias.get(0, c) + (0..x_dim).map(|r| x[r] * weights.get(r, c)).sum::<f64>();
            q.push(1.0 / (1.0 + (-logit).exp()));
        }
        *store.get_mut(w) = weights;
        *store.get_mut(b) = bias;
    }
    let exact: Vec<f64> = (0..1usize << units)
        .map(|s| (0..units).map(|a| if s >> a & 1 == 1 { q[a] } else { 1.0 - q[a] }).product())
        .collect();

    let (chunks, rows) = (20, 50_000);
    let mut counts = vec![0u64; 1 << units];
    for chunk in 0..chunks {
        let mut r = rng::stream(2, Purpose::Test, chunk, 0);
        let rho = Tensor::from_fn(rows, units, |_, _| r.random());
        let aux = Tensor::from_fn(rows, units, |_, _| r.random());
        let mut ctx = Ctx::new(&store, false);
        let xv = ctx.tape.constant(Tensor::from_fn(rows, x_dim, |_, c| x[c])).unwrap();
        let beta = ctx.tape.constant(Tensor::scalar(4.0)).unwrap();
        let pass = enc.sample(&mut ctx, xv, beta, &rho, &aux, false).unwrap();
        for i in 0..rows {
            let s = (0..units).map(|a| ((pass.z.get(i, a) > 0.5) as usize) << a).sum::<usize>();
            counts[s] += 1;
        }
    }
    let n = (chunks as usize * rows) as f64;
    let empirical: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let tv = total_variation(&empirical, &exact);
    assert!(tv <= 0.005, "TV {tv}");
}
