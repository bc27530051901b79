//! Generative sample grids from the prior.
//!
//! A single persistent chain is advanced between grid rows. Every row
//! decodes the chain's current state `per_state` times, each column with
//! its own fixed draw for the Gaussian layers, so rows differ only through
//! the machine state and columns only through the continuous layers.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::nearest_prototype;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Ctx, Tensor};
use crate::rbm::GibbsChains;
use crate::rng::{self, Purpose};
use crate::smoothing::{self, SmoothingKind};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridConfig {
    pub rows: usize,
    /// Block-Gibbs sweeps between successive rows; 0 freezes the chain.
    pub gibbs_per_row: usize,
    pub per_state: usize,
    /// Sweeps from the random start before the first row.
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            rows: 20,
            gibbs_per_row: 100,
            per_state: 5,
            burn_in: 1000,
            seed: 11,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleGrid {
    pub rows: usize,
    pub per_state: usize,
    pub height: usize,
    pub width: usize,
    /// Pixel probabilities, `rows * per_state` images in row-major grid order.
    pub images: Vec<Vec<f64>>,
    /// Machine state behind every grid row.
    pub states: Vec<Vec<f64>>,
}

/// `(height, width)` with height the largest divisor not above the square root.
pub fn image_shape(pixels: usize) -> (usize, usize) {
    let mut h = (pixels as f64).sqrt() as usize;
    while h > 1 && !pixels.is_multiple_of(h) {
        h -= 1;
    }
    let h = h.max(1);
    (h, pixels / h)
}

/// `zeta ~ r(zeta | z)` through the inverse CDF at a saturated probability.
fn smooth_state<R: Rng + ?Sized>(kind: SmoothingKind, beta: f64, z: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    z.iter()
        .map(|&bit| {
            let q = smoothing::clamp_q(bit);
            let rho: f64 = rng.random();
            match kind {
                SmoothingKind::SpikeExponential => smoothing::inverse_cdf_spike_exp(q, rho, beta),
                SmoothingKind::MixtureOfRamps => smoothing::inverse_cdf_mixture_ramps(q, rho),
                SmoothingKind::SpikeSlab => smoothing::inverse_cdf_spike_slab(q, rho),
                SmoothingKind::SpikeGaussian { prior_sigma } => {
                    smoothing::inverse_cdf_spike_gaussian(q, rho, 0.0, prior_sigma)
                }
            }
        })
        .collect()
}

pub fn sample_grid(model: &Model, cfg: &GridConfig) -> Result<SampleGrid> {
    if cfg.rows == 0 || cfg.per_state == 0 {
        return Err(Error::contract("sample grid needs at least one row and one column"));
    }
    let rbm = model.rbm();
    let mut chain = GibbsChains::random(
        1,
        rbm.n_left(),
        rbm.n_right(),
        &mut rng::stream(cfg.seed, Purpose::Sample, 0, 0),
    );
    chain.advance(&rbm, cfg.burn_in, cfg.seed, u64::MAX)?;
    let layers = model.hierarchy.layers();
    let vars = model.cfg.continuous.vars;
    let mut normals = vec![Tensor::zeros(cfg.per_state, vars); layers];
    for c in 0..cfg.per_state {
        let mut g = rng::stream(cfg.seed, Purpose::Sample, 2, c as u64);
        for layer in normals.iter_mut() {
            for v in layer.row_mut(c) {
                *v = g.sample(StandardNormal);
            }
        }
    }
    let (height, width) = image_shape(model.cfg.x_dim);
    let mut images = Vec::with_capacity(cfg.rows * cfg.per_state);
    let mut states = Vec::with_capacity(cfg.rows);
    for row in 0..cfg.rows {
        if row > 0 {
            chain.advance(&rbm, cfg.gibbs_per_row, cfg.seed, row as u64)?;
        }
        let z = chain.state(0);
        let zeta = smooth_state(
            model.cfg.smoothing,
            model.beta_value(),
            &z,
            &mut rng::stream(cfg.seed, Purpose::Sample, 1, 0),
        )?;
        let zeta = Tensor::row_vector(zeta).repeat_rows(cfg.per_state);
        let mut ctx = Ctx::new(&model.store, false);
        let probs = model.decode_prior(&mut ctx, &zeta, &normals)?;
        images.extend((0..cfg.per_state).map(|c| probs.row(c).to_vec()));
        states.push(z);
    }
    Ok(SampleGrid {
        rows: cfg.rows,
        per_state: cfg.per_state,
        height,
        width,
        images,
        states,
    })
}

impl SampleGrid {
    pub fn pixel_width(&self) -> usize {
        self.per_state * (self.width + 1) + 1
    }

    pub fn pixel_height(&self) -> usize {
        self.rows * (self.height + 1) + 1
    }

    /// Binary PGM (P5, maxval 255) with 1-pixel mid-gray separators.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (pw, ph) = (self.pixel_width(), self.pixel_height());
        let mut pix = vec![128u8; pw * ph];
        for (i, img) in self.images.iter().enumerate() {
            let (gr, gc) = (i / self.per_state, i % self.per_state);
            let (top, left) = (gr * (self.height + 1) + 1, gc * (self.width + 1) + 1);
            for y in 0..self.height {
                for x in 0..self.width {
                    let v = img[y * self.width + x].clamp(0.0, 1.0);
                    pix[(top + y) * pw + left + x] = (v * 255.0).round() as u8;
                }
            }
        }
        let mut out = format!("P5\n{pw} {ph}\n255\n").into_bytes();
        out.extend_from_slice(&pix);
        out
    }

    /// Text rendering, one character per pixel.
    pub fn to_ascii(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*#%@";
        let mut out = String::new();
        for gr in 0..self.rows {
            for y in 0..self.height {
                for gc in 0..self.per_state {
                    let img = &self.images[gr * self.per_state + gc];
                    for x in 0..self.width {
                        let v = img[y * self.width + x].clamp(0.0, 1.0);
                        out.push(RAMP[((v * (RAMP.len() - 1) as f64).round()) as usize] as char);
                    }
                    out.push('|');
                }
                out.push('\n');
            }
            out.push_str(&"-".repeat(self.per_state * (self.width + 1)));
            out.push('\n');
        }
        out
    }

    /// Nearest prototype of each row's mean decode.
    pub fn row_modes(&self, prototypes: &Tensor) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let cols = &self.images[r * self.per_state..(r + 1) * self.per_state];
                let mut mean = vec![0.0; cols[0].len()];
                for img in cols {
                    for (m, v) in mean.iter_mut().zip(img) {
                        *m += v / cols.len() as f64;
                    }
                }
                nearest_prototype(&mean, prototypes)
            })
            .collect()
    }
}

/// Length of the longest run of equal consecutive entries.
pub fn longest_run(modes: &[usize]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for (i, m) in modes.iter().enumerate() {
        run = if i > 0 && modes[i - 1] == *m { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuous::ContinuousConfig;
    use crate::model::ModelConfig;
    use crate::posterior::PosteriorConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: usize) -> Model {
        let cfg = ModelConfig {
            x_dim: 64,
            rbm_units: 8,
            posterior: PosteriorConfig {
                groups: 2,
                hidden: vec![8],
                batch_norm: true,
            },
            continuous: ContinuousConfig {
                layers,
                vars: 3,
                prior_hidden: 4,
                posterior_hidden: vec![4],
                ..ContinuousConfig::default()
            },
            ..ModelConfig::default()
        };
        Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn smallest_grid_is_image_plus_border() {
        let g = sample_grid(
            &model(0),
            &GridConfig {
                rows: 1,
                per_state: 1,
                ..GridConfig::default()
            },
        )
        .unwrap();
        let pgm = g.to_pgm();
        let header = b"P5\n10 10\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(pgm.len(), header.len() + 100);
        assert_eq!(pgm[header.len()], 128);
    }

    #[test]
    fn frozen_chain_repeats_rows() {
        let g = sample_grid(
            &model(1),
            &GridConfig {
                rows: 4,
                gibbs_per_row: 0,
                per_state: 3,
                ..GridConfig::default()
            },
        )
        .unwrap();
        for r in 1..4 {
            assert_eq!(g.states[r], g.states[0]);
            for c in 0..3 {
                assert_eq!(g.images[r * 3 + c], g.images[c]);
            }
        }
        assert_ne!(g.images[0], g.images[1], "columns differ through the Gaussian layers");
    }

    #[test]
    fn shapes_and_runs() {
        assert_eq!(image_shape(64), (8, 8));
        assert_eq!(image_shape(784), (28, 28));
        assert_eq!(image_shape(12), (3, 4));
        assert_eq!(image_shape(7), (1, 7));
        assert_eq!(longest_run(&[1, 1, 2, 2, 2, 0]), 3);
        assert_eq!(longest_run(&[]), 0);
    }

    #[test]
    fn ascii_preview_has_one_line_per_pixel_row() {
        let g = sample_grid(
            &model(0),
            &GridConfig {
                rows: 2,
                per_state: 2,
                gibbs_per_row: 1,
                ..GridConfig::default()
            },
        )
        .unwrap();
        assert_eq!(g.to_ascii().lines().count(), 2 * (8 + 1));
    }
}
