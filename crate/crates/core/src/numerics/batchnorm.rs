//! Batch normalization based on the mean absolute deviation.
//!
//! `y = (x - mean(x)) / (mean|x - mean(x)| + eps) * s + o`, per feature over
//! the minibatch rows.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Momentum of the running statistics used in inference mode.
pub const RUNNING_MOMENTUM: f64 = 0.99;

/// Optional bounds `s_min <= s <= s_max`, with `-s <= o <= s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleBounds {
    pub min: f64,
    pub max: f64,
}

impl ScaleBounds {
    /// Bounds applied to the layer that feeds the discrete posterior logits.
    pub const POSTERIOR: ScaleBounds = ScaleBounds { min: 2.0, max: 3.0 };
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub eps: f64,
    pub bounds: Option<ScaleBounds>,
}

impl BatchNormParams {
    pub fn new(width: usize, eps: f64, bounds: Option<ScaleBounds>) -> Self {
        let s0 = bounds.map_or(1.0, |b| b.min);
        Self {
            scale: vec![s0; width],
            offset: vec![0.0; width],
            eps,
            bounds,
        }
    }

    /// Projects scale and offset back into the feasible set.
    pub fn project(&mut self) {
        if let Some(b) = self.bounds {
            project_scale_offset(&mut self.scale, &mut self.offset, b);
        }
    }
}

/// Clamps `s` into `[min, max]`, then `o` into `[-s, s]`, elementwise.
pub fn project_scale_offset(scale: &mut [f64], offset: &mut [f64], bounds: ScaleBounds) {
    for (s, o) in scale.iter_mut().zip(offset.iter_mut()) {
        *s = s.clamp(bounds.min, bounds.max);
        *o = o.clamp(-*s, *s);
    }
}

/// Per-feature minibatch mean and mean absolute deviation.
pub fn batch_statistics(x: &Tensor) -> (Tensor, Tensor) {
    let n = x.rows() as f64;
    let mut mean = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for (m, v) in mean.data_mut().iter_mut().zip(x.row(r)) {
            *m += v / n;
        }
    }
    let mut mad = Tensor::zeros(1, x.cols());
    for r in 0..x.rows() {
        for ((d, v), m) in mad.data_mut().iter_mut().zip(x.row(r)).zip(mean.data()) {
            *d += (v - m).abs() / n;
        }
    }
    (mean, mad)
}

/// Training-mode normalization of plain values (no tape).
pub fn l1_batch_norm(x: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    check_width(x, p)?;
    if x.rows() < 2 {
        return Err(Error::contract(format!(
            "batch norm in training mode needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    let (mean, mad) = batch_statistics(x);
    Ok(Tensor::from_fn(x.rows(), x.cols(), |r, c| {
        (x.get(r, c) - mean.data()[c]) / (mad.data()[c] + p.eps) * p.scale[c] + p.offset[c]
    }))
}

fn check_width(x: &Tensor, p: &BatchNormParams) -> Result<()> {
    if x.cols() != p.scale.len() || x.cols() != p.offset.len() {
        return Err(Error::Dimension {
            op: "l1_batch_norm",
            left: x.shape(),
            right: (1, p.scale.len()),
        });
    }
    Ok(())
}

/// Training-mode normalization on the tape. Returns the output and the batch
/// statistics `(mean, mad)` for updating running averages.
pub fn l1_batch_norm_tape(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    offset: Var,
    eps: f64,
) -> Result<(Var, Tensor, Tensor)> {
    let rows = tape.shape(x).0;
    if rows < 2 {
        return Err(Error::contract(format!(
            "batch norm in training mode needs at least 2 rows, got {rows}"
        )));
    }
    let mean = tape.mean_rows(x)?;
    let dev = tape.sub(x, mean)?;
    let absdev = tape.abs(dev)?;
    let mad = tape.mean_rows(absdev)?;
    let stats = (tape.value(mean).clone(), tape.value(mad).clone());
    let denom = tape.add_scalar(mad, eps)?;
    let norm = tape.div(dev, denom)?;
    let scaled = tape.mul(norm, scale)?;
    let out = tape.add(scaled, offset)?;
    Ok((out, stats.0, stats.1))
}

/// Inference-mode normalization using running statistics.
pub fn l1_batch_norm_inference_tape(
    tape: &mut Tape,
    x: Var,
    scale: Var,
    offset: Var,
    running_mean: &Tensor,
    running_mad: &Tensor,
    eps: f64,
) -> Result<Var> {
    let mean = tape.constant(running_mean.clone())?;
    let denom = tape.constant(running_mad.map(|d| d + eps))?;
    let dev = tape.sub(x, mean)?;
    let norm = tape.div(dev, denom)?;
    let scaled = tape.mul(norm, scale)?;
    tape.add(scaled, offset)
}

/// `running <- momentum * running + (1 - momentum) * batch`.
pub fn update_running(running: &mut Tensor, batch: &Tensor) {
    for (r, b) in running.data_mut().iter_mut().zip(batch.data()) {
        *r = RUNNING_MOMENTUM * *r + (1.0 - RUNNING_MOMENTUM) * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_column_maps_to_offset() {
        let x = Tensor::filled(5, 2, 3.7);
        let mut p = BatchNormParams::new(2, 1e-5, None);
        p.scale = vec![1.3, -0.4];
        p.offset = vec![0.25, -2.0];
        let y = l1_batch_norm(&x, &p).unwrap();
        for r in 0..5 {
            assert_eq!(y.row(r), &[0.25, -2.0]);
        }
    }

    #[test]
    fn two_points_normalize_to_unit_deviation() {
        let x = Tensor::new(2, 1, vec![1.0, 3.0]).unwrap();
        let p = BatchNormParams::new(1, 0.0, None);
        let y = l1_batch_norm(&x, &p).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn bounded_projection() {
        let mut p = BatchNormParams::new(1, 1e-5, Some(ScaleBounds::POSTERIOR));
        p.scale = vec![5.0];
        p.offset = vec![-4.0];
        p.project();
        assert_eq!(p.scale, vec![3.0]);
        assert_eq!(p.offset, vec![-3.0]);
    }

    #[test]
    fn single_row_training_is_contract_error() {
        let x = Tensor::zeros(1, 3);
        let p = BatchNormParams::new(3, 1e-5, None);
        assert!(matches!(l1_batch_norm(&x, &p), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_version_agrees_with_plain_version() {
        let x = Tensor::from_fn(4, 3, |r, c| (r as f64 * 1.7 + c as f64).sin());
        let p = BatchNormParams {
            scale: vec![2.0, 2.5, 3.0],
            offset: vec![0.1, -0.2, 0.3],
            eps: 1e-3,
            bounds: None,
        };
        let plain = l1_batch_norm(&x, &p).unwrap();
        let mut tape = Tape::new();
        let xv = tape.leaf(x).unwrap();
        let s = tape.leaf(Tensor::row_vector(p.scale.clone())).unwrap();
        let o = tape.leaf(Tensor::row_vector(p.offset.clone())).unwrap();
        let (y, _, _) = l1_batch_norm_tape(&mut tape, xv, s, o, p.eps).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn normalized_features_have_zero_mean_unit_mad(
            vals in prop::collection::vec(-5.0f64..5.0, 12),
        ) {
            let x = Tensor::new(6, 2, vals).unwrap();
            let (_, mad) = batch_statistics(&x);
            prop_assume!(mad.data().iter().all(|&d| d > 1e-3));
            let p = BatchNormParams::new(2, 1e-9, None);
            let y = l1_batch_norm(&x, &p).unwrap();
            let (m2, d2) = batch_statistics(&y);
            for c in 0..2 {
                prop_assert!(m2.data()[c].abs() < 1e-9);
                prop_assert!((d2.data()[c] - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn projection_lands_in_feasible_set(s in -10.0f64..10.0, o in -10.0f64..10.0) {
            let mut scale = [s];
            let mut offset = [o];
            project_scale_offset(&mut scale, &mut offset, ScaleBounds::POSTERIOR);
            prop_assert!((2.0..=3.0).contains(&scale[0]));
            prop_assert!(offset[0].abs() <= scale[0]);
        }
    }
}
