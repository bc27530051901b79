//! Datasets: IDX and raw matrix files, binarization, synthetic modes.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::{self, Purpose};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarization {
    /// One fixed draw per pixel, made once with this seed.
    Static(u64),
    /// A fresh draw every time an example is presented.
    Dynamic,
    None,
}

impl FromStr for Binarization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(Binarization::Dynamic),
            "none" => Ok(Binarization::None),
            "static" => Ok(Binarization::Static(0)),
            _ => s
                .strip_prefix("static:")
                .and_then(|v| v.parse().ok())
                .map(Binarization::Static)
                .ok_or_else(|| Error::Config(format!("binarization must be static[:seed], dynamic or none, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Binarization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Binarization::Static(s) => write!(f, "static:{s}"),
            Binarization::Dynamic => write!(f, "dynamic"),
            Binarization::None => write!(f, "none"),
        }
    }
}

/// Either images (`n x d` in `[0, 1]`) or labels (`n x 1`).
#[derive(Clone, Debug, PartialEq)]
pub enum IdxContent {
    Images { rows: usize, cols: usize, data: Tensor },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| Error::Length(format!("IDX header truncated at byte {at} of {}", bytes.len())))
}

/// Parses an IDX image (rank 3) or label (rank 1) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxContent> {
    let magic = be_u32(bytes, 0)?;
    match magic {
        IDX_IMAGES => {
            let n = be_u32(bytes, 4)? as usize;
            let rows = be_u32(bytes, 8)? as usize;
            let cols = be_u32(bytes, 12)? as usize;
            let d = rows * cols;
            let body = &bytes[16..];
            if body.len() != n * d {
                return Err(Error::Length(format!(
                    "IDX image body has {} bytes, header promises {n} x {rows} x {cols}",
                    body.len()
                )));
            }
            let data = Tensor::new(n, d, body.iter().map(|&b| b as f64 / 255.0).collect())?;
            Ok(IdxContent::Images { rows, cols, data })
        }
        IDX_LABELS => {
            let n = be_u32(bytes, 4)? as usize;
            let body = &bytes[8..];
            if body.len() != n {
                return Err(Error::Length(format!("IDX label body has {} bytes, header promises {n}", body.len())));
            }
            Ok(IdxContent::Labels(body.to_vec()))
        }
        _ => Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        ))),
    }
}

pub fn load_idx(path: &Path) -> Result<IdxContent> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Loads an IDX image file and rejects label files.
pub fn load_idx_images(path: &Path) -> Result<Tensor> {
    match load_idx(path)? {
        IdxContent::Images { data, .. } => Ok(data),
        IdxContent::Labels(_) => Err(Error::Format(format!("{} holds labels, not images", path.display()))),
    }
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn encode_idx(content: &IdxContent) -> Vec<u8> {
    let mut out = Vec::new();
    match content {
        IdxContent::Images { rows, cols, data } => {
            out.extend_from_slice(&IDX_IMAGES.to_be_bytes());
            for v in [data.rows(), *rows, *cols] {
                out.extend_from_slice(&(v as u32).to_be_bytes());
            }
            out.extend(data.data().iter().map(|&v| to_byte(v)));
        }
        IdxContent::Labels(labels) => {
            out.extend_from_slice(&IDX_LABELS.to_be_bytes());
            out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
            out.extend_from_slice(labels);
        }
    }
    out
}

pub fn write_idx(path: &Path, content: &IdxContent) -> Result<()> {
    fs::write(path, encode_idx(content)).map_err(|e| Error::io(path, e))
}

/// Raw matrix: little-endian `u32 n`, `u32 d`, then `n * d` bytes.
pub fn parse_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 8 {
        return Err(Error::Length(format!("raw matrix header needs 8 bytes, got {}", bytes.len())));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().expect("four bytes")) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().expect("four bytes")) as usize;
    let body = &bytes[8..];
    if body.len() != n * d {
        return Err(Error::Length(format!("raw matrix body has {} bytes, header promises {n} x {d}", body.len())));
    }
    Tensor::new(n, d, body.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn load_raw(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_raw(&bytes)
}

pub fn encode_raw(data: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + data.len());
    out.extend_from_slice(&(data.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(data.cols() as u32).to_le_bytes());
    out.extend(data.data().iter().map(|&v| to_byte(v)));
    out
}

fn check_unit_interval(data: &Tensor) -> Result<()> {
    match data.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::contract(format!(
            "pixel {} of row {} is {}, outside [0, 1]",
            i % data.cols(),
            i / data.cols(),
            data.data()[i]
        ))),
        None => Ok(()),
    }
}

/// One Bernoulli draw per pixel.
pub fn bernoulli<R: Rng + ?Sized>(probs: &Tensor, rng: &mut R) -> Tensor {
    let mut out = probs.clone();
    for v in out.data_mut() {
        *v = (rng.random::<f64>() < *v) as u8 as f64;
    }
    out
}

/// A split of examples with its binarization mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Intensities, or the fixed binary draw for static binarization.
    pub images: Tensor,
    pub mode: Binarization,
}

impl Dataset {
    pub fn new(images: Tensor, mode: Binarization) -> Result<Self> {
        check_unit_interval(&images)?;
        let images = match mode {
            Binarization::Static(seed) => {
                let mut r = rng::stream(seed, Purpose::Binarize, 0, 0);
                bernoulli(&images, &mut r)
            }
            _ => images,
        };
        Ok(Self { images, mode })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    /// Rows `idx` as presented in `epoch`; dynamic binarization draws from
    /// the stream of `(seed, epoch, example index)`.
    pub fn batch(&self, idx: &[usize], seed: u64, epoch: u64) -> Tensor {
        let mut out = self.images.select_rows(idx);
        if self.mode == Binarization::Dynamic {
            for (r, &i) in idx.iter().enumerate() {
                let mut g = rng::stream(seed, Purpose::Binarize, epoch, i as u64);
                for v in out.row_mut(r) {
                    *v = (g.random::<f64>() < *v) as u8 as f64;
                }
            }
        }
        out
    }

    /// Every example, binarized for evaluation with a fixed stream.
    pub fn evaluation_view(&self, seed: u64) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx, seed, u64::MAX)
    }

    pub fn mean_pixel(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.dim()];
        for r in 0..self.len() {
            for (o, v) in m.iter_mut().zip(self.images.row(r)) {
                *o += v / n;
            }
        }
        m
    }

    /// Consecutive train/valid/test parts with the given sizes.
    pub fn split(&self, train: usize, valid: usize) -> Result<(Dataset, Dataset, Dataset)> {
        if train + valid > self.len() {
            return Err(Error::Config(format!(
                "split sizes {train} + {valid} exceed the {} examples",
                self.len()
            )));
        }
        let part = |a: usize, b: usize| Dataset {
            images: self.images.select_rows(&(a..b).collect::<Vec<_>>()),
            mode: self.mode,
        };
        Ok((part(0, train), part(train, train + valid), part(train + valid, self.len())))
    }
}

/// Synthetic data with a few discrete classes.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticModes {
    pub prototypes: Tensor,
    /// Binary samples.
    pub samples: Tensor,
    /// Prototype index of every sample.
    pub labels: Vec<usize>,
}

/// `n_modes` random distinct binary prototypes of `d` pixels; every sample
/// is a uniformly chosen prototype with each pixel flipped with
/// probability `noise`.
pub fn synthetic_modes(n_modes: usize, d: usize, n_samples: usize, noise: f64, seed: u64) -> Result<SyntheticModes> {
    if n_modes == 0 || (d < 63 && n_modes as u64 > 1u64 << d) {
        return Err(Error::contract(format!("{n_modes} distinct prototypes do not fit in {d} pixels")));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::contract(format!("flip probability {noise} outside [0, 1]")));
    }
    let mut r = rng::stream(seed, Purpose::Data, 0, 0);
    let mut protos: Vec<Vec<f64>> = Vec::with_capacity(n_modes);
    while protos.len() < n_modes {
        let p: Vec<f64> = (0..d).map(|_| (r.random::<f64>() < 0.5) as u8 as f64).collect();
        if !protos.contains(&p) {
            protos.push(p);
        }
    }
    let prototypes = Tensor::from_rows(&protos)?;
    let mut labels = Vec::with_capacity(n_samples);
    let mut samples = Tensor::zeros(n_samples, d);
    for i in 0..n_samples {
        let k = r.random_range(0..n_modes);
        labels.push(k);
        for (dst, &p) in samples.row_mut(i).iter_mut().zip(&protos[k]) {
            let flip = r.random::<f64>() < noise;
            *dst = if flip { 1.0 - p } else { p };
        }
    }
    Ok(SyntheticModes {
        prototypes,
        samples,
        labels,
    })
}

/// Index of the closest prototype in Hamming distance after thresholding.
pub fn nearest_prototype(image: &[f64], prototypes: &Tensor) -> usize {
    (0..prototypes.rows())
        .min_by_key(|&k| {
            prototypes
                .row(k)
                .iter()
                .zip(image)
                .filter(|(&p, &v)| (v >= 0.5) != (p >= 0.5))
                .count()
        })
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    fn fixture() -> Vec<u8> {
        let mut b = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
        b.extend_from_slice(&[0, 255, 255, 0, 255, 0, 0, 255]);
        b
    }

    #[test]
    fn parses_hand_built_images() {
        match parse_idx(&fixture()).unwrap() {
            IdxContent::Images { rows, cols, data } => {
                assert_eq!((rows, cols), (2, 2));
                assert_eq!(data.shape(), (2, 4));
                assert_eq!(data.row(0), &[0.0, 1.0, 1.0, 0.0]);
                assert_eq!(data.row(1), &[1.0, 0.0, 0.0, 1.0]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(encode_idx(&parse_idx(&fixture()).unwrap()), fixture());
    }

    #[test]
    fn bad_inputs_are_reported() {
        assert!(matches!(parse_idx(&[]), Err(Error::Length(_))));
        let mut b = fixture();
        b[3] = 7;
        let err = parse_idx(&b).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("00 00 08 07"), "{err}");
        let mut b = fixture();
        b.pop();
        assert!(matches!(parse_idx(&b), Err(Error::Length(_))));
    }

    #[test]
    fn labels_parse_as_labels_only() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 4, 1, 9];
        assert_eq!(parse_idx(&bytes).unwrap(), IdxContent::Labels(vec![4, 1, 9]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.idx");
        std::fs::write(&path, bytes).unwrap();
        assert!(load_idx_images(&path).is_err());
    }

    #[test]
    fn raw_matrix_round_trip() {
        let t = Tensor::new(2, 3, vec![0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(parse_raw(&encode_raw(&t)).unwrap(), t);
        assert!(parse_raw(&[1, 0, 0, 0]).is_err());
    }

    #[test]
    fn binarization_endpoints_and_static_determinism() {
        let t = Tensor::new(1, 4, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        for mode in [Binarization::Dynamic, Binarization::Static(3)] {
            let ds = Dataset::new(t.clone(), mode).unwrap();
            assert_eq!(ds.batch(&[0], 1, 2), t);
        }
        let grey = Tensor::filled(5, 16, 0.5);
        let a = Dataset::new(grey.clone(), Binarization::Static(9)).unwrap();
        let b = Dataset::new(grey.clone(), Binarization::Static(9)).unwrap();
        assert_eq!(a.images, b.images);
        assert!(Dataset::new(Tensor::filled(1, 1, 1.5), Binarization::None).is_err());
    }

    #[test]
    fn dynamic_binarization_tracks_probabilities() {
        let p = Tensor::new(1, 3, vec![0.1, 0.5, 0.93]).unwrap();
        let ds = Dataset::new(p.clone(), Binarization::Dynamic).unwrap();
        let n = 10_000;
        let mut sums = [0.0; 3];
        for e in 0..n {
            for (s, v) in sums.iter_mut().zip(ds.batch(&[0], 4, e).row(0)) {
                *s += v;
            }
        }
        for (k, &s) in sums.iter().enumerate() {
            let q = p.data()[k];
            let sd = (q * (1.0 - q) / n as f64).sqrt();
            assert!((s / n as f64 - q).abs() < 4.0 * sd, "pixel {k}");
        }
    }

    #[test]
    fn synthetic_noise_free_rows_are_prototypes() {
        let s = synthetic_modes(4, 16, 200, 0.0, 1).unwrap();
        for (r, &k) in s.labels.iter().enumerate() {
            assert_eq!(s.samples.row(r), s.prototypes.row(k));
            assert_eq!(nearest_prototype(s.samples.row(r), &s.prototypes), k);
        }
        assert_eq!(s, synthetic_modes(4, 16, 200, 0.0, 1).unwrap());
        assert!(synthetic_modes(5, 2, 10, 0.0, 1).is_err());
    }

    #[test]
    fn single_mode_flips_are_binomial() {
        let d = 64;
        let noise = 0.05;
        let s = synthetic_modes(1, d, 2000, noise, 2).unwrap();
        let proto = s.prototypes.row(0);
        let dists: Vec<f64> = (0..2000)
            .map(|r| s.samples.row(r).iter().zip(proto).filter(|(a, b)| a != b).count() as f64)
            .collect();
        let mean = dists.iter().sum::<f64>() / dists.len() as f64;
        let expect = d as f64 * noise;
        let se = (d as f64 * noise * (1.0 - noise) / dists.len() as f64).sqrt();
        assert!((mean - expect).abs() < 4.0 * se, "{mean}");
        assert!(dists.iter().all(|&h| h <= 16.0));
    }

    #[test]
    fn split_sizes_are_conserved() {
        let ds = Dataset::new(Tensor::zeros(10, 2), Binarization::None).unwrap();
        let (a, b, c) = ds.split(6, 3).unwrap();
        assert_eq!(a.len() + b.len() + c.len(), 10);
        assert!(ds.split(8, 3).is_err());
    }

    proptest! {
        #[test]
        fn idx_round_trip_is_byte_exact(
            n in 0usize..4, rows in 1usize..4, cols in 1usize..4,
            seed in prop::num::u8::ANY,
        ) {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(&IDX_IMAGES.to_be_bytes());
            for v in [n, rows, cols] {
                bytes.extend_from_slice(&(v as u32).to_be_bytes());
            }
            bytes.extend((0..n * rows * cols).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)));
            prop_assert_eq!(encode_idx(&parse_idx(&bytes).unwrap()), bytes);
        }
    }
}
