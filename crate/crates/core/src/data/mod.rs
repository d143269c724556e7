//! Samples, batching, patient-level splits, and dataset generation/IO.

mod io;
pub mod scribble;
pub mod synth;

use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use io::{load_dataset, write_dataset, LoadOptions, MetaRecord};
pub use scribble::synth_scribble;
pub use synth::{augment, augment_with, sample_rng, synth_edge, synth_shapes_dataset};

use crate::error::{config_err, data_err, shape_err, Result};
use crate::losses::ScribbleMap;

/// One training or evaluation record.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// Grouping key for splits.
    pub patient: String,
    /// `[C, H, W]` in [0, 1].
    pub image: Array3<f32>,
    pub scribble: ScribbleMap,
    /// `[H, W]` in [0, 1].
    pub edge_gt: Array2<f32>,
    /// Dense labels, used for evaluation only.
    pub dense_gt: Option<Array2<u32>>,
    /// Pixel size in mm along (y, x).
    pub spacing: (f64, f64),
}

impl ImageSample {
    pub fn size(&self) -> (usize, usize) {
        let (_, h, w) = self.image.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.image.dim().0
    }

    /// Checks field shapes agree and scribbles lie inside the dense labels.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.size();
        if (self.scribble.height, self.scribble.width) != (h, w) || self.edge_gt.dim() != (h, w) {
            return Err(shape_err!("sample {}: fields disagree on size {h}x{w}", self.id));
        }
        if let Some(d) = &self.dense_gt {
            if d.dim() != (h, w) {
                return Err(shape_err!("sample {}: dense labels are {:?}", self.id, d.dim()));
            }
            for ((y, x), &g) in d.indexed_iter() {
                let s = self.scribble.get(y, x);
                if s != self.scribble.unknown_code && s != g {
                    return Err(data_err!("sample {}: scribble {s} at ({y},{x}) over label {g}", self.id));
                }
            }
        }
        Ok(())
    }
}

/// A stacked minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, C, H, W]`.
    pub images: Tensor,
    /// `[B, H, W]` u32, unknown pixels hold the class count.
    pub labels: Tensor,
    /// `[B, 1, H, W]`.
    pub edges: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&ImageSample], dtype: DType) -> Result<Self> {
        let first = samples.first().ok_or_else(|| data_err!("empty batch"))?;
        let (c, h, w) = first.image.dim();
        let mut img = Vec::with_capacity(samples.len() * c * h * w);
        let mut edge = Vec::with_capacity(samples.len() * h * w);
        for s in samples {
            if s.image.dim() != (c, h, w) {
                return Err(shape_err!("batch mixes {:?} and {:?} images", (c, h, w), s.image.dim()));
            }
            img.extend(s.image.iter().cloned());
            edge.extend(s.edge_gt.iter().cloned());
        }
        let b = samples.len();
        let dev = Device::Cpu;
        Ok(Self {
            images: Tensor::from_vec(img, (b, c, h, w), &dev)?.to_dtype(dtype)?,
            labels: ScribbleMap::stack(&samples.iter().map(|s| &s.scribble).collect::<Vec<_>>())?,
            edges: Tensor::from_vec(edge, (b, 1, h, w), &dev)?.to_dtype(dtype)?,
        })
    }
}

/// K-fold split over patients, optionally holding out test patients first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub fold_count: usize,
    pub fold_index: usize,
    /// Patients reserved for testing before folds are formed.
    pub test_patients: usize,
}

/// Sample indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles patients with `seed`, reserves `test_patients`, and deals the
/// rest into `fold_count` folds. Fold `fold_index` is validation. With a
/// single fold, every remaining patient trains and validation is empty.
pub fn make_splits(samples: &[ImageSample], spec: SplitSpec, seed: u64) -> Result<Splits> {
    if spec.fold_count == 0 || spec.fold_index >= spec.fold_count {
        return Err(config_err!(
            "fold index {} invalid for {} folds",
            spec.fold_index,
            spec.fold_count
        ));
    }
    let patients: BTreeSet<&str> = samples.iter().map(|s| s.patient.as_str()).collect();
    let mut patients: Vec<&str> = patients.into_iter().collect();
    if spec.test_patients + spec.fold_count > patients.len() {
        return Err(config_err!(
            "{} folds plus {} test patients exceed {} patients",
            spec.fold_count,
            spec.test_patients,
            patients.len()
        ));
    }
    patients.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test, rest) = patients.split_at(spec.test_patients);
    let fold_of = |p: &str| rest.iter().position(|&q| q == p).map(|i| i % spec.fold_count);
    let mut out = Splits::default();
    for (i, s) in samples.iter().enumerate() {
        let p = s.patient.as_str();
        if test.contains(&p) {
            out.test.push(i);
        } else if spec.fold_count > 1 && fold_of(p) == Some(spec.fold_index) {
            out.val.push(i);
        } else {
            out.train.push(i);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(n: usize) -> Vec<ImageSample> {
        (0..n)
            .map(|i| ImageSample {
                id: format!("s{i}"),
                patient: format!("p{}", i / 2),
                image: Array3::zeros((1, 4, 4)),
                scribble: ScribbleMap::unknown(4, 4, 2),
                edge_gt: Array2::zeros((4, 4)),
                dense_gt: None,
                spacing: (1.0, 1.0),
            })
            .collect()
    }

    #[test]
    fn five_folds_of_one_hundred_patients() {
        let s = fake(200);
        let mut seen = BTreeSet::new();
        for k in 0..5 {
            let sp = make_splits(&s, SplitSpec { fold_count: 5, fold_index: k, test_patients: 0 }, 7).unwrap();
            let pats: BTreeSet<_> = sp.val.iter().map(|&i| s[i].patient.clone()).collect();
            assert_eq!(pats.len(), 20);
            for p in &pats {
                assert!(seen.insert(p.clone()));
            }
            let train: BTreeSet<_> = sp.train.iter().map(|&i| s[i].patient.clone()).collect();
            assert!(train.is_disjoint(&pats));
        }
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn too_many_folds_is_an_error() {
        let s = fake(4);
        assert!(make_splits(&s, SplitSpec { fold_count: 3, fold_index: 0, test_patients: 0 }, 0).is_err());
        assert!(make_splits(&s, SplitSpec { fold_count: 2, fold_index: 2, test_patients: 0 }, 0).is_err());
    }
}
