//! Synthetic nested-shape dataset, image-based edge maps, and
//! rotation/flip augmentation.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scribble::synth_scribble;
use super::ImageSample;
use crate::error::{config_err, shape_err, Result};
use crate::losses::ScribbleMap;

/// Smallest area, as a fraction of the image, that each class occupies in
/// synthesized samples.
pub const MIN_CLASS_FRACTION: f64 = 0.02;

/// Sobel gradient magnitude of the channel mean, replicate-padded, divided
/// by its maximum. A flat image gives all zeros.
pub fn synth_edge(image: &Array3<f32>) -> Array2<f32> {
    let gray = image.mean_axis(Axis(0)).expect("image has at least one channel");
    let (h, w) = gray.dim();
    let px = |y: isize, x: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        gray[[y, x]] as f64
    };
    let mut mag = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            mag[[y as usize, x as usize]] = (gx * gx + gy * gy).sqrt();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-12 {
        return Array2::zeros((h, w));
    }
    mag.mapv(|v| (v / max) as f32)
}

/// Rotation by `k` quarter turns (counter-clockwise) then optional
/// horizontal and vertical flips, on the last two axes of a 2-D map.
pub fn transform2<T: Clone>(a: &Array2<T>, k: usize, hflip: bool, vflip: bool) -> Array2<T> {
    let mut v = a.view();
    for _ in 0..k % 4 {
        v = v.reversed_axes();
        v.invert_axis(Axis(0));
    }
    if hflip {
        v.invert_axis(Axis(1));
    }
    if vflip {
        v.invert_axis(Axis(0));
    }
    v.to_owned()
}

fn transform3(a: &Array3<f32>, k: usize, hflip: bool, vflip: bool) -> Array3<f32> {
    let planes: Vec<Array2<f32>> = a
        .axis_iter(Axis(0))
        .map(|p| transform2(&p.to_owned(), k, hflip, vflip))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("planes share a shape")
}

/// Deterministic rotation/flip of every spatial field.
pub fn augment_with(sample: &ImageSample, k: usize, hflip: bool, vflip: bool) -> Result<ImageSample> {
    let (_, h, w) = sample.image.dim();
    if h != w {
        return Err(shape_err!("augmentation needs square samples, got {h}x{w}"));
    }
    let scrib = Array2::from_shape_vec((h, w), sample.scribble.labels.clone())
        .map_err(|e| shape_err!("scribble layout: {e}"))?;
    let scrib = transform2(&scrib, k, hflip, vflip);
    Ok(ImageSample {
        id: sample.id.clone(),
        patient: sample.patient.clone(),
        image: transform3(&sample.image, k, hflip, vflip),
        scribble: ScribbleMap {
            labels: scrib.iter().cloned().collect(),
            ..sample.scribble.clone()
        },
        edge_gt: transform2(&sample.edge_gt, k, hflip, vflip),
        dense_gt: sample.dense_gt.as_ref().map(|d| transform2(d, k, hflip, vflip)),
        spacing: if k % 2 == 1 {
            (sample.spacing.1, sample.spacing.0)
        } else {
            sample.spacing
        },
    })
}

/// Random quarter-turn rotation and independent horizontal/vertical flips.
pub fn augment<R: Rng>(sample: &ImageSample, rng: &mut R) -> Result<ImageSample> {
    let k = rng.random_range(0..4);
    let hflip = rng.random_bool(0.5);
    let vflip = rng.random_bool(0.5);
    augment_with(sample, k, hflip, vflip)
}

/// Generator for one sample's augmentation, independent of processing
/// order.
pub fn sample_rng(run_seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn nested_labels<R: Rng>(size: usize, num_classes: usize, rng: &mut R) -> Array2<u32> {
    let n = size as f64;
    let fg = num_classes - 1;
    let r0 = rng.random_range(0.30..0.40) * n;
    let mut cy = n / 2.0 + rng.random_range(-0.08..0.08) * n;
    let mut cx = n / 2.0 + rng.random_range(-0.08..0.08) * n;
    let mut shapes = Vec::with_capacity(fg);
    let mut prev_r = r0;
    for c in 0..fg {
        let r = if c == 0 {
            r0
        } else {
            let target = r0 * (fg - c) as f64 / fg as f64;
            (target * rng.random_range(0.9..1.1)).min(prev_r * 0.85)
        };
        if c > 0 {
            let slack = (prev_r - r) * 0.3;
            cy += rng.random_range(-1.0..1.0) * slack;
            cx += rng.random_range(-1.0..1.0) * slack;
        }
        let aspect = rng.random_range(0.8..1.2);
        shapes.push(Ellipse {
            cy,
            cx,
            a: r * aspect,
            b: r / aspect,
            theta: rng.random_range(0.0..std::f64::consts::PI),
        });
        prev_r = r;
    }
    Array2::from_shape_fn((size, size), |(y, x)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut label = 0;
        for (i, e) in shapes.iter().enumerate() {
            if e.contains(py, px) {
                label = i as u32 + 1;
            } else {
                break;
            }
        }
        label
    })
}

fn render<R: Rng>(labels: &Array2<u32>, num_classes: usize, rng: &mut R) -> Array3<f32> {
    // Class intensities alternate bright/dark so neighbouring regions differ.
    let means: Vec<f64> = (0..num_classes)
        .map(|c| {
            let base = if c == 0 {
                0.15
            } else if c % 2 == 1 {
                0.55 + 0.3 * (c as f64 / num_classes as f64)
            } else {
                0.3 + 0.1 * (c as f64 / num_classes as f64)
            };
            (base + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
        })
        .collect();
    let noise = Normal::new(0.0, 0.05).expect("valid deviation");
    let (h, w) = labels.dim();
    let mut img = Array3::<f32>::zeros((1, h, w));
    for ((y, x), &l) in labels.indexed_iter() {
        let v = means[l as usize] + noise.sample(rng);
        img[[0, y, x]] = v.clamp(0.0, 1.0) as f32;
    }
    img
}

/// `n` samples of nested elliptical regions, one per foreground class, with
/// dense labels, automatic scribbles and edges, and unit spacing. Each
/// sample is its own patient.
pub fn synth_shapes_dataset(n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if num_classes < 2 {
        return Err(config_err!("need at least 2 classes, got {num_classes}"));
    }
    if size < 16 {
        return Err(config_err!("image size {size} is too small"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_area = (MIN_CLASS_FRACTION * (size * size) as f64).ceil() as usize;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut labels = nested_labels(size, num_classes, &mut rng);
        for _ in 0..100 {
            let mut counts = vec![0usize; num_classes];
            labels.iter().for_each(|&l| counts[l as usize] += 1);
            if counts.iter().all(|&c| c >= min_area) {
                break;
            }
            labels = nested_labels(size, num_classes, &mut rng);
        }
        let image = render(&labels, num_classes, &mut rng);
        let edge_gt = synth_edge(&image);
        let scribble = synth_scribble(labels.view(), num_classes)?;
        out.push(ImageSample {
            id: format!("case{i:04}"),
            patient: format!("patient{i:04}"),
            image,
            scribble,
            edge_gt,
            dense_gt: Some(labels),
            spacing: (1.0, 1.0),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_has_no_edges() {
        let img = Array3::from_elem((1, 8, 8), 0.4f32);
        assert!(synth_edge(&img).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_at_the_step() {
        let img = Array3::from_shape_fn((1, 8, 8), |(_, _, x)| if x >= 4 { 1.0f32 } else { 0.0 });
        let e = synth_edge(&img);
        for y in 0..8 {
            assert_eq!(e[[y, 3]], 1.0);
            assert_eq!(e[[y, 4]], 1.0);
            assert_eq!(e[[y, 0]], 0.0);
            assert_eq!(e[[y, 7]], 0.0);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let a = Array2::from_shape_fn((5, 5), |(y, x)| (y * 5 + x) as u32);
        let mut b = a.clone();
        for _ in 0..4 {
            b = transform2(&b, 1, false, false);
        }
        assert_eq!(a, b);
        assert_eq!(transform2(&a, 0, false, false), a);
        assert_ne!(transform2(&a, 1, false, false), a);
    }

    #[test]
    fn dataset_is_reproducible_and_complete() {
        let a = synth_shapes_dataset(6, 64, 4, 3).unwrap();
        let b = synth_shapes_dataset(6, 64, 4, 3).unwrap();
        assert_eq!(a, b);
        for s in &a {
            let d = s.dense_gt.as_ref().unwrap();
            for c in 0..4 {
                assert!(d.iter().filter(|&&v| v == c).count() as f64 >= 0.02 * 4096.0);
            }
        }
        assert!(synth_shapes_dataset(1, 64, 1, 0).is_err());
    }
}
