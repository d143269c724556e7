//! On-disk layout: `root/{images,scribbles,edges,masks}/<id>.png` plus
//! `meta.csv` with columns `id,patient,spacing_y,spacing_x`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{synth_edge, ImageSample};
use crate::error::{config_err, data_err, shape_err, Error, Result};
use crate::losses::{ScribbleMap, UNKNOWN_ON_DISK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    pub patient: String,
    pub spacing_y: f64,
    pub spacing_x: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Square side everything is resampled to.
    pub size: usize,
    pub num_classes: usize,
    /// 1 loads images as luminance, 3 as RGB.
    pub channels: usize,
    /// Whether edge maps are needed; missing ones are then computed from the
    /// image.
    pub edge_supervision: bool,
}

fn png_path(root: &Path, dir: &str, id: &str) -> PathBuf {
    root.join(dir).join(format!("{id}.png"))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn resize_gray(img: GrayImage, size: usize, filter: FilterType) -> GrayImage {
    if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        imageops::resize(&img, size as u32, size as u32, filter)
    }
}

fn to_array(img: &GrayImage) -> Array2<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array2::from_shape_vec((h, w), img.as_raw().clone()).expect("buffer matches dimensions")
}

fn load_labels(path: &Path, size: usize, num_classes: usize, unknown: Option<u8>) -> Result<(Array2<u32>, (u32, u32))> {
    let raw = open(path)?.to_luma8();
    let dims = raw.dimensions();
    let arr = to_array(&resize_gray(raw, size, FilterType::Nearest));
    let mut out = Array2::zeros(arr.dim());
    for ((y, x), &v) in arr.indexed_iter() {
        out[[y, x]] = if Some(v) == unknown {
            num_classes as u32
        } else if (v as usize) < num_classes {
            v as u32
        } else {
            return Err(data_err!("{}: class id {v} with {num_classes} classes", path.display()));
        };
    }
    Ok((out, dims))
}

fn read_meta(root: &Path) -> Result<Vec<MetaRecord>> {
    let path = root.join("meta.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => data_err!("{}: {other:?}", path.display()),
    })?;
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Loads every record listed in `meta.csv`, in file order. Images are
/// resampled bilinearly and label maps with nearest neighbour.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Vec<ImageSample>> {
    if opts.channels != 1 && opts.channels != 3 {
        return Err(config_err!("channels must be 1 or 3, got {}", opts.channels));
    }
    let size = opts.size;
    let mut out = Vec::new();
    for meta in read_meta(root)? {
        let img = open(&png_path(root, "images", &meta.id))?;
        let img_dims = (img.width(), img.height());
        let image = if opts.channels == 1 {
            let g = to_array(&resize_gray(img.to_luma8(), size, FilterType::Triangle));
            g.mapv(|v| v as f32 / 255.0).insert_axis(ndarray::Axis(0))
        } else {
            let rgb = img.to_rgb8();
            let rgb = if rgb.width() as usize == size && rgb.height() as usize == size {
                rgb
            } else {
                imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle)
            };
            Array3::from_shape_fn((3, size, size), |(c, y, x)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
            })
        };
        let scribble_path = png_path(root, "scribbles", &meta.id);
        if !scribble_path.exists() {
            return Err(data_err!("missing scribble file {}", scribble_path.display()));
        }
        let (scrib, scrib_dims) = load_labels(&scribble_path, size, opts.num_classes, Some(UNKNOWN_ON_DISK))?;
        if scrib_dims != img_dims {
            return Err(shape_err!(
                "{}: image is {:?} but scribble is {:?}",
                meta.id,
                img_dims,
                scrib_dims
            ));
        }
        let edge_path = png_path(root, "edges", &meta.id);
        let edge_gt = if edge_path.exists() {
            to_array(&resize_gray(open(&edge_path)?.to_luma8(), size, FilterType::Triangle)).mapv(|v| v as f32 / 255.0)
        } else {
            if opts.edge_supervision {
                log::warn!("{}: no edge map, computing one from the image", meta.id);
            }
            synth_edge(&image)
        };
        let mask_path = png_path(root, "masks", &meta.id);
        let dense_gt = if mask_path.exists() {
            Some(load_labels(&mask_path, size, opts.num_classes, None)?.0)
        } else {
            None
        };
        let scale_y = img_dims.1 as f64 / size as f64;
        let scale_x = img_dims.0 as f64 / size as f64;
        out.push(ImageSample {
            scribble: ScribbleMap::new(scrib.iter().cloned().collect(), size, size, opts.num_classes)?,
            id: meta.id,
            patient: meta.patient,
            image,
            edge_gt,
            dense_gt,
            spacing: (meta.spacing_y * scale_y, meta.spacing_x * scale_x),
        });
    }
    Ok(out)
}

fn save_gray(path: &Path, arr: &Array2<u8>) -> Result<()> {
    let (h, w) = arr.dim();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(w as u32, h as u32, arr.iter().cloned().collect()).expect("buffer matches dimensions");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes samples in the layout `load_dataset` reads. Multi-channel images
/// are stored as their channel mean.
pub fn write_dataset(root: &Path, samples: &[ImageSample]) -> Result<()> {
    for dir in ["images", "scribbles", "edges", "masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let meta_path = root.join("meta.csv");
    let mut meta = csv::Writer::from_path(&meta_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&meta_path, io),
        other => data_err!("{}: {other:?}", meta_path.display()),
    })?;
    for s in samples {
        let gray = s.image.mean_axis(ndarray::Axis(0)).expect("image has channels");
        save_gray(&png_path(root, "images", &s.id), &gray.mapv(quantize))?;
        let (h, w) = s.size();
        let scrib = Array2::from_shape_fn((h, w), |(y, x)| {
            let v = s.scribble.get(y, x);
            if v == s.scribble.unknown_code {
                UNKNOWN_ON_DISK
            } else {
                v as u8
            }
        });
        save_gray(&png_path(root, "scribbles", &s.id), &scrib)?;
        save_gray(&png_path(root, "edges", &s.id), &s.edge_gt.mapv(quantize))?;
        if let Some(d) = &s.dense_gt {
            save_gray(&png_path(root, "masks", &s.id), &d.mapv(|v| v as u8))?;
        }
        meta.serialize(MetaRecord {
            id: s.id.clone(),
            patient: s.patient.clone(),
            spacing_y: s.spacing.0,
            spacing_x: s.spacing.1,
        })?;
    }
    meta.flush().map_err(|e| Error::io(&meta_path, e))?;
    Ok(())
}
