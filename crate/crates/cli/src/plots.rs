//! PNG figures: training curves and the qualitative panel.

use std::path::Path;
use std::sync::OnceLock;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use plotters::prelude::*;
use qmaxvit::losses::ScribbleMap;
use qmaxvit::train::History;
use qmaxvit::{Error, Result};

const FONT_CANDIDATES: [&str; 6] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/truetype/liberation/LiberationSans-Regular.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];

/// Registers a sans-serif font for chart text. `QMX_FONT` names a TTF file
/// to use instead of the system search. Without a font, charts have no text.
fn font_available() -> bool {
    static FOUND: OnceLock<bool> = OnceLock::new();
    *FOUND.get_or_init(|| {
        let custom = std::env::var("QMX_FONT").ok();
        let paths = custom.iter().map(String::as_str).chain(FONT_CANDIDATES);
        for p in paths {
            if let Ok(bytes) = std::fs::read(p) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                if plotters::style::register_font("sans-serif", FontStyle::Normal, bytes).is_ok() {
                    return true;
                }
            }
        }
        log::warn!("no usable TTF font found; charts are drawn without text (set QMX_FONT)");
        false
    })
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("plotting failed: {e}"))
}

fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}

struct Series<'a> {
    name: &'a str,
    color: RGBColor,
    points: Vec<(f64, f64)>,
}

fn draw_chart(area: &DrawingArea<BitMapBackend<'_>, plotters::coord::Shift>, title: &str, series: &[Series<'_>], text: bool) -> Result<()> {
    let finite: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().copied())
        .filter(|p| p.1.is_finite())
        .collect();
    if finite.is_empty() {
        return Ok(());
    }
    let x_max = finite.iter().map(|p| p.0).fold(1.0, f64::max);
    let y_lo = finite.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(0.0);
    let mut y_hi = finite.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    let mut builder = ChartBuilder::on(area);
    builder.margin(12);
    if text {
        builder.caption(title, ("sans-serif", 20)).x_label_area_size(32).y_label_area_size(56);
    }
    let mut chart = builder
        .build_cartesian_2d(1.0..x_max.max(2.0), y_lo..y_hi * 1.05)
        .map_err(plot_err)?;
    let mut mesh = chart.configure_mesh();
    if text {
        mesh.x_desc("epoch");
    } else {
        mesh.x_labels(0).y_labels(0);
    }
    mesh.draw().map_err(plot_err)?;
    for s in series {
        let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.1.is_finite()).collect();
        if pts.is_empty() {
            continue;
        }
        let color = s.color;
        let drawn = chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?;
        if text {
            drawn
                .label(s.name)
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        }
    }
    if text {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    Ok(())
}

/// Loss terms (left) and validation DSC (right) per epoch.
pub fn training_curves(history: &History, path: &Path) -> Result<()> {
    let (w, h) = (1000u32, 420u32);
    let text = font_available();
    let mut buf = vec![0u8; (w * h * 3) as usize];
    {
        let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_err)?;
        let (left, right) = root.split_horizontally(w / 2);
        let col = |f: fn(&qmaxvit::train::EpochRecord) -> f64| -> Vec<(f64, f64)> {
            history.records.iter().map(|r| (r.epoch as f64, f(r))).collect()
        };
        let losses = [
            Series { name: "total", color: BLACK, points: col(|r| r.loss_total) },
            Series { name: "ssl", color: RGBColor(0, 114, 178), points: col(|r| r.loss_ssl) },
            Series { name: "psl", color: RGBColor(213, 94, 0), points: col(|r| r.loss_psl) },
            Series { name: "esl", color: RGBColor(0, 158, 115), points: col(|r| r.loss_esl) },
        ];
        draw_chart(&left, "training loss", &losses, text)?;
        let dsc = [Series { name: "val DSC", color: RGBColor(204, 121, 167), points: col(|r| r.val_dsc) }];
        draw_chart(&right, "validation DSC", &dsc, text)?;
        root.present().map_err(plot_err)?;
    }
    let img = RgbImage::from_raw(w, h, buf).expect("buffer matches dimensions");
    save_rgb(path, &img)
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
];

/// Class 0 is black; others cycle through a fixed palette.
pub fn class_color(c: u32) -> [u8; 3] {
    if c == 0 {
        [0, 0, 0]
    } else {
        PALETTE[(c as usize - 1) % PALETTE.len()]
    }
}

/// One row of the qualitative panel.
pub struct PanelRow<'a> {
    pub image: &'a Array3<f32>,
    pub scribble: &'a ScribbleMap,
    pub prediction: &'a Array2<u32>,
    pub ground_truth: Option<&'a Array2<u32>>,
}

const GAP: u32 = 4;

/// Rows of image | scribble | prediction | ground truth, each cell scaled to
/// at least 128 pixels. Missing ground truth is drawn as a gray cell.
pub fn qualitative_panel(rows: &[PanelRow<'_>], path: &Path) -> Result<()> {
    let Some(first) = rows.first() else {
        return Err(Error::Data("panel needs at least one row".into()));
    };
    let (_, h, w) = first.image.dim();
    let scale = (128 / h.max(w)).max(1) as u32;
    let (cw, ch) = (w as u32 * scale, h as u32 * scale);
    let width = 4 * cw + 5 * GAP;
    let height = rows.len() as u32 * ch + (rows.len() as u32 + 1) * GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, row) in rows.iter().enumerate() {
        let (_, rh, rw) = row.image.dim();
        if (rh, rw) != (h, w) || row.prediction.dim() != (h, w) {
            return Err(Error::Shape(format!("panel row {r} is not {h}x{w}")));
        }
        let gray = row.image.mean_axis(Axis(0)).expect("image has channels");
        let lum = |y: usize, x: usize| (gray[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
        let y0 = GAP + r as u32 * (ch + GAP);
        let cell = |col: u32, img: &mut RgbImage, f: &dyn Fn(usize, usize) -> [u8; 3]| {
            let x0 = GAP + col * (cw + GAP);
            for y in 0..h {
                for x in 0..w {
                    let px = Rgb(f(y, x));
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put_pixel(x0 + x as u32 * scale + dx, y0 + y as u32 * scale + dy, px);
                        }
                    }
                }
            }
        };
        cell(0, &mut img, &|y, x| [lum(y, x); 3]);
        cell(1, &mut img, &|y, x| {
            if row.scribble.is_known(y, x) {
                match row.scribble.get(y, x) {
                    0 => [255, 255, 255],
                    c => class_color(c),
                }
            } else {
                [lum(y, x) / 3; 3]
            }
        });
        cell(2, &mut img, &|y, x| class_color(row.prediction[[y, x]]));
        match row.ground_truth {
            Some(gt) => cell(3, &mut img, &|y, x| class_color(gt[[y, x]])),
            None => cell(3, &mut img, &|_, _| [128, 128, 128]),
        }
    }
    save_rgb(path, &img)
}

/// Label map as an 8-bit gray PNG holding class ids.
pub fn save_label_map(labels: &Array2<u32>, path: &Path) -> Result<()> {
    let (h, w) = labels.dim();
    let raw: Vec<u8> = labels.iter().map(|&v| v.min(255) as u8).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image(other),
    })
}
