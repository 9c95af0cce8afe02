//! Binary PGM (P5) export of cones, heatmaps and overlays.

use std::fs;
use std::path::{Path, PathBuf};

use gazecast_tensor::Element;

use crate::config::ModalityId;
use crate::data::SceneSample;
use crate::error::{GazeError, Result};
use crate::eval::predict;
use crate::geometry::{containing_pixel, Point};
use crate::heads::{argmax_index, argmax_point};
use crate::model::GazeModel;

/// Overlay background is compressed into this range so the markers stay
/// distinguishable.
pub const OVERLAY_RANGE: (u8, u8) = (16, 200);
pub const PRED_MARK: u8 = 255;
pub const GT_MARK: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Gray {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = || GazeError::Data("not a binary 8-bit PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_string());
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad());
        }
        let width: usize = fields[1].parse().map_err(|_| bad())?;
        let height: usize = fields[2].parse().map_err(|_| bad())?;
        let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height {
            return Err(bad());
        }
        Ok(Self { width, height, pixels })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Values in `[0, 1]` mapped linearly to `0..=255`.
pub fn unit_to_gray(values: &[f64], h: usize, w: usize) -> Gray {
    Gray {
        width: w,
        height: h,
        pixels: values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
    }
}

/// Min-max stretched to `lo..=hi`; a constant image maps to `lo`.
pub fn stretch(values: &[f64], lo: u8, hi: u8) -> Vec<u8> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    values
        .iter()
        .map(|&v| {
            let t = if span > 0.0 { (v - min) / span } else { 0.0 };
            (lo as f64 + t * (hi - lo) as f64).round() as u8
        })
        .collect()
}

/// Nearest resampling of a `[h, w]` plane to `[oh, ow]`.
fn resample(values: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    (0..oh * ow)
        .map(|i| {
            let (r, c) = (i / ow, i % ow);
            values[(r * h / oh) * w + c * w / ow]
        })
        .collect()
}

/// Background plane, predicted pixel at [`PRED_MARK`], ground-truth pixels
/// at [`GT_MARK`]. The prediction wins where the two coincide.
pub fn overlay(base: &[f64], h: usize, w: usize, pred: Point, gt: &[Point]) -> Gray {
    let mut pixels = stretch(base, OVERLAY_RANGE.0, OVERLAY_RANGE.1);
    for &p in gt {
        let (r, c) = containing_pixel(p, h, w);
        pixels[r * w + c] = GT_MARK;
    }
    let (r, c) = containing_pixel(pred, h, w);
    pixels[r * w + c] = PRED_MARK;
    Gray { width: w, height: h, pixels }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub cone: PathBuf,
    pub heatmap: PathBuf,
    pub overlay: PathBuf,
    pub predicted: Point,
    /// Row-major heatmap index of the marked prediction.
    pub predicted_index: usize,
}

/// Writes `cone.pgm`, `heatmap.pgm` and `overlay.pgm` for one sample. The
/// overlay background is the mean of the first modality the model uses, so
/// a model without raw input never exposes raw pixels.
pub fn render_sample<T: Element>(model: &GazeModel<T>, sample: &SceneSample, dir: &Path) -> Result<Rendered> {
    fs::create_dir_all(dir)?;
    let preds = predict(model, std::slice::from_ref(sample))?;
    let hr = model.config.model.heatmap_resolution;
    let res = model.config.model.input_resolution;
    let heat = &preds.heatmaps[0];
    let base_modality: ModalityId = model.modalities()[0];
    let img = sample.modality(base_modality)?;
    let plane = res * res;
    let gray: Vec<f64> = (0..plane)
        .map(|i| (0..3).map(|c| img.data()[c * plane + i] as f64).sum::<f64>() / 3.0)
        .collect();
    let base = resample(&gray, res, res, hr, hr);
    let predicted = argmax_point(heat, hr, hr);
    let gt: &[Point] = if sample.in_frame { &sample.gaze_points } else { &[] };
    let out = Rendered {
        cone: dir.join("cone.pgm"),
        heatmap: dir.join("heatmap.pgm"),
        overlay: dir.join("overlay.pgm"),
        predicted,
        predicted_index: argmax_index(heat),
    };
    unit_to_gray(&preds.cones[0], res, res).write(&out.cone)?;
    unit_to_gray(heat, hr, hr).write(&out.heatmap)?;
    overlay(&base, hr, hr, predicted, gt).write(&out.overlay)?;
    Ok(out)
}
