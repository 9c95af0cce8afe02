//! Scene samples, the synthetic generator and the on-disk dataset format.

mod dataset;
mod generator;
mod render;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use gazecast_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModalityId;
use crate::error::{GazeError, Result};
use crate::geometry::{EyePoint, GazeVector2D, HeadBox, Point};

pub use dataset::{dataset_digest, read_dataset, read_dataset_modalities, write_dataset, MANIFEST};
pub use generator::{
    generate_dataset, generate_scene, generate_scene_with_layout, resolve_target, self_check, Person,
    Scenario, SceneLayout, SceneObject, SceneSpec, SelfCheck, TargetRule,
};

/// Per-modality read counters of one sample.
#[derive(Debug, Default)]
pub struct ModalityReads([AtomicUsize; 3]);

impl ModalityReads {
    pub fn get(&self, m: ModalityId) -> usize {
        self.0[m.index()].load(Ordering::Relaxed)
    }

    fn bump(&self, m: ModalityId) {
        self.0[m.index()].fetch_add(1, Ordering::Relaxed);
    }
}

/// One annotated scene. Modality images are `[3, H, W]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SceneSample {
    images: [Option<Tensor<f32>>; 3],
    pub head_box: HeadBox,
    pub eye: EyePoint,
    pub gaze_points: Vec<Point>,
    pub in_frame: bool,
    pub oracle_gaze_dir: GazeVector2D,
    pub sample_id: u64,
    pub scenario: Scenario,
    reads: Arc<ModalityReads>,
}

impl PartialEq for SceneSample {
    fn eq(&self, o: &Self) -> bool {
        self.images == o.images
            && self.head_box == o.head_box
            && self.eye == o.eye
            && self.gaze_points == o.gaze_points
            && self.in_frame == o.in_frame
            && self.oracle_gaze_dir == o.oracle_gaze_dir
            && self.sample_id == o.sample_id
            && self.scenario == o.scenario
    }
}

impl SceneSample {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        raw: Tensor<f32>,
        depth: Tensor<f32>,
        pose: Tensor<f32>,
        head_box: HeadBox,
        eye: EyePoint,
        gaze_points: Vec<Point>,
        in_frame: bool,
        oracle_gaze_dir: GazeVector2D,
        sample_id: u64,
        scenario: Scenario,
    ) -> Result<Self> {
        let s = Self {
            images: [Some(raw), Some(depth), Some(pose)],
            head_box,
            eye,
            gaze_points,
            in_frame,
            oracle_gaze_dir,
            sample_id,
            scenario,
            reads: Arc::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.head_box.validate()?;
        if self.in_frame && self.gaze_points.is_empty() {
            return Err(GazeError::Data(format!(
                "sample {} is in frame but has no gaze point",
                self.sample_id
            )));
        }
        if !self.head_box.contains(self.eye.point()) {
            return Err(GazeError::Data(format!(
                "sample {}: eye lies outside the head box",
                self.sample_id
            )));
        }
        let shapes: Vec<&[usize]> = self.images.iter().flatten().map(|t| t.shape()).collect();
        if shapes.iter().any(|s| s.len() != 3 || s[0] != 3 || *s != shapes[0]) {
            return Err(GazeError::Data(format!(
                "sample {}: modality images disagree in shape",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// Reads one modality image and counts the access.
    pub fn modality(&self, m: ModalityId) -> Result<&Tensor<f32>> {
        let img = self.images[m.index()]
            .as_ref()
            .ok_or_else(|| GazeError::Data(format!("modality {m} was not loaded")))?;
        self.reads.bump(m);
        Ok(img)
    }

    pub fn has_modality(&self, m: ModalityId) -> bool {
        self.images[m.index()].is_some()
    }

    /// How often each modality image has been handed out.
    pub fn reads(&self) -> &ModalityReads {
        &self.reads
    }

    pub fn resolution(&self) -> usize {
        self.images
            .iter()
            .flatten()
            .next()
            .map_or(0, |t| t.shape()[1])
    }

    pub(crate) fn image_unchecked(&self, m: ModalityId) -> Option<&Tensor<f32>> {
        self.images[m.index()].as_ref()
    }

    pub(crate) fn from_parts(
        images: [Option<Tensor<f32>>; 3],
        meta: SampleMeta,
    ) -> Result<Self> {
        let s = Self {
            images,
            head_box: meta.head_box,
            eye: meta.eye,
            gaze_points: meta.gaze_points,
            in_frame: meta.in_frame,
            oracle_gaze_dir: meta.oracle_gaze_dir,
            sample_id: meta.sample_id,
            scenario: meta.scenario,
            reads: Arc::default(),
        };
        s.validate()?;
        Ok(s)
    }
}

/// Annotation fields of a sample, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct SampleMeta {
    pub sample_id: u64,
    pub head_box: HeadBox,
    pub eye: EyePoint,
    pub gaze_points: Vec<Point>,
    pub in_frame: bool,
    pub oracle_gaze_dir: GazeVector2D,
    pub scenario: Scenario,
}

/// Sum of the read counters over a set of samples.
pub fn total_reads(samples: &[SceneSample], m: ModalityId) -> usize {
    samples.iter().map(|s| s.reads().get(m)).sum()
}

/// Head crop of one modality, nearest-resized to `res × res`.
pub fn crop_head(sample: &SceneSample, source: ModalityId, res: usize) -> Result<Tensor<f32>> {
    let img = sample.modality(source)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let b = &sample.head_box;
    let x0 = ((b.x_min * w as f64).floor() as usize).min(w - 1);
    let y0 = ((b.y_min * h as f64).floor() as usize).min(h - 1);
    let x1 = ((b.x_max * w as f64).ceil() as usize).clamp(x0 + 1, w);
    let y1 = ((b.y_max * h as f64).ceil() as usize).clamp(y0 + 1, h);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let data = img.data();
    Ok(Tensor::from_fn([3, res, res], |idx| {
        let c = idx / (res * res);
        let i = (idx / res) % res;
        let j = idx % res;
        let si = y0 + ((i * ch) / res).min(ch - 1);
        let sj = x0 + ((j * cw) / res).min(cw - 1);
        data[(c * h + si) * w + sj]
    }))
}

/// Deterministic disjoint split; `fraction` of the samples go to the test
/// side. Both sides keep the input order.
pub fn train_test_split(
    samples: Vec<SceneSample>,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(GazeError::Domain(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = samples.len();
    let n_test = (n as f64 * fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(GazeError::Domain(format!(
            "split fraction {fraction} of {n} samples leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; n];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.into_iter().zip(is_test) {
        if t {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, test))
}
