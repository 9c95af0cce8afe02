//! Evaluation: per-sample predictions, aggregate report, attention probe.

use std::collections::BTreeMap;
use std::io::Write;

use gazecast_tensor::{Element, Tape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModalityId;
use crate::data::SceneSample;
use crate::error::{GazeError, Result};
use crate::fusion::DropoutPlan;
use crate::geometry::{GazeVector2D, Point};
use crate::heads::argmax_point;
use crate::metrics::{aggregate, auc_score, distance_scores, MetricsReport, SampleMetrics};
use crate::model::{Batch, GazeModel};

/// One line of the prediction dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub config_hash: String,
    pub p_gaze: Point,
    pub gaze_dir: [f64; 2],
    pub in_frame: bool,
    pub auc: Option<f64>,
    pub min_dist: Option<f64>,
    pub avg_dist: Option<f64>,
    /// `w_m` keyed by modality name; absent for single-modality variants.
    pub attention: Option<BTreeMap<String, f64>>,
    /// In/out probability `o`.
    pub inout: Option<f64>,
}

impl SampleRecord {
    fn metrics(&self) -> SampleMetrics {
        SampleMetrics {
            in_frame: self.in_frame,
            auc: self.auc,
            min_dist: self.min_dist,
            avg_dist: self.avg_dist,
            inout_score: self.inout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub config_hash: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub binarization_radius: f64,
    /// AP is the mean precision at each positive (no interpolation).
    pub ap_interpolation: String,
    /// Mean `w_m` over all evaluated samples.
    pub attention: Option<BTreeMap<String, f64>>,
    /// Mean angle between predicted and true gaze direction, in degrees.
    pub gaze_angle_deg: f64,
}

/// Per-sample metrics of a predicted heatmap `[h·w]`.
pub fn score_heatmap(
    pred: &[f64],
    h: usize,
    w: usize,
    sample: &SceneSample,
    radius: f64,
) -> Result<(Point, SampleMetrics)> {
    let p = argmax_point(pred, h, w);
    let mut m = SampleMetrics {
        in_frame: sample.in_frame,
        auc: None,
        min_dist: None,
        avg_dist: None,
        inout_score: None,
    };
    if sample.in_frame {
        // a flat heatmap has an undefined ROC
        m.auc = match auc_score(pred, h, w, &sample.gaze_points, radius) {
            Ok(a) => Some(a),
            Err(GazeError::Metric(_)) => None,
            Err(e) => return Err(e),
        };
        let (min, avg) = distance_scores(p, &sample.gaze_points)?;
        m.min_dist = Some(min);
        m.avg_dist = Some(avg);
    }
    Ok((p, m))
}

/// Aggregates externally supplied heatmaps.
pub fn evaluate_heatmaps(
    heatmaps: &[Vec<f64>],
    h: usize,
    w: usize,
    samples: &[SceneSample],
    radius: f64,
) -> Result<MetricsReport> {
    if heatmaps.len() != samples.len() {
        return Err(GazeError::Metric(format!(
            "{} heatmaps for {} samples",
            heatmaps.len(),
            samples.len()
        )));
    }
    let per: Vec<SampleMetrics> = heatmaps
        .iter()
        .zip(samples)
        .map(|(hm, s)| score_heatmap(hm, h, w, s, radius).map(|x| x.1))
        .collect::<Result<_>>()?;
    aggregate(&per)
}

/// Model outputs for a set of samples, in input order.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// `[h·w]` heatmaps.
    pub heatmaps: Vec<Vec<f64>>,
    pub gaze: Vec<[f64; 2]>,
    /// `[M]` attention weights per sample.
    pub attention: Vec<Option<Vec<f64>>>,
    pub inout: Vec<Option<f64>>,
    pub cones: Vec<Vec<f64>>,
}

fn predict_batch<T: Element>(model: &GazeModel<T>, samples: &[SceneSample], plan: &DropoutPlan) -> Result<Predictions> {
    let refs: Vec<&SceneSample> = samples.iter().collect();
    let batch = Batch::<T>::from_samples(&refs, &model.config)?;
    let mut tape = Tape::<T>::new();
    let fwd = model.forward(&mut tape, &batch, plan)?;
    let n = samples.len();
    let rows = |t: &gazecast_tensor::Tensor<T>| -> Vec<Vec<f64>> {
        let k = t.numel() / n;
        t.data().chunks(k).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect()
    };
    let hm = rows(tape.value(fwd.heatmap));
    let gaze = rows(tape.value(fwd.gaze)).into_iter().map(|g| [g[0], g[1]]).collect();
    let attention = match &fwd.fusion {
        Some(f) => rows(tape.value(f.weights)).into_iter().map(Some).collect(),
        None => vec![None; n],
    };
    let inout = match fwd.inout {
        Some(o) => tape.value(o).data().iter().map(|v| Some(v.as_f64())).collect(),
        None => vec![None; n],
    };
    let cones = rows(tape.value(fwd.cone));
    Ok(Predictions {
        heatmaps: hm,
        gaze,
        attention,
        inout,
        cones,
    })
}

/// Runs the model over `samples` in parallel batches; the result keeps the
/// input order. `plan_for` gives the dropout plan of each batch index.
pub fn predict_with<T: Element>(
    model: &GazeModel<T>,
    samples: &[SceneSample],
    plan_for: impl Fn(usize) -> DropoutPlan + Sync,
) -> Result<Predictions> {
    let bs = model.config.eval.batch_size.max(1);
    let parts: Vec<Predictions> = samples
        .par_chunks(bs)
        .enumerate()
        .map(|(i, chunk)| predict_batch(model, chunk, &plan_for(i)))
        .collect::<Result<_>>()?;
    let mut out = Predictions {
        heatmaps: Vec::new(),
        gaze: Vec::new(),
        attention: Vec::new(),
        inout: Vec::new(),
        cones: Vec::new(),
    };
    for p in parts {
        out.heatmaps.extend(p.heatmaps);
        out.gaze.extend(p.gaze);
        out.attention.extend(p.attention);
        out.inout.extend(p.inout);
        out.cones.extend(p.cones);
    }
    Ok(out)
}

pub fn predict<T: Element>(model: &GazeModel<T>, samples: &[SceneSample]) -> Result<Predictions> {
    predict_with(model, samples, |_| DropoutPlan::none())
}

fn keyed(order: &[ModalityId], w: &[f64]) -> BTreeMap<String, f64> {
    order.iter().zip(w).map(|(m, &v)| (m.name().to_string(), v)).collect()
}

/// Evaluates clean inputs and returns the report and the per-sample records.
pub fn evaluate<T: Element>(model: &GazeModel<T>, samples: &[SceneSample]) -> Result<(EvalReport, Vec<SampleRecord>)> {
    if samples.is_empty() {
        return Err(GazeError::Metric("empty evaluation set".into()));
    }
    let cfg = &model.config;
    let hr = cfg.model.heatmap_resolution;
    let radius = cfg.binarization_radius();
    let hash = cfg.hash_hex();
    let order = model.modalities();
    let preds = predict(model, samples)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut angle_sum = 0.0;
    for (k, s) in samples.iter().enumerate() {
        let (p, m) = score_heatmap(&preds.heatmaps[k], hr, hr, s, radius)?;
        let g = preds.gaze[k];
        if let Ok(gv) = GazeVector2D::normalized(g) {
            angle_sum += gv.angle_to(&s.oracle_gaze_dir).to_degrees();
        } else {
            angle_sum += 90.0;
        }
        records.push(SampleRecord {
            sample_id: s.sample_id,
            config_hash: hash.clone(),
            p_gaze: p,
            gaze_dir: g,
            in_frame: s.in_frame,
            auc: m.auc,
            min_dist: m.min_dist,
            avg_dist: m.avg_dist,
            attention: preds.attention[k].as_ref().map(|w| keyed(&order, w)),
            inout: preds.inout[k],
        });
    }
    let metrics = aggregate(&records.iter().map(SampleRecord::metrics).collect::<Vec<_>>())?;
    let attention = model.fusion().map(|_| {
        let mut mean = BTreeMap::new();
        for m in &order {
            let sum: f64 = records
                .iter()
                .map(|r| r.attention.as_ref().expect("fused")[m.name()])
                .sum();
            mean.insert(m.name().to_string(), sum / records.len() as f64);
        }
        mean
    });
    let report = EvalReport {
        variant: cfg.variant.name().to_string(),
        config_hash: hash,
        metrics,
        binarization_radius: radius,
        ap_interpolation: "step".into(),
        attention,
        gaze_angle_deg: angle_sum / samples.len() as f64,
    };
    Ok((report, records))
}

pub fn write_dump<W: Write>(records: &[SampleRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean attention weight of one modality with and without noise
/// substitution of that modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub modality: ModalityId,
    pub clean: f64,
    pub noised: f64,
}

/// For each active modality, compares its mean weight on clean batches with
/// its mean weight on the same batches when only it is replaced by noise.
pub fn attention_probe<T: Element>(model: &GazeModel<T>, samples: &[SceneSample], seed: u64) -> Result<Vec<AttentionProbe>> {
    if model.fusion().is_none() {
        return Err(GazeError::Config(format!(
            "variant {} has no attention module",
            model.config.variant
        )));
    }
    let order = model.modalities();
    let clean = predict(model, samples)?;
    let mean_col = |p: &Predictions, k: usize| {
        p.attention.iter().map(|w| w.as_ref().expect("fused")[k]).sum::<f64>() / p.attention.len() as f64
    };
    let mut out = Vec::new();
    for (k, &m) in order.iter().enumerate() {
        let noised = predict_with(model, samples, |b| {
            DropoutPlan::dropping(&[m], seed.wrapping_add(b as u64))
        })?;
        out.push(AttentionProbe {
            modality: m,
            clean: mean_col(&clean, k),
            noised: mean_col(&noised, k),
        });
    }
    Ok(out)
}
