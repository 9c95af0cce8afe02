//! Heatmap decoder, in/out head and the training losses.

use gazecast_tensor::{Element, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{HeatmapActivation, LossConfig, UpsampleMode};
use crate::error::{GazeError, Result};
use crate::fusion::EmbedNet;
use crate::geometry::{pixel_center, Point};
use crate::nn::{Conv2d, Linear};

/// Initial output level of the sigmoid decoder, about the mean of a
/// ground-truth heatmap.
pub const HEATMAP_PRIOR: f64 = 0.01;

/// ℛ: parameter-free upsampling then 3×3 convs d → d/2 → d/4 → 1.
#[derive(Debug, Clone)]
pub struct HeatmapDecoder {
    convs: Vec<Conv2d>,
    factor: usize,
    upsample: UpsampleMode,
    activation: HeatmapActivation,
}

impl HeatmapDecoder {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        channels: usize,
        factor: usize,
        upsample: UpsampleMode,
        activation: HeatmapActivation,
        seed: u64,
    ) -> Self {
        let widths = [channels, channels / 2, channels / 4, 1];
        let convs: Vec<Conv2d> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Conv2d::same(store, &format!("heatmap.conv{i}"), w[0], w[1], seed))
            .collect();
        if activation == HeatmapActivation::Sigmoid {
            let p = HEATMAP_PRIOR;
            store.get_mut(convs[2].bias).data_mut()[0] = T::lit((p / (1.0 - p)).ln());
        }
        Self {
            convs,
            factor,
            upsample,
            activation,
        }
    }

    /// `[N, d, h, w]` → `[N, 1, h·f, w·f]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let mut x = match self.upsample {
            UpsampleMode::Nearest => tape.upsample_nearest(f, self.factor)?,
            UpsampleMode::Bilinear => tape.upsample_bilinear(f, self.factor)?,
        };
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(tape, store, x)?;
            if i < last {
                x = tape.relu(x);
            }
        }
        Ok(match self.activation {
            HeatmapActivation::Sigmoid => tape.sigmoid(x),
            HeatmapActivation::Linear => x,
        })
    }
}

/// Row-major index of the first maximum.
pub fn argmax_index<T: Element>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Pixel-center coordinates of the first maximum of an `h × w` map.
pub fn argmax_point<T: Element>(values: &[T], h: usize, w: usize) -> Point {
    assert_eq!(values.len(), h * w, "heatmap size");
    let i = argmax_index(values);
    pixel_center(i / w, i % w, h, w)
}

/// 𝒪: scene embedding of F, concatenated with e_gaze, two linear layers,
/// sigmoid.
#[derive(Debug, Clone)]
pub struct InOutHead {
    scene: EmbedNet,
    fc0: Linear,
    fc1: Linear,
}

impl InOutHead {
    pub fn new<T: Element>(store: &mut ParamStore<T>, channels: usize, embedding: usize, seed: u64) -> Self {
        Self {
            scene: EmbedNet::new(store, "inout.scene", channels, embedding, seed),
            fc0: Linear::new(store, "inout.fc0", 2 * embedding, embedding, seed),
            fc1: Linear::new(store, "inout.fc1", embedding, 1, seed),
        }
    }

    /// Returns `[N]` probabilities.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        fused: Var,
        gaze_embedding: Var,
    ) -> Result<Var> {
        let e_scene = self.scene.forward(tape, store, fused)?;
        let e = tape.concat(&[e_scene, gaze_embedding], 1)?;
        let h = self.fc0.forward(tape, store, e)?;
        let h = tape.relu(h);
        let logit = self.fc1.forward(tape, store, h)?;
        let n = tape.shape(logit)[0];
        let logit = tape.reshape(logit, &[n])?;
        Ok(tape.sigmoid(logit))
    }
}

/// Pixel-wise mean squared error over the samples whose weight is nonzero.
pub fn loss_gaze<T: Element>(tape: &mut Tape<T>, pred: Var, gt: Var, in_frame: &[f64]) -> Result<Var> {
    if tape.shape(pred) != tape.shape(gt) {
        return Err(GazeError::Domain(format!(
            "heatmap {:?} vs ground truth {:?}",
            tape.shape(pred),
            tape.shape(gt)
        )));
    }
    Ok(tape.weighted_mse(pred, gt, in_frame)?)
}

/// Mean of `1 − cos(g_pred, g_gt)` over samples with a ground-truth direction.
pub fn loss_dir<T: Element>(tape: &mut Tape<T>, gaze: Var, gt: &[Option<[f64; 2]>]) -> Result<Var> {
    let n = gt.len();
    if tape.shape(gaze) != [n, 2] {
        return Err(GazeError::Domain(format!(
            "gaze {:?} vs {n} ground-truth directions",
            tape.shape(gaze)
        )));
    }
    let valid = gt.iter().filter(|g| g.is_some()).count();
    if valid == 0 {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let rows = Tensor::from_fn([n, 2], |i| {
        T::lit(gt[i / 2].map_or(if i % 2 == 0 { 1.0 } else { 0.0 }, |g| g[i % 2]))
    });
    let mask = Tensor::from_fn([n], |i| if gt[i].is_some() { T::one() } else { T::zero() });
    let g = tape.constant(rows);
    let mask = tape.constant(mask);
    let cos = tape.cosine_similarity(gaze, g)?;
    let kept = tape.mul(cos, mask)?;
    let s = tape.sum(kept);
    let mean_cos = tape.scale(s, 1.0 / valid as f64);
    let neg = tape.scale(mean_cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Binary cross-entropy with probability clamping.
pub fn loss_io<T: Element>(tape: &mut Tape<T>, prob: Var, labels: &[f64], eps: f64) -> Result<Var> {
    Ok(tape.bce(prob, labels, eps)?)
}

/// Batch mean of the summed attention weights of dropped modalities.
/// `dropped` holds column indices into `weights: [N, M]`.
pub fn loss_att<T: Element>(tape: &mut Tape<T>, weights: Var, dropped: &[usize]) -> Result<Var> {
    if dropped.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let mut cols = Vec::new();
    for &m in dropped {
        cols.push(tape.slice(weights, 1, m, 1)?);
    }
    let s = tape.add_n(&cols)?;
    Ok(tape.mean(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gaze: f64,
    pub dir: f64,
    pub io: f64,
    pub att: f64,
}

impl From<&LossConfig> for LossWeights {
    fn from(c: &LossConfig) -> Self {
        Self {
            gaze: c.lambda_gaze,
            dir: c.lambda_dir,
            io: c.lambda_io,
            att: c.lambda_att,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        (&LossConfig::default()).into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gaze: f64,
    pub dir: f64,
    pub io: f64,
    pub att: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `((λg·Lg + λd·Ld) + λio·Lio) + λa·La`, the same association the
    /// tape uses.
    pub fn combine(w: LossWeights, gaze: f64, dir: f64, io: f64, att: f64) -> Self {
        let total = ((w.gaze * gaze + w.dir * dir) + w.io * io) + w.att * att;
        Self {
            gaze,
            dir,
            io,
            att,
            total,
            weights: w,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.gaze, self.dir, self.io, self.att, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Per-term losses recorded on a tape.
pub struct LossVars {
    pub gaze: Var,
    pub dir: Var,
    pub io: Var,
    pub att: Var,
}

/// Records the weighted total and returns it with its breakdown.
pub fn total_loss<T: Element>(tape: &mut Tape<T>, parts: &LossVars, w: LossWeights) -> Result<(Var, LossBreakdown)> {
    let g = tape.scale(parts.gaze, w.gaze);
    let d = tape.scale(parts.dir, w.dir);
    let io = tape.scale(parts.io, w.io);
    let a = tape.scale(parts.att, w.att);
    let t = tape.add(g, d)?;
    let t = tape.add(t, io)?;
    let total = tape.add(t, a)?;
    let item = |v: Var| tape.value(v).item().as_f64();
    let bd = LossBreakdown::combine(w, item(parts.gaze), item(parts.dir), item(parts.io), item(parts.att));
    Ok((total, bd))
}
