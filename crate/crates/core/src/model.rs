//! The assembled architecture and batch preparation.

use gazecast_tensor::{Element, ParamStore, Tape, Tensor, Var};

use crate::config::{ModalityId, RunConfig};
use crate::data::{crop_head, SceneSample};
use crate::encoders::{concat_modality_inputs, EncoderConfig, GazeSubnet, SceneExtractor};
use crate::error::{GazeError, Result};
use crate::fusion::{late_fuse_inject, noise_image, AttentionFusion, DropoutPlan, FusionOutput};
use crate::geometry::{cone_on_tape, gt_gaze_direction, make_gt_heatmap, render_head_mask, Point};
use crate::heads::{
    loss_att, loss_dir, loss_gaze, loss_io, total_loss, HeatmapDecoder, InOutHead, LossBreakdown,
    LossVars, LossWeights,
};
use crate::nn::Conv2d;

/// Model inputs and targets for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch<T: Element> {
    pub len: usize,
    /// `[N, 3, H, W]` per active modality, in modality order.
    pub images: Vec<(ModalityId, Tensor<T>)>,
    /// `[N, 3, c, c]` head crops for the gaze subnetwork.
    pub crops: Tensor<T>,
    pub eyes: Vec<Point>,
    /// `[N, 1, H, W]`.
    pub masks: Tensor<T>,
    /// `[N, 1, h, w]`; zero maps for out-of-frame samples.
    pub gt_heatmaps: Tensor<T>,
    pub gt_dirs: Vec<Option<[f64; 2]>>,
    pub in_frame: Vec<f64>,
    pub gaze_points: Vec<Vec<Point>>,
    pub sample_ids: Vec<u64>,
}

fn stack_f32<T: Element>(parts: Vec<Tensor<f32>>) -> Result<Tensor<T>> {
    let refs: Vec<&Tensor<f32>> = parts.iter().collect();
    Ok(Tensor::stack(&refs)?.cast())
}

impl<T: Element> Batch<T> {
    /// Reads only the modalities the configuration uses.
    pub fn from_samples(samples: &[&SceneSample], cfg: &RunConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(GazeError::Data("empty batch".into()));
        }
        let m = &cfg.model;
        let res = m.input_resolution;
        for s in samples {
            if s.resolution() != res {
                return Err(GazeError::Data(format!(
                    "sample {} has resolution {} but the model expects {res}",
                    s.sample_id,
                    s.resolution()
                )));
            }
        }
        let mut images = Vec::new();
        for modality in cfg.modalities() {
            let parts = samples
                .iter()
                .map(|s| s.modality(modality).cloned())
                .collect::<Result<Vec<_>>>()?;
            images.push((modality, stack_f32(parts)?));
        }
        let source = cfg.variant.gaze_source();
        let crops = samples
            .iter()
            .map(|s| crop_head(s, source, m.crop_resolution))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<Tensor<f64>> = samples.iter().map(|s| render_head_mask(&s.head_box, res, res)).collect();
        let hr = m.heatmap_resolution;
        let mut heatmaps = Vec::new();
        let mut gt_dirs = Vec::new();
        for s in samples {
            if s.in_frame {
                heatmaps.push(make_gt_heatmap(&s.gaze_points, hr, hr, cfg.loss.sigma)?.map);
                gt_dirs.push(gt_gaze_direction(&s.eye, s.gaze_points[0]).ok().map(|g| g.0));
            } else {
                heatmaps.push(Tensor::zeros([1, hr, hr]));
                gt_dirs.push(None);
            }
        }
        let mask_refs: Vec<&Tensor<f64>> = masks.iter().collect();
        let hm_refs: Vec<&Tensor<f64>> = heatmaps.iter().collect();
        Ok(Self {
            len: samples.len(),
            images,
            crops: stack_f32(crops)?,
            eyes: samples.iter().map(|s| s.eye.point()).collect(),
            masks: Tensor::stack(&mask_refs)?.cast(),
            gt_heatmaps: Tensor::stack(&hm_refs)?.cast(),
            gt_dirs,
            in_frame: samples.iter().map(|s| if s.in_frame { 1.0 } else { 0.0 }).collect(),
            gaze_points: samples.iter().map(|s| s.gaze_points.clone()).collect(),
            sample_ids: samples.iter().map(|s| s.sample_id).collect(),
        })
    }

    pub fn image(&self, m: ModalityId) -> Option<&Tensor<T>> {
        self.images.iter().find(|(x, _)| *x == m).map(|(_, t)| t)
    }
}

/// Values recorded by one forward pass.
pub struct Forward {
    /// `[N, 1, h, w]`.
    pub heatmap: Var,
    /// `[N, 2]` unit gaze vectors.
    pub gaze: Var,
    pub gaze_embedding: Var,
    /// `[N, 1, H, W]`.
    pub cone: Var,
    /// Per-modality `F_m`, in modality order.
    pub features: Vec<Var>,
    pub fusion: Option<FusionOutput>,
    pub fused: Var,
    /// `[N]` in-frame probabilities.
    pub inout: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct GazeModel<T: Element> {
    pub config: RunConfig,
    pub store: ParamStore<T>,
    gaze: GazeSubnet,
    extractors: Vec<SceneExtractor>,
    late: Vec<Conv2d>,
    fusion: Option<AttentionFusion>,
    decoder: HeatmapDecoder,
    inout: Option<InOutHead>,
}

impl<T: Element> GazeModel<T> {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        if config.dtype.dtype() != T::DTYPE {
            return Err(GazeError::Config(format!(
                "configuration asks for {} but the model is built in {}",
                config.dtype.dtype(),
                T::DTYPE
            )));
        }
        let seed = config.seed;
        let m = &config.model;
        let mut store = ParamStore::new();
        let gaze = GazeSubnet::new(&mut store, &m.gaze_widths, m.embedding_size, m.crop_resolution, seed);
        let enc = EncoderConfig::from_run(config);
        let modalities = config.modalities();
        let extractors: Vec<SceneExtractor> = modalities
            .iter()
            .map(|&md| SceneExtractor::new(&mut store, md, &enc, seed))
            .collect();
        let late = if config.late_fusion() {
            modalities
                .iter()
                .map(|md| {
                    Conv2d::pointwise(
                        &mut store,
                        &format!("scene.{md}.late"),
                        m.feature_channels + 2,
                        m.feature_channels,
                        seed,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        let fusion = config.is_fused().then(|| {
            AttentionFusion::new(
                &mut store,
                &modalities,
                m.feature_channels,
                m.fused_channels,
                m.embedding_size,
                seed,
            )
        });
        let channels = if config.is_fused() {
            m.fused_channels
        } else {
            m.feature_channels
        };
        let decoder = HeatmapDecoder::new(
            &mut store,
            channels,
            m.heatmap_resolution / m.feature_resolution(),
            m.upsample,
            m.heatmap_activation,
            seed,
        );
        let inout = m
            .inout_head
            .then(|| InOutHead::new(&mut store, channels, m.embedding_size, seed));
        Ok(Self {
            config: config.clone(),
            store,
            gaze,
            extractors,
            late,
            fusion,
            decoder,
            inout,
        })
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.extractors.iter().map(|e| e.modality).collect()
    }

    pub fn fusion(&self) -> Option<&AttentionFusion> {
        self.fusion.as_ref()
    }

    fn check_plan(&self, plan: &DropoutPlan) -> Result<()> {
        let active = self.modalities();
        if let Some(m) = plan.dropped.iter().find(|m| !active.contains(m)) {
            return Err(GazeError::Domain(format!("dropout plan drops inactive modality {m}")));
        }
        if !plan.is_empty() && plan.dropped.len() >= active.len() {
            return Err(GazeError::Domain("dropout plan may not drop every modality".into()));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>, plan: &DropoutPlan) -> Result<Forward> {
        self.check_plan(plan)?;
        let store = &self.store;
        let cfg = &self.config.model;
        let crops = tape.constant(batch.crops.clone());
        let g = self.gaze.forward(tape, store, crops)?;
        let res = cfg.input_resolution;
        let cone = cone_on_tape(tape, g.gaze, &batch.eyes, res, res, cfg.aperture)?;
        let mask = tape.constant(batch.masks.clone());

        let mut features = Vec::new();
        for (k, ex) in self.extractors.iter().enumerate() {
            let m = ex.modality;
            let src = batch
                .image(m)
                .ok_or_else(|| GazeError::Data(format!("batch lacks modality {m}")))?;
            let img = if plan.drops(m) {
                noise_image(src.shape(), plan.noise_seed, m)
            } else {
                src.clone()
            };
            let img = tape.constant(img);
            let f = if self.late.is_empty() {
                let x = concat_modality_inputs(tape, img, cone, mask)?;
                ex.forward(tape, store, x)?
            } else {
                let f = ex.forward(tape, store, img)?;
                let inj = late_fuse_inject(tape, self.config.variant, f, cone, mask)?;
                self.late[k].forward(tape, store, inj)?
            };
            features.push(f);
        }

        let (fused, fusion) = match &self.fusion {
            Some(fu) => {
                let out = fu.forward(tape, store, &features)?;
                (out.fused, Some(out))
            }
            None => (features[0], None),
        };
        let heatmap = self.decoder.forward(tape, store, fused)?;
        let inout = match &self.inout {
            Some(h) => Some(h.forward(tape, store, fused, g.embedding)?),
            None => None,
        };
        Ok(Forward {
            heatmap,
            gaze: g.gaze,
            gaze_embedding: g.embedding,
            cone,
            features,
            fusion,
            fused,
            inout,
        })
    }

    /// Records the weighted training loss of a forward pass.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        fwd: &Forward,
        plan: &DropoutPlan,
    ) -> Result<(Var, LossBreakdown)> {
        let gt = tape.constant(batch.gt_heatmaps.clone());
        let gaze = loss_gaze(tape, fwd.heatmap, gt, &batch.in_frame)?;
        let dir = loss_dir(tape, fwd.gaze, &batch.gt_dirs)?;
        let io = match fwd.inout {
            Some(o) => loss_io(tape, o, &batch.in_frame, self.config.loss.bce_eps)?,
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        let att = match &fwd.fusion {
            Some(f) => {
                let order = self.modalities();
                let dropped: Vec<usize> = plan
                    .dropped
                    .iter()
                    .filter_map(|m| order.iter().position(|x| x == m))
                    .collect();
                loss_att(tape, f.weights, &dropped)?
            }
            None => tape.constant(Tensor::scalar(T::zero())),
        };
        let parts = LossVars { gaze, dir, io, att };
        total_loss(tape, &parts, LossWeights::from(&self.config.loss))
    }

    /// Forward plus loss on a fresh tape region.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        batch: &Batch<T>,
        plan: &DropoutPlan,
    ) -> Result<(Forward, Var, LossBreakdown)> {
        let fwd = self.forward(tape, batch, plan)?;
        let (loss, bd) = self.loss(tape, batch, &fwd, plan)?;
        Ok((fwd, loss, bd))
    }
}
