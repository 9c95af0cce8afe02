//! Gaze subnetwork and per-modality scene feature extractors.
//!
//! Every forward function works on a batch: images are `[N, C, H, W]`.

use gazecast_tensor::{Element, ParamStore, Tape, Var};

use crate::config::{ModalityId, RunConfig};
use crate::error::{GazeError, Result};
use crate::nn::{Conv2d, Linear};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_resolution: usize,
    pub widths: Vec<usize>,
    pub skip_connections: bool,
    pub feature_channels: usize,
    pub embedding_size: usize,
    /// Channels entering the extractor: 5 for early fusion, 3 for late.
    pub in_channels: usize,
}

impl EncoderConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            input_resolution: cfg.model.input_resolution,
            widths: cfg.model.widths.clone(),
            skip_connections: cfg.skip_connections(),
            feature_channels: cfg.model.feature_channels,
            embedding_size: cfg.model.embedding_size,
            in_channels: if cfg.late_fusion() { 3 } else { 5 },
        }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn feature_resolution(&self) -> usize {
        self.input_resolution / 4
    }
}

pub const DIRECTION_BIAS_INIT: f64 = 0.1;

/// 𝒢: head crop → unit gaze vector and gaze embedding.
#[derive(Debug, Clone)]
pub struct GazeSubnet {
    stages: Vec<Conv2d>,
    embed: Linear,
    direction: Linear,
    crop_resolution: usize,
}

pub struct GazeSubnetOutput {
    /// `[N, 2]`, unit rows.
    pub gaze: Var,
    /// `[N, embedding_size]`.
    pub embedding: Var,
}

impl GazeSubnet {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        widths: &[usize],
        embedding_size: usize,
        crop_resolution: usize,
        seed: u64,
    ) -> Self {
        let mut cin = 3;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::down(store, &format!("gaze.stage{i}"), cin, w, seed);
                cin = w;
                c
            })
            .collect();
        let direction = Linear::new(store, "gaze.direction", embedding_size, 2, seed);
        // a blank crop can zero the whole embedding; the bias then sets a default direction
        store.get_mut(direction.bias).data_mut()[0] = T::lit(DIRECTION_BIAS_INIT);
        Self {
            stages,
            embed: Linear::new(store, "gaze.embed", cin, embedding_size, seed),
            direction,
            crop_resolution,
        }
    }

    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        crop: Var,
    ) -> Result<GazeSubnetOutput> {
        match *tape.shape(crop) {
            [_, 3, h, w] if h == self.crop_resolution && w == self.crop_resolution => {}
            ref s => {
                return Err(GazeError::Domain(format!(
                    "gaze subnetwork expects [N, 3, {r}, {r}] crops, got {s:?}",
                    r = self.crop_resolution
                )))
            }
        }
        let mut x = crop;
        for s in &self.stages {
            x = s.forward_relu(tape, store, x)?;
        }
        let pooled = tape.global_max_pool(x)?;
        let e = self.embed.forward(tape, store, pooled)?;
        let embedding = tape.relu(e);
        let d = self.direction.forward(tape, store, embedding)?;
        let gaze = tape.normalize_rows(d)?;
        Ok(GazeSubnetOutput { gaze, embedding })
    }
}

/// ℱ_m: strided encoder plus an FPN-style decoder back to quarter resolution.
#[derive(Debug, Clone)]
pub struct SceneExtractor {
    pub modality: ModalityId,
    cfg: EncoderConfig,
    stages: Vec<Conv2d>,
    /// Lateral 1×1 convs keyed by encoder stage index.
    laterals: Vec<(usize, Conv2d)>,
    smooth: Conv2d,
}

impl SceneExtractor {
    pub fn new<T: Element>(store: &mut ParamStore<T>, m: ModalityId, cfg: &EncoderConfig, seed: u64) -> Self {
        let prefix = format!("scene.{}", m.name());
        let mut cin = cfg.in_channels;
        let mut stages = Vec::new();
        for (i, &w) in cfg.widths.iter().enumerate() {
            stages.push(Conv2d::down(store, &format!("{prefix}.enc.stage{i}"), cin, w, seed));
            cin = w;
        }
        // stage i has resolution input / 2^(i+1); stage 1 is at feature resolution
        let last = cfg.widths.len() - 1;
        let lateral_stages: Vec<usize> = if cfg.skip_connections {
            (1..=last).collect()
        } else {
            vec![last]
        };
        let laterals = lateral_stages
            .into_iter()
            .map(|i| {
                let c = Conv2d::pointwise(
                    store,
                    &format!("{prefix}.fpn.lateral{i}"),
                    cfg.widths[i],
                    cfg.feature_channels,
                    seed,
                );
                (i, c)
            })
            .collect();
        let smooth = Conv2d::same(
            store,
            &format!("{prefix}.fpn.smooth"),
            cfg.feature_channels,
            cfg.feature_channels,
            seed,
        );
        Self {
            modality: m,
            cfg: cfg.clone(),
            stages,
            laterals,
            smooth,
        }
    }

    /// `x: [N, in_channels, H, W]` → `F_m: [N, d_m, H/4, W/4]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let r = self.cfg.input_resolution;
        match *tape.shape(x) {
            [_, c, h, w] if c == self.cfg.in_channels && h == r && w == r => {}
            ref s => {
                return Err(GazeError::Domain(format!(
                    "{} extractor expects [N, {}, {r}, {r}], got {s:?}",
                    self.modality, self.cfg.in_channels
                )))
            }
        }
        let mut feats = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for s in &self.stages {
            h = s.forward_relu(tape, store, h)?;
            feats.push(h);
        }
        let (&(top_stage, ref top_conv), rest) = self.laterals.split_last().expect("one lateral");
        let mut top = top_conv.forward(tape, store, feats[top_stage])?;
        if self.cfg.skip_connections {
            for (i, conv) in rest.iter().rev() {
                let up = tape.upsample_nearest(top, 2)?;
                let lat = conv.forward(tape, store, feats[*i])?;
                top = tape.add(up, lat)?;
            }
        } else {
            top = tape.upsample_nearest(top, 1 << (top_stage - 1))?;
        }
        self.smooth.forward_relu(tape, store, top)
    }
}

/// Channel-wise `[modality(3), cone(1), mask(1)]`.
pub fn concat_modality_inputs<T: Element>(tape: &mut Tape<T>, image: Var, cone: Var, mask: Var) -> Result<Var> {
    let (si, sc, sm) = (tape.shape(image), tape.shape(cone), tape.shape(mask));
    let ok = si.len() == 4
        && sc.len() == 4
        && sm.len() == 4
        && si[1] == 3
        && sc[1] == 1
        && sm[1] == 1
        && si[0] == sc[0]
        && si[0] == sm[0]
        && si[2..] == sc[2..]
        && si[2..] == sm[2..];
    if !ok {
        return Err(GazeError::Domain(format!(
            "cannot concatenate image {si:?}, cone {sc:?} and mask {sm:?}"
        )));
    }
    Ok(tape.concat(&[image, cone, mask], 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazecast_tensor::Tensor;

    fn cfg(skips: bool) -> EncoderConfig {
        EncoderConfig {
            input_resolution: 32,
            widths: vec![4, 6, 8, 8],
            skip_connections: skips,
            feature_channels: 5,
            embedding_size: 6,
            in_channels: 5,
        }
    }

    #[test]
    fn extractor_shapes_match_with_and_without_skips() {
        for skips in [true, false] {
            let mut store = ParamStore::<f64>::new();
            let ex = SceneExtractor::new(&mut store, ModalityId::Depth, &cfg(skips), 1);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_fn([2, 5, 32, 32], |i| (i as f64 * 0.01).sin()));
            let f = ex.forward(&mut tape, &store, x).unwrap();
            assert_eq!(tape.shape(f), &[2, 5, 8, 8]);
        }
    }

    #[test]
    fn gaze_subnet_rejects_wrong_channels() {
        let mut store = ParamStore::<f64>::new();
        let g = GazeSubnet::new(&mut store, &[4, 4], 8, 16, 0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 1, 16, 16]));
        assert!(g.forward(&mut tape, &store, x).is_err());
    }
}
