//! Attention fusion of per-modality feature maps and modality dropout.

use std::collections::BTreeSet;

use gazecast_tensor::{Element, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{ModalityId, Variant};
use crate::error::{GazeError, Result};
use crate::nn::{Conv2d, Linear};

/// 𝒜: three stride-2 convs at constant width, global max pool, then a
/// linear projection to the embedding size.
#[derive(Debug, Clone)]
pub struct EmbedNet {
    convs: Vec<Conv2d>,
    proj: Linear,
}

impl EmbedNet {
    pub fn new<T: Element>(store: &mut ParamStore<T>, prefix: &str, channels: usize, embedding: usize, seed: u64) -> Self {
        let convs = (0..3)
            .map(|i| Conv2d::down(store, &format!("{prefix}.conv{i}"), channels, channels, seed))
            .collect();
        Self {
            convs,
            proj: Linear::new(store, &format!("{prefix}.proj"), channels, embedding, seed),
        }
    }

    /// `[N, d, h, w]` → `[N, embedding]`.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 4 || s[2] < 8 || s[3] < 8 {
            return Err(GazeError::Domain(format!(
                "embedding network needs at least 8x8 maps for three stride-2 stages, got {s:?}"
            )));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward_relu(tape, store, h)?;
        }
        let pooled = tape.global_max_pool(h)?;
        self.proj.forward(tape, store, pooled)
    }
}

pub const ATTENTION_INIT_GAIN: f64 = 0.01;
pub const EMBED_NORM_EPS: f64 = 1e-6;

/// Per-modality transforms and embeddings plus the shared projection P.
#[derive(Debug, Clone)]
pub struct AttentionFusion {
    modalities: Vec<ModalityId>,
    transforms: Vec<Conv2d>,
    embeds: Vec<EmbedNet>,
    projection: Linear,
}

pub struct FusionOutput {
    /// `[N, d, h, w]`.
    pub fused: Var,
    /// `[N, M]` softmax weights, columns in modality order.
    pub weights: Var,
    pub embeddings: Vec<Var>,
    pub transformed: Vec<Var>,
}

impl AttentionFusion {
    /// `modalities` must already be in the fixed (raw, depth, pose) order.
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        modalities: &[ModalityId],
        feature_channels: usize,
        fused_channels: usize,
        embedding: usize,
        seed: u64,
    ) -> Self {
        let mut transforms = Vec::new();
        let mut embeds = Vec::new();
        for m in modalities {
            transforms.push(Conv2d::pointwise(
                store,
                &format!("fusion.transform.{m}"),
                feature_channels,
                fused_channels,
                seed,
            ));
        }
        for m in modalities {
            embeds.push(EmbedNet::new(
                store,
                &format!("fusion.embed.{m}"),
                fused_channels,
                embedding,
                seed,
            ));
        }
        // near-uniform weights at start; full-scale logits saturate the softmax
        let projection = Linear::scaled(
            store,
            "fusion.attention",
            embedding * modalities.len(),
            modalities.len(),
            ATTENTION_INIT_GAIN,
            seed,
        );
        Self {
            modalities: modalities.to_vec(),
            transforms,
            embeds,
            projection,
        }
    }

    pub fn modalities(&self) -> &[ModalityId] {
        &self.modalities
    }

    fn slot(&self, m: ModalityId) -> Result<usize> {
        self.modalities
            .iter()
            .position(|&x| x == m)
            .ok_or_else(|| GazeError::Domain(format!("modality {m} is not part of this fusion module")))
    }

    /// T_m = 1×1 conv of F_m.
    pub fn transform_modality<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        feature: Var,
        m: ModalityId,
    ) -> Result<Var> {
        let i = self.slot(m)?;
        self.transforms[i].forward(tape, store, feature)
    }

    pub fn embed_modality<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        transformed: Var,
        m: ModalityId,
    ) -> Result<Var> {
        let i = self.slot(m)?;
        self.embeds[i].forward(tape, store, transformed)
    }

    /// softmax(P([ê_raw, ê_depth, ê_pose])) along the modality axis, with each
    /// embedding scaled to unit length.
    pub fn attention_weights<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        embeddings: &[Var],
    ) -> Result<Var> {
        if embeddings.len() != self.modalities.len() {
            return Err(GazeError::Domain(format!(
                "{} embeddings for {} modalities",
                embeddings.len(),
                self.modalities.len()
            )));
        }
        let unit = embeddings
            .iter()
            .map(|&e| tape.normalize_rows_eps(e, EMBED_NORM_EPS))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let e = tape.concat(&unit, 1)?;
        let logits = self.projection.forward(tape, store, e)?;
        Ok(tape.softmax(logits, 1)?)
    }

    /// `features` holds one `[N, d_m, h, w]` map per modality, in order.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: &[Var]) -> Result<FusionOutput> {
        if features.len() != self.modalities.len() {
            return Err(GazeError::Domain(format!(
                "{} feature maps for {} modalities",
                features.len(),
                self.modalities.len()
            )));
        }
        let mut transformed = Vec::new();
        let mut embeddings = Vec::new();
        for (&m, &f) in self.modalities.iter().zip(features) {
            let t = self.transform_modality(tape, store, f, m)?;
            embeddings.push(self.embed_modality(tape, store, t, m)?);
            transformed.push(t);
        }
        let weights = self.attention_weights(tape, store, &embeddings)?;
        let fused = fuse(tape, &transformed, weights)?;
        Ok(FusionOutput {
            fused,
            weights,
            embeddings,
            transformed,
        })
    }
}

/// F = Σ_m w_m · T_m with `weights: [N, M]`.
pub fn fuse<T: Element>(tape: &mut Tape<T>, maps: &[Var], weights: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    if ws.len() != 2 || ws[1] != maps.len() || maps.is_empty() {
        return Err(GazeError::Domain(format!(
            "weights {ws:?} do not match {} modality maps",
            maps.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (m, &t) in maps.iter().enumerate() {
        let col = tape.slice(weights, 1, m, 1)?;
        let col = tape.reshape(col, &[ws[0]])?;
        let term = tape.scale_rows(t, col)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DropoutPlan {
    pub dropped: BTreeSet<ModalityId>,
    pub noise_seed: u64,
}

impl DropoutPlan {
    pub fn none() -> Self {
        Self {
            dropped: BTreeSet::new(),
            noise_seed: 0,
        }
    }

    pub fn dropping(ms: &[ModalityId], noise_seed: u64) -> Self {
        Self {
            dropped: ms.iter().copied().collect(),
            noise_seed,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.dropped.is_empty()
    }

    pub fn drops(&self, m: ModalityId) -> bool {
        self.dropped.contains(&m)
    }
}

/// With probability `p_drop`, drops a uniformly chosen nonempty strict
/// subset of `active`.
pub fn sample_dropout_plan<R: Rng>(active: &[ModalityId], p_drop: f64, rng: &mut R) -> Result<DropoutPlan> {
    if p_drop > 0.0 && active.len() < 2 {
        return Err(GazeError::Domain(format!(
            "modality dropout needs at least two active modalities, got {}",
            active.len()
        )));
    }
    let drop_now = p_drop > 0.0 && rng.gen::<f64>() < p_drop;
    let noise_seed = rng.gen::<u64>();
    if !drop_now {
        return Ok(DropoutPlan {
            dropped: BTreeSet::new(),
            noise_seed,
        });
    }
    // bitmasks 1 ..= 2^k − 2 are exactly the nonempty strict subsets
    let k = active.len();
    let mask = rng.gen_range(1..(1u32 << k) - 1);
    let dropped = active
        .iter()
        .enumerate()
        .filter(|(i, _)| mask & (1 << i) != 0)
        .map(|(_, &m)| m)
        .collect();
    Ok(DropoutPlan { dropped, noise_seed })
}

/// Uniform `[0, 1)` noise seeded by `(seed, m)`.
pub fn noise_image<T: Element>(shape: &[usize], seed: u64, m: ModalityId) -> Tensor<T> {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([m.index() as u8]);
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    // f32 draws stay below 1 in either precision
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen::<f32>() as f64))
}

/// Replaces the image with white noise when the plan drops `m`.
pub fn apply_dropout<T: Element>(image: &Tensor<T>, plan: &DropoutPlan, m: ModalityId) -> Tensor<T> {
    if plan.drops(m) {
        noise_image(image.shape(), plan.noise_seed, m)
    } else {
        image.clone()
    }
}

/// Downsamples cone and mask to the feature grid by average pooling and
/// appends them to `F_m`: `[N, d_m, h, w]` → `[N, d_m + 2, h, w]`.
pub fn late_fuse_inject<T: Element>(
    tape: &mut Tape<T>,
    variant: Variant,
    feature: Var,
    cone: Var,
    mask: Var,
) -> Result<Var> {
    if variant != Variant::LateFusion {
        return Err(GazeError::Config(format!(
            "late fusion injection used by the early-fusion variant {variant}"
        )));
    }
    let fs = tape.shape(feature).to_vec();
    let cs = tape.shape(cone).to_vec();
    if fs.len() != 4 || cs.len() != 4 || cs[2] % fs[2] != 0 || cs[2] / fs[2] != cs[3] / fs[3] {
        return Err(GazeError::Domain(format!(
            "cannot downsample {cs:?} onto feature map {fs:?}"
        )));
    }
    let k = cs[2] / fs[2];
    let c = tape.avg_pool(cone, k)?;
    let m = tape.avg_pool(mask, k)?;
    Ok(tape.concat(&[feature, c, m], 1)?)
}
