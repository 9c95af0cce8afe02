//! Run configuration: TOML with dotted keys, variant resolution and hashing.
//!
//! ```toml
//! variant = "multimodal"
//! dtype = "f32"
//! seed = 7
//! model.embedding_size = 32
//! train.lr = 1e-3
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use gazecast_tensor::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GazeError, Result};

/// Input modalities in their fixed concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityId {
    Raw,
    Depth,
    Pose,
}

impl ModalityId {
    pub const ALL: [ModalityId; 3] = [ModalityId::Raw, ModalityId::Depth, ModalityId::Pose];

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Raw => "raw",
            ModalityId::Depth => "depth",
            ModalityId::Pose => "pose",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityId {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        ModalityId::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GazeError::Domain(format!("unknown modality `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Multimodal,
    ImageOnly,
    DepthOnly,
    PoseOnly,
    Privacy,
    LateFusion,
    NoSkip,
    NoModrop,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Multimodal,
        Variant::ImageOnly,
        Variant::DepthOnly,
        Variant::PoseOnly,
        Variant::Privacy,
        Variant::LateFusion,
        Variant::NoSkip,
        Variant::NoModrop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Multimodal => "multimodal",
            Variant::ImageOnly => "image_only",
            Variant::DepthOnly => "depth_only",
            Variant::PoseOnly => "pose_only",
            Variant::Privacy => "privacy",
            Variant::LateFusion => "late_fusion",
            Variant::NoSkip => "no_skip",
            Variant::NoModrop => "no_modrop",
        }
    }

    pub fn modalities(self) -> Vec<ModalityId> {
        use ModalityId::*;
        match self {
            Variant::Multimodal | Variant::LateFusion | Variant::NoModrop => vec![Raw, Depth, Pose],
            Variant::ImageOnly | Variant::NoSkip => vec![Raw],
            Variant::DepthOnly => vec![Depth],
            Variant::PoseOnly => vec![Pose],
            Variant::Privacy => vec![Depth, Pose],
        }
    }

    /// Modality whose head crop feeds the gaze subnetwork.
    pub fn gaze_source(self) -> ModalityId {
        match self {
            Variant::Privacy => ModalityId::Pose,
            _ => ModalityId::Raw,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GazeError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GazeError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapActivation {
    Sigmoid,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F64 => DType::F64,
            Precision::F32 => DType::F32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub heatmap_resolution: usize,
    /// Encoder stage widths; each stage halves the resolution.
    pub widths: Vec<usize>,
    /// `d_m`, channels of every per-modality feature map.
    pub feature_channels: usize,
    /// `d`, channels of the fused map.
    pub fused_channels: usize,
    pub embedding_size: usize,
    pub crop_resolution: usize,
    pub gaze_widths: Vec<usize>,
    /// Cone aperture in radians.
    pub aperture: f64,
    /// `None` means "as the variant implies".
    pub skip_connections: Option<bool>,
    pub upsample: UpsampleMode,
    pub heatmap_activation: HeatmapActivation,
    pub inout_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_resolution: 64,
            heatmap_resolution: 64,
            widths: vec![16, 32, 64, 128],
            feature_channels: 32,
            fused_channels: 32,
            embedding_size: 64,
            crop_resolution: 32,
            gaze_widths: vec![16, 32, 64],
            aperture: std::f64::consts::PI,
            skip_connections: None,
            upsample: UpsampleMode::Nearest,
            heatmap_activation: HeatmapActivation::Sigmoid,
            inout_head: false,
        }
    }
}

impl ModelConfig {
    pub fn feature_resolution(&self) -> usize {
        self.input_resolution / 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_gaze: f64,
    pub lambda_dir: f64,
    pub lambda_io: f64,
    pub lambda_att: f64,
    /// Ground-truth Gaussian standard deviation in heatmap pixels.
    pub sigma: f64,
    pub bce_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_gaze: 100.0,
            lambda_dir: 0.1,
            lambda_io: 1.0,
            lambda_att: 1.0,
            sigma: 3.0,
            bce_eps: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` means "as the variant implies" (0.3 with several modalities).
    pub p_drop: Option<f64>,
    /// Joint gradient L2 norm cap applied before each optimizer step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 10,
            batch_size: 16,
            p_drop: None,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// AUC positives lie within this many heatmap pixels of a gaze point.
    /// `None` means `3 · loss.sigma`.
    pub binarization_radius: Option<f64>,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            binarization_radius: None,
            batch_size: 32,
        }
    }
}

pub const DEFAULT_P_DROP: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub dtype: Precision,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Multimodal,
            dtype: Precision::F64,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| GazeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GazeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn modalities(&self) -> Vec<ModalityId> {
        self.variant.modalities()
    }

    pub fn is_fused(&self) -> bool {
        self.modalities().len() > 1
    }

    pub fn late_fusion(&self) -> bool {
        self.variant == Variant::LateFusion
    }

    pub fn skip_connections(&self) -> bool {
        self.model
            .skip_connections
            .unwrap_or(self.variant != Variant::NoSkip)
    }

    pub fn p_drop(&self) -> f64 {
        if !self.is_fused() || self.variant == Variant::NoModrop {
            0.0
        } else {
            self.train.p_drop.unwrap_or(DEFAULT_P_DROP)
        }
    }

    pub fn binarization_radius(&self) -> f64 {
        self.eval.binarization_radius.unwrap_or(3.0 * self.loss.sigma)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GazeError::Config(m));
        let m = &self.model;
        let stages = m.widths.len();
        if stages < 2 {
            return bad("model.widths needs at least two stages".into());
        }
        if stages > 16 || m.input_resolution % (1 << stages) != 0 {
            return bad(format!(
                "model.input_resolution {} is not divisible by 2^{stages}",
                m.input_resolution
            ));
        }
        if m.input_resolution < 32 {
            return bad("model.input_resolution must be at least 32".into());
        }
        if m.heatmap_resolution % m.feature_resolution() != 0 {
            return bad(format!(
                "model.heatmap_resolution {} is not a multiple of the feature resolution {}",
                m.heatmap_resolution,
                m.feature_resolution()
            ));
        }
        if m.feature_resolution() < 8 {
            return bad("feature maps must be at least 8x8 for the embedding networks".into());
        }
        if m.gaze_widths.is_empty() || m.crop_resolution % (1 << m.gaze_widths.len()) != 0 {
            return bad("model.crop_resolution must be divisible by 2^len(gaze_widths)".into());
        }
        let head_channels = if self.is_fused() {
            m.fused_channels
        } else {
            m.feature_channels
        };
        if head_channels < 4 || m.embedding_size == 0 || m.widths.contains(&0) {
            return bad("channel widths too small".into());
        }
        if !(m.aperture > 0.0 && m.aperture <= 2.0 * std::f64::consts::PI) {
            return bad("model.aperture must lie in (0, 2π]".into());
        }
        if self.variant == Variant::NoSkip && m.skip_connections == Some(true) {
            return bad("variant no_skip contradicts model.skip_connections = true".into());
        }
        if let Some(p) = self.train.p_drop {
            if !(0.0..1.0).contains(&p) {
                return bad("train.p_drop must lie in [0, 1)".into());
            }
            if p > 0.0 && self.variant == Variant::NoModrop {
                return bad("variant no_modrop contradicts train.p_drop > 0".into());
            }
            if p > 0.0 && !self.is_fused() {
                return bad(format!(
                    "modality dropout needs several modalities; variant {} has one",
                    self.variant
                ));
            }
        }
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.train.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("train.grad_clip must be positive".into());
        }
        if !(self.train.lr > 0.0) || self.loss.sigma <= 0.0 {
            return bad("train.lr and loss.sigma must be positive".into());
        }
        Ok(())
    }

    /// Canonical JSON of the configuration with variant defaults applied.
    pub fn resolved_json(&self) -> String {
        let mut r = self.clone();
        r.model.skip_connections = Some(self.skip_connections());
        r.train.p_drop = Some(self.p_drop());
        r.eval.binarization_radius = Some(self.binarization_radius());
        serde_json::to_string(&r).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.resolved_json().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.hash())
    }

    /// The small f32 configuration used by the experiments.
    pub fn fast(variant: Variant) -> Self {
        let mut c = Self::for_variant(variant);
        c.dtype = Precision::F32;
        c.model.widths = vec![8, 16, 32, 64];
        c.model.feature_channels = 16;
        c.model.fused_channels = 16;
        c.model.embedding_size = 32;
        c.model.gaze_widths = vec![8, 16, 32];
        c.train.lr = 1e-3;
        c.train.grad_clip = Some(5.0);
        c
    }
}
