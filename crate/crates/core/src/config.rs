//! Training and distillation configuration.
//!
//! Field names double as config-file keys and CLI flag names, so renaming a
//! field is a breaking change for saved configs and checkpoints.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lower clamp on part scales, in normalized coordinates.
pub const SCALE_EPS: f64 = 1e-3;
/// Added to per-part mask mass before normalizing.
pub const MASS_EPS: f64 = 1e-8;
/// Negative slope of every LeakyReLU in the networks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// How a part scale is derived from the spread of its point group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleFormula {
    /// `sqrt(sum |x_i - mean|^2) / (n - 1)`.
    Typeset,
    /// `sqrt(sum |x_i - mean|^2 / (n - 1))`, the sample standard deviation.
    SampleStd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundPosition {
    /// `u_bg_pos ~ U([-1, 1]^2)`.
    Uniform,
    /// Horizontal coordinate uniform, vertical fixed at the image center.
    HorizontalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
}

/// Everything needed to build and train the generator/discriminator pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of parts `K`.
    pub k: usize,
    /// Points per part.
    pub n_per: usize,
    pub d_noise: usize,
    pub d_emb: usize,
    /// Hidden width of the three-layer MLPs.
    pub mlp_hidden: usize,
    /// Interior resolution at which each generator block runs.
    pub resolution_schedule: Vec<usize>,
    /// Output channels of each generator block.
    pub channel_widths: Vec<usize>,
    /// Hidden width of the SPADE modulation convolution.
    pub spade_hidden: usize,
    pub margin_px: usize,
    pub lambda_gp: f64,
    pub lambda_con: f64,
    pub lambda_area: f64,
    /// When set, the concentration weight is `c_con * k` and `lambda_con` is ignored.
    pub c_con: Option<f64>,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Number of generator updates.
    pub total_updates: usize,
    pub seed: u64,
    pub d_updates_per_g: usize,
    pub disable_points: bool,
    pub merged_background: bool,
    pub fixed_sigma: Option<f64>,
    pub disable_con: bool,
    pub disable_area: bool,
    pub disable_gp: bool,
    pub background_position: BackgroundPosition,
    pub scale_formula: ScaleFormula,
    pub interpolation: Interpolation,
    pub activation: Activation,
    /// Channel widths of the strided discriminator stages.
    pub disc_widths: Vec<usize>,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub sample_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let preset = DatasetPreset::CelebaWild;
        Self {
            k: preset.parts(),
            n_per: 4,
            d_noise: 256,
            d_emb: 256,
            mlp_hidden: 256,
            resolution_schedule: vec![32, 32, 64, 128],
            channel_widths: vec![256, 128, 64, 32],
            spade_hidden: 128,
            margin_px: 10,
            lambda_gp: 10.0,
            lambda_con: preset.lambda_con(),
            lambda_area: preset.lambda_area(),
            c_con: None,
            lr_g: 1e-4,
            lr_d: 4e-4,
            beta1: 0.5,
            beta2: 0.9,
            batch_size: 16,
            total_updates: 30_000,
            seed: 0,
            d_updates_per_g: 1,
            disable_points: false,
            merged_background: false,
            fixed_sigma: None,
            disable_con: false,
            disable_area: false,
            disable_gp: false,
            background_position: BackgroundPosition::Uniform,
            scale_formula: ScaleFormula::Typeset,
            interpolation: Interpolation::Bilinear,
            activation: Activation::LeakyRelu,
            disc_widths: vec![64, 128, 256, 512],
            log_every: 50,
            checkpoint_every: 5_000,
            sample_every: 1_000,
        }
    }
}

impl TrainConfig {
    /// Desk-scale configuration for the synthetic benchmark: 64x64 images, three parts.
    pub fn toy() -> Self {
        Self {
            k: 3,
            d_noise: 64,
            d_emb: 64,
            mlp_hidden: 64,
            resolution_schedule: vec![16, 16, 32, 64],
            channel_widths: vec![64, 64, 32, 32],
            spade_hidden: 32,
            c_con: Some(1.25),
            total_updates: 5_000,
            disc_widths: vec![32, 64, 128, 128],
            ..Self::default()
        }
    }

    /// [`TrainConfig::toy`] at half resolution (32x32 images), for CPU-only runs.
    pub fn toy_half() -> Self {
        Self {
            resolution_schedule: vec![8, 8, 16, 32],
            channel_widths: vec![48, 48, 32, 24],
            disc_widths: vec![32, 64, 96, 128],
            ..Self::toy()
        }
    }

    /// Small network used by the self-checks; fast enough for thousands of forward passes.
    pub fn tiny() -> Self {
        Self {
            k: 3,
            d_noise: 16,
            d_emb: 16,
            mlp_hidden: 16,
            resolution_schedule: vec![8, 8, 16, 32],
            channel_widths: vec![16, 16, 8, 8],
            spade_hidden: 8,
            margin_px: 10,
            batch_size: 4,
            total_updates: 100,
            disc_widths: vec![8, 16, 16, 16],
            ..Self::default()
        }
    }

    pub fn with_preset(preset: DatasetPreset) -> Self {
        Self {
            k: preset.parts(),
            lambda_con: preset.lambda_con(),
            lambda_area: preset.lambda_area(),
            background_position: if preset == DatasetPreset::Taichi {
                BackgroundPosition::HorizontalOnly
            } else {
                BackgroundPosition::Uniform
            },
            ..Self::default()
        }
    }

    /// Final interior resolution (images and masks are square).
    pub fn image_size(&self) -> usize {
        *self.resolution_schedule.last().expect("validated schedule is non-empty")
    }

    /// Concentration weight actually used in the generator objective.
    pub fn effective_lambda_con(&self) -> f64 {
        if self.disable_con || self.disable_points {
            return 0.0;
        }
        match self.c_con {
            Some(c) => lambda_con_for_parts(c, self.k),
            None => self.lambda_con,
        }
    }

    pub fn effective_lambda_area(&self) -> f64 {
        if self.disable_area || self.disable_points {
            0.0
        } else {
            self.lambda_area
        }
    }

    pub fn effective_lambda_gp(&self) -> f64 {
        if self.disable_gp {
            0.0
        } else {
            self.lambda_gp
        }
    }

    /// Checks ranges and flag consistency. Returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        if self.k < 1 {
            return Err(Error::config("k", "need at least one part"));
        }
        if self.n_per < 2 {
            return Err(Error::config("n_per", "need at least two points per part"));
        }
        if self.n_per <= 3 {
            warnings.push(format!(
                "n_per = {} is prone to collapse; 4 or more points per part is more stable",
                self.n_per
            ));
        }
        for (key, v) in [("d_noise", self.d_noise), ("mlp_hidden", self.mlp_hidden)] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.d_emb == 0 || self.d_emb % 2 != 0 {
            return Err(Error::config("d_emb", "must be positive and even (sin/cos halves)"));
        }
        if self.resolution_schedule.is_empty() {
            return Err(Error::config("resolution_schedule", "must not be empty"));
        }
        if self.resolution_schedule[0] < 4 {
            return Err(Error::config("resolution_schedule", "resolutions must be at least 4"));
        }
        for pair in self.resolution_schedule.windows(2) {
            if pair[1] != pair[0] && pair[1] != 2 * pair[0] {
                return Err(Error::config(
                    "resolution_schedule",
                    format!("each step must keep or double the resolution, got {} -> {}", pair[0], pair[1]),
                ));
            }
        }
        if self.channel_widths.len() != self.resolution_schedule.len() {
            return Err(Error::config(
                "channel_widths",
                format!(
                    "{} widths for {} blocks",
                    self.channel_widths.len(),
                    self.resolution_schedule.len()
                ),
            ));
        }
        if self.channel_widths.iter().any(|&w| w == 0) || self.spade_hidden == 0 {
            return Err(Error::config("channel_widths", "widths must be positive"));
        }
        for (key, v) in [
            ("lambda_gp", self.lambda_gp),
            ("lambda_con", self.lambda_con),
            ("lambda_area", self.lambda_area),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        if let Some(c) = self.c_con {
            if !(c >= 0.0) || !c.is_finite() {
                return Err(Error::config("c_con", "must be finite and non-negative"));
            }
        }
        for (key, v) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be finite and non-negative"));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.d_updates_per_g == 0 {
            return Err(Error::config("d_updates_per_g", "must be positive"));
        }
        if self.disc_widths.is_empty() || self.disc_widths.iter().any(|&w| w == 0) {
            return Err(Error::config("disc_widths", "need at least one positive width"));
        }
        let downsample = 1usize << self.disc_widths.len();
        if self.image_size() % downsample != 0 {
            return Err(Error::config(
                "disc_widths",
                format!("{} stride-2 stages do not divide image size {}", self.disc_widths.len(), self.image_size()),
            ));
        }
        if let Some(sigma) = self.fixed_sigma {
            if !(sigma >= SCALE_EPS) || !sigma.is_finite() {
                return Err(Error::config("fixed_sigma", format!("must be at least {SCALE_EPS}")));
            }
            if self.disable_points {
                return Err(Error::config(
                    "fixed_sigma",
                    "a fixed part scale has no effect when points are disabled",
                ));
            }
        }
        if self.disable_points && self.scale_formula != ScaleFormula::Typeset {
            return Err(Error::config("scale_formula", "no part scales exist when points are disabled"));
        }
        Ok(warnings)
    }

    /// Stable hash of the serialized configuration.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Parses a flat TOML document; unknown keys are rejected and reported by name.
    pub fn from_toml(text: &str) -> Result<Self> {
        parse_toml(text)
    }
}

/// `lambda_con(K) = C_con * K`.
pub fn lambda_con_for_parts(c_con: f64, k: usize) -> f64 {
    c_con * k as f64
}

/// Per-dataset coefficients used for the main experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    CelebaWild,
    Taichi,
    Cub,
    Flowers,
}

impl DatasetPreset {
    pub const ALL: [DatasetPreset; 4] =
        [DatasetPreset::CelebaWild, DatasetPreset::Taichi, DatasetPreset::Cub, DatasetPreset::Flowers];

    pub fn lambda_con(self) -> f64 {
        match self {
            DatasetPreset::CelebaWild | DatasetPreset::Cub => 10.0,
            DatasetPreset::Taichi | DatasetPreset::Flowers => 30.0,
        }
    }

    pub fn lambda_area(self) -> f64 {
        1.0
    }

    pub fn c_con(self) -> f64 {
        match self {
            DatasetPreset::CelebaWild | DatasetPreset::Cub => 1.25,
            DatasetPreset::Taichi => 3.0,
            DatasetPreset::Flowers => 3.75,
        }
    }

    /// Number of parts used with this dataset.
    pub fn parts(self) -> usize {
        match self {
            DatasetPreset::Taichi => 10,
            _ => 8,
        }
    }

    /// Average part scale of a trained model, used by the fixed-scale ablation.
    pub fn fixed_sigma(self) -> f64 {
        match self {
            DatasetPreset::CelebaWild => 0.00725,
            DatasetPreset::Taichi => 0.010,
            DatasetPreset::Cub => 0.0016,
            DatasetPreset::Flowers => 0.0065,
        }
    }
}

/// Settings for distilling generated pairs into a segmentation network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// Base channel width of the encoder.
    pub width: usize,
    /// Draw fresh generator samples every iteration instead of reading a fixed archive.
    pub streaming: bool,
    /// Train against the generator's soft masks instead of argmax labels.
    pub soft_labels: bool,
    /// Random horizontal flips and small crops.
    pub augment: bool,
    /// Resample inputs of the wrong size instead of failing.
    pub resample_input: bool,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            iterations: 10_000,
            batch_size: 16,
            width: 32,
            streaming: true,
            soft_labels: false,
            augment: false,
            resample_input: false,
            seed: 0,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::config("lr", "must be non-negative"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.width == 0 {
            return Err(Error::config("width", "must be positive"));
        }
        Ok(())
    }
}

/// Parses a flat TOML document into `T`, mapping unknown keys to [`Error::Config`].
pub fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let msg = e.message().to_string();
        let key = msg
            .strip_prefix("unknown field `")
            .and_then(|rest| rest.split('`').next())
            .map(str::to_string)
            .unwrap_or_else(|| "<document>".to_string());
        Error::config(key, msg)
    })
}
