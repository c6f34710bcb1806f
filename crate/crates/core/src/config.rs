//! Run configuration: one TOML document with sections for the dataset,
//! model dimensions, generator pretraining, training, and evaluation.
//! Every key has a default; unknown keys are rejected.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Clips to synthesize, spread round-robin over the 4 patterns × 10 digits.
    pub clips: usize,
    pub height: usize,
    pub width: usize,
    /// Frames generated per clip (before sampling down to `model.n_frames`).
    pub clip_frames: usize,
    /// Peak pixel displacement of the out-and-back trajectory.
    pub amplitude: u32,
    /// Fraction of clips tagged as the validation split.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            clips: 80,
            height: 32,
            width: 32,
            clip_frames: 21,
            amplitude: 6,
            val_fraction: 0.125,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Generator layers; also the row count of a W+ latent code.
    pub layers: usize,
    /// Width of one W+ row.
    pub d_w: usize,
    /// Word-embedding width.
    pub d_u: usize,
    /// Step-embedding width (keep equal to d_u so ablations are drop-in).
    pub d_t: usize,
    /// Frames per training clip, first frame included.
    pub n_frames: usize,
    /// Maximum caption length in tokens, [CLS] included.
    pub max_tokens: usize,
    /// Self-attention blocks in the text encoder (0–2).
    pub text_depth: usize,
    /// Train the text encoder jointly (the paper freezes its pretrained
    /// encoder; our small substitute learns from scratch by default).
    pub text_trainable: bool,
    /// Generator channels per layer, coarse to fine; entry 0 is also the
    /// width of the learned constant input.
    pub gen_channels: Vec<usize>,
    /// Inversion-encoder channels (also the perceptual feature trunk).
    pub enc_channels: Vec<usize>,
    /// Image-discriminator channels.
    pub disc2d_channels: Vec<usize>,
    /// Video-discriminator channels.
    pub disc3d_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            d_w: 64,
            d_u: 32,
            d_t: 32,
            n_frames: 5,
            max_tokens: 16,
            text_depth: 1,
            text_trainable: true,
            gen_channels: vec![32, 24, 16, 12],
            enc_channels: vec![16, 24, 32],
            disc2d_channels: vec![24, 32],
            disc3d_channels: vec![24, 32],
        }
    }
}

impl ModelConfig {
    /// Latent size L·d_w used by the recurrent cells.
    pub fn latent_len(&self) -> usize {
        self.layers * self.d_w
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of the adversarial term next to reconstruction MSE.
    pub adv_weight: f64,
    /// Weight of the self-perceptual term.
    pub perc_weight: f64,
    /// Weight of the L2 penalty on encoder codes. Keeps the learned W+
    /// space compact so per-frame code deltas stay within the rollout
    /// cell's bounded step size.
    pub code_weight: f64,
    /// Held-out reconstruction MSE (in [−1,1] units) considered converged.
    pub target_mse: f64,
    /// Latent-optimization inversion fallback budget (iterations).
    pub inversion_iters: usize,
    pub inversion_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1200,
            batch: 8,
            lr: 1e-3,
            adv_weight: 0.05,
            perc_weight: 0.1,
            code_weight: 0.01,
            target_mse: 0.05,
            inversion_iters: 200,
            inversion_lr: 0.05,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mse: f64,
    pub perc: f64,
    pub adv2d: f64,
    pub adv3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // λ_mse, λ_2D, λ_3D = 100, 1, 1; λ_perc = 1 for the moving-digit data.
        LossWeights {
            mse: 100.0,
            perc: 1.0,
            adv2d: 1.0,
            adv3d: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("mse", self.mse),
            ("perc", self.perc),
            ("adv2d", self.adv2d),
            ("adv3d", self.adv3d),
        ];
        for (name, v) in all {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Generator updates to run; discriminators get one update per two of
    /// these (the repeating G,G,D schedule).
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: String,
    /// Save a checkpoint every this many generator updates (0 = only final).
    pub checkpoint_every: usize,
    /// Include x̂_1 (the inverted first frame) in L_mse.
    pub mse_includes_first: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 4,
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 17,
            variant: "tvp".to_string(),
            checkpoint_every: 0,
            mse_includes_first: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Include frame 1 (reconstructed by frozen inversion) in metrics.
    pub include_first: bool,
    /// Optional LPIPS backbone weights; absent → LPIPS omitted, never faked.
    pub lpips_backbone: Option<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            include_first: false,
            lpips_backbone: None,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(s).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n_frames < 2 {
            return Err(Error::Config("model.n_frames must be ≥ 2".into()));
        }
        if m.max_tokens < 2 {
            return Err(Error::Config("model.max_tokens must be ≥ 2".into()));
        }
        if m.text_depth > 2 {
            return Err(Error::Config("model.text_depth must be 0–2".into()));
        }
        if m.layers == 0 || m.d_w == 0 || m.d_u == 0 || m.d_t == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if m.gen_channels.len() != m.layers {
            return Err(Error::Config(format!(
                "model.gen_channels must list one width per layer ({} ≠ {})",
                m.gen_channels.len(),
                m.layers
            )));
        }
        if m.enc_channels.is_empty() || m.disc2d_channels.is_empty() || m.disc3d_channels.is_empty()
        {
            return Err(Error::Config("channel lists must be non-empty".into()));
        }
        let d = &self.dataset;
        if d.height < 8 || d.width < 8 {
            return Err(Error::Config("dataset dims must be ≥ 8".into()));
        }
        if !d.height.is_power_of_two() || !d.width.is_power_of_two() || d.height != d.width {
            return Err(Error::Config(
                "dataset height/width must be equal powers of two (generator grows from 4×4)"
                    .into(),
            ));
        }
        if d.clip_frames < m.n_frames {
            return Err(Error::Config(
                "dataset.clip_frames must be ≥ model.n_frames".into(),
            ));
        }
        // The generator grows a 4×4 constant; the encoder shrinks back to 4×4.
        let ups = (d.height / 4).trailing_zeros() as usize;
        if m.layers < ups {
            return Err(Error::Config(format!(
                "model.layers = {} cannot upsample 4×4 to {}×{} (needs ≥ {ups})",
                m.layers, d.height, d.width
            )));
        }
        if m.enc_channels.len() != ups {
            return Err(Error::Config(format!(
                "model.enc_channels must list exactly log2(side/4) = {ups} widths, got {}",
                m.enc_channels.len()
            )));
        }
        if d.clip_frames < 3 {
            return Err(Error::Config("dataset.clip_frames must be ≥ 3".into()));
        }
        if !(0.0..1.0).contains(&d.val_fraction) {
            return Err(Error::Config("dataset.val_fraction must be in [0,1)".into()));
        }
        let t = &self.train;
        if t.lr <= 0.0 || self.pretrain.lr <= 0.0 {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if t.batch == 0 || self.pretrain.batch == 0 {
            return Err(Error::Config("batch sizes must be > 0".into()));
        }
        t.weights.validate()?;
        crate::trainer::Variant::parse(&t.variant)?;
        if (t.variant == "wo_se" || t.variant == "wo_rm") && m.d_t != m.d_u {
            return Err(Error::Config(
                "variants wo_se/wo_rm require model.d_t == model.d_u".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the resolved TOML text; names a configuration exactly.
    pub fn digest_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_toml_string().as_bytes());
        crate::nn::hex(&h.finalize())
    }

    /// Digest over only the sections a pretrained generator depends on
    /// (dataset, model, pretrain), so one artifact serves every training
    /// variant and evaluation run built on the same backbone.
    pub fn pretrain_scope_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        #[derive(Serialize)]
        struct Scope<'a> {
            dataset: &'a DatasetConfig,
            model: &'a ModelConfig,
            pretrain: &'a PretrainConfig,
        }
        let scope = Scope {
            dataset: &self.dataset,
            model: &self.model,
            pretrain: &self.pretrain,
        };
        let text = toml::to_string_pretty(&scope).expect("scope serializes");
        let mut h = Sha256::new();
        h.update(text.as_bytes());
        crate::nn::hex(&h.finalize())
    }
}
