use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{Error, Result};

/// What the backbone sees in place of a missing image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingImageMode {
    /// Pseudo visual tokens from the completion module.
    Complete,
    /// An all-zeros visual token block of the real-image shape.
    ZeroFill,
    /// No visual tokens at all; the backbone reads text only.
    TextOnly,
}

impl std::str::FromStr for MissingImageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Self::Complete),
            "zero_fill" => Ok(Self::ZeroFill),
            "text_only" => Ok(Self::TextOnly),
            _ => Err(Error::Config(format!("unknown missing-image mode `{s}`"))),
        }
    }
}

/// Layers that receive low-rank adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    /// Query, key, value and attention output projections.
    Attention,
    /// Feed-forward projections.
    Mlp,
    /// Every linear layer inside transformer blocks.
    All,
}

impl std::str::FromStr for AdapterTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(Self::Attention),
            "mlp" => Ok(Self::Mlp),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown adapter target `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub scaling: f64,
    pub target: AdapterTarget,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            scaling: 2.0,
            target: AdapterTarget::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width as a multiple of `d_model`.
    pub mlp_ratio: usize,
    pub backbone_layers: usize,
    pub vision_layers: usize,
    /// Depth of the text-to-visual language model in the completion module.
    pub t2i_layers: usize,
    pub aux_layers: usize,
    /// Corpus vocabulary; reserved padding ids are allocated above it.
    pub vocab_size: usize,
    /// Visual tokens per real image.
    pub visual_tokens: usize,
    pub patches: usize,
    pub patch_dim: usize,
    pub max_text_len: usize,
    /// Length of the fixed padding prompt.
    pub pad_prompt_len: usize,
    pub ln_eps: f64,
    pub missing_image: MissingImageMode,
    pub use_aux_encoder: bool,
    pub use_padding: bool,
    /// Pad to half the visual token count.
    pub half_padding: bool,
    /// Send pseudo tokens through the primary projector as well.
    pub pseudo_through_projector: bool,
    pub adapters: Option<AdapterConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            mlp_ratio: 2,
            backbone_layers: 2,
            vision_layers: 1,
            t2i_layers: 2,
            aux_layers: 1,
            vocab_size: 64,
            visual_tokens: 8,
            patches: 8,
            patch_dim: 16,
            max_text_len: 32,
            pad_prompt_len: 2,
            ln_eps: 1e-5,
            missing_image: MissingImageMode::Complete,
            use_aux_encoder: true,
            use_padding: true,
            half_padding: false,
            pseudo_through_projector: false,
            adapters: None,
        }
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "model.d_model",
        "model.n_heads",
        "model.mlp_ratio",
        "model.backbone_layers",
        "model.vision_layers",
        "model.t2i_layers",
        "model.aux_layers",
        "model.visual_tokens",
        "model.max_text_len",
        "model.pad_prompt_len",
        "model.missing_image",
        "model.pseudo_through_projector",
        "ablation.disable_completion",
        "ablation.disable_aux_encoder",
        "ablation.disable_padding",
        "ablation.half_padding",
        "ablation.t2i_layers",
    ];

    /// Reads `model.*` and architectural `ablation.*` keys. Vocabulary and
    /// patch geometry come from the corpus.
    pub fn from_config(
        cfg: &KvConfig,
        vocab_size: usize,
        patches: usize,
        patch_dim: usize,
    ) -> Result<Self> {
        let d = Self::default();
        let mut c = Self {
            d_model: cfg.get_or("model.d_model", d.d_model)?,
            n_heads: cfg.get_or("model.n_heads", d.n_heads)?,
            mlp_ratio: cfg.get_or("model.mlp_ratio", d.mlp_ratio)?,
            backbone_layers: cfg.get_or("model.backbone_layers", d.backbone_layers)?,
            vision_layers: cfg.get_or("model.vision_layers", d.vision_layers)?,
            t2i_layers: cfg.get_or("model.t2i_layers", d.t2i_layers)?,
            aux_layers: cfg.get_or("model.aux_layers", d.aux_layers)?,
            vocab_size,
            visual_tokens: cfg.get_or("model.visual_tokens", d.visual_tokens)?,
            patches,
            patch_dim,
            max_text_len: cfg.get_or("model.max_text_len", d.max_text_len)?,
            pad_prompt_len: cfg.get_or("model.pad_prompt_len", d.pad_prompt_len)?,
            ln_eps: d.ln_eps,
            missing_image: cfg.get_or("model.missing_image", d.missing_image)?,
            use_aux_encoder: !cfg.get_or("ablation.disable_aux_encoder", false)?,
            use_padding: !cfg.get_or("ablation.disable_padding", false)?,
            half_padding: cfg.get_or("ablation.half_padding", false)?,
            pseudo_through_projector: cfg.get_or("model.pseudo_through_projector", false)?,
            adapters: None,
        };
        if cfg.get_or("ablation.disable_completion", false)?
            && c.missing_image == MissingImageMode::Complete {
                c.missing_image = MissingImageMode::ZeroFill;
            }
        if let Some(layers) = cfg.get("ablation.t2i_layers")? {
            c.t2i_layers = layers;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.visual_tokens < 2 {
            return bad(format!("visual_tokens must be >= 2, got {}", self.visual_tokens));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.mlp_ratio == 0 || self.backbone_layers == 0 {
            return bad("mlp_ratio and backbone_layers must be positive".into());
        }
        if self.vocab_size == 0 || self.patches == 0 || self.patch_dim == 0 {
            return bad("vocab_size, patches and patch_dim must be positive".into());
        }
        if self.half_padding && !self.visual_tokens.is_multiple_of(2) {
            return bad("half padding needs an even visual token count".into());
        }
        if let Some(a) = &self.adapters {
            if a.rank == 0 || a.rank >= self.d_model {
                return bad(format!(
                    "adapter rank {} must satisfy 1 <= r < {}",
                    a.rank, self.d_model
                ));
            }
        }
        Ok(())
    }

    pub fn completion_enabled(&self) -> bool {
        self.missing_image == MissingImageMode::Complete
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Padded length fed to the completion language model.
    pub fn pad_target_length(&self) -> usize {
        if self.half_padding {
            self.visual_tokens / 2
        } else {
            self.visual_tokens
        }
    }

    /// Vocabulary of the completion language model: corpus ids plus the
    /// padding prompt, `[END]` and dummy ids.
    pub fn t2i_vocab(&self) -> usize {
        self.vocab_size + self.pad_prompt_len + 2
    }

    pub fn padding(&self) -> PaddingConfig {
        let base = self.vocab_size as u32;
        PaddingConfig {
            pad_prompt: (base..base + self.pad_prompt_len as u32).collect(),
            end_token: base + self.pad_prompt_len as u32,
            dummy_token: base + self.pad_prompt_len as u32 + 1,
            target_length: self.pad_target_length(),
        }
    }

    /// Longest backbone sequence: visual block, text and `[EOS]`.
    pub fn max_backbone_len(&self) -> usize {
        self.visual_tokens.max(self.max_text_len) + self.max_text_len + 1
    }
}

/// Layout of the padded completion-model input:
/// `pad_prompt ∥ content ∥ [END] ∥ dummy × N`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaddingConfig {
    pub pad_prompt: Vec<u32>,
    pub end_token: u32,
    pub dummy_token: u32,
    pub target_length: usize,
}

impl PaddingConfig {
    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<u32> = self.pad_prompt.clone();
        ids.push(self.end_token);
        ids.push(self.dummy_token);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config(
                "padding prompt, end and dummy ids must be distinct".into(),
            ));
        }
        Ok(())
    }

    /// Largest content length that still fits.
    pub fn max_content(&self) -> usize {
        self.target_length.saturating_sub(self.pad_prompt.len() + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let p = c.padding();
        p.validate().unwrap();
        assert_eq!(p.target_length, 8);
        assert!(p.pad_prompt.iter().all(|&t| t >= 64));
    }

    #[test]
    fn rejects_bad_heads_and_visual_tokens() {
        let c = ModelConfig {
            n_heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            visual_tokens: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ablation_switches_map_to_fields() {
        let kv = KvConfig::parse(
            "ablation.disable_completion = true\nablation.disable_padding = true\nablation.t2i_layers = 4\n",
            "t",
        )
        .unwrap();
        let c = ModelConfig::from_config(&kv, 64, 8, 16).unwrap();
        assert_eq!(c.missing_image, MissingImageMode::ZeroFill);
        assert!(!c.use_padding && c.use_aux_encoder);
        assert_eq!(c.t2i_layers, 4);
    }
}
