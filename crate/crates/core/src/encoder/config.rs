//! Architecture configuration and exact parameter counting.

use crate::{Error, Result};

/// Reference width at which the modality-vector grid search applies.
const FULL_WIDTH: usize = 768;
/// Modality-vector width chosen at the reference width.
const FULL_WIDTH_MODALITY_DIM: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Image, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }
}

/// How modality identity is injected into the input sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdentifierKind {
    /// No explicit modality information.
    #[default]
    None,
    /// A learned vector appended to every token embedding, consuming
    /// `modality_dim` of the encoder width.
    FeatureVector,
    /// A learned full-width token prepended to the sequence.
    Token,
}

impl IdentifierKind {
    pub fn name(self) -> &'static str {
        match self {
            IdentifierKind::None => "none",
            IdentifierKind::FeatureVector => "feature-vector",
            IdentifierKind::Token => "token",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(IdentifierKind::None),
            "feature-vector" => Ok(IdentifierKind::FeatureVector),
            "token" => Ok(IdentifierKind::Token),
            other => Err(Error::Config(format!(
                "identifier: unknown kind {other:?} (expected none | feature-vector | token)"
            ))),
        }
    }
}

/// Everything defining how one modality enters the encoder: identifier
/// mechanism, content embedding width `d_e` and feature-vector width `d_m`.
/// The encoder width is `d = d_e + d_m` and must agree across modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalitySpec {
    pub modality: Modality,
    pub identifier: IdentifierKind,
    pub embed_dim: usize,
    pub modality_dim: usize,
}

impl ModalitySpec {
    pub fn width(&self) -> usize {
        self.embed_dim + self.modality_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config(format!(
                "{}: embed_dim must be positive",
                self.modality.name()
            )));
        }
        match self.identifier {
            IdentifierKind::FeatureVector if self.modality_dim == 0 => Err(Error::Config(format!(
                "{}: identifier feature-vector requires modality_dim >= 1",
                self.modality.name()
            ))),
            IdentifierKind::None | IdentifierKind::Token if self.modality_dim != 0 => {
                Err(Error::Config(format!(
                    "{}: modality_dim must be 0 unless identifier is feature-vector",
                    self.modality.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Default feature-vector width for an encoder of total width `d`: the
/// reference allocation of 20-of-768 input features, scaled proportionally
/// at smaller widths (never below 1).
pub fn default_modality_dim(width: usize) -> usize {
    if width == FULL_WIDTH {
        FULL_WIDTH_MODALITY_DIM
    } else {
        let scaled =
            (FULL_WIDTH_MODALITY_DIM as f64 * width as f64 / FULL_WIDTH as f64).round() as usize;
        scaled.max(1)
    }
}

/// Full architecture description. `embed_dim`/`modality_dim` apply to both
/// modalities; construction from per-modality specs rejects disagreeing
/// widths or identifier kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub identifier: IdentifierKind,
    /// Content embedding width `d_e` (per token, before identifier injection).
    pub embed_dim: usize,
    /// Feature-vector width `d_m`; 0 unless `identifier` is `FeatureVector`.
    pub modality_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Modality-specific layers before the shared stack (per modality).
    pub layers_early: usize,
    /// Shared transformer layers.
    pub layers_shared: usize,
    /// Modality-specific layers after the shared stack (per modality).
    pub layers_late: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub proj_dim: usize,
    /// Give each modality its own CLS embedding and projection. Used by the
    /// disjoint-encoder baseline so the two towers share nothing.
    pub per_modality_head: bool,
}

impl ModelConfig {
    /// Assemble a config from per-modality specs, rejecting modalities whose
    /// encoder width or identifier mechanism differ.
    pub fn from_specs(image: ModalitySpec, text: ModalitySpec, rest: ModelConfig) -> Result<Self> {
        image.validate()?;
        text.validate()?;
        if image.identifier != text.identifier {
            return Err(Error::Config(format!(
                "identifier kind differs across modalities: {} vs {}",
                image.identifier.name(),
                text.identifier.name()
            )));
        }
        if image.width() != text.width() || image.embed_dim != text.embed_dim {
            return Err(Error::Config(format!(
                "input width must be consistent across modalities: image d_e+d_m = {}+{}, text d_e+d_m = {}+{}",
                image.embed_dim, image.modality_dim, text.embed_dim, text.modality_dim
            )));
        }
        let cfg = ModelConfig {
            identifier: image.identifier,
            embed_dim: image.embed_dim,
            modality_dim: image.modality_dim,
            ..rest
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn modality_spec(&self, modality: Modality) -> ModalitySpec {
        ModalitySpec {
            modality,
            identifier: self.identifier,
            embed_dim: self.embed_dim,
            modality_dim: self.modality_dim,
        }
    }

    /// Encoder width `d = d_e + d_m`.
    pub fn width(&self) -> usize {
        self.embed_dim + self.modality_dim
    }

    pub fn num_patches(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    /// Flattened patch length `patch_size^2 * channels`.
    pub fn patch_vec_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Sequence length after identifier injection and CLS prepending, given
    /// `s` content tokens.
    pub fn full_seq_len(&self, content_len: usize) -> usize {
        match self.identifier {
            IdentifierKind::Token => content_len + 2,
            _ => content_len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.modality_spec(Modality::Image).validate()?;
        for (cond, msg) in [
            (self.vocab_size == 0, "vocab_size must be positive"),
            (self.max_seq_len == 0, "max_seq_len must be positive"),
            (self.channels == 0, "channels must be positive"),
            (self.patch_size == 0, "patch_size must be positive"),
            (self.mlp_ratio == 0, "mlp_ratio must be positive"),
            (self.proj_dim == 0, "proj_dim must be positive"),
            (self.heads == 0, "heads must be positive"),
        ] {
            if cond {
                return Err(Error::Config(msg.into()));
            }
        }
        if self.patch_size != 0 && self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.width() % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by heads {}",
                self.width(),
                self.heads
            )));
        }
        Ok(())
    }
}

/// Trainable scalars per transformer layer of width `d` with MLP ratio `r`:
/// attention `4d^2 + 4d`, MLP `2rd^2 + (r+1)d`, two layernorms `4d`.
pub fn per_layer_params(width: usize, mlp_ratio: usize) -> usize {
    let d = width;
    let r = mlp_ratio;
    (4 + 2 * r) * d * d + (9 + r) * d
}

/// Exact trainable-scalar count split by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub embedders: usize,
    pub identifiers: usize,
    pub early: usize,
    pub shared: usize,
    pub late: usize,
    pub projection: usize,
    pub temperature: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedders
            + self.identifiers
            + self.early
            + self.shared
            + self.late
            + self.projection
            + self.temperature
    }

    /// Total excluding the modality identifiers, the quantity used when
    /// matching parameter budgets across arms.
    pub fn total_excluding_identifiers(&self) -> usize {
        self.total() - self.identifiers
    }
}

impl ModelConfig {
    /// Closed-form parameter count per component. The enumeration of actual
    /// parameter tensors must agree exactly; tests hold both routes together.
    pub fn count_params(&self) -> ParamBreakdown {
        let d_e = self.embed_dim;
        let heads_sets = if self.per_modality_head { 2 } else { 1 };
        let embedders = self.vocab_size * d_e
            + self.max_seq_len * d_e
            + self.patch_vec_len() * d_e
            + self.num_patches() * d_e
            + heads_sets * 2 * d_e; // CLS embedding + CLS positional offset
        let identifiers = match self.identifier {
            IdentifierKind::None => 0,
            IdentifierKind::FeatureVector => 2 * self.modality_dim,
            IdentifierKind::Token => 2 * self.width(),
        };
        let per_layer = per_layer_params(self.width(), self.mlp_ratio);
        ParamBreakdown {
            embedders,
            identifiers,
            early: 2 * self.layers_early * per_layer,
            shared: self.layers_shared * per_layer,
            late: 2 * self.layers_late * per_layer,
            projection: heads_sets * self.width() * self.proj_dim,
            temperature: 1,
        }
    }
}
