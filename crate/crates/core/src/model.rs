//! Full classifier assembly: backbone pyramid, attention stack, a pooling
//! stage, and the affine head.
//!
//! The pooling stage is switchable for ablations. Attention pooling feeds the
//! head the flattened N×C feature matrix; plain global average or max pooling
//! feed it the C-vector instead. The attention stack is generated in every
//! mode so augmentation and localization keep working while the head ablation
//! varies.

use crate::attention::{self, AttentionConfig};
use crate::autograd::{Graph, Scalar, Var};
use crate::backbone::{self, BackboneConfig, ParamInit, ParamSet, ParamVars};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Gap,
    Gmp,
    Attention,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(Pooling::Gap),
            "gmp" => Ok(Pooling::Gmp),
            "attention" => Ok(Pooling::Attention),
            other => Err(Error::Usage(format!(
                "unknown pooling '{other}' (expected gap, gmp, or attention)"
            ))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Gap => "gap",
            Pooling::Gmp => "gmp",
            Pooling::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub pooling: Pooling,
    pub classes: usize,
}

impl ModelConfig {
    pub fn desk(classes: usize, input_size: usize) -> Self {
        ModelConfig {
            backbone: BackboneConfig {
                input_size,
                ..BackboneConfig::default()
            },
            // Fewer maps than the full-scale default: on small inputs the
            // coarse grid is tiny and a wide stack averages into a flat
            // heatmap, which ruins localization.
            attention: AttentionConfig {
                n_maps: 8,
                ..AttentionConfig::default()
            },
            pooling: Pooling::Attention,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        if self.classes < 2 {
            return Err(Error::Usage("need at least two classes".into()));
        }
        Ok(())
    }

    /// Width of the flattened feature vector entering the head.
    pub fn head_input(&self) -> usize {
        match self.pooling {
            Pooling::Attention => self.attention.n_maps * self.backbone.stage_channels.2,
            Pooling::Gap | Pooling::Gmp => self.backbone.stage_channels.2,
        }
    }
}

/// Every learnable tensor of the assembled model, freshly initialized.
pub fn init_model_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParamSet<T>> {
    config.validate()?;
    let mut set = ParamSet::new();
    let mut cursor = ParamInit::new(&mut set, seed, "model-init");
    backbone::init_backbone_params(&mut cursor, &config.backbone);
    attention::init_attention_params(&mut cursor, &config.attention, &config.backbone);
    attention::init_head_params(&mut cursor, config.head_input(), config.classes);
    Ok(set)
}

/// Graph nodes a forward pass exposes to training and inspection.
pub struct ModelOutput {
    pub logits: Var,
    /// Attention stack [B,N,S,S], present in every pooling mode.
    pub attention: Var,
    /// Coarsest pyramid level [B,C3,S,S].
    pub f3: Var,
    /// Head input before flattening.
    pub features: Var,
}

pub fn model_forward<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    config: &ModelConfig,
    input: Var,
) -> Result<ModelOutput> {
    let pyramid = backbone::backbone_forward(g, pv, &config.backbone, input)?;
    let stack = attention::generate_attention(g, pv, &config.attention, &pyramid)?;
    let features = match config.pooling {
        Pooling::Attention => attention::attention_pool(g, pyramid.f3, stack)?,
        Pooling::Gap => g.global_avg_pool(pyramid.f3),
        Pooling::Gmp => g.global_max_pool(pyramid.f3),
    };
    let logits = attention::classify(g, pv, features);
    Ok(ModelOutput {
        logits,
        attention: stack,
        f3: pyramid.f3,
        features,
    })
}
