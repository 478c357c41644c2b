//! Multiscale attention generation, attention pooling, and the classifier
//! head.
//!
//! Each selected pyramid scale goes through a 1×1 convolution producing N
//! candidate maps, is average-pooled down to the coarsest grid, and the
//! per-scale stacks are summed; a final rectifier keeps the stack
//! nonnegative, which the normalize/threshold steps downstream rely on.
//! Attention pooling forms M[j] = spatial mean of A_j ⊙ f3 per channel; a
//! single affine layer on the flattened matrix yields the logits.

use ndarray::{Array2, ArrayViewD};

use crate::autograd::{Graph, Scalar, Var};
use crate::backbone::{BackboneConfig, ParamInit, ParamVars, Pyramid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// Number of attention maps N.
    pub n_maps: usize,
    /// Pyramid scales feeding the generator, subset of {1,2,3}.
    pub scales: Vec<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            n_maps: 32,
            scales: vec![2, 3],
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_maps == 0 {
            return Err(Error::Usage("attention needs at least one map".into()));
        }
        if self.scales.is_empty() {
            return Err(Error::Usage("attention needs at least one scale".into()));
        }
        let mut seen = [false; 4];
        for &s in &self.scales {
            if !(1..=3).contains(&s) {
                return Err(Error::Usage(format!("attention scale {s} outside 1..=3")));
            }
            if seen[s] {
                return Err(Error::Usage(format!("attention scale {s} listed twice")));
            }
            seen[s] = true;
        }
        Ok(())
    }
}

/// Register the per-scale 1×1 convolution parameters.
pub fn init_attention_params<T: Scalar>(
    init: &mut ParamInit<'_, T>,
    config: &AttentionConfig,
    backbone: &BackboneConfig,
) {
    let channels = [
        backbone.stage_channels.0,
        backbone.stage_channels.1,
        backbone.stage_channels.2,
    ];
    let mut scales = config.scales.clone();
    scales.sort_unstable();
    // per-scale outputs are summed, so damp each by the number of scales
    let scale = 1.0 / (scales.len().max(1) as f64).sqrt();
    for &s in &scales {
        init.conv_scaled(
            &format!("attn.scale{s}"),
            config.n_maps,
            channels[s - 1],
            1,
            scale,
        );
    }
}

/// Produce the attention stack [B,N,S,S] from the pyramid.
pub fn generate_attention<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    config: &AttentionConfig,
    pyramid: &Pyramid,
) -> Result<Var> {
    config.validate()?;
    let mut scales = config.scales.clone();
    scales.sort_unstable();
    let mut per_scale = Vec::with_capacity(scales.len());
    for &s in &scales {
        let (feat, pool) = match s {
            1 => (pyramid.f1, 4),
            2 => (pyramid.f2, 2),
            _ => (pyramid.f3, 1),
        };
        let w = pv.get(&format!("attn.scale{s}.w"));
        let b = pv.get(&format!("attn.scale{s}.b"));
        let maps = g.conv2d(feat, w, b, 1, 0);
        per_scale.push(if pool > 1 { g.avg_pool2d(maps, pool) } else { maps });
    }
    let sum = if per_scale.len() == 1 {
        per_scale[0]
    } else {
        g.sum_list(&per_scale)
    };
    Ok(g.relu(sum))
}

/// Attention pooling: feature matrix node [B,N,C].
pub fn attention_pool<T: Scalar>(g: &mut Graph<T>, f3: Var, attention: Var) -> Result<Var> {
    let fs = g.value(f3).shape().to_vec();
    let as_ = g.value(attention).shape().to_vec();
    if fs.len() != 4 || as_.len() != 4 || fs[2..] != as_[2..] || fs[0] != as_[0] {
        return Err(Error::Shape(format!(
            "attention pool: features {fs:?} vs attention {as_:?}"
        )));
    }
    Ok(g.attn_pool(f3, attention))
}

/// Register the affine head mapping a `din`-vector to K logits.
pub fn init_head_params<T: Scalar>(init: &mut ParamInit<'_, T>, din: usize, classes: usize) {
    init.linear("head", din, classes);
}

/// Affine head on a flattened feature node.
pub fn classify<T: Scalar>(g: &mut Graph<T>, pv: &ParamVars, features: Var) -> Var {
    let flat = if g.value(features).ndim() == 2 {
        features
    } else {
        g.flatten(features)
    };
    let w = pv.get("head.w");
    let b = pv.get("head.b");
    g.linear(flat, w, b)
}

/// A* for one sample's map j: divide by the max, all-zero maps stay zero.
pub fn normalize_attention(stack: &ArrayViewD<'_, f32>, sample: usize, map: usize) -> Array2<f32> {
    let shape = stack.shape();
    assert_eq!(shape.len(), 4, "attention stack must be [B,N,S,S]");
    assert!(sample < shape[0] && map < shape[1], "index out of range");
    let view = stack.index_axis(ndarray::Axis(0), sample);
    let view = view.index_axis(ndarray::Axis(0), map);
    let max = view.iter().cloned().fold(0.0f32, f32::max);
    let mut out = Array2::zeros((shape[2], shape[3]));
    if max > 0.0 {
        let inv = 1.0 / max;
        out.zip_mut_with(&view, |o, &v| *o = v * inv);
    }
    out
}

/// Sum a detached attention stack over maps: [B,N,S,S] -> per-sample S×S.
pub fn summed_attention(stack: &ArrayViewD<'_, f32>, sample: usize) -> Array2<f32> {
    let shape = stack.shape();
    assert_eq!(shape.len(), 4);
    let (n, h, w) = (shape[1], shape[2], shape[3]);
    let view = stack.index_axis(ndarray::Axis(0), sample);
    let mut out = Array2::zeros((h, w));
    for j in 0..n {
        out.zip_mut_with(&view.index_axis(ndarray::Axis(0), j), |o, &v| *o += v);
    }
    out
}
