//! Residual convolutional backbone emitting a three-scale feature pyramid.
//!
//! The network is a scaled-down residual CNN: a two-conv stem at stride 4,
//! then three residual stages at strides 8, 16, 32 whose outputs are the
//! pyramid taps f1, f2, f3. A 224-pixel input with default channels yields
//! (32,28,28), (64,14,14), (128,7,7); a 64-pixel input yields the same
//! geometry at 8/4/2.
//!
//! Parameters live outside the computation graph in a [`ParamSet`] and are
//! re-inserted as leaves every step, so a fresh graph per step carries no
//! hidden state.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Scalar, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Channel counts of the three pyramid stages.
    pub stage_channels: (usize, usize, usize),
    pub blocks_per_stage: (usize, usize, usize),
    /// Square input resolution; must be divisible by 32.
    pub input_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: (32, 64, 128),
            blocks_per_stage: (1, 1, 1),
            input_size: 224,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let (c1, c2, c3) = self.stage_channels;
        if !(1 <= c1 && c1 <= c2 && c2 <= c3) {
            return Err(Error::Usage(format!(
                "stage channels must satisfy 1 <= C1 <= C2 <= C3, got {:?}",
                self.stage_channels
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Usage(format!(
                "input size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        let (b1, b2, b3) = self.blocks_per_stage;
        if b1 < 1 || b2 < 1 || b3 < 1 {
            return Err(Error::Usage("each stage needs at least one block".into()));
        }
        Ok(())
    }

    pub fn stem_channels(&self) -> usize {
        (self.stage_channels.0 / 2).max(4)
    }

    /// Coarsest spatial size S (input/32); f2 is 2S, f1 is 4S.
    pub fn coarse_size(&self) -> usize {
        self.input_size / 32
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<T>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter_mut())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Insert every parameter into a graph as a leaf.
    pub fn leaves(&self, g: &mut Graph<T>) -> ParamVars {
        let mut by_name = HashMap::new();
        let mut ordered = Vec::with_capacity(self.names.len());
        for (name, value) in self.iter() {
            let v = g.leaf(value.clone());
            by_name.insert(name.to_string(), v);
            ordered.push(v);
        }
        ParamVars { by_name, ordered }
    }
}

/// Graph handles for one step's parameter leaves.
pub struct ParamVars {
    by_name: HashMap<String, Var>,
    ordered: Vec<Var>,
}

impl ParamVars {
    /// Bind existing graph vars to parameter names, e.g. to drive a forward
    /// pass from leaves created elsewhere (gradient probes, harnesses).
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> ParamVars {
        let mut by_name = HashMap::new();
        let mut ordered = Vec::new();
        for (name, var) in pairs {
            ordered.push(var);
            let prev = by_name.insert(name, var);
            assert!(prev.is_none(), "duplicate parameter name");
        }
        ParamVars { by_name, ordered }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .by_name
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    /// Vars in ParamSet order, aligned with [`ParamSet::iter`].
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

/// Helper shared by initializers: fan-in-scaled normal weights, zero biases.
pub struct ParamInit<'a, T: Scalar> {
    set: &'a mut ParamSet<T>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<'a, T: Scalar> ParamInit<'a, T> {
    pub fn new(set: &'a mut ParamSet<T>, seed: u64, label: &str) -> Self {
        ParamInit {
            set,
            rng: rng::derive(seed, label),
        }
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        self.conv_scaled(name, cout, cin, k, 1.0);
    }

    /// Kaiming fan-in std times `scale`; branches whose outputs are summed
    /// (residual tails, multiscale fusion) pass a damping factor so the sum
    /// keeps unit variance.
    pub fn conv_scaled(&mut self, name: &str, cout: usize, cin: usize, k: usize, scale: f64) {
        let fan_in = (cin * k * k) as f64;
        let dist = Normal::new(0.0, scale * (2.0 / fan_in).sqrt()).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[cout, cin, k, k]), |_| {
            T::from_f64(dist.sample(&mut self.rng)).unwrap()
        });
        self.set.push(format!("{name}.w"), w);
        self.set
            .push(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout])));
    }

    /// Xavier fan-in std; linear readouts have no rectifier after them.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let dist = Normal::new(0.0, (1.0 / din as f64).sqrt()).unwrap();
        let w = ArrayD::from_shape_fn(IxDyn(&[din, dout]), |_| {
            T::from_f64(dist.sample(&mut self.rng)).unwrap()
        });
        self.set.push(format!("{name}.w"), w);
        self.set
            .push(format!("{name}.b"), ArrayD::zeros(IxDyn(&[dout])));
    }
}

/// Backbone activations at the three tap points, as graph nodes.
pub struct Pyramid {
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

fn conv(g: &mut Graph<impl Scalar>, pv: &ParamVars, name: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = pv.get(&format!("{name}.w"));
    let b = pv.get(&format!("{name}.b"));
    g.conv2d(x, w, b, stride, pad)
}

fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    downsample: bool,
) -> Var {
    let stride = if downsample { 2 } else { 1 };
    let h = conv(g, pv, &format!("{name}.conv1"), x, stride, 1);
    let h = g.relu(h);
    let h = conv(g, pv, &format!("{name}.conv2"), h, 1, 1);
    let shortcut = if downsample {
        conv(g, pv, &format!("{name}.proj"), x, 2, 0)
    } else {
        x
    };
    let sum = g.add(h, shortcut);
    g.relu(sum)
}

/// Register all backbone parameters on an initializer cursor.
pub fn init_backbone_params<T: Scalar>(init: &mut ParamInit<'_, T>, config: &BackboneConfig) {
    let stem = config.stem_channels();
    init.conv("stem.a", stem, 1, 3);
    init.conv("stem.b", stem, stem, 3);
    let channels = [
        config.stage_channels.0,
        config.stage_channels.1,
        config.stage_channels.2,
    ];
    let blocks = [
        config.blocks_per_stage.0,
        config.blocks_per_stage.1,
        config.blocks_per_stage.2,
    ];
    let mut cin = stem;
    for (s, (&cout, &nblocks)) in channels.iter().zip(blocks.iter()).enumerate() {
        for b in 0..nblocks {
            let name = format!("stage{}.block{}", s + 1, b);
            let block_cin = if b == 0 { cin } else { cout };
            init.conv(&format!("{name}.conv1"), cout, block_cin, 3);
            // the tail adds onto the shortcut; damp it so the residual sum
            // does not inflate variance stage over stage
            init.conv_scaled(&format!("{name}.conv2"), cout, cout, 3, std::f64::consts::FRAC_1_SQRT_2);
            if b == 0 {
                init.conv(&format!("{name}.proj"), cout, block_cin, 1);
            }
        }
        cin = cout;
    }
}

/// Run the backbone on an input batch node of shape [B,1,H,W].
pub fn backbone_forward<T: Scalar>(
    g: &mut Graph<T>,
    pv: &ParamVars,
    config: &BackboneConfig,
    input: Var,
) -> Result<Pyramid> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Shape(format!(
            "backbone input must be [B,1,H,W], got {shape:?}"
        )));
    }
    if shape[2] != config.input_size || shape[3] != config.input_size {
        return Err(Error::Shape(format!(
            "backbone expects {0}x{0} input, got {1}x{2}",
            config.input_size, shape[2], shape[3]
        )));
    }
    let x = conv(g, pv, "stem.a", input, 2, 1);
    let x = g.relu(x);
    let x = conv(g, pv, "stem.b", x, 2, 1);
    let mut x = g.relu(x);

    let blocks = [
        config.blocks_per_stage.0,
        config.blocks_per_stage.1,
        config.blocks_per_stage.2,
    ];
    let mut taps = Vec::with_capacity(3);
    for (s, &nblocks) in blocks.iter().enumerate() {
        for b in 0..nblocks {
            x = residual_block(g, pv, &format!("stage{}.block{}", s + 1, b), x, b == 0);
        }
        taps.push(x);
    }
    Ok(Pyramid {
        f1: taps[0],
        f2: taps[1],
        f3: taps[2],
    })
}
