//! Training loop: one primary forward pass produces predictions and the
//! attention stack, the stack drives three augmented auxiliary passes
//! through the same weights, and the regularized loss updates everything
//! with momentum SGD.
//!
//! Determinism: every random draw comes from streams derived from (seed,
//! fold, epoch), parameter updates run in a fixed order, and timing never
//! feeds back into arithmetic, so two runs with the same seed produce
//! bit-identical parameters. Checkpoints at epoch boundaries record the
//! derivation counters instead of raw rng state.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_auxiliary_batch, AugmentConfig};
use crate::autograd::{softmax_rows_values, Graph};
use crate::backbone::ParamSet;
use crate::checkpoint::{self, CheckpointMeta};
use crate::dataset::{FoldSplit, Sample};
use crate::error::{Error, Result};
use crate::loss::{total_loss, Consistency, LossBreakdown};
use crate::metrics::{macro_auc, per_class_metrics, ConfusionMatrix, MetricsReport};
use crate::model::{init_model_params, model_forward, ModelConfig};
use crate::preprocess::{self, PreprocessConfig, StochasticAugConfig};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Confidence threshold of the soft-distance target rule.
    pub theta: f32,
    pub augment: AugmentConfig,
    pub consistency: Consistency,
    /// Photometric/geometric augmentations applied before the attention
    /// pipeline; None disables them.
    pub stochastic: Option<StochasticAugConfig>,
    pub seed: u64,
    pub deterministic: bool,
    pub device: Device,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-6,
            theta: 0.7,
            augment: AugmentConfig::default(),
            consistency: Consistency::Soft,
            stochastic: None,
            seed: 0,
            deterministic: true,
            device: Device::Cpu,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Usage(format!("learning rate {} invalid", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Usage(format!(
                "momentum {} outside [0,1)",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Usage("weight decay must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Usage(format!("theta {} outside [0,1]", self.theta)));
        }
        self.augment.validate()?;
        if let Some(s) = &self.stochastic {
            s.validate()?;
        }
        Ok(())
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub l_ce: f64,
    pub d_bar: f64,
    pub l_reg: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub struct TrainState {
    pub params: ParamSet<f32>,
    /// Momentum buffer per parameter, aligned with `params` order.
    pub velocity: Vec<ArrayD<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<StepLog>,
}

/// Images decoded, cleaned, and resized to network resolution, still in
/// [0,1] so attention augmentation can operate on displayable pixels.
pub struct PreppedData {
    pub images: Vec<Array2<f32>>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl PreppedData {
    pub fn from_samples(samples: &[Sample], config: &PreprocessConfig) -> Result<Self> {
        let mut images = Vec::with_capacity(samples.len());
        let mut labels = Vec::with_capacity(samples.len());
        let mut ids = Vec::with_capacity(samples.len());
        for s in samples {
            images.push(preprocess::preprocess_image(&s.image, config)?);
            labels.push(s.label);
            ids.push(s.id.clone());
        }
        Ok(PreppedData {
            images,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// v <- mu v + g + lambda w; w <- w - lr v. A missing gradient acts as zero,
/// so unused parameters still feel weight decay.
pub fn sgd_update(
    params: &mut ParamSet<f32>,
    velocity: &mut [ArrayD<f32>],
    grads: &[Option<&ArrayD<f32>>],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
) {
    assert_eq!(params.len(), velocity.len(), "velocity misaligned");
    assert_eq!(params.len(), grads.len(), "gradients misaligned");
    for (i, (_, w)) in params.iter_mut().enumerate() {
        let ws = w.as_slice_mut().expect("contiguous parameter");
        let vs = velocity[i].as_slice_mut().expect("contiguous velocity");
        match grads[i] {
            Some(gr) => {
                let gs = gr.as_slice().expect("contiguous gradient");
                for j in 0..ws.len() {
                    vs[j] = momentum * vs[j] + gs[j] + weight_decay * ws[j];
                    ws[j] -= lr * vs[j];
                }
            }
            None => {
                for j in 0..ws.len() {
                    vs[j] = momentum * vs[j] + weight_decay * ws[j];
                    ws[j] -= lr * vs[j];
                }
            }
        }
    }
}

/// Exponential moving average with alpha = 2/(window+1), seeded at the
/// first value.
pub fn ema(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window >= 1);
    let alpha = 2.0 / (window as f64 + 1.0);
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let prev = out.last().copied().unwrap_or(v);
        out.push(prev + alpha * (v - prev));
    }
    out
}

pub struct EvalOutcome {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    pub predictions: Vec<usize>,
    /// Softmax probabilities [n, K].
    pub probabilities: Array2<f64>,
    /// Per-sample attention stack [1, N, S, S] for localization.
    pub attention: Vec<ArrayD<f32>>,
}

pub struct FoldOutcome {
    pub state: TrainState,
    pub eval: EvalOutcome,
    /// Held-out indices the evaluation refers to.
    pub eval_indices: Vec<usize>,
}

pub struct Trainer<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub preprocess: &'a PreprocessConfig,
    pub classes: &'a [String],
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    let mut z = seed ^ (fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn batch_tensor(images: &[Array2<f32>], zscore: bool) -> ArrayD<f32> {
    let (h, w) = images[0].dim();
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (b, img) in images.iter().enumerate() {
        let img = if zscore {
            preprocess::zscore_normalize(img)
        } else {
            img.clone()
        };
        let mut slot = out.index_axis_mut(ndarray::Axis(0), b);
        let mut slot = slot.index_axis_mut(ndarray::Axis(0), 0);
        slot.assign(&img);
    }
    out
}

fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Trainer<'_> {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.preprocess.validate()?;
        if self.classes.len() != self.model.classes {
            return Err(Error::Usage(format!(
                "{} class names for a {}-class model",
                self.classes.len(),
                self.model.classes
            )));
        }
        Ok(())
    }

    pub fn init_state(&self, fold: usize) -> Result<TrainState> {
        let params: ParamSet<f32> =
            init_model_params(self.model, fold_seed(self.train.seed, fold))?;
        let velocity = params
            .iter()
            .map(|(_, w)| ArrayD::zeros(w.raw_dim()))
            .collect();
        Ok(TrainState {
            params,
            velocity,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One optimization step over the given sample indices.
    pub fn train_step(
        &self,
        state: &mut TrainState,
        data: &PreppedData,
        idx: &[usize],
        aug_rng: &mut ChaCha8Rng,
        stoch_rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let target = (
            self.model.backbone.input_size,
            self.model.backbone.input_size,
        );
        let batch01: Vec<Array2<f32>> = idx
            .iter()
            .map(|&i| match &self.train.stochastic {
                Some(cfg) => {
                    preprocess::apply_stochastic_augs(&data.images[i], cfg, target, stoch_rng)
                }
                None => data.images[i].clone(),
            })
            .collect();
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();

        let mut g = Graph::<f32>::new();
        let pv = state.params.leaves(&mut g);
        let input = g.leaf(batch_tensor(&batch01, self.preprocess.zscore));
        let out = model_forward(&mut g, &pv, self.model, input)?;

        let mut aux_logits = Vec::new();
        if self.train.consistency != Consistency::None {
            let attn = g.value(out.attention).clone();
            let aux = make_auxiliary_batch(&batch01, &attn.view(), &self.train.augment, aug_rng)?;
            for route in [&aux.mixup, &aux.patching, &aux.dimming] {
                let t = g.leaf(batch_tensor(route, self.preprocess.zscore));
                let o = model_forward(&mut g, &pv, self.model, t)?;
                aux_logits.push(o.logits);
            }
        }

        let terms = total_loss(
            &mut g,
            out.logits,
            &aux_logits,
            &labels,
            self.train.theta,
            self.train.consistency,
        )?;
        let breakdown = terms.breakdown(&g);
        if !breakdown.l_reg.is_finite() {
            let ids: Vec<&str> = idx.iter().map(|&i| data.ids[i].as_str()).collect();
            return Err(Error::Numeric(format!(
                "non-finite loss {:?} on batch [{}]",
                breakdown,
                ids.join(", ")
            )));
        }
        let grads = g.backward(terms.l_reg)?;
        let ordered = pv.ordered().to_vec();
        let grad_refs: Vec<Option<&ArrayD<f32>>> =
            ordered.iter().map(|&v| grads.get(v)).collect();
        sgd_update(
            &mut state.params,
            &mut state.velocity,
            &grad_refs,
            self.train.lr,
            self.train.momentum,
            self.train.weight_decay,
        );
        Ok(breakdown)
    }

    /// Train over `train_idx` from `state.epoch` up to the configured epoch
    /// count, checkpointing at each epoch boundary when a path is given.
    pub fn run_training(
        &self,
        state: &mut TrainState,
        data: &PreppedData,
        train_idx: &[usize],
        fold: usize,
        checkpoint_path: Option<&Path>,
    ) -> Result<()> {
        self.validate()?;
        if train_idx.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let seed = self.train.seed;
        let mut step = state.history.len() + 1;
        for epoch in state.epoch..self.train.epochs {
            let mut order = train_idx.to_vec();
            let mut shuffle_rng =
                rng::derive_indexed(seed, &format!("shuffle-f{fold}"), epoch as u64);
            order.shuffle(&mut shuffle_rng);
            let mut aug_rng = rng::derive_indexed(seed, &format!("augment-f{fold}"), epoch as u64);
            let mut stoch_rng =
                rng::derive_indexed(seed, &format!("stochastic-f{fold}"), epoch as u64);
            for chunk in order.chunks(self.train.batch_size) {
                let t0 = Instant::now();
                let bd = self.train_step(state, data, chunk, &mut aug_rng, &mut stoch_rng)?;
                state.history.push(StepLog {
                    step,
                    epoch,
                    l_ce: bd.l_ce,
                    d_bar: bd.d_bar,
                    l_reg: bd.l_reg,
                    lr: self.train.lr as f64,
                    seconds: t0.elapsed().as_secs_f64(),
                });
                step += 1;
            }
            state.epoch = epoch + 1;
            if let Some(path) = checkpoint_path {
                self.save_state(path, state, fold)?;
            }
        }
        Ok(())
    }

    /// Inference over the given indices: metrics, probabilities, attention.
    pub fn evaluate(
        &self,
        params: &ParamSet<f32>,
        data: &PreppedData,
        idx: &[usize],
    ) -> Result<EvalOutcome> {
        if idx.is_empty() {
            return Err(Error::Data("empty evaluation set".into()));
        }
        let k = self.model.classes;
        let mut probabilities = Array2::<f64>::zeros((idx.len(), k));
        let mut predictions = Vec::with_capacity(idx.len());
        let mut attention = Vec::with_capacity(idx.len());
        for (chunk_start, chunk) in idx.chunks(self.train.batch_size.max(1)).enumerate() {
            let images: Vec<Array2<f32>> =
                chunk.iter().map(|&i| data.images[i].clone()).collect();
            let mut g = Graph::<f32>::new();
            let pv = params.leaves(&mut g);
            let input = g.leaf(batch_tensor(&images, self.preprocess.zscore));
            let out = model_forward(&mut g, &pv, self.model, input)?;
            let logits64 = g.value(out.logits).mapv(|v| v as f64);
            let probs = softmax_rows_values(&logits64);
            let stack = g.value(out.attention);
            for (bi, _) in chunk.iter().enumerate() {
                let row = chunk_start * self.train.batch_size.max(1) + bi;
                let mut rowvals = Vec::with_capacity(k);
                for c in 0..k {
                    let p = probs[IxDyn(&[bi, c])];
                    probabilities[(row, c)] = p;
                    rowvals.push(p);
                }
                predictions.push(argmax_row(&rowvals));
                let sample_stack = stack
                    .index_axis(ndarray::Axis(0), bi)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                attention.push(sample_stack.into_dyn());
            }
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let confusion = ConfusionMatrix::from_pairs(&labels, &predictions, k)?;
        let report = per_class_metrics(&confusion)?;
        let (per_class_auc, macro_auc) = macro_auc(&probabilities, &labels)?;
        Ok(EvalOutcome {
            confusion,
            report,
            per_class_auc,
            macro_auc,
            predictions,
            probabilities,
            attention,
        })
    }

    /// Train on every fold except `fold`, evaluate on `fold`.
    pub fn train_fold(
        &self,
        data: &PreppedData,
        split: &FoldSplit,
        fold: usize,
        checkpoint_path: Option<&Path>,
    ) -> Result<FoldOutcome> {
        let (train_idx, eval_idx) = split.split(fold);
        let mut state = self.init_state(fold)?;
        self.run_training(&mut state, data, &train_idx, fold, checkpoint_path)?;
        let eval = self.evaluate(&state.params, data, &eval_idx)?;
        Ok(FoldOutcome {
            state,
            eval,
            eval_indices: eval_idx,
        })
    }

    fn meta(&self, fold: usize, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            config: self.model.clone(),
            config_sha256: checkpoint::config_hash(self.model),
            preprocess: self.preprocess.clone(),
            classes: self.classes.to_vec(),
            seed: self.train.seed,
            fold,
            epoch,
        }
    }

    pub fn save_state(&self, path: &Path, state: &TrainState, fold: usize) -> Result<()> {
        let mut tensors = Vec::with_capacity(state.params.len() * 2 + 1);
        for (name, w) in state.params.iter() {
            tensors.push((format!("param.{name}"), w.clone()));
        }
        for ((name, _), v) in state.params.iter().zip(&state.velocity) {
            tensors.push((format!("mom.{name}"), v.clone()));
        }
        let mut hist = Vec::with_capacity(state.history.len() * 7);
        for log in &state.history {
            hist.extend_from_slice(&[
                log.step as f32,
                log.epoch as f32,
                log.l_ce as f32,
                log.d_bar as f32,
                log.l_reg as f32,
                log.lr as f32,
                log.seconds as f32,
            ]);
        }
        let hist = ArrayD::from_shape_vec(IxDyn(&[state.history.len(), 7]), hist)
            .expect("history tensor");
        tensors.push(("history".to_string(), hist));
        checkpoint::save(path, &self.meta(fold, state.epoch), &tensors)
    }

    pub fn load_state(&self, path: &Path) -> Result<TrainState> {
        let (meta, tensors) = checkpoint::load(path)?;
        checkpoint::require_config(&meta, self.model)?;
        if meta.classes != self.classes {
            return Err(Error::Checkpoint(
                "checkpoint class list does not match this run".into(),
            ));
        }
        if meta.preprocess != *self.preprocess {
            return Err(Error::Checkpoint(
                "checkpoint preprocessing does not match this run".into(),
            ));
        }
        let reference: ParamSet<f32> = init_model_params(self.model, 0)?;
        let expected: Vec<&str> = reference.iter().map(|(n, _)| n).collect();

        let mut params = ParamSet::new();
        let mut velocity = Vec::new();
        let mut history = Vec::new();
        let mut by_name: std::collections::HashMap<&str, &ArrayD<f32>> = tensors
            .iter()
            .map(|(n, a)| (n.as_str(), a))
            .collect();
        for name in &expected {
            let w = by_name
                .remove(format!("param.{name}").as_str())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint is missing parameter '{name}'"))
                })?;
            let v = by_name
                .remove(format!("mom.{name}").as_str())
                .ok_or_else(|| {
                    Error::Checkpoint(format!("checkpoint is missing momentum for '{name}'"))
                })?;
            let expected_shape = reference.get(name).unwrap().shape();
            if w.shape() != expected_shape || v.shape() != expected_shape {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    w.shape(),
                    expected_shape
                )));
            }
            params.push(name.to_string(), w.clone());
            velocity.push(v.clone());
        }
        if let Some(hist) = by_name.remove("history") {
            let n = hist.shape()[0];
            for r in 0..n {
                let get = |c: usize| hist[IxDyn(&[r, c])];
                history.push(StepLog {
                    step: get(0) as usize,
                    epoch: get(1) as usize,
                    l_ce: get(2) as f64,
                    d_bar: get(3) as f64,
                    l_reg: get(4) as f64,
                    lr: get(5) as f64,
                    seconds: get(6) as f64,
                });
            }
        }
        Ok(TrainState {
            params,
            velocity,
            epoch: meta.epoch,
            history,
        })
    }
}

/// `step,epoch,l_ce,d_bar,l_reg,lr,seconds` per optimization step.
pub fn write_train_log(path: &Path, history: &[StepLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
    w.write_record(["step", "epoch", "l_ce", "d_bar", "l_reg", "lr", "seconds"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for log in history {
        w.write_record([
            log.step.to_string(),
            log.epoch.to_string(),
            format!("{:.6}", log.l_ce),
            format!("{:.6}", log.d_bar),
            format!("{:.6}", log.l_reg),
            // the rate is carried as f32; printing through f32 gives the
            // shortest faithful decimal instead of widening noise
            format!("{}", log.lr as f32),
            format!("{:.4}", log.seconds),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
