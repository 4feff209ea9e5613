//! CNN14 regressor with a width knob, input standardization and checkpoints.
//!
//! Input is a batch of log-Mel maps shaped (N, 1, T, n_mels): time runs
//! along the height axis and Mel bins along the width axis.

use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::LogMelSpectrogram;
use crate::nn::{pool_output_extent, BatchStats, Element, Graph, Mode, NnError, Tensor, Var};

pub const BASE_CHANNELS: [usize; 6] = [64, 128, 256, 512, 1024, 2048];
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Shortest input time extent the six pools accept.
pub const MIN_FRAMES: usize = 64;
const N_BLOCKS: usize = 6;
const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input has {frames} frames; at least {MIN_FRAMES} are needed")]
    InputTooShort { frames: usize },
    #[error("model has no input standardization statistics")]
    NotStandardized,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint backbone is incompatible: {0}")]
    IncompatibleBackbone(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub width_scale: f64,
    pub block_channels: [usize; 6],
    pub dropout_p: f64,
    pub n_mels: usize,
    /// Output width of the final linear layer; 1 for regression.
    pub head_outputs: usize,
    /// Centre crop applied to every input map before batching.
    #[serde(default)]
    pub crop_frames: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_width(1.0)
    }
}

impl ModelConfig {
    /// Base channels scaled by `width_scale`, rounded, at least 1.
    pub fn with_width(width_scale: f64) -> Self {
        let block_channels = BASE_CHANNELS.map(|c| ((c as f64 * width_scale).round() as usize).max(1));
        Self {
            width_scale,
            block_channels,
            dropout_p: 0.2,
            n_mels: 64,
            head_outputs: 1,
            crop_frames: None,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.block_channels[N_BLOCKS - 1]
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if !(self.width_scale > 0.0) || self.width_scale * 2048.0 < 1.0 {
            return bad(format!("width_scale {} must be positive with width_scale * 2048 >= 1", self.width_scale));
        }
        if self.block_channels.iter().any(|&c| c == 0) || self.block_channels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("block channels {:?} must be strictly increasing", self.block_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if self.n_mels < MIN_FRAMES {
            return bad(format!("{} Mel bins cannot pass five halvings", self.n_mels));
        }
        if self.crop_frames.is_some_and(|c| c < MIN_FRAMES) {
            return bad(format!("crop of {:?} frames is below {MIN_FRAMES}", self.crop_frames));
        }
        if self.head_outputs == 0 {
            return bad("head needs at least one output".into());
        }
        Ok(())
    }
}

/// Time (or frequency) extent after the six pools, `None` if an input of
/// `extent` cannot pass them.
pub fn embedding_extent(extent: usize) -> Option<usize> {
    let mut e = extent;
    for _ in 0..5 {
        e = pool_output_extent(e, 2)?;
    }
    pool_output_extent(e, 1).filter(|&e| e >= 1)
}

/// Per-Mel-bin affine map applied to raw features before the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardization {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Statistics over every frame of every map (row-major frames of
    /// `n_mels` values), in f64. Standard deviations are floored at 1e-6.
    pub fn fit<'a, I>(maps: I, n_mels: usize) -> Option<Self>
    where
        I: IntoIterator<Item = &'a [f32]>,
    {
        let mut sum = vec![0.0f64; n_mels];
        let mut sq = vec![0.0f64; n_mels];
        let mut frames = 0usize;
        let maps: Vec<&[f32]> = maps.into_iter().collect();
        for m in &maps {
            for f in m.chunks_exact(n_mels) {
                for (s, &v) in sum.iter_mut().zip(f) {
                    *s += v as f64;
                }
                frames += 1;
            }
        }
        if frames == 0 {
            return None;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / frames as f64).collect();
        for m in &maps {
            for f in m.chunks_exact(n_mels) {
                for ((q, &v), mu) in sq.iter_mut().zip(f).zip(&mean) {
                    let d = v as f64 - mu;
                    *q += d * d;
                }
            }
        }
        Some(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: sq
                .iter()
                .map(|q| (q / frames as f64).sqrt().max(STD_FLOOR) as f32)
                .collect(),
        })
    }

    pub fn apply(&self, data: &mut [f32]) {
        let n = self.mean.len();
        for f in data.chunks_exact_mut(n) {
            for ((v, &m), &s) in f.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = ((*v as f64 - m as f64) / s as f64) as f32;
            }
        }
    }
}

/// Epoch and dev metrics of the training run that produced a checkpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: Option<usize>,
    pub dev_mae: Option<f64>,
    pub dev_ccc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    ConvWeight,
    Bias,
    Gamma,
    Beta,
    LinearWeight,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    role: Role,
}

fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, role| specs.push(ParamSpec { name, shape, role });
    let mut c_in = 1;
    for (b, &c) in cfg.block_channels.iter().enumerate() {
        for k in 1..=2 {
            let cin = if k == 1 { c_in } else { c };
            let p = format!("block{}.conv{k}", b + 1);
            push(format!("{p}.weight"), vec![c, cin, 3, 3], Role::ConvWeight);
            push(format!("{p}.bias"), vec![c], Role::Bias);
            let p = format!("block{}.bn{k}", b + 1);
            push(format!("{p}.gamma"), vec![c], Role::Gamma);
            push(format!("{p}.beta"), vec![c], Role::Beta);
        }
        c_in = c;
    }
    let e = cfg.embedding_dim();
    push("fc1.weight".into(), vec![e, e], Role::LinearWeight);
    push("fc1.bias".into(), vec![e], Role::Bias);
    push("head.weight".into(), vec![cfg.head_outputs, e], Role::LinearWeight);
    push("head.bias".into(), vec![cfg.head_outputs], Role::Bias);
    specs
}

fn is_head(name: &str) -> bool {
    name.starts_with("head.")
}

fn init_param<T: Element>(spec: &ParamSpec, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<T> = match spec.role {
        Role::ConvWeight | Role::LinearWeight => {
            let fan_in: usize = spec.shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| T::of_f64(dist.sample(rng))).collect()
        }
        Role::Gamma => vec![T::one(); n],
        Role::Bias | Role::Beta => vec![T::zero(); n],
    };
    Tensor::new(spec.shape.clone(), data)
        .expect("spec shapes are consistent")
        .requiring_grad()
}

/// Running mean and variance of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedding: Var,
    /// (N, head_outputs)
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct Cnn14<T: Element = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn: Vec<RunningStats<T>>,
    standardization: Option<Standardization>,
    pub meta: TrainingMeta,
}

/// Builds a freshly initialized model; Kaiming-uniform weights, zero biases,
/// unit batch-norm scale.
pub fn build_cnn14(cfg: &ModelConfig, seed: u64) -> Result<Cnn14, ModelError> {
    Cnn14::new(cfg.clone(), seed)
}

impl<T: Element> Cnn14<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = param_specs(&config);
        let params = specs.iter().map(|s| init_param(s, &mut rng)).collect();
        let bn = config
            .block_channels
            .iter()
            .flat_map(|&c| {
                [0, 1].map(|_| RunningStats {
                    mean: vec![T::zero(); c],
                    var: vec![T::one(); c],
                })
            })
            .collect();
        Ok(Self {
            names: specs.into_iter().map(|s| s.name).collect(),
            config,
            params,
            bn,
            standardization: None,
            meta: TrainingMeta::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.bn
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn set_standardization(&mut self, s: Standardization) -> Result<(), ModelError> {
        if s.mean.len() != self.config.n_mels || s.std.len() != self.config.n_mels {
            return Err(ModelError::ShapeMismatch(format!(
                "standardization has {} bins, model expects {}",
                s.mean.len(),
                self.config.n_mels
            )));
        }
        if s.std.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || s.mean.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidConfig("standardization stats must be finite with std > 0".into()));
        }
        self.standardization = Some(s);
        Ok(())
    }

    /// Same model in another element type.
    pub fn cast<U: Element>(&self) -> Cnn14<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        Cnn14 {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(|p| {
                let t = p.cast::<U>();
                if p.requires_grad() { t.requiring_grad() } else { t }
            }).collect(),
            bn: self
                .bn
                .iter()
                .map(|s| RunningStats {
                    mean: conv(&s.mean),
                    var: conv(&s.var),
                })
                .collect(),
            standardization: self.standardization.clone(),
            meta: self.meta.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != 4 || shape[1] != 1 || shape[3] != self.config.n_mels || shape[0] == 0 {
            return Err(ModelError::ShapeMismatch(format!(
                "expected (N, 1, T, {}), got {shape:?}",
                self.config.n_mels
            )));
        }
        if shape[2] < MIN_FRAMES {
            return Err(ModelError::InputTooShort { frames: shape[2] });
        }
        Ok(())
    }

    /// Stacks maps into an (N, 1, T, n_mels) batch. Every map is centre
    /// cropped to the configured crop, or to the shortest map if that is
    /// shorter.
    pub fn batch_maps(&self, maps: &[&LogMelSpectrogram]) -> Result<Tensor<T>, ModelError> {
        let n_mels = self.config.n_mels;
        if let Some(m) = maps.iter().find(|m| m.n_mels != n_mels) {
            return Err(ModelError::ShapeMismatch(format!("map has {} Mel bins, model expects {n_mels}", m.n_mels)));
        }
        let shortest = maps.iter().map(|m| m.n_frames).min().unwrap_or(0);
        let frames = self.config.crop_frames.map_or(shortest, |c| c.min(shortest));
        if maps.is_empty() || frames < MIN_FRAMES {
            return Err(ModelError::InputTooShort { frames });
        }
        let mut data = Vec::with_capacity(maps.len() * frames * n_mels);
        for m in maps {
            let start = (m.n_frames - frames) / 2;
            data.extend(m.values[start * n_mels..(start + frames) * n_mels].iter().map(|&v| T::of_f64(v as f64)));
        }
        Ok(Tensor::new(vec![maps.len(), 1, frames, n_mels], data)?)
    }

    /// Copy of `batch` with the model's standardization applied.
    pub fn standardize(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(batch.shape())?;
        let s = self.standardization.as_ref().ok_or(ModelError::NotStandardized)?;
        let mut out = batch.clone();
        for f in out.data_mut().chunks_exact_mut(self.config.n_mels) {
            for ((v, &m), &sd) in f.iter_mut().zip(&s.mean).zip(&s.std) {
                *v = T::of_f64((v.as_f64() - m as f64) / sd as f64);
            }
        }
        Ok(out)
    }

    /// Adds the network to `g` (which must be built over [`Self::params`]).
    /// `x` must already be standardized.
    pub fn forward_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<ForwardVars, ModelError> {
        self.forward_graph_with_dropout(g, x, self.config.dropout_p)
    }

    fn forward_graph_with_dropout(&self, g: &mut Graph<'_, T>, x: Var, p: f64) -> Result<ForwardVars, ModelError> {
        self.check_input(g.shape(x))?;
        let mut h = x;
        let mut pi = 0;
        for b in 0..N_BLOCKS {
            for k in 0..2 {
                let (w, bias, gamma, beta) = (g.param(pi), g.param(pi + 1), g.param(pi + 2), g.param(pi + 3));
                pi += 4;
                let layer = 2 * b + k;
                h = g.conv2d(h, w, bias)?;
                let rs = &self.bn[layer];
                h = g.batch_norm2d(h, gamma, beta, &rs.mean, &rs.var, layer)?;
                h = g.relu(h);
            }
            h = g.max_pool2d(h, if b + 1 < N_BLOCKS { 2 } else { 1 })?;
            h = g.dropout(h, p)?;
        }
        // (N, C, T', F') -> mean over Mel -> (N, C, T') -> mean + max over time
        let h = g.mean_axis(h, 3)?;
        let mean_t = g.mean_axis(h, 2)?;
        let max_t = g.max_axis(h, 2)?;
        let embedding = g.add(mean_t, max_t)?;
        let (w, b) = (g.param(pi), g.param(pi + 1));
        let mut z = g.linear(embedding, w, b)?;
        z = g.relu(z);
        z = g.dropout(z, p)?;
        let (w, b) = (g.param(pi + 2), g.param(pi + 3));
        let output = g.linear(z, w, b)?;
        Ok(ForwardVars { embedding, output })
    }

    /// Maps every head output `y` to `scale * y + offset` by rewriting the
    /// head's weight and bias.
    pub fn rescale_output(&mut self, scale: f64, offset: f64) {
        let n = self.params.len();
        for v in self.params[n - 2].data_mut() {
            *v = T::of_f64(scale * v.as_f64());
        }
        for v in self.params[n - 1].data_mut() {
            *v = T::of_f64(scale * v.as_f64() + offset);
        }
    }

    /// Replaces the batch-norm running statistics with the average batch
    /// mean and variance over `batches` (raw, unstandardized inputs), taken
    /// from train-mode passes with dropout switched off.
    ///
    /// Running estimates gathered during training see dropout-perturbed
    /// inputs, so their variances are too large for eval mode, where
    /// dropout is the identity.
    pub fn recalibrate_batch_norm(&mut self, batches: &[Tensor<T>]) -> Result<(), ModelError> {
        if batches.is_empty() {
            return Ok(());
        }
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> = self
            .bn
            .iter()
            .map(|rs| (vec![0.0; rs.mean.len()], vec![0.0; rs.var.len()]))
            .collect();
        for batch in batches {
            let x = self.standardize(batch)?;
            let mut g = Graph::new(&self.params, Mode::Train, 0);
            let xv = g.input(x);
            self.forward_graph_with_dropout(&mut g, xv, 0.0)?;
            for (layer, st) in g.take_batch_stats() {
                let (m, v) = &mut sums[layer];
                for c in 0..m.len() {
                    m[c] += st.mean[c];
                    v[c] += st.var_unbiased[c];
                }
            }
        }
        let n = batches.len() as f64;
        for (rs, (m, v)) in self.bn.iter_mut().zip(&sums) {
            for c in 0..m.len() {
                rs.mean[c] = T::of_f64(m[c] / n);
                rs.var[c] = T::of_f64(v[c] / n);
            }
        }
        Ok(())
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (layer, s) in stats {
            let rs = &mut self.bn[*layer];
            s.update_running(&mut rs.mean, &mut rs.var);
        }
    }

    /// Standardizes `batch` and runs the network, returning the head output
    /// (N, head_outputs). Train mode also updates the running statistics.
    pub fn forward_outputs(&mut self, batch: &Tensor<T>, mode: Mode, seed: u64) -> Result<Tensor<T>, ModelError> {
        let x = self.standardize(batch)?;
        let (out, stats) = {
            let mut g = Graph::new(&self.params, mode, seed);
            let xv = g.input(x);
            let vars = self.forward_graph(&mut g, xv)?;
            (g.to_tensor(vars.output), g.take_batch_stats())
        };
        self.apply_batch_stats(&stats);
        Ok(out)
    }

    /// Eval-mode predictions, one per batch item.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<T>, ModelError> {
        let x = self.standardize(batch)?;
        let mut g = Graph::new(&self.params, Mode::Eval, 0);
        let xv = g.input(x);
        let vars = self.forward_graph(&mut g, xv)?;
        let out = g.value(vars.output);
        let k = self.config.head_outputs;
        Ok(out.chunks_exact(k).map(|r| r[0]).collect())
    }

    /// Eval-mode embeddings (N, embedding_dim).
    pub fn embed(&self, batch: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let x = self.standardize(batch)?;
        let mut g = Graph::new(&self.params, Mode::Eval, 0);
        let xv = g.input(x);
        let vars = self.forward_graph(&mut g, xv)?;
        Ok(g.to_tensor(vars.embedding))
    }
}

/// Parameter table of a saved model: learnables, running statistics and
/// standardization, keyed by name in save order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub meta: TrainingMeta,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    meta: TrainingMeta,
}

const STD_MEAN: &str = "input.mean";
const STD_STD: &str = "input.std";

fn bn_stat_names(layer: usize) -> (String, String) {
    let p = format!("block{}.bn{}", layer / 2 + 1, layer % 2 + 1);
    (format!("{p}.running_mean"), format!("{p}.running_var"))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn from_model(model: &Cnn14) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .names
            .iter()
            .zip(&model.params)
            .map(|(n, p)| (n.clone(), Tensor::new(p.shape().to_vec(), p.data().to_vec()).expect("valid")))
            .collect();
        for (layer, rs) in model.bn.iter().enumerate() {
            let (m, v) = bn_stat_names(layer);
            let c = rs.mean.len();
            tensors.push((m, Tensor::new(vec![c], rs.mean.clone()).expect("valid")));
            tensors.push((v, Tensor::new(vec![c], rs.var.clone()).expect("valid")));
        }
        if let Some(s) = &model.standardization {
            let n = s.mean.len();
            tensors.push((STD_MEAN.into(), Tensor::new(vec![n], s.mean.clone()).expect("valid")));
            tensors.push((STD_STD.into(), Tensor::new(vec![n], s.std.clone()).expect("valid")));
        }
        Self {
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            meta: model.meta.clone(),
            tensors,
        }
    }

    /// Rebuilds a model for `cfg`, requiring every tensor's shape to match.
    pub fn to_model_with(&self, cfg: &ModelConfig) -> Result<Cnn14, ModelError> {
        let mut model = Cnn14::<f32>::new(cfg.clone(), 0)?;
        self.copy_into(&mut model, |_| true, |n| ModelError::ShapeMismatch(format!("checkpoint lacks `{n}`")), ModelError::ShapeMismatch)?;
        Ok(model)
    }

    pub fn to_model(&self) -> Result<Cnn14, ModelError> {
        self.to_model_with(&self.config)
    }

    fn copy_into(
        &self,
        model: &mut Cnn14,
        want: impl Fn(&str) -> bool,
        missing: impl Fn(&str) -> ModelError,
        mismatch: impl Fn(String) -> ModelError,
    ) -> Result<(), ModelError> {
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>, ModelError> {
            let t = self.get(name).ok_or_else(|| missing(name))?;
            if t.shape() != shape {
                return Err(mismatch(format!("`{name}` is {:?} in the checkpoint, model expects {shape:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        for i in 0..model.params.len() {
            let name = model.names[i].clone();
            if !want(&name) {
                continue;
            }
            let shape = model.params[i].shape().to_vec();
            let data = fetch(&name, &shape)?;
            model.params[i].data_mut().copy_from_slice(&data);
        }
        for layer in 0..model.bn.len() {
            let (m, v) = bn_stat_names(layer);
            let c = model.bn[layer].mean.len();
            model.bn[layer].mean = fetch(&m, &[c])?;
            model.bn[layer].var = fetch(&v, &[c])?;
        }
        let n = model.config.n_mels;
        model.standardization = match (self.get(STD_MEAN), self.get(STD_STD)) {
            (Some(_), Some(_)) => Some(Standardization {
                mean: fetch(STD_MEAN, &[n])?,
                std: fetch(STD_STD, &[n])?,
            }),
            _ => None,
        };
        model.meta = self.meta.clone();
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.config.clone(),
            meta: self.meta.clone(),
        })
        .expect("header serializes");
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let corrupt = |m: &str| ModelError::CorruptFile(m.to_string());
        if bytes.len() < 12 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(corrupt("missing checkpoint magic"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| ModelError::CorruptFile(format!("config blob: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| corrupt("parameter name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor size overflows"))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.iter().any(|(n, _): &(String, _)| *n == name) {
                return Err(ModelError::CorruptFile(format!("duplicate parameter `{name}`")));
            }
            let t = Tensor::new(shape, data).map_err(|e| ModelError::CorruptFile(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after parameter table"));
        }
        Ok(Self {
            version,
            config: header.model,
            meta: header.meta,
            tensors,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::CorruptFile("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(model: &Cnn14, path: &Path) -> Result<(), ModelError> {
    fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

/// Loads a model using the config stored in the file.
pub fn load_checkpoint(path: &Path) -> Result<Cnn14, ModelError> {
    read_checkpoint(path)?.to_model()
}

/// Loads a model into `cfg`; any tensor shape disagreement is a
/// [`ModelError::ShapeMismatch`].
pub fn load_checkpoint_with(path: &Path, cfg: &ModelConfig) -> Result<Cnn14, ModelError> {
    read_checkpoint(path)?.to_model_with(cfg)
}

/// Copies every backbone tensor of `checkpoint` into a model with a fresh
/// single-output head drawn from `seed`.
pub fn replace_head(checkpoint: &Checkpoint, seed: u64) -> Result<Cnn14, ModelError> {
    let cfg = ModelConfig {
        head_outputs: 1,
        ..checkpoint.config.clone()
    };
    let mut model = Cnn14::<f32>::new(cfg.clone(), 0)?;
    checkpoint.copy_into(
        &mut model,
        |n| !is_head(n),
        |n| ModelError::IncompatibleBackbone(format!("checkpoint lacks `{n}`")),
        ModelError::IncompatibleBackbone,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in param_specs(&cfg).iter().filter(|s| is_head(&s.name)) {
        let fresh = init_param::<f32>(spec, &mut rng);
        *model.param_mut(&spec.name).expect("head exists") = fresh;
    }
    model.meta = TrainingMeta::default();
    Ok(model)
}
