#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stridesense::model::{Cnn14, ModelConfig, Standardization};
use stridesense::nn::{grad_check, Coordinates, Graph, Mode, NnError, Tensor, Var};
use stridesense::training::ccc_loss;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values whose pairwise gaps are at least `gap`, in random order, so max
/// selections and relu signs do not flip under small perturbations.
pub fn separated_values(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
    v
}

fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap().requiring_grad()
}

// ---- DSP oracle -------------------------------------------------------------

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_inv(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Log-Mel energies by direct evaluation: periodic Hann, O(N^2) DFT, and
/// triangles written out from their corner frequencies.
pub fn naive_log_mel(samples: &[f32], n_mels: usize) -> Vec<f64> {
    let (win, hop, sr, fmax) = (512usize, 160usize, 16000.0, 8000.0);
    let hann: Vec<f64> = (0..win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / win as f64).cos()).collect();
    let corners: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_inv(mel(fmax) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_frames = 1 + (samples.len() - win) / hop;
    let mut out = Vec::with_capacity(n_frames * n_mels);
    let (cos_t, sin_t): (Vec<f64>, Vec<f64>) = (0..win)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / win as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    for f in 0..n_frames {
        let frame: Vec<f64> = (0..win).map(|n| samples[f * hop + n] as f64 * hann[n]).collect();
        let power: Vec<f64> = (0..=win / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let j = (k * n) % win;
                    re += x * cos_t[j];
                    im -= x * sin_t[j];
                }
                re * re + im * im
            })
            .collect();
        for m in 0..n_mels {
            let (a, b, c) = (corners[m], corners[m + 1], corners[m + 2]);
            let mut e = 0.0;
            for (k, p) in power.iter().enumerate() {
                let hz = k as f64 * sr / win as f64;
                let w = if hz > a && hz <= b {
                    (hz - a) / (b - a)
                } else if hz > b && hz < c {
                    (c - hz) / (c - b)
                } else {
                    0.0
                };
                e += w * p;
            }
            out.push(e.max(1e-10).ln());
        }
    }
    out
}

// ---- gradient suite ---------------------------------------------------------

const LAYER_EPS: f64 = 1e-3;

fn check(
    params: Vec<Tensor<f64>>,
    mode: Mode,
    loss: impl Fn(&mut Graph<'_, f64>) -> Result<Var, NnError>,
) -> f64 {
    grad_check(&params, mode, LAYER_EPS, Coordinates::All, loss)
        .unwrap()
        .max_rel_error
}

/// Maximum relative error of each layer's reverse-mode gradient against
/// central differences (eps 1e-3, f64).
pub fn layer_gradient_errors() -> Vec<(&'static str, f64)> {
    let mut r = rng(2024);
    let mut out = Vec::new();

    // conv2d: gradients for input, weight and bias
    {
        let x = uniform_vec(&mut r, 2 * 3 * 5 * 6, -1.0, 1.0);
        let w = uniform_vec(&mut r, 4 * 3 * 9, -0.5, 0.5);
        let b = uniform_vec(&mut r, 4, -0.5, 0.5);
        let proj = uniform_vec(&mut r, 2 * 4 * 5 * 6, -1.0, 1.0);
        let params = vec![t(vec![2, 3, 5, 6], x), t(vec![4, 3, 3, 3], w), t(vec![4], b)];
        out.push((
            "conv2d",
            check(params, Mode::Train, |g| {
                let (x, w, b) = (g.param(0), g.param(1), g.param(2));
                let y = g.conv2d(x, w, b)?;
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // conv2d + relu + mean on a 1x1x4x4 input
    {
        let x = uniform_vec(&mut r, 16, -1.0, 1.0);
        let w = uniform_vec(&mut r, 9, -1.0, 1.0);
        let params = vec![t(vec![1, 1, 4, 4], x), t(vec![1, 1, 3, 3], w), t(vec![1], vec![0.05])];
        out.push((
            "conv2d+relu+mean",
            check(params, Mode::Train, |g| {
                let (x, w, b) = (g.param(0), g.param(1), g.param(2));
                let y = g.conv2d(x, w, b)?;
                let y = g.relu(y);
                Ok(g.mean_all(y))
            }),
        ));
    }
    // batch norm, train and eval
    for (name, mode) in [("batchnorm2d/train", Mode::Train), ("batchnorm2d/eval", Mode::Eval)] {
        let x = uniform_vec(&mut r, 3 * 2 * 3 * 3, -2.0, 2.0);
        let gamma = uniform_vec(&mut r, 2, 0.5, 1.5);
        let beta = uniform_vec(&mut r, 2, -0.5, 0.5);
        let proj = uniform_vec(&mut r, 54, -1.0, 1.0);
        let (rm, rv) = (vec![0.2, -0.1], vec![1.3, 0.7]);
        let params = vec![t(vec![3, 2, 3, 3], x), t(vec![2], gamma), t(vec![2], beta)];
        out.push((
            name,
            check(params, mode, |g| {
                let (x, ga, be) = (g.param(0), g.param(1), g.param(2));
                let y = g.batch_norm2d(x, ga, be, &rm, &rv, 0)?;
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // max pool, both strides
    for (name, stride, (ho, wo)) in [("maxpool2d/stride2", 2, (2, 3)), ("maxpool2d/stride1", 1, (4, 5))] {
        let x = separated_values(&mut r, 2 * 2 * 5 * 6, 0.05);
        let proj = uniform_vec(&mut r, 2 * 2 * ho * wo, -1.0, 1.0);
        let params = vec![t(vec![2, 2, 5, 6], x)];
        out.push((
            name,
            check(params, Mode::Train, |g| {
                let x = g.param(0);
                let y = g.max_pool2d(x, stride)?;
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // relu
    {
        let x = separated_values(&mut r, 20, 0.1);
        let proj = uniform_vec(&mut r, 20, -1.0, 1.0);
        out.push((
            "relu",
            check(vec![t(vec![4, 5], x)], Mode::Train, |g| {
                let x = g.param(0);
                let y = g.relu(x);
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // dropout in train mode (fixed mask per graph seed)
    {
        let x = uniform_vec(&mut r, 30, -1.0, 1.0);
        let proj = uniform_vec(&mut r, 30, -1.0, 1.0);
        out.push((
            "dropout",
            check(vec![t(vec![30], x)], Mode::Train, |g| {
                let x = g.param(0);
                let y = g.dropout(x, 0.2)?;
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // linear
    {
        let x = uniform_vec(&mut r, 3 * 5, -1.0, 1.0);
        let w = uniform_vec(&mut r, 4 * 5, -1.0, 1.0);
        let b = uniform_vec(&mut r, 4, -1.0, 1.0);
        let proj = uniform_vec(&mut r, 12, -1.0, 1.0);
        let params = vec![t(vec![3, 5], x), t(vec![4, 5], w), t(vec![4], b)];
        out.push((
            "linear",
            check(params, Mode::Train, |g| {
                let (x, w, b) = (g.param(0), g.param(1), g.param(2));
                let y = g.linear(x, w, b)?;
                g.dot_const(y, proj.clone())
            }),
        ));
    }
    // axis reductions
    for axis in 0..3 {
        let x = separated_values(&mut r, 3 * 4 * 5, 0.05);
        let n_out = 60 / [3, 4, 5][axis];
        let p_mean = uniform_vec(&mut r, n_out, -1.0, 1.0);
        let p_max = uniform_vec(&mut r, n_out, -1.0, 1.0);
        out.push((
            ["mean/max axis 0", "mean/max axis 1", "mean/max axis 2"][axis],
            check(vec![t(vec![3, 4, 5], x)], Mode::Train, |g| {
                let x = g.param(0);
                let a = g.mean_axis(x, axis)?;
                let b = g.max_axis(x, axis)?;
                let la = g.dot_const(a, p_mean.clone())?;
                let lb = g.dot_const(b, p_max.clone())?;
                g.add(la, lb)
            }),
        ));
    }
    // CCC loss on N = 24
    {
        let pred = uniform_vec(&mut r, 24, 6.0, 20.0);
        let target = uniform_vec(&mut r, 24, 6.0, 20.0);
        out.push((
            "ccc_loss",
            check(vec![t(vec![24], pred)], Mode::Train, |g| {
                let p = g.param(0);
                ccc_loss(g, p, &target).map_err(|e| NnError::InvalidArgument(e.to_string()))
            }),
        ));
    }
    out
}

/// Reduced-width model, dropout off, scalar random projection of the
/// outputs. Returns the worst relative error over sampled coordinates.
///
/// Train mode freezes the conv biases: batch norm cancels them exactly, so
/// their true gradient is zero and a relative error there is pure rounding.
pub fn full_model_gradient_error(mode: Mode, eps: f64, per_param: usize) -> f64 {
    let mut cfg = ModelConfig::with_width(1.0 / 8.0);
    cfg.dropout_p = 0.0;
    let mut model32 = Cnn14::<f32>::new(cfg, 77).unwrap();
    model32.set_standardization(Standardization::identity(64)).unwrap();
    let mut r = rng(78);
    let x32: Vec<f32> = (0..2 * 64 * 64).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let x32 = Tensor::new(vec![2, 1, 64, 64], x32).unwrap();
    // non-trivial running statistics for the eval-mode check
    model32.forward_outputs(&x32, Mode::Train, 0).unwrap();

    let model = model32.cast::<f64>();
    let mut params = model.params().to_vec();
    if mode == Mode::Train {
        for (p, name) in params.iter_mut().zip(model.param_names()) {
            if name.contains(".conv") && name.ends_with(".bias") {
                *p = Tensor::new(p.shape().to_vec(), p.data().to_vec()).unwrap();
            }
        }
    }
    let x = model.standardize(&x32.cast::<f64>()).unwrap();
    let proj = vec![0.7, -1.3];
    grad_check(&params, mode, eps, Coordinates::Sample { per_param, seed: 5 }, |g| {
        let xv = g.input(x.clone());
        let vars = model.forward_graph(g, xv).map_err(|e| NnError::InvalidArgument(e.to_string()))?;
        g.dot_const(vars.output, proj.clone())
    })
    .unwrap()
    .max_rel_error
}

// ---- misc -------------------------------------------------------------------

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

// ---- pipeline driver --------------------------------------------------------

/// Knobs for one synth-to-report run through the command line.
#[derive(Debug, Clone)]
pub struct PipelineSpec {
    pub runners: usize,
    pub sessions: (usize, usize),
    pub duration_s: f64,
    pub interval_s: (f64, f64),
    pub synth_seed: u64,
    pub split_seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub width_scale: f64,
    pub crop_s: f64,
    pub train_seed: u64,
}

/// Output locations under one root directory.
pub struct PipelinePaths {
    pub corpus: std::path::PathBuf,
    pub segments: std::path::PathBuf,
    pub features: std::path::PathBuf,
    pub split: std::path::PathBuf,
    pub train: std::path::PathBuf,
    pub report: std::path::PathBuf,
}

impl PipelinePaths {
    pub fn new(root: &Path) -> Self {
        Self {
            corpus: root.join("corpus"),
            segments: root.join("segments.csv"),
            features: root.join("features"),
            split: root.join("split.csv"),
            train: root.join("train"),
            report: root.join("report"),
        }
    }

    pub fn featurized(&self) -> std::path::PathBuf {
        self.features.join("segments.csv")
    }
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

pub fn synth_args(spec: &PipelineSpec, paths: &PipelinePaths) -> Vec<String> {
    vec![
        s("synth"),
        s("--out"),
        p(&paths.corpus),
        s("--runners"),
        s(spec.runners),
        s("--sessions-min"),
        s(spec.sessions.0),
        s("--sessions-max"),
        s(spec.sessions.1),
        s("--duration-s"),
        s(spec.duration_s),
        s("--interval-min-s"),
        s(spec.interval_s.0),
        s("--interval-max-s"),
        s(spec.interval_s.1),
        s("--seed"),
        s(spec.synth_seed),
    ]
}

/// segment, featurize and split.
pub fn prepare_args(spec: &PipelineSpec, paths: &PipelinePaths) -> Vec<Vec<String>> {
    vec![
        vec![s("segment"), s("--corpus"), p(&paths.corpus), s("--out"), p(&paths.segments)],
        vec![
            s("featurize"),
            s("--corpus"),
            p(&paths.corpus),
            s("--segments"),
            p(&paths.segments),
            s("--out-dir"),
            p(&paths.features),
        ],
        vec![
            s("split"),
            s("--segments"),
            p(&paths.featurized()),
            s("--out"),
            p(&paths.split),
            s("--seed"),
            s(spec.split_seed),
        ],
    ]
}

pub fn train_args(spec: &PipelineSpec, paths: &PipelinePaths, out_dir: &Path) -> Vec<String> {
    vec![
        s("train"),
        s("--segments"),
        p(&paths.featurized()),
        s("--partition"),
        p(&paths.split),
        s("--out-dir"),
        p(out_dir),
        s("--epochs"),
        s(spec.epochs),
        s("--batch-size"),
        s(spec.batch_size),
        s("--width-scale"),
        s(spec.width_scale),
        s("--crop-s"),
        s(spec.crop_s),
        s("--seed"),
        s(spec.train_seed),
    ]
}

pub fn evaluate_args(paths: &PipelinePaths, checkpoint: &Path, out_dir: &Path) -> Vec<String> {
    vec![
        s("evaluate"),
        s("--checkpoint"),
        p(checkpoint),
        s("--segments"),
        p(&paths.featurized()),
        s("--partition"),
        p(&paths.split),
        s("--corpus"),
        p(&paths.corpus),
        s("--out-dir"),
        p(out_dir),
    ]
}

/// Runs a command in-process and panics with its arguments on failure.
pub fn cli(args: &[String]) {
    let code = stridesense::cli::run(std::iter::once("stridesense".to_string()).chain(args.iter().cloned()));
    assert_eq!(code, 0, "stridesense {}", args.join(" "));
}
