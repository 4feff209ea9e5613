//! Python bindings: feature extraction, metrics, corpus synthesis, model
//! inference and the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use stridesense::features::{LogMelExtractor, LogMelSpectrogram, MelConfig, StftConfig};
use stridesense::model::{self, Checkpoint, Cnn14, ModelConfig, Standardization};
use stridesense::nn::Tensor;
use stridesense::synth::{self, DemographicsPlan, SynthConfig};
use stridesense::training;

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Log-Mel spectrogram of 16 kHz mono samples as a list of frames.
#[pyfunction]
#[pyo3(signature = (samples, n_mels = 64))]
fn log_mel(samples: Vec<f32>, n_mels: usize) -> PyResult<Vec<Vec<f32>>> {
    let mel = MelConfig {
        n_mels,
        ..MelConfig::default()
    };
    let ex = LogMelExtractor::new(StftConfig::default(), mel).map_err(value_err)?;
    let spec = ex.compute_samples(&samples).map_err(value_err)?;
    Ok(spec.values.chunks(n_mels).map(<[f32]>::to_vec).collect())
}

/// Frames produced for a clip of `n_samples` samples (0 if shorter than one window).
#[pyfunction]
fn n_frames(n_samples: usize) -> usize {
    StftConfig::default().n_frames(n_samples).unwrap_or(0)
}

/// Decodes a PCM WAV file into (samples, sample_rate).
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let clip = stridesense::audio::read_wav(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
    let sr = clip.sample_rate();
    Ok((clip.into_samples(), sr))
}

#[pyfunction]
fn ccc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    training::ccc(&x, &y).map_err(value_err)
}

#[pyfunction]
fn mae(preds: Vec<f64>, targets: Vec<f64>) -> PyResult<f64> {
    stridesense::evaluation::mean_absolute_error(&preds, &targets).map_err(value_err)
}

/// Writes a synthetic corpus and returns (runners, sessions, events).
#[pyfunction]
#[pyo3(signature = (out_dir, runners = 4, sessions = (1, 2), duration_s = 300.0, interval_s = (60.0, 90.0), seed = 0))]
fn synth_corpus(
    out_dir: PathBuf,
    runners: usize,
    sessions: (usize, usize),
    duration_s: f64,
    interval_s: (f64, f64),
    seed: u64,
) -> PyResult<(usize, usize, usize)> {
    let cfg = SynthConfig {
        sessions_per_runner: sessions,
        session_duration_s: duration_s,
        question_interval_s: interval_s,
        seed,
        ..SynthConfig::default()
    };
    let s = synth::generate_corpus(&cfg, &DemographicsPlan::balanced(runners), &out_dir).map_err(value_err)?;
    Ok((s.n_runners, s.n_sessions, s.n_events))
}

/// Runs one `stridesense` subcommand and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    stridesense::cli::run(std::iter::once("stridesense".to_string()).chain(args))
}

/// CNN14 regressor.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Cnn14,
}

#[pymethods]
impl PyModel {
    /// Fresh model with identity input standardization.
    #[new]
    #[pyo3(signature = (width_scale = 0.125, seed = 0))]
    fn new(width_scale: f64, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::with_width(width_scale);
        let mut inner = model::build_cnn14(&cfg, seed).map_err(value_err)?;
        inner
            .set_standardization(Standardization::identity(cfg.n_mels))
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = model::load_checkpoint(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(value_err)
    }

    /// Copy with a freshly initialized single-output head.
    fn replace_head(&self, seed: u64) -> PyResult<Self> {
        let inner = model::replace_head(&Checkpoint::from_model(&self.inner), seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn embedding_dim(&self) -> usize {
        self.inner.config().embedding_dim()
    }

    /// Predicted RPE for each log-Mel map (a list of frames).
    fn predict(&self, maps: Vec<Vec<Vec<f32>>>) -> PyResult<Vec<f64>> {
        let specs = maps
            .into_iter()
            .map(|frames| {
                let n_mels = frames.first().map_or(0, Vec::len);
                if frames.iter().any(|f| f.len() != n_mels) {
                    return Err(PyValueError::new_err("ragged log-Mel frames"));
                }
                Ok(LogMelSpectrogram {
                    n_frames: frames.len(),
                    n_mels,
                    hop_seconds: 0.01,
                    values: frames.concat(),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&LogMelSpectrogram> = specs.iter().collect();
        let batch: Tensor = self.inner.batch_maps(&refs).map_err(value_err)?;
        let out = self.inner.predict(&batch).map_err(value_err)?;
        Ok(out.into_iter().map(f64::from).collect())
    }
}

#[pymodule]
fn stridesense_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(n_frames, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add_class::<PyModel>()?;
    Ok(())
}
