//! Python bindings. Matrices cross the boundary as lists of rows, signals
//! as flat lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use semg2v::config::PipelineConfig;
use semg2v::container::Mode;
use semg2v::dsp;
use semg2v::dtw;
use semg2v::features::{self, MelSpectrogram};
use semg2v::matrix::Matrix;
use semg2v::metrics;
use semg2v::model::Ssrnet;
use semg2v::pipeline;
use semg2v::signal::{AudioWaveform, EmgRecording, AUDIO_SAMPLE_RATE, EMG_SAMPLE_RATE};
use semg2v::synth::{self, SyntheticSpec};
use semg2v::training;
use semg2v::vocoder;
use semg2v::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(msg),
        Error::MissingArtifact(_) => PyFileNotFoundError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("matrix must have at least one row"));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("matrix rows must have equal length"));
    }
    Ok(Matrix::from_rows(&rows))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.iter_rows().map(|r| r.to_vec()).collect()
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "silent" => Ok(Mode::Silent),
        "vocal" => Ok(Mode::Vocal),
        other => Err(PyValueError::new_err(format!("mode must be 'silent' or 'vocal', got {other:?}"))),
    }
}

/// Band-pass and mains-notch filtering of a multichannel EMG recording.
#[pyfunction]
#[pyo3(signature = (channels, sample_rate = EMG_SAMPLE_RATE))]
fn condition(channels: Vec<Vec<f64>>, sample_rate: f64) -> PyResult<Vec<Vec<f64>>> {
    let rec = EmgRecording::new(channels, sample_rate).map_err(py_err)?;
    Ok(dsp::condition(&rec).map_err(py_err)?.into_channels())
}

/// Z-normalized frame features (frames x 355) of a conditioned recording.
#[pyfunction]
#[pyo3(signature = (channels, mode, sample_rate = EMG_SAMPLE_RATE))]
fn emg_features(channels: Vec<Vec<f64>>, mode: &str, sample_rate: f64) -> PyResult<Vec<Vec<f64>>> {
    let rec = EmgRecording::new(channels, sample_rate).map_err(py_err)?;
    let f = features::emg_features(&rec, parse_mode(mode)?).map_err(py_err)?;
    Ok(to_rows(f.frames()))
}

/// Natural-log mel spectrogram (frames x 80).
#[pyfunction]
#[pyo3(signature = (samples, sample_rate = AUDIO_SAMPLE_RATE))]
fn mel_spectrogram(samples: Vec<f64>, sample_rate: f64) -> PyResult<Vec<Vec<f64>>> {
    let audio = AudioWaveform::new(samples, sample_rate).map_err(py_err)?;
    Ok(to_rows(features::mel_spectrogram(&audio).map_err(py_err)?.frames()))
}

/// Griffin-Lim reconstruction of a log-mel spectrogram at 16 kHz.
#[pyfunction]
#[pyo3(signature = (mel, iters = vocoder::DEFAULT_ITERS))]
fn griffin_lim(mel: Vec<Vec<f64>>, iters: usize) -> PyResult<Vec<f64>> {
    let mel = MelSpectrogram::new(to_matrix(mel)?).map_err(py_err)?;
    Ok(vocoder::griffin_lim(&mel, iters).map_err(py_err)?.samples().to_vec())
}

/// Euclidean DTW between two feature sequences: `(path, total_cost)`.
#[pyfunction]
fn dtw_basic(x_silent: Vec<Vec<f64>>, x_vocal: Vec<Vec<f64>>) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let p = dtw::dtw_basic(&to_matrix(x_silent)?, &to_matrix(x_vocal)?).map_err(py_err)?;
    Ok((p.pairs().to_vec(), p.total_cost()))
}

/// DTW whose cost mixes feature distance with predicted-vs-target audio
/// distance, weighted by `lambda_align`.
#[pyfunction]
fn dtw_refined(
    x_silent: Vec<Vec<f64>>,
    x_vocal: Vec<Vec<f64>>,
    y_pred: Vec<Vec<f64>>,
    y_target: Vec<Vec<f64>>,
    lambda_align: f64,
) -> PyResult<(Vec<(usize, usize)>, f64)> {
    let p = dtw::dtw_refined(
        &to_matrix(x_silent)?,
        &to_matrix(x_vocal)?,
        &to_matrix(y_pred)?,
        &to_matrix(y_target)?,
        lambda_align,
    )
    .map_err(py_err)?;
    Ok((p.pairs().to_vec(), p.total_cost()))
}

/// Per-silent-frame durations from an alignment path; they sum to `m`.
#[pyfunction]
fn path_to_durations(path: Vec<(usize, usize)>, n: usize, m: usize) -> PyResult<Vec<usize>> {
    let p = dtw::AlignmentPath::new(path, 0.0, n, m).map_err(py_err)?;
    Ok(dtw::path_to_durations(&p, n, m).map_err(py_err)?.as_slice().to_vec())
}

#[pyfunction]
fn cer(reference: &str, hypothesis: &str) -> PyResult<f64> {
    metrics::cer(reference, hypothesis).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (reference, hypothesis, sample_rate = AUDIO_SAMPLE_RATE))]
fn mcd(reference: Vec<f64>, hypothesis: Vec<f64>, sample_rate: f64) -> PyResult<f64> {
    let a = AudioWaveform::new(reference, sample_rate).map_err(py_err)?;
    let b = AudioWaveform::new(hypothesis, sample_rate).map_err(py_err)?;
    metrics::mcd(&a, &b).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (clean, degraded, sample_rate = AUDIO_SAMPLE_RATE))]
fn stoi(clean: Vec<f64>, degraded: Vec<f64>, sample_rate: f64) -> PyResult<f64> {
    metrics::stoi_samples(&clean, &degraded, sample_rate).map_err(py_err)
}

#[pyfunction]
fn noam_lr(step: u64, step_w: u64, d_model: usize) -> PyResult<f64> {
    training::noam_lr(step, step_w, d_model).map_err(py_err)
}

/// One utterance of the deterministic synthetic tonal corpus.
#[pyfunction]
#[pyo3(signature = (index, seed = 1))]
fn synthetic_utterance<'py>(py: Python<'py>, index: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let spec = SyntheticSpec { seed, ..SyntheticSpec::default() };
    let u = synth::generate_utterance(&spec, index).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("id", &u.id)?;
    d.set_item("syllables", &u.transcript.syllables)?;
    d.set_item("characters", &u.transcript.characters)?;
    d.set_item("audio", u.audio.samples().to_vec())?;
    d.set_item("vocal", u.vocal.channels().to_vec())?;
    d.set_item("silent", u.silent.channels().to_vec())?;
    Ok(d)
}

/// A trained SSRNet loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Ssrnet,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = training::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Untrained model with the small default architecture.
    #[staticmethod]
    #[pyo3(signature = (num_classes, seed = 0))]
    fn reduced(num_classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = semg2v::model::SsrnetConfig { num_classes, ..semg2v::model::SsrnetConfig::reduced() };
        Ok(Self { inner: Ssrnet::new(cfg, seed).map_err(py_err)? })
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.config().input_dim
    }

    #[getter]
    fn mel_dim(&self) -> usize {
        self.inner.config().mel_dim
    }

    /// Predicts durations and a log-mel spectrogram from silent features.
    fn infer<'py>(&self, py: Python<'py>, features: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let inf = self.inner.infer(&to_matrix(features)?).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("durations", inf.durations)?;
        d.set_item("raw_durations", inf.raw_durations)?;
        d.set_item("mel", to_rows(&inf.mel))?;
        Ok(d)
    }
}

/// The staged, cached command-line pipeline.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config = None, overrides = Vec::new()))]
    fn new(config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let mut cfg = match config {
            Some(p) => PipelineConfig::load(&p).map_err(py_err)?,
            None => PipelineConfig::default(),
        };
        cfg.apply_overrides(&overrides).map_err(py_err)?;
        Ok(Self { inner: pipeline::Pipeline::new(cfg).map_err(py_err)? })
    }

    #[getter]
    fn workdir(&self) -> PathBuf {
        self.inner.config().workdir.clone()
    }

    fn config_text(&self) -> String {
        self.inner.config().to_text()
    }

    /// Runs one stage name or `"all"`; returns `(stage, skipped, dir)`.
    fn run(&self, py: Python<'_>, stage: &str) -> PyResult<Vec<(String, bool, PathBuf)>> {
        let command: pipeline::Command = stage.parse().map_err(py_err)?;
        let reports = py.detach(|| self.inner.run(command)).map_err(py_err)?;
        Ok(reports.into_iter().map(|r| (r.stage.name().to_string(), r.skipped, r.dir)).collect())
    }
}

#[pymodule]
pub fn semg2v_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(condition, m)?)?;
    m.add_function(wrap_pyfunction!(emg_features, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(griffin_lim, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_basic, m)?)?;
    m.add_function(wrap_pyfunction!(dtw_refined, m)?)?;
    m.add_function(wrap_pyfunction!(path_to_durations, m)?)?;
    m.add_function(wrap_pyfunction!(cer, m)?)?;
    m.add_function(wrap_pyfunction!(mcd, m)?)?;
    m.add_function(wrap_pyfunction!(stoi, m)?)?;
    m.add_function(wrap_pyfunction!(noam_lr, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_utterance, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPipeline>()?;
    m.add("FEATURE_DIM", features::FEATURE_DIM)?;
    Ok(())
}
