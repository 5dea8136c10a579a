//! Python bindings: audio front end, units, codebooks, decoder checkpoints,
//! conversion and metrics. Arrays cross the boundary as plain lists.

use std::path::PathBuf;

use candle_core::DType;
use pyo3::exceptions::{PyFileNotFoundError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ezvc::audio::{self, Waveform};
use ezvc::decoder::{self, Checkpoint, DitModel, SamplerConfig};
use ezvc::encoder::{EncoderSpec, SurrogateEncoder};
use ezvc::pipeline::{ConversionRequest, Converter};
use ezvc::quantizer::{self, KMeansConfig};
use ezvc::units::{UnitSequence, UnitVocabulary};
use ezvc::vocoder::VocoderSpec;
use ezvc::{eval, synth, Error};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e.kind() {
        "artifact-missing" => PyFileNotFoundError::new_err(msg),
        "io" => PyOSError::new_err(msg),
        "contract" | "domain" | "format" | "config" | "data" => PyValueError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for ezvc::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn waveform(samples: Vec<f32>, sample_rate: u32) -> PyResult<Waveform> {
    Waveform::new(samples, sample_rate).py()
}

/// Log-mel spectrogram, `n_frames × n_mels`.
#[pyclass(name = "MelSpectrogram", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMel(audio::MelSpectrogram);

#[pymethods]
impl PyMel {
    #[getter]
    fn n_frames(&self) -> usize {
        self.0.n_frames
    }

    #[getter]
    fn n_mels(&self) -> usize {
        self.0.n_mels
    }

    /// Row-major values.
    fn data(&self) -> Vec<f32> {
        self.0.data.clone()
    }

    fn frame(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.n_frames {
            return Err(PyValueError::new_err(format!("frame {i} out of range")));
        }
        Ok(self.0.frame(i).to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        audio::write_mel(path, &self.0).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        audio::read_mel(path).py().map(Self)
    }

    fn __repr__(&self) -> String {
        format!("MelSpectrogram(n_frames={}, n_mels={})", self.0.n_frames, self.0.n_mels)
    }
}

/// Read a WAV file as mono samples. Returns `(samples, sample_rate)`.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let w = audio::load_waveform(path).py()?;
    Ok((w.samples, w.sample_rate))
}

#[pyfunction]
fn write_wav(path: PathBuf, samples: Vec<f32>, sample_rate: u32) -> PyResult<()> {
    audio::write_waveform(path, &waveform(samples, sample_rate)?).py()
}

/// Log-mel with the default 16 kHz front end; other rates are resampled.
#[pyfunction]
fn log_mel(samples: Vec<f32>, sample_rate: u32) -> PyResult<PyMel> {
    let w = waveform(samples, sample_rate)?.to_model_rate().py()?;
    audio::log_mel(&w).py().map(PyMel)
}

/// Surrogate 50 Hz embeddings, one list per frame.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, seed, dim=400))]
fn surrogate_embed(samples: Vec<f32>, sample_rate: u32, seed: u64, dim: usize) -> PyResult<Vec<Vec<f32>>> {
    let w = waveform(samples, sample_rate)?.to_model_rate().py()?;
    let emb = SurrogateEncoder::new(EncoderSpec::surrogate(dim, seed)).py()?.embed(&w).py()?;
    Ok(emb.rows().map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn dedup(units: Vec<u32>) -> Vec<u32> {
    ezvc::units::dedup(&UnitSequence::new(units)).units
}

/// Deduplicated units FILLER-padded to `target_len` tokens.
#[pyfunction]
fn to_tokens(units: Vec<u32>, k_units: usize, target_len: usize) -> PyResult<Vec<u32>> {
    let seq = ezvc::units::dedup(&UnitSequence::new(units));
    UnitVocabulary::new(k_units).to_tokens(&seq, target_len).py()
}

/// k-means codebook over embedding frames.
#[pyclass(name = "Codebook", frozen)]
struct PyCodebook(quantizer::Codebook);

#[pymethods]
impl PyCodebook {
    /// Cluster `points` (one list per point) into `k` centroids.
    #[staticmethod]
    #[pyo3(signature = (points, k, seed, max_iters=100))]
    fn train(points: Vec<Vec<f32>>, k: usize, seed: u64, max_iters: usize) -> PyResult<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(PyValueError::new_err("points must be non-empty rows of equal length"));
        }
        let flat: Vec<f32> = points.into_iter().flatten().collect();
        let cfg = KMeansConfig {
            k,
            seed,
            max_iters,
            ..KMeansConfig::default()
        };
        Ok(Self(quantizer::kmeans_points(&flat, dim, &cfg).py()?.codebook))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        quantizer::load_codebook(path).py().map(Self)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        quantizer::save_codebook(&self.0, path).py()
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim
    }

    #[getter]
    fn inertia(&self) -> f64 {
        self.0.inertia
    }

    fn centroid(&self, i: usize) -> PyResult<Vec<f32>> {
        if i >= self.0.k {
            return Err(PyValueError::new_err(format!("centroid {i} out of range")));
        }
        Ok(self.0.centroid(i).to_vec())
    }

    /// Nearest-centroid index of every row (not deduplicated).
    fn assign(&self, points: Vec<Vec<f32>>) -> PyResult<Vec<u32>> {
        points
            .iter()
            .map(|p| {
                if p.len() != self.0.dim {
                    return Err(PyValueError::new_err(format!("expected {}-dim rows", self.0.dim)));
                }
                Ok(self.0.nearest(p).0 as u32)
            })
            .collect()
    }
}

/// A trained decoder loaded from a checkpoint.
#[pyclass(name = "Decoder", frozen)]
struct PyDecoder(DitModel);

#[pymethods]
impl PyDecoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).py()?.to_model(DType::F32).py().map(Self)
    }

    /// Fresh desk-size model for a codebook of `k_units`.
    #[staticmethod]
    fn desk(k_units: usize, seed: u64) -> PyResult<Self> {
        DitModel::new(decoder::DecoderConfig::desk(k_units), DType::F32, seed).py().map(Self)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params().num_scalars()
    }

    /// The model configuration as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(self.0.config()).expect("config serializes")
    }

    /// Convert `source` into the voice of `target`. Returns a dict with the
    /// audio samples, sample rate, generated mel and both unit sequences.
    #[pyo3(signature = (source, target, sample_rate, codebook, seed, encoder_seed=0, steps=32, guidance_w=2.0, sway_s=-1.0, gl_iters=32))]
    #[allow(clippy::too_many_arguments)]
    fn convert<'py>(
        &self,
        py: Python<'py>,
        source: Vec<f32>,
        target: Vec<f32>,
        sample_rate: u32,
        codebook: &PyCodebook,
        seed: u64,
        encoder_seed: u64,
        steps: usize,
        guidance_w: f64,
        sway_s: f64,
        gl_iters: usize,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let conv = Converter {
            model: &self.0,
            codebook: &codebook.0,
            encoder: EncoderSpec {
                seed: encoder_seed,
                ..EncoderSpec::default()
            },
            vocoder: VocoderSpec {
                gl_iters,
                ..VocoderSpec::default()
            },
        };
        let mut req = ConversionRequest::new(waveform(source, sample_rate)?, waveform(target, sample_rate)?, seed);
        req.sampler = SamplerConfig {
            steps,
            guidance_w,
            sway_s,
        };
        let r = py.detach(|| conv.convert(&req)).py()?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("audio", r.audio.samples)?;
        d.set_item("sample_rate", r.audio.sample_rate)?;
        d.set_item("generated_mel", PyMel(r.generated_mel))?;
        d.set_item("source_units", r.source_units.units)?;
        d.set_item("target_units", r.target_units.units)?;
        d.set_item("prompt_frames", r.prompt_frames)?;
        Ok(d)
    }
}

#[pyfunction]
fn sway_schedule(steps: usize, sway_s: f64) -> Vec<f64> {
    decoder::sway_schedule(steps, sway_s)
}

/// Unit-norm 160-dim proxy speaker vector.
#[pyfunction]
fn proxy_speaker_embedding(samples: Vec<f32>, sample_rate: u32) -> PyResult<Vec<f32>> {
    Ok(eval::proxy_speaker_embedding(&waveform(samples, sample_rate)?).py()?.vector)
}

#[pyfunction]
fn cosine_similarity(a: Vec<f32>, b: Vec<f32>) -> PyResult<f64> {
    let wrap = |v: Vec<f32>| eval::SpeakerEmbedding::from_raw(&v.iter().map(|&x| x as f64).collect::<Vec<_>>(), "python");
    eval::cosine_similarity(&wrap(a).py()?, &wrap(b).py()?).py()
}

#[pyfunction]
fn unit_overlap(a: Vec<u32>, b: Vec<u32>) -> f64 {
    eval::unit_overlap(&UnitSequence::new(a), &UnitSequence::new(b))
}

#[pyfunction]
fn mel_l1(a: &PyMel, b: &PyMel) -> PyResult<f64> {
    eval::mel_l1(&a.0, &b.0).py()
}

/// The ten bundled synthetic utterances as `(id, speaker, samples)`.
#[pyfunction]
fn desk_corpus() -> Vec<(String, usize, Vec<f32>)> {
    synth::desk_corpus()
        .into_iter()
        .map(|u| (u.id, u.speaker, u.waveform.samples))
        .collect()
}

#[pymodule]
fn ezvc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("SAMPLE_RATE", audio::MODEL_SAMPLE_RATE)?;
    m.add_class::<PyMel>()?;
    m.add_class::<PyCodebook>()?;
    m.add_class::<PyDecoder>()?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(log_mel, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_embed, m)?)?;
    m.add_function(wrap_pyfunction!(dedup, m)?)?;
    m.add_function(wrap_pyfunction!(to_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(sway_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(proxy_speaker_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(unit_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(mel_l1, m)?)?;
    m.add_function(wrap_pyfunction!(desk_corpus, m)?)?;
    Ok(())
}
