//! Python bindings. Audio crosses the boundary as lists of floats plus a
//! sample rate; structured results come back as dicts.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use doubleecho::classifier::{self, ForestModel, Hyperparameters, PairMeta, PairSample};
use doubleecho::features::{feature_label, FeatureVector};
use doubleecho::pipeline;
use doubleecho::protocol::{self, DemoKind, Payload, ProtocolMessage, SessionKey};
use doubleecho::rir::{DeconvolutionMethod, DEFAULT_EPSILON};
use doubleecho::signal::{self, AudioSignal};
use doubleecho::simulator::{self, Absorption, DeviceProfile, Label, Placement, RoomModel};
use doubleecho::Error;

create_exception!(doubleecho, DoubleEchoError, PyException);
create_exception!(doubleecho, MeasurementError, DoubleEchoError);
create_exception!(doubleecho, ProtocolAbort, DoubleEchoError);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Parameter { .. } | Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Degenerate(_) | Error::Truncation { .. } | Error::Range(_) | Error::Measurement(_) => {
            MeasurementError::new_err(e.to_string())
        }
        e if e.is_protocol_abort() => ProtocolAbort::new_err(e.to_string()),
        e => DoubleEchoError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for doubleecho::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn label_name(l: Label) -> &'static str {
    match l {
        Label::Copresent => "copresent",
        Label::NonCopresent => "non_copresent",
    }
}

fn label_of(copresent: bool) -> Label {
    if copresent {
        Label::Copresent
    } else {
        Label::NonCopresent
    }
}

/// Excitation sweep parameters.
#[pyclass(name = "SweepSpec", from_py_object)]
#[derive(Clone)]
struct PySweepSpec {
    inner: signal::SweepSpec,
}

#[pymethods]
impl PySweepSpec {
    #[new]
    #[pyo3(signature = (f_start=0.0, f_end=22050.0, sweep_duration=2.0, lead_silence=1.0, tail_silence=2.0, amplitude=0.5, sample_rate=44100))]
    fn new(
        f_start: f64,
        f_end: f64,
        sweep_duration: f64,
        lead_silence: f64,
        tail_silence: f64,
        amplitude: f64,
        sample_rate: u32,
    ) -> PyResult<Self> {
        let inner = signal::SweepSpec {
            f_start,
            f_end,
            sweep_duration,
            lead_silence,
            tail_silence,
            amplitude,
            sample_rate,
        };
        inner.validate().py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn total_samples(&self) -> usize {
        self.inner.total_samples()
    }

    /// The seven fields in wire order.
    fn to_fields(&self) -> Vec<f64> {
        self.inner.to_fields().to_vec()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "SweepSpec(f_start={}, f_end={}, sweep_duration={}, lead_silence={}, tail_silence={}, amplitude={}, sample_rate={})",
            s.f_start, s.f_end, s.sweep_duration, s.lead_silence, s.tail_silence, s.amplitude, s.sample_rate
        )
    }
}

/// Padded linear sweep as a list of samples.
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn generate_sweep(spec: Option<PySweepSpec>) -> PyResult<Vec<f64>> {
    let spec = spec.map_or_else(signal::SweepSpec::default, |s| s.inner);
    Ok(signal::generate_sweep(&spec).py()?.into_samples())
}

#[pyfunction]
fn write_wav(path: &str, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
    signal::write_wav(&AudioSignal::new(samples, sample_rate).py()?, path).py()
}

/// Returns `(samples, sample_rate)`.
#[pyfunction]
fn read_wav(path: &str) -> PyResult<(Vec<f64>, u32)> {
    let s = signal::read_wav(path).py()?;
    let rate = s.sample_rate();
    Ok((s.into_samples(), rate))
}

/// Recording to features: align, trim, normalize, deconvolve, extract.
#[pyclass(name = "Analyzer")]
struct PyAnalyzer {
    inner: pipeline::Analyzer,
}

#[pymethods]
impl PyAnalyzer {
    #[new]
    #[pyo3(signature = (spec=None, method="matched", epsilon=DEFAULT_EPSILON))]
    fn new(spec: Option<PySweepSpec>, method: &str, epsilon: f64) -> PyResult<Self> {
        let spec = spec.map_or_else(signal::SweepSpec::default, |s| s.inner);
        let method = match method {
            "matched" => DeconvolutionMethod::MatchedFilter,
            "inverse" => DeconvolutionMethod::RegularizedInverse,
            other => return Err(PyValueError::new_err(format!("unknown method {other:?}"))),
        };
        Ok(Self {
            inner: pipeline::Analyzer::new(&spec).py()?.with_method(method, epsilon),
        })
    }

    /// `{"features": [...224], "meta": {...}, "ir": [...]}`
    #[pyo3(signature = (samples, sample_rate=44100, include_ir=false))]
    fn analyze<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<f64>,
        sample_rate: u32,
        include_ir: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let rec = AudioSignal::new(samples, sample_rate).py()?;
        let analysis = py.detach(|| self.inner.analyze(&rec)).py()?;
        let meta = analysis.meta();
        let out = PyDict::new(py);
        out.set_item("features", analysis.features.values().to_vec())?;
        let m = PyDict::new(py);
        m.set_item("alignment_lag", meta.alignment_lag)?;
        m.set_item("alignment_seconds", meta.alignment_seconds)?;
        m.set_item("direct_index", meta.direct_index)?;
        m.set_item("noise_floor_db", meta.noise_floor_db)?;
        m.set_item("rir_len", meta.rir_len)?;
        out.set_item("meta", m)?;
        if include_ir {
            out.set_item("ir", analysis.ir.samples().to_vec())?;
        }
        Ok(out)
    }

    fn feature_names(&self) -> Vec<String> {
        (0..doubleecho::features::FEATURE_COUNT)
            .map(|i| feature_label(self.inner.plan(), i))
            .collect()
    }
}

/// What a phone at `receiver` records when `excitation` plays at `source`
/// in a shoebox room.
#[pyfunction]
#[pyo3(signature = (dimensions, absorption, source, receiver, excitation, sample_rate=44100, seed=0, snr_db=None, gain_db=0.0, max_order=60, max_duration=None))]
#[allow(clippy::too_many_arguments)]
fn simulate_recording(
    py: Python<'_>,
    dimensions: [f64; 3],
    absorption: f64,
    source: [f64; 3],
    receiver: [f64; 3],
    excitation: Vec<f64>,
    sample_rate: u32,
    seed: u64,
    snr_db: Option<f64>,
    gain_db: f64,
    max_order: u32,
    max_duration: Option<f64>,
) -> PyResult<Vec<f64>> {
    let mut room = RoomModel::new(dimensions, Absorption::all(absorption), max_order);
    room.max_duration = max_duration;
    let place = Placement { source, receiver };
    let device = DeviceProfile {
        snr_db,
        gain_db,
        ..DeviceProfile::identity()
    };
    let exc = AudioSignal::new(excitation, sample_rate).py()?;
    let rec = py
        .detach(|| simulator::simulate_recording(&room, &place, &exc, &device, seed))
        .py()?;
    Ok(rec.into_samples())
}

/// Squared component-wise differences of two feature vectors.
#[pyfunction]
fn pair_features(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    classifier::pair_features(&a, &b).py()
}

#[pyfunction]
#[pyo3(signature = (a, b, sample_rate=44100))]
fn xcorr_similarity(a: Vec<f64>, b: Vec<f64>, sample_rate: u32) -> PyResult<f64> {
    let a = AudioSignal::new(a, sample_rate).py()?;
    let b = AudioSignal::new(b, sample_rate).py()?;
    classifier::xcorr_similarity(&a, &b).py()
}

fn samples_of(diffs: Vec<Vec<f64>>, labels: Vec<bool>) -> PyResult<Vec<PairSample>> {
    if diffs.len() != labels.len() {
        return Err(PyValueError::new_err("diffs and labels differ in length"));
    }
    diffs
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (d, l))| PairSample::new(d, label_of(l), PairMeta { pair_id: i, ..PairMeta::default() }).py())
        .collect()
}

fn hyperparameters(trees: usize, max_depth: usize, min_leaf: usize, mtry: usize, top_k: usize) -> Hyperparameters {
    Hyperparameters {
        tree_count: trees,
        max_depth,
        min_leaf,
        mtry,
        top_k,
    }
}

/// Trained random forest over pair-difference vectors.
#[pyclass(name = "ForestModel")]
struct PyForestModel {
    inner: ForestModel,
}

#[pymethods]
impl PyForestModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ForestModel::from_json(text).py()?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    /// `(copresent, score)` for one difference vector.
    fn predict(&self, diff: Vec<f64>) -> PyResult<(bool, f64)> {
        let p = self.inner.predict(&diff).py()?;
        Ok((p.verdict.is_copresent(), p.score))
    }

    #[getter]
    fn selected_features(&self) -> Vec<usize> {
        self.inner.selected_features.clone()
    }
}

/// Undersample, select the top features and grow the forest.
#[pyfunction]
#[pyo3(signature = (diffs, labels, seed, trees=100, max_depth=12, min_leaf=2, mtry=8, top_k=50))]
#[allow(clippy::too_many_arguments)]
fn fit_model(
    py: Python<'_>,
    diffs: Vec<Vec<f64>>,
    labels: Vec<bool>,
    seed: u64,
    trees: usize,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    top_k: usize,
) -> PyResult<PyForestModel> {
    let samples = samples_of(diffs, labels)?;
    let hp = hyperparameters(trees, max_depth, min_leaf, mtry, top_k);
    let inner = py.detach(|| classifier::fit_model(&samples, &hp, seed)).py()?;
    Ok(PyForestModel { inner })
}

/// Stratified k-fold confusion counts and rates.
#[pyfunction]
#[pyo3(signature = (diffs, labels, folds, seed, trees=100, max_depth=12, min_leaf=2, mtry=8, top_k=50))]
#[allow(clippy::too_many_arguments)]
fn cross_validate<'py>(
    py: Python<'py>,
    diffs: Vec<Vec<f64>>,
    labels: Vec<bool>,
    folds: usize,
    seed: u64,
    trees: usize,
    max_depth: usize,
    min_leaf: usize,
    mtry: usize,
    top_k: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let samples = samples_of(diffs, labels)?;
    let hp = hyperparameters(trees, max_depth, min_leaf, mtry, top_k);
    let report = py.detach(|| classifier::cross_validate(&samples, folds, &hp, seed)).py()?;
    let r = report.aggregate;
    let out = PyDict::new(py);
    out.set_item("tp", r.tp)?;
    out.set_item("fn", r.fn_)?;
    out.set_item("fp", r.fp)?;
    out.set_item("tn", r.tn)?;
    out.set_item("fnr", r.fnr())?;
    out.set_item("fpr", r.fpr())?;
    out.set_item("csv", report.to_csv("python"))?;
    Ok(out)
}

fn key_of(hex_key: &str) -> PyResult<SessionKey> {
    SessionKey::from_hex(hex_key).py()
}

fn verifier_phase(p: protocol::VerifierPhase) -> String {
    match p {
        protocol::VerifierPhase::Idle => "idle".into(),
        protocol::VerifierPhase::AwaitingReport => "awaiting_report".into(),
        protocol::VerifierPhase::Done(l) => format!("done:{}", label_name(l)),
        protocol::VerifierPhase::Aborted(r) => format!("aborted:{r:?}").to_lowercase(),
    }
}

fn prover_phase(p: protocol::ProverPhase) -> String {
    match p {
        protocol::ProverPhase::AwaitingStart => "awaiting_start".into(),
        protocol::ProverPhase::Recording => "recording".into(),
        protocol::ProverPhase::AwaitingDecision => "awaiting_decision".into(),
        protocol::ProverPhase::Done(l) => format!("done:{}", label_name(l)),
        protocol::ProverPhase::Aborted(r) => format!("aborted:{r:?}").to_lowercase(),
    }
}

#[pyclass(name = "Verifier")]
struct PyVerifier {
    inner: protocol::Verifier,
}

#[pymethods]
impl PyVerifier {
    #[new]
    #[pyo3(signature = (key_hex, spec=None))]
    fn new(key_hex: &str, spec: Option<PySweepSpec>) -> PyResult<Self> {
        let spec = spec.map_or_else(signal::SweepSpec::default, |s| s.inner);
        Ok(Self {
            inner: protocol::Verifier::new(key_of(key_hex)?, spec),
        })
    }

    #[getter]
    fn phase(&self) -> String {
        verifier_phase(self.inner.phase())
    }

    fn start_session<'py>(&mut self, py: Python<'py>, entropy_seed: u64) -> PyResult<Bound<'py, PyBytes>> {
        let msg = self.inner.start_session(entropy_seed).py()?;
        Ok(PyBytes::new(py, &msg))
    }

    #[pyo3(signature = (samples, sample_rate=44100))]
    fn record_local(&mut self, samples: Vec<f64>, sample_rate: u32) -> PyResult<()> {
        let rec = AudioSignal::new(samples, sample_rate).py()?;
        self.inner.record_local(&rec).py()
    }

    fn set_local_features(&mut self, features: Vec<f64>) -> PyResult<()> {
        self.inner.set_local_features(FeatureVector::new(features).py()?).py()
    }

    /// Checks and classifies a Report; returns the Decision message.
    fn decide<'py>(&mut self, py: Python<'py>, report: &[u8], model: &PyForestModel) -> PyResult<Bound<'py, PyBytes>> {
        let msg = self.inner.verifier_decide(report, &model.inner).py()?;
        Ok(PyBytes::new(py, &msg))
    }
}

#[pyclass(name = "Prover")]
struct PyProver {
    inner: protocol::Prover,
}

#[pymethods]
impl PyProver {
    #[new]
    fn new(key_hex: &str) -> PyResult<Self> {
        Ok(Self {
            inner: protocol::Prover::new(key_of(key_hex)?),
        })
    }

    #[getter]
    fn phase(&self) -> String {
        prover_phase(self.inner.phase())
    }

    fn accept_start(&mut self, start: &[u8]) -> PyResult<PySweepSpec> {
        Ok(PySweepSpec {
            inner: self.inner.accept_start(start).py()?,
        })
    }

    #[pyo3(signature = (samples, sample_rate=44100))]
    fn respond<'py>(&mut self, py: Python<'py>, samples: Vec<f64>, sample_rate: u32) -> PyResult<Bound<'py, PyBytes>> {
        let rec = AudioSignal::new(samples, sample_rate).py()?;
        let msg = self.inner.prover_respond(&rec).py()?;
        Ok(PyBytes::new(py, &msg))
    }

    /// True when the verifier decided copresent.
    fn accept_decision(&mut self, decision: &[u8]) -> PyResult<bool> {
        Ok(self.inner.accept_decision(decision).py()?.is_copresent())
    }
}

/// Parses a message without checking its tag.
#[pyfunction]
fn decode_message<'py>(py: Python<'py>, message: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let msg = ProtocolMessage::decode(message).py()?;
    let out = PyDict::new(py);
    out.set_item("kind", msg.payload.kind())?;
    match &msg.payload {
        Payload::Start { nonce, sweep } => {
            out.set_item("nonce", hex::encode(nonce.as_bytes()))?;
            out.set_item("sweep", sweep.to_fields().to_vec())?;
        }
        Payload::Report { nonce, features } => {
            out.set_item("nonce", hex::encode(nonce.as_bytes()))?;
            out.set_item("features", features.values().to_vec())?;
        }
        Payload::Decision { verdict } => out.set_item("verdict", label_name(*verdict))?,
    }
    out.set_item("mac", hex::encode(msg.mac))?;
    Ok(out)
}

/// One simulated session: `kind` is benign, relay or manipulate.
/// Returns the transcript and either a verdict or the abort reason.
#[pyfunction]
#[pyo3(signature = (kind, model, seed, key_hex=None))]
fn run_demo<'py>(
    py: Python<'py>,
    kind: &str,
    model: &PyForestModel,
    seed: u64,
    key_hex: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let kind: DemoKind = kind.parse().py()?;
    let key = match key_hex {
        Some(k) => key_of(k)?,
        None => SessionKey::from_seed(seed),
    };
    let sweep = signal::SweepSpec::default();
    let outcome = py
        .detach(|| -> doubleecho::Result<protocol::SessionOutcome> {
            let env = protocol::demo_environment(kind, seed, &sweep)?;
            let mut v = protocol::Verifier::new(key.clone(), sweep);
            let mut p = protocol::Prover::new(key);
            Ok(protocol::run_session(&mut v, &mut p, &env, &model.inner, seed, &mut |_, m| {
                protocol::relay(m)
            }))
        })
        .py()?;
    let out = PyDict::new(py);
    let transcript: Vec<(String, String, String)> = outcome
        .transcript
        .entries
        .iter()
        .map(|e| (e.from.to_string(), e.kind.clone(), hex::encode(&e.bytes)))
        .collect();
    out.set_item("transcript", transcript)?;
    match outcome.result {
        Ok(l) => {
            out.set_item("verdict", label_name(l))?;
            out.set_item("error", py.None())?;
        }
        Err(e) => {
            out.set_item("verdict", py.None())?;
            out.set_item("error", e.to_string())?;
        }
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "doubleecho")]
fn doubleecho_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("DoubleEchoError", py.get_type::<DoubleEchoError>())?;
    m.add("MeasurementError", py.get_type::<MeasurementError>())?;
    m.add("ProtocolAbort", py.get_type::<ProtocolAbort>())?;
    m.add("FEATURE_COUNT", doubleecho::features::FEATURE_COUNT)?;
    m.add("BASELINE_THRESHOLD", classifier::BASELINE_THRESHOLD)?;
    m.add_class::<PySweepSpec>()?;
    m.add_class::<PyAnalyzer>()?;
    m.add_class::<PyForestModel>()?;
    m.add_class::<PyVerifier>()?;
    m.add_class::<PyProver>()?;
    m.add_function(wrap_pyfunction!(generate_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(write_wav, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_recording, m)?)?;
    m.add_function(wrap_pyfunction!(pair_features, m)?)?;
    m.add_function(wrap_pyfunction!(xcorr_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(fit_model, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    m.add_function(wrap_pyfunction!(run_demo, m)?)?;
    Ok(())
}
