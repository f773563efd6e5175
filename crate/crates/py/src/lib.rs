//! Python bindings for the queryshield core: dataset generation, model
//! training, encoding, threshold calibration, the defended gateway, the NES
//! attack, and the economics calculator.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use queryshield::attacks::{nes_attack, Blinding, ModelOracle, NesParams, Oracle};
use queryshield::detector::{
    calibrate_threshold, side_channel_bits, BanPolicy, BufferPolicy, DetectorConfig, QueryMetric,
};
use queryshield::encoder::{encode, train_encoder, EncoderConfig};
use queryshield::gateway::{Gateway, QueryMode, QueryRequest, QueryResponse};
use queryshield::harness::{
    economics_query_bounded, economics_time_bounded, generate_synthetic_dataset,
};
use queryshield::models::{classify, train_classifier, ClassifierConfig, Image, ImageShape};
use queryshield::numerics::{NetModel, OptimConfig};
use queryshield::rng::RootSeed;
use queryshield::transforms::{calibrate, TransformKind};

fn err<T>(r: queryshield::Result<T>) -> PyResult<T> {
    r.map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: queryshield::models::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn label(&self, i: usize) -> PyResult<usize> {
        self.inner
            .labels
            .get(i)
            .copied()
            .ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    fn pixels(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .images
            .get(i)
            .map(|img| img.pixels().to_vec())
            .ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.class_count
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.shape;
        (s.h, s.w, s.c)
    }
}

#[pyclass(name = "Model")]
#[derive(Clone)]
struct PyModel {
    inner: NetModel,
    shape: ImageShape,
}

#[pymethods]
impl PyModel {
    fn classify(&self, pixels: Vec<f64>) -> PyResult<usize> {
        let image = err(Image::new(pixels, self.shape))?;
        err(classify(&self.inner, &image))
    }

    fn encode(&self, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let image = err(Image::new(pixels, self.shape))?;
        Ok(err(encode(&self.inner, &image))?.values)
    }

    #[getter]
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
}

#[pyfunction]
#[pyo3(signature = (h, w, c, classes, size, seed))]
fn generate_dataset(h: usize, w: usize, c: usize, classes: usize, size: usize, seed: u64) -> PyResult<PyDataset> {
    let mut rng = RootSeed(seed).stream("py-dataset");
    let inner = err(generate_synthetic_dataset(ImageShape { h, w, c }, classes, size, &mut rng))?;
    Ok(PyDataset { inner })
}

#[pyfunction]
#[pyo3(signature = (dataset, seed, epochs=20))]
fn train(dataset: &PyDataset, seed: u64, epochs: usize) -> PyResult<(PyModel, f64)> {
    let trained = err(train_classifier(
        &dataset.inner,
        &ClassifierConfig {
            hidden: vec![64, 32],
            holdout_fraction: 0.125,
            optim: OptimConfig {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 32,
                epochs,
                seed,
            },
        },
    ))?;
    Ok((
        PyModel { inner: trained.model, shape: dataset.inner.shape },
        trained.holdout_accuracy,
    ))
}

#[pyfunction]
#[pyo3(signature = (dataset, classifier, d, seed, epochs=5))]
fn fit_encoder(dataset: &PyDataset, classifier: &PyModel, d: usize, seed: u64, epochs: usize) -> PyResult<PyModel> {
    let mut rng = RootSeed(seed).stream("py-transform-calibration");
    let sample: Vec<Image> = dataset.inner.images.iter().take(32).cloned().collect();
    let target = 2.32 * (dataset.inner.shape.dim() as f64 / 3072.0).sqrt();
    let spec = err(calibrate(TransformKind::Brightness, &sample, target, &mut rng))?;
    let encoder = err(train_encoder(
        &dataset.inner,
        &classifier.inner,
        &EncoderConfig {
            d,
            margin: 10f64.sqrt(),
            fine_tune: OptimConfig {
                learning_rate: 0.01,
                momentum: 0.9,
                batch_size: 32,
                epochs,
                seed,
            },
            transforms: vec![spec],
        },
    ))?;
    Ok(PyModel { inner: encoder, shape: dataset.inner.shape })
}

#[pyfunction]
#[pyo3(signature = (encoder, dataset, k, fpr, buffer, seed))]
fn calibrate_tau(encoder: &PyModel, dataset: &PyDataset, k: usize, fpr: f64, buffer: usize, seed: u64) -> PyResult<f64> {
    let metric = QueryMetric::Encoder(&encoder.inner);
    let encodings: Vec<_> = err(dataset
        .inner
        .images
        .iter()
        .map(|i| metric.encode_query(i))
        .collect())?;
    let mut rng = RootSeed(seed).stream("py-calibration");
    err(calibrate_threshold(&encodings, k, fpr, BufferPolicy::QueryBounded(buffer), &mut rng))
}

fn ban_policy(name: &str) -> PyResult<BanPolicy> {
    match name {
        "immediate" => Ok(BanPolicy::Immediate),
        "pow2" => Ok(BanPolicy::PowerOfTwo),
        "geometric" => Ok(BanPolicy::Geometric { base: 1.1, offset: 50.0 }),
        other => Err(PyValueError::new_err(format!("unknown ban policy {other:?}"))),
    }
}

#[pyclass(name = "Gateway")]
struct PyGateway {
    inner: Gateway,
}

#[pymethods]
impl PyGateway {
    #[new]
    #[pyo3(signature = (classifier, encoder, k, threshold, buffer=2000, ban="immediate"))]
    fn new(
        classifier: &PyModel,
        encoder: &PyModel,
        k: usize,
        threshold: f64,
        buffer: usize,
        ban: &str,
    ) -> PyResult<Self> {
        let inner = err(Gateway::new(
            classifier.inner.clone(),
            Some(encoder.inner.clone()),
            DetectorConfig {
                k,
                threshold,
                buffer_policy: BufferPolicy::QueryBounded(buffer),
                fpr_target: 0.001,
                ban_policy: ban_policy(ban)?,
            },
            classifier.shape,
            false,
        ))?;
        Ok(Self { inner })
    }

    fn create_account(&mut self) -> u64 {
        self.inner.create_account()
    }

    /// Returns the label, or None once the account is banned.
    fn query(&mut self, account: u64, pixels: Vec<f64>) -> PyResult<Option<usize>> {
        let response = err(self.inner.handle_query(&QueryRequest {
            account_id: account,
            pixels,
            mode: QueryMode::Hard,
        }))?;
        Ok(match response {
            QueryResponse::Ok { label } => Some(label),
            QueryResponse::Banned => None,
            QueryResponse::OkSoft { .. } => unreachable!("hard mode"),
        })
    }

    #[getter]
    fn detections(&self) -> u64 {
        self.inner.detection_count()
    }
}

/// Run one NES trial against the bare model (no monitor); returns
/// (success, queries, linf distortion).
#[pyfunction]
#[pyo3(signature = (model, x, target, seed_image, max_queries, seed))]
fn run_nes(
    model: &PyModel,
    x: Vec<f64>,
    target: usize,
    seed_image: Vec<f64>,
    max_queries: u64,
    seed: u64,
) -> PyResult<(bool, u64, f64)> {
    let x = err(Image::new(x, model.shape))?;
    let seed_image = err(Image::new(seed_image, model.shape))?;
    let mut oracle = ModelOracle::new(&model.inner);
    let mut rng = RootSeed(seed).stream("py-nes");
    let params = NesParams { blinding: Blinding::None, ..NesParams::default_hard_label(max_queries) };
    let trace = err(nes_attack(&mut oracle, &x, target, &seed_image, &params, &mut rng))?;
    debug_assert_eq!(trace.queries_used, oracle.queries());
    Ok((trace.success, trace.queries_used, trace.linf_distortion))
}

#[pyfunction]
fn time_bounded_cost(detections: f64, buffer_hours: f64) -> f64 {
    economics_time_bounded(detections, buffer_hours)
}

#[pyfunction]
fn query_bounded_cost(detections: f64, buffer_queries: f64, price_per_1000: f64) -> f64 {
    economics_query_bounded(detections, buffer_queries, price_per_1000)
}

#[pyfunction]
fn ban_side_channel_bits(policy: &str, max_queries: u64) -> PyResult<f64> {
    Ok(side_channel_bits(&ban_policy(policy)?, max_queries))
}

#[pymodule]
fn queryshield_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyGateway>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(fit_encoder, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_tau, m)?)?;
    m.add_function(wrap_pyfunction!(run_nes, m)?)?;
    m.add_function(wrap_pyfunction!(time_bounded_cost, m)?)?;
    m.add_function(wrap_pyfunction!(query_bounded_cost, m)?)?;
    m.add_function(wrap_pyfunction!(ban_side_channel_bits, m)?)?;
    Ok(())
}
