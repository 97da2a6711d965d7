//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use dsran::config::RunConfig;
use dsran::diff::Tensor;
use dsran::evalkit::{self, Direction, RerankConfig, RetrievalReport, SimilarityMatrix};
use dsran::featurestore::{self, FeatureSet, SyntheticConfig};
use dsran::matcher::{self, LossConfig};
use dsran::train;
use dsran::{checkpoint, Error};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub type Rows = Vec<Vec<f64>>;

pub fn to_tensor(rows: &Rows) -> dsran::Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::ShapeMismatch("ragged rows".into()));
    }
    Tensor::from_shape_vec((rows.len(), cols), rows.concat())
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

pub fn to_rows(t: &Tensor) -> Rows {
    t.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn similarity(scores: &Rows, captions_per_image: usize) -> dsran::Result<SimilarityMatrix> {
    SimilarityMatrix::new(to_tensor(scores)?, captions_per_image)
}

pub fn direction(name: &str) -> dsran::Result<Direction> {
    match name {
        "i2t" => Ok(Direction::I2T),
        "t2i" => Ok(Direction::T2I),
        other => Err(Error::Config(format!(
            "direction must be i2t or t2i, got {other:?}"
        ))),
    }
}

/// Image-to-text rankings after re-ranking each image's top `top_n` texts.
pub fn rerank_orders(
    scores: &Rows,
    captions_per_image: usize,
    top_n: usize,
    lambda: f64,
) -> dsran::Result<Vec<Vec<usize>>> {
    let sim = similarity(scores, captions_per_image)?;
    let rr = evalkit::rerank_i2t(&sim, &RerankConfig { top_n, lambda })?;
    Ok((0..rr.n_images()).map(|i| rr.i2t_order(i)).collect())
}

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.name());
    if e.is_environmental() {
        PyOSError::new_err(msg)
    } else {
        PyValueError::new_err(msg)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &RetrievalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (key, v) in ["i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10"]
        .into_iter()
        .zip(r.recalls())
    {
        d.set_item(key, v)?;
    }
    d.set_item("rsum", r.rsum)?;
    Ok(d)
}

/// Features and captions loaded from a dataset directory.
#[pyclass(name = "Dataset", frozen)]
pub struct PyDataset {
    inner: featurestore::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        featurestore::load_dataset(&path)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn captions_per_image(&self) -> usize {
        self.inner.manifest.captions_per_image
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.manifest.feature_dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.manifest.vocab_size
    }

    /// Caption token ids without padding, grouped by image.
    fn captions(&self) -> Vec<Vec<Vec<u32>>> {
        self.inner
            .items
            .iter()
            .map(|f| f.captions.clone())
            .collect()
    }

    /// `(global, regional)` node features of one item.
    fn features(&self, index: usize) -> PyResult<(Rows, Rows)> {
        let item = self
            .inner
            .items
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("item {index} out of range")))?;
        Ok((to_rows(&item.global), to_rows(&item.regional)))
    }
}

/// A trained model restored from a checkpoint or trained in process.
#[pyclass(name = "Model", frozen)]
pub struct PyModel {
    inner: dsran::model::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        checkpoint::load(&path)
            .map(|(inner, _)| Self { inner })
            .map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, 0, serde_json::json!({})).map_err(py_err)
    }

    fn encode_images(&self, dataset: &PyDataset) -> PyResult<Rows> {
        let images: Vec<&FeatureSet> = dataset.inner.items.iter().collect();
        self.inner
            .encode_images(&images)
            .map(|t| to_rows(&t))
            .map_err(py_err)
    }

    fn encode_captions(&self, dataset: &PyDataset) -> PyResult<Rows> {
        self.inner
            .encode_captions(&dataset.inner.all_captions())
            .map(|t| to_rows(&t))
            .map_err(py_err)
    }

    /// Image-by-caption cosine similarity over the whole dataset.
    fn similarity(&self, dataset: &PyDataset) -> PyResult<Rows> {
        self.inner
            .similarity(&dataset.inner)
            .map(|s| to_rows(s.scores()))
            .map_err(py_err)
    }

    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let sim = self.inner.similarity(&dataset.inner).map_err(py_err)?;
        report_dict(py, &evalkit::evaluate(&sim).map_err(py_err)?)
    }
}

/// Writes a seeded synthetic dataset and returns its directory.
#[pyfunction]
#[pyo3(signature = (out, seed=7, items=16, captions=5, global_nodes=16, regional_nodes=12, dim=64, vocab=200, max_words=12))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    out: PathBuf,
    seed: u64,
    items: usize,
    captions: usize,
    global_nodes: usize,
    regional_nodes: usize,
    dim: usize,
    vocab: usize,
    max_words: usize,
) -> PyResult<PathBuf> {
    let synth = SyntheticConfig {
        seed,
        n_items: items,
        cluster_count: items.min(16),
        captions_per_image: captions,
        global_nodes,
        regional_nodes,
        feature_dim: dim,
        vocab_size: vocab,
        max_words,
    };
    featurestore::generate_synthetic(&synth, &out).map_err(py_err)?;
    Ok(out)
}

/// Trains a model from a JSON run configuration (dataset dims are adopted
/// from the manifest). Returns the model and its per-epoch losses.
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None))]
fn train_model(dataset: &PyDataset, config_json: Option<&str>) -> PyResult<(PyModel, Vec<f64>)> {
    let mut cfg: RunConfig = match config_json {
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("JsonError: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.model.feature_dim = dataset.inner.manifest.feature_dim;
    cfg.model.vocab_size = dataset.inner.manifest.vocab_size;
    let mut model = dsran::model::Model::new(cfg.model.clone(), cfg.seed).map_err(py_err)?;
    let log =
        train::train(&mut model, &dataset.inner, &cfg.train_config(), &cfg.loss).map_err(py_err)?;
    Ok((PyModel { inner: model }, log.losses()))
}

#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    scores: Rows,
    captions_per_image: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let sim = similarity(&scores, captions_per_image).map_err(py_err)?;
    report_dict(py, &evalkit::evaluate(&sim).map_err(py_err)?)
}

#[pyfunction]
fn recall_at_k(
    scores: Rows,
    captions_per_image: usize,
    direction: &str,
    k: usize,
) -> PyResult<f64> {
    let sim = similarity(&scores, captions_per_image).map_err(py_err)?;
    evalkit::recall_at_k(&sim, self::direction(direction).map_err(py_err)?, k).map_err(py_err)
}

#[pyfunction]
fn rsum(recalls: [f64; 6]) -> f64 {
    evalkit::rsum(recalls)
}

#[pyfunction]
#[pyo3(signature = (scores, captions_per_image, top_n=15, lambda_=0.5))]
fn rerank_i2t(
    scores: Rows,
    captions_per_image: usize,
    top_n: usize,
    lambda_: f64,
) -> PyResult<Vec<Vec<usize>>> {
    rerank_orders(&scores, captions_per_image, top_n, lambda_).map_err(py_err)
}

#[pyfunction]
fn ensemble(a: Rows, b: Rows, captions_per_image: usize) -> PyResult<Rows> {
    let sa = similarity(&a, captions_per_image).map_err(py_err)?;
    let sb = similarity(&b, captions_per_image).map_err(py_err)?;
    evalkit::ensemble(&sa, &sb)
        .map(|s| to_rows(s.scores()))
        .map_err(py_err)
}

#[pyfunction]
fn cosine_similarity(images: Rows, texts: Rows) -> PyResult<Rows> {
    let a = to_tensor(&images).map_err(py_err)?;
    let b = to_tensor(&texts).map_err(py_err)?;
    matcher::cosine_similarity_matrix(&a, &b)
        .map(|s| to_rows(&s))
        .map_err(py_err)
}

/// Hardest-negative hinge loss of a square batch score matrix.
#[pyfunction]
#[pyo3(signature = (scores, margin=0.2))]
fn triplet_loss(scores: Rows, margin: f64) -> PyResult<f64> {
    let s = to_tensor(&scores).map_err(py_err)?;
    let cfg = LossConfig {
        margin,
        ..LossConfig::default()
    };
    matcher::triplet_loss_value(&s, &cfg).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "dsran")]
fn dsran_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(rsum, m)?)?;
    m.add_function(wrap_pyfunction!(rerank_i2t, m)?)?;
    m.add_function(wrap_pyfunction!(ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    Ok(())
}
