//! Python bindings: worlds, pair generation, training, evaluation and the inversion checks.

use std::fs::File;
use std::io::BufReader;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use openmix::analysis::{verify_inversion_identity, verify_erasure_decomposition, CheckOptions};
use openmix::classifier::{BinaryHead, ClassifierModel};
use openmix::diffusion::{generate_pair_bank_with_workers, GeneratedInstance, GenerationConfig, PairBank};
use openmix::labeling::{hybrid_distribution, open_set_distribution, LabelingConfig};
use openmix::metrics::{balance_score, evaluate};
use openmix::oracle::NoisePredictorOracle;
use openmix::schedule::{build_linear_schedule, NoiseSchedule};
use openmix::trainer::{train, LogRecord, TrainConfig};
use openmix::world::{sample_dataset, Dataset, DatasetSpec, LabeledSample, MixtureWorld};
use openmix::ClassId;

fn py_err(e: openmix::Error) -> PyErr {
    match e {
        openmix::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn schedule() -> NoiseSchedule {
    build_linear_schedule(100, 1e-4, 0.02).expect("built-in schedule is valid")
}

/// Gaussian-mixture world with known, unknown and new classes.
#[pyclass(name = "World", frozen)]
struct PyWorld {
    inner: MixtureWorld,
}

#[pymethods]
impl PyWorld {
    /// Seven unit-variance classes on a circle of radius 6: two known, three unknown, two new.
    #[staticmethod]
    fn desk() -> Self {
        Self { inner: MixtureWorld::desk() }
    }

    #[staticmethod]
    fn single_gaussian(mean: Vec<f64>, variance: f64) -> PyResult<Self> {
        Ok(Self { inner: MixtureWorld::single_gaussian(mean, variance).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: MixtureWorld::load(path.as_ref()).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> usize {
        self.inner.dims()
    }

    #[getter]
    fn known_count(&self) -> usize {
        self.inner.known_count()
    }

    fn class_ids(&self) -> Vec<u32> {
        self.inner.class_ids().iter().map(|c| c.0).collect()
    }

    fn role(&self, class_id: u32) -> PyResult<&'static str> {
        Ok(self.inner.role(ClassId(class_id)).map_err(py_err)?.as_str())
    }

    /// Exact class posterior at `x`, in class-id order.
    fn posterior(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(openmix::world::bayes_class_posterior(&self.inner, &x).map_err(py_err)?.into_iter().map(|(_, p)| p).collect())
    }

    #[pyo3(signature = (n_known_train = 400, mismatch_rho = 0.6, n_test_per_role = 500, seed = 0))]
    fn sample_dataset(&self, n_known_train: usize, mismatch_rho: f64, n_test_per_role: usize, seed: u64) -> PyResult<PyDataset> {
        let spec = DatasetSpec { n_known_train, mismatch_rho, n_test_per_role, rng_seed: seed };
        Ok(PyDataset { inner: sample_dataset(&self.inner, &spec).map_err(py_err)? })
    }

    fn __repr__(&self) -> String {
        format!("World(dims={}, classes={}, known={})", self.inner.dims(), self.inner.class_ids().len(), self.inner.known_count())
    }
}

fn columns(samples: &[LabeledSample]) -> (Vec<u64>, Vec<Vec<f64>>, Vec<u32>, Vec<&'static str>) {
    (
        samples.iter().map(|s| s.id).collect(),
        samples.iter().map(|s| s.features.clone()).collect(),
        samples.iter().map(|s| s.true_class.0).collect(),
        samples.iter().map(|s| s.role.as_str()).collect(),
    )
}

/// Training pool and test split with their hidden ground truth.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// `(ids, features, true_classes, roles)` of the training pool.
    fn train(&self) -> (Vec<u64>, Vec<Vec<f64>>, Vec<u32>, Vec<&'static str>) {
        columns(&self.inner.train)
    }

    /// `(ids, features, true_classes, roles)` of the test split.
    fn test(&self) -> (Vec<u64>, Vec<Vec<f64>>, Vec<u32>, Vec<&'static str>) {
        columns(&self.inner.test)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(py_err)?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn __len__(&self) -> usize {
        self.inner.train.len()
    }
}

fn instances(set: &[GeneratedInstance]) -> Vec<(u64, u32, Vec<f64>)> {
    set.iter().map(|g| (g.seed_id, g.prompt_class.0, g.features.clone())).collect()
}

/// Generated positives and negatives, one of each per (seed, known class).
#[pyclass(name = "PairBank", frozen)]
struct PyPairBank {
    inner: PairBank,
}

#[pymethods]
impl PyPairBank {
    /// `(seed_id, prompt_class, features)` per positive.
    fn positives(&self) -> Vec<(u64, u32, Vec<f64>)> {
        instances(self.inner.positives())
    }

    fn negatives(&self) -> Vec<(u64, u32, Vec<f64>)> {
        instances(self.inner.negatives())
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_csv(&mut buf).map_err(py_err)?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(Self { inner: PairBank::read_csv(BufReader::new(f)).map_err(py_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.positives().len()
    }
}

#[pyfunction]
#[pyo3(signature = (world, dataset, n_steps = 20, guidance_gamma = 7.5, eta_positive = 1.0, eta_negative = 0.2, seed = 0, workers = 1))]
#[allow(clippy::too_many_arguments)]
fn generate_pairs(
    py: Python<'_>,
    world: &PyWorld,
    dataset: &PyDataset,
    n_steps: usize,
    guidance_gamma: f64,
    eta_positive: f64,
    eta_negative: f64,
    seed: u64,
    workers: usize,
) -> PyResult<PyPairBank> {
    let cfg = GenerationConfig { n_steps, guidance_gamma, eta_positive, eta_negative, positive_depth: None, rng_seed: seed };
    let seeds = dataset.inner.train_view();
    let w = &world.inner;
    let bank = py.detach(|| {
        let s = schedule();
        let o = NoisePredictorOracle::new(w, &s);
        generate_pair_bank_with_workers(&o, &seeds, &cfg, workers)
    });
    Ok(PyPairBank { inner: bank.map_err(py_err)? })
}

/// Trained classifier: shared encoder, K binary heads and a K-way closed head.
#[pyclass(name = "Classifier", frozen)]
struct PyClassifier {
    inner: ClassifierModel,
}

#[pymethods]
impl PyClassifier {
    /// Dict with `p_binary`, `p_bar` and `p_closed`.
    fn forward<'py>(&self, py: Python<'py>, x: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let p = self.inner.forward(&x).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("p_binary", p.p_binary)?;
        d.set_item("p_bar", p.p_bar)?;
        d.set_item("p_closed", p.p_closed)?;
        Ok(d)
    }

    /// K + 1 open-set distribution; the last entry is "other".
    fn open_set(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(open_set_distribution(&self.inner.forward(&x).map_err(py_err)?))
    }

    fn hybrid(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(hybrid_distribution(&self.inner.forward(&x).map_err(py_err)?))
    }

    /// Closed-set class id (1-based).
    fn predict_closed(&self, x: Vec<f64>) -> PyResult<u32> {
        Ok(self.inner.predict_closed(&x).map_err(py_err)? as u32 + 1)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut buf = Vec::new();
        self.inner.write_checkpoint(&mut buf).map_err(py_err)?;
        std::fs::write(path, buf).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
        Ok(Self { inner: ClassifierModel::read_checkpoint(BufReader::new(f)).map_err(py_err)? })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }
}

/// Trains on the pair bank; returns `(classifier, run_log)` with the log as JSON-lines text.
#[pyfunction]
#[pyo3(signature = (
    world, dataset, bank, epochs = 400, batch_size = 32, lr = 5e-3, lambda1 = 1.0, lambda2 = 2.0, hidden = 64,
    threshold = 0.98, interval = 40, rounds = 10, head = "pair_softmax", seed = 0,
))]
#[allow(clippy::too_many_arguments)]
fn train_classifier(
    py: Python<'_>,
    world: &PyWorld,
    dataset: &PyDataset,
    bank: &PyPairBank,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lambda1: f64,
    lambda2: f64,
    hidden: usize,
    threshold: f64,
    interval: usize,
    rounds: usize,
    head: &str,
    seed: u64,
) -> PyResult<(PyClassifier, String)> {
    let head = match head {
        "pair_softmax" => BinaryHead::PairSoftmax,
        "sigmoid" => BinaryHead::Sigmoid,
        other => return Err(PyValueError::new_err(format!("head: expected 'pair_softmax' or 'sigmoid', got {other:?}"))),
    };
    let cfg = TrainConfig {
        epochs,
        batch_size,
        lr,
        lambda1,
        lambda2,
        hidden,
        head,
        labeling: LabelingConfig { threshold, interval, rounds },
        rng_seed: seed,
    };
    let (w, d, b) = (&world.inner, &dataset.inner, &bank.inner);
    let out = py.detach(|| train(w, d, b, &cfg)).map_err(py_err)?;
    let mut log = Vec::new();
    LogRecord::write_jsonl(&out.log, &mut log).map_err(py_err)?;
    Ok((PyClassifier { inner: out.model }, String::from_utf8(log).expect("JSON is UTF-8")))
}

/// Closed-set and open-set accuracies plus the balance score on the test split.
#[pyfunction]
fn evaluate_model<'py>(py: Python<'py>, model: &PyClassifier, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
    let r = evaluate(&model.inner, &dataset.inner.test).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("closed_known_acc", r.closed_known_acc)?;
    d.set_item("open_known_acc", r.open_known_acc)?;
    d.set_item("open_unknown_acc", r.open_unknown_acc)?;
    d.set_item("open_new_acc", r.open_new_acc)?;
    d.set_item("balance", r.balance)?;
    Ok(d)
}

/// Residuals of both inversion identities for one `(x0, y)` pair.
#[pyfunction]
#[pyo3(signature = (world, x0, class_id, depth = 20, n_steps = 20))]
fn verify_inversion<'py>(
    py: Python<'py>,
    world: &PyWorld,
    x0: Vec<f64>,
    class_id: u32,
    depth: usize,
    n_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let s = schedule();
    let o = NoisePredictorOracle::new(&world.inner, &s);
    let opts = CheckOptions { n_steps, ..Default::default() };
    let t1 = verify_inversion_identity(&o, &x0, ClassId(class_id), depth, &opts).map_err(py_err)?;
    let t2 = verify_erasure_decomposition(&o, &x0, ClassId(class_id), depth, &opts).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("inversion_residual", t1.residual)?;
    d.set_item("reverse_residual", t2.residual)?;
    d.set_item("double_sum_residual", t2.double_sum_residual)?;
    d.set_item("first_order_norm", t2.first_order_norm)?;
    d.set_item("inverted", t1.actual)?;
    d.set_item("negative", t2.actual)?;
    Ok(d)
}

/// Mean of the three accuracies minus their sample standard deviation.
#[pyfunction]
fn balance(known: f64, unknown: f64, new: f64) -> f64 {
    balance_score(known, unknown, new)
}

#[pymodule]
#[pyo3(name = "openmix")]
pub fn openmix_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWorld>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyPairBank>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(generate_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train_classifier, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(verify_inversion, m)?)?;
    m.add_function(wrap_pyfunction!(balance, m)?)?;
    Ok(())
}
