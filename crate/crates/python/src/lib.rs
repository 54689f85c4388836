//! Python bindings for `doss-core`.

use std::path::PathBuf;

use doss_core::cli::manifest::ExperimentManifest;
use doss_core::cli::pipeline::Pipeline;
use doss_core::data::{gen_domain, DomainDataset, SyntheticTask};
use doss_core::eval::{self, EvalOptions};
use doss_core::mask::{self, DomainMask, MaskSet, PruneSpec};
use doss_core::model::{self, ModelConfig, ParamStore, ParameterRegistry};
use doss_core::train::{self, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(doss, DossError, PyException);

fn err(e: doss_core::Error) -> PyErr {
    let mut msg = e.to_string();
    let mut src = std::error::Error::source(&e);
    while let Some(s) = src {
        msg.push_str(&format!(": {s}"));
        src = s.source();
    }
    DossError::new_err(msg)
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for doss_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(err)
    }
}

/// Shape hyperparameters; build one from a preset name.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (preset = "mini"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "mini" => ModelConfig::mini(),
            "desk" => ModelConfig::desk(),
            "full" => ModelConfig::full(),
            other => return Err(DossError::new_err(format!("unknown model preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A parameter store together with its registry and shape config.
#[pyclass(name = "Model", from_py_object)]
#[derive(Clone)]
struct PyModel {
    config: ModelConfig,
    registry: ParameterRegistry,
    params: ParamStore,
}

impl PyModel {
    fn with_params(&self, params: ParamStore) -> Self {
        Self { config: self.config.clone(), registry: self.registry.clone(), params }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn init(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let (params, registry) = model::build_model(&config.inner, seed).py()?;
        Ok(Self { config: config.inner.clone(), registry, params })
    }

    #[staticmethod]
    fn load(config: &PyModelConfig, path: PathBuf) -> PyResult<Self> {
        let params = model::load_checkpoint(&path).py()?;
        let registry = model::build_registry(&config.inner).py()?;
        registry.check_store(&params).py()?;
        Ok(Self { config: config.inner.clone(), registry, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.params, &path).py()
    }

    fn checksum(&self) -> String {
        self.params.checksum()
    }

    fn numel(&self) -> usize {
        self.params.numel()
    }

    fn tensor_names(&self) -> Vec<String> {
        self.params.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Flat values of one tensor.
    fn tensor(&self, name: &str) -> PyResult<Vec<f64>> {
        Ok(self.params.require(name).py()?.data().to_vec())
    }

    /// Greedy decodes for a list of source token lists (EOS included when produced).
    #[pyo3(signature = (sources, max_len = 32))]
    fn decode(&self, py: Python<'_>, sources: Vec<Vec<usize>>, max_len: usize) -> PyResult<Vec<Vec<usize>>> {
        py.detach(|| eval::greedy_decode(&self.params, &self.config, &sources, max_len)).py()
    }

    /// BLEU and exact match on a dataset's pairs.
    fn evaluate(&self, py: Python<'_>, data: &PyDataset) -> PyResult<(f64, f64)> {
        let c = py.detach(|| eval::eval_cell(&self.params, &self.config, &data.inner, EvalOptions::default())).py()?;
        Ok((c.bleu, c.exact_match))
    }

    /// Full finetune on the concatenation of `datasets`.
    fn train_full(&self, py: Python<'_>, datasets: Vec<PyDataset>, cfg: &PyTrainConfig) -> PyResult<(Self, Vec<f64>)> {
        let refs: Vec<&DomainDataset> = datasets.iter().map(|d| &d.inner).collect();
        let (p, log) = py
            .detach(|| train::train_full(&self.params, &self.registry, &self.config, &refs, &cfg.inner))
            .py()?;
        Ok((self.with_params(p), log.rows.iter().map(|r| r.loss).collect()))
    }

    fn __repr__(&self) -> String {
        format!("Model({} tensors, {} parameters)", self.params.len(), self.params.numel())
    }
}

#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(domain_id: &str, pairs: Vec<(Vec<usize>, Vec<usize>)>) -> PyResult<Self> {
        Ok(Self { inner: DomainDataset::new(domain_id, pairs).py()? })
    }

    /// Synthetic transduction domain; `task` is copy, reverse, sort or shift(k).
    #[staticmethod]
    #[pyo3(signature = (domain_id, task, n_pairs, seed, content = (4, 20), lengths = (6, 9)))]
    fn synthetic(
        domain_id: &str,
        task: &str,
        n_pairs: usize,
        seed: u64,
        content: (usize, usize),
        lengths: (usize, usize),
    ) -> PyResult<Self> {
        let spec = SyntheticTask {
            kind: task.parse().py()?,
            content_lo: content.0,
            content_hi: content.1,
            min_len: lengths.0,
            max_len: lengths.1,
            seed,
        };
        Ok(Self { inner: gen_domain(domain_id, &spec, n_pairs).py()? })
    }

    #[getter]
    fn domain_id(&self) -> String {
        self.inner.domain_id().to_string()
    }

    fn pairs(&self) -> Vec<(Vec<usize>, Vec<usize>)> {
        self.inner.pairs().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// A preset (pretrain, finetune or doss) with optional overrides.
    #[new]
    #[pyo3(signature = (preset = "finetune", *, max_steps = None, epochs = None, learning_rate = None,
                        warmup_steps = None, batch_tokens = None, dropout = None, seed = None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        preset: &str,
        max_steps: Option<u64>,
        epochs: Option<u64>,
        learning_rate: Option<f64>,
        warmup_steps: Option<u64>,
        batch_tokens: Option<usize>,
        dropout: Option<f64>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let mut c = match preset {
            "pretrain" => TrainConfig::pretrain(),
            "finetune" => TrainConfig::finetune(),
            "doss" => TrainConfig::doss(),
            other => return Err(DossError::new_err(format!("unknown train preset {other:?}"))),
        };
        if let Some(s) = max_steps {
            c = c.with_steps(s);
        }
        if let Some(e) = epochs {
            c = c.with_epochs(e);
        }
        if let Some(v) = learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = warmup_steps {
            c.warmup_steps = v;
        }
        if let Some(v) = batch_tokens {
            c.batch_tokens = v;
        }
        if let Some(v) = dropout {
            c.dropout = v;
        }
        if let Some(v) = seed {
            c.seed = v;
        }
        c.validate().py()?;
        Ok(Self { inner: c })
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

#[pyclass(name = "Mask", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: DomainMask,
}

#[pymethods]
impl PyMask {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: mask::load_mask(&path).py()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        mask::save_mask(&self.inner, &path).py()
    }

    #[getter]
    fn domain_id(&self) -> String {
        self.inner.domain_id.clone()
    }

    #[setter]
    fn set_domain_id(&mut self, id: String) {
        self.inner.domain_id = id;
    }

    fn count_ones(&self) -> u64 {
        self.inner.count_ones()
    }

    fn shared_ones(&self, other: &PyMask) -> PyResult<u64> {
        self.inner.shared_ones(&other.inner).py()
    }

    fn __repr__(&self) -> String {
        format!("Mask({:?}, {} ones)", self.inner.domain_id, self.inner.count_ones())
    }
}

fn mask_set(masks: Vec<PyMask>, disjoint: bool) -> PyResult<MaskSet> {
    MaskSet::from_masks(masks.into_iter().map(|m| m.inner).collect(), disjoint).py()
}

/// Magnitude-prunes `model` into a mask for `domain_id`.
#[pyfunction]
#[pyo3(signature = (model, domain_id, alpha, beta, claimed = None))]
fn magnitude_prune(model: &PyModel, domain_id: &str, alpha: f64, beta: f64, claimed: Option<Vec<PyMask>>) -> PyResult<PyMask> {
    let spec = PruneSpec::new(alpha, beta).py()?;
    let mut m = match claimed {
        Some(c) => mask::magnitude_prune_disjoint(&model.params, &model.registry, &spec, &mask_set(c, false)?).py()?,
        None => mask::magnitude_prune(&model.params, &model.registry, &spec).py()?,
    };
    m.domain_id = domain_id.to_string();
    Ok(PyMask { inner: m })
}

/// Short finetune of a copy of `base` on `data`, then magnitude pruning.
#[pyfunction]
#[pyo3(signature = (base, data, alpha, beta, cfg, ft_epochs = 5, claimed = None))]
#[allow(clippy::too_many_arguments)]
fn create_domain_mask(
    py: Python<'_>,
    base: &PyModel,
    data: &PyDataset,
    alpha: f64,
    beta: f64,
    cfg: &PyTrainConfig,
    ft_epochs: usize,
    claimed: Option<Vec<PyMask>>,
) -> PyResult<PyMask> {
    let spec = PruneSpec { ft_epochs, ..PruneSpec::new(alpha, beta).py()? };
    let claimed = claimed.map(|c| mask_set(c, false)).transpose()?;
    let m = py
        .detach(|| {
            mask::create_domain_mask(&base.params, &base.registry, &base.config, &data.inner, spec, &cfg.inner, claimed.as_ref())
        })
        .py()?;
    Ok(PyMask { inner: m })
}

/// Masked joint training; one mask per dataset, matched by domain id.
#[pyfunction]
fn train_doss(py: Python<'_>, base: &PyModel, masks: Vec<PyMask>, datasets: Vec<PyDataset>, cfg: &PyTrainConfig) -> PyResult<(PyModel, Vec<f64>)> {
    let set = mask_set(masks, false)?;
    let refs: Vec<&DomainDataset> = datasets.iter().map(|d| &d.inner).collect();
    let (p, log) = py
        .detach(|| train::train_doss(&base.params, &base.registry, &base.config, &set, &refs, &cfg.inner))
        .py()?;
    Ok((base.with_params(p), log.rows.iter().map(|r| r.loss).collect()))
}

/// Trained values where the mask is set, base values elsewhere.
#[pyfunction]
fn overlay(base: &PyModel, trained: &PyModel, mask: &PyMask) -> PyResult<PyModel> {
    Ok(base.with_params(mask::overlay(&base.params, &trained.params, &mask.inner).py()?))
}

/// Checksum of every element outside the union of `masks`.
#[pyfunction]
fn frozen_checksum(model: &PyModel, masks: Vec<PyMask>) -> PyResult<String> {
    mask::frozen_checksum(&model.params, &mask_set(masks, false)?).py()
}

#[pyfunction]
fn capacity(alpha: f64, beta: f64) -> PyResult<usize> {
    mask::capacity(&PruneSpec::new(alpha, beta).py()?).py()
}

#[pyfunction]
#[pyo3(signature = (hyps, refs, max_n = 4))]
fn corpus_bleu(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>, max_n: usize) -> PyResult<f64> {
    eval::corpus_bleu(&hyps, &refs, max_n).py()
}

#[pyfunction]
fn exact_match(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>) -> PyResult<f64> {
    eval::exact_match(&hyps, &refs).py()
}

/// Runs every stage of an experiment manifest; returns (ran, skipped) stage names.
#[pyfunction]
#[pyo3(signature = (manifest, out = None, threads = 1))]
fn run_pipeline(py: Python<'_>, manifest: PathBuf, out: Option<PathBuf>, threads: usize) -> PyResult<(Vec<String>, Vec<String>)> {
    let m = ExperimentManifest::load(&manifest).py()?;
    let out = out
        .or_else(|| m.out_dir.as_ref().map(|d| m.root.join(d)))
        .ok_or_else(|| DossError::new_err("no output directory given"))?;
    let summary = py.detach(|| Pipeline::new(m, out, threads).and_then(|p| p.run())).py()?;
    let names = |v: Vec<&str>| v.into_iter().map(str::to_string).collect();
    Ok((names(summary.ran), names(summary.skipped)))
}

#[pymodule]
fn doss(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DossError", m.py().get_type::<DossError>())?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyMask>()?;
    m.add_function(wrap_pyfunction!(magnitude_prune, m)?)?;
    m.add_function(wrap_pyfunction!(create_domain_mask, m)?)?;
    m.add_function(wrap_pyfunction!(train_doss, m)?)?;
    m.add_function(wrap_pyfunction!(overlay, m)?)?;
    m.add_function(wrap_pyfunction!(frozen_checksum, m)?)?;
    m.add_function(wrap_pyfunction!(capacity, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(exact_match, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
