//! Python bindings: tensors, the question-generation model, metrics, the toy
//! corpus and the command line front end.

use std::sync::Arc;

use clap::Parser;
use metaquill::dataset::{self, Manifest};
use metaquill::metrics::{self, ScoredItem, ROUGE_BETA};
use metaquill::model::{Example, Model, ModelConfig};
use metaquill::toyset::{self, ToySpec};
use metaquill::{cli, meta, selfsup, text, Error, GradMap, Params, Tape, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: Error) -> PyErr {
    if e.is_numeric() {
        PyArithmeticError::new_err(e.to_string())
    } else if matches!(e, Error::Io { .. }) {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A dense row-major `float32` tensor.
#[pyclass(name = "Tensor", module = "metaquill", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: Tensor::new(&shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor {
            inner: Tensor::zeros(&shape),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (shape, bound, seed=0))]
    fn uniform(shape: Vec<usize>, bound: f32, seed: u64) -> Self {
        PyTensor {
            inner: Tensor::uniform(&shape, bound, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor {
            inner: self.inner.reshape(&shape).map_err(py_err)?,
        })
    }

    fn sum(&self) -> f64 {
        self.inner.sum()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __eq__(&self, other: &PyTensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Named parameter tensors.
#[pyclass(name = "Params", module = "metaquill", skip_from_py_object)]
#[derive(Clone)]
struct PyParams {
    inner: Params,
}

#[pymethods]
impl PyParams {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        let (inner, _) = metaquill::params::load_checkpoint(dir).map_err(py_err)?;
        Ok(PyParams { inner })
    }

    #[pyo3(signature = (dir, step=0, seed=0))]
    fn save(&self, dir: &str, step: u64, seed: u64) -> PyResult<()> {
        metaquill::params::save_checkpoint(dir, &self.inner, step, seed, serde_json::Value::Null).map_err(py_err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn get(&self, name: &str) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.get(name).map_err(py_err)?.clone(),
        })
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// A copy without the rotation head.
    fn strip_rotation_head(&self) -> PyResult<Self> {
        Ok(PyParams {
            inner: selfsup::strip_rotation_head(&self.inner).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &PyParams) -> bool {
        self.inner == other.inner
    }
}

/// One training example: a feature map `[h, w, c]`, category index, answer
/// token ids and `<bos> … <eos>` question ids.
#[pyclass(name = "Example", module = "metaquill", skip_from_py_object)]
#[derive(Clone)]
struct PyExample {
    inner: Example,
}

#[pymethods]
impl PyExample {
    #[new]
    #[pyo3(signature = (features, category, answer, question, image_id=String::new()))]
    fn new(features: &PyTensor, category: usize, answer: Vec<usize>, question: Vec<usize>, image_id: String) -> Self {
        PyExample {
            inner: Example {
                image_id,
                image: Arc::new(features.inner.clone()),
                category,
                answer,
                question,
            },
        }
    }
}

fn examples(items: &[PyRef<'_, PyExample>]) -> Vec<Example> {
    items.iter().map(|e| e.inner.clone()).collect()
}

/// The FiLM-conditioned attention decoder.
#[pyclass(name = "Model", module = "metaquill")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// `config` is the model section of a run configuration, as JSON text.
    #[new]
    #[pyo3(signature = (vocab, n_categories, channels, config="{}"))]
    fn new(vocab: usize, n_categories: usize, channels: usize, config: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(config).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyModel {
            inner: Model::new(cfg, vocab, n_categories, channels).map_err(py_err)?,
        })
    }

    fn init_params(&self, seed: u64) -> PyResult<PyParams> {
        Ok(PyParams {
            inner: self.inner.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?,
        })
    }

    /// Teacher-forced loss and its gradient for every parameter.
    fn loss_and_grad(&self, params: &PyParams, batch: Vec<PyRef<'_, PyExample>>) -> PyResult<(f32, Vec<(String, PyTensor)>)> {
        let ex = examples(&batch);
        let refs: Vec<&Example> = ex.iter().collect();
        let tape = Tape::new();
        let p = params.inner.bind(&tape, true);
        let loss = self.inner.loss(&tape, &p, &refs).map_err(py_err)?;
        let value = loss.value().item();
        let grads = GradMap::from_backward(&tape, loss, &p).map_err(py_err)?;
        Ok((
            value,
            grads
                .iter()
                .map(|(n, g)| (n.to_string(), PyTensor { inner: g.clone() }))
                .collect(),
        ))
    }

    fn generate(&self, params: &PyParams, example: &PyExample) -> PyResult<Vec<usize>> {
        self.inner.generate(&params.inner, &example.inner).map_err(py_err)
    }

    /// Plain gradient descent on one batch.
    fn finetune(&self, params: &PyParams, batch: Vec<PyRef<'_, PyExample>>, steps: usize, lr: f32) -> PyResult<PyParams> {
        let ex = examples(&batch);
        let refs: Vec<&Example> = ex.iter().collect();
        Ok(PyParams {
            inner: meta::finetune(&self.inner, &params.inner, &refs, steps, lr).map_err(py_err)?,
        })
    }
}

fn corpus(pairs: Vec<(String, Vec<String>)>) -> Vec<ScoredItem> {
    pairs
        .iter()
        .map(|(c, refs)| {
            let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
            ScoredItem::from_text(c, &refs)
        })
        .collect()
}

/// Corpus scores for `[(candidate, [reference, ...]), ...]` as a dict with
/// keys bleu4, meteor_s, rougeL and cider.
#[pyfunction]
fn score_corpus<'py>(py: Python<'py>, pairs: Vec<(String, Vec<String>)>) -> PyResult<Bound<'py, PyAny>> {
    let scores = metrics::score_corpus(&corpus(pairs)).map_err(py_err)?;
    json_to_py(py, &scores)
}

#[pyfunction]
fn bleu4(pairs: Vec<(String, Vec<String>)>) -> PyResult<f64> {
    metrics::bleu4(&corpus(pairs)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (pairs, beta=ROUGE_BETA))]
fn rouge_l(pairs: Vec<(String, Vec<String>)>, beta: f64) -> PyResult<f64> {
    metrics::rouge_l(&corpus(pairs), beta).map_err(py_err)
}

#[pyfunction]
fn cider(pairs: Vec<(String, Vec<String>)>) -> PyResult<f64> {
    metrics::cider(&corpus(pairs), metrics::CIDER_N, metrics::CIDER_SIGMA).map_err(py_err)
}

#[pyfunction]
fn meteor_s(pairs: Vec<(String, Vec<String>)>) -> PyResult<f64> {
    metrics::meteor_s(&corpus(pairs)).map_err(py_err)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text::tokenize(text)
}

#[pyfunction]
fn variety_ratio(unique_qa_pairs: usize, unique_answers: usize) -> PyResult<f64> {
    dataset::variety_ratio(unique_qa_pairs, unique_answers).map_err(py_err)
}

/// Dataset statistics of a manifest file, as a dict.
#[pyfunction]
fn manifest_stats<'py>(py: Python<'py>, path: &str) -> PyResult<Bound<'py, PyAny>> {
    let (m, _) = Manifest::load(path).map_err(py_err)?;
    json_to_py(py, &dataset::stats(&m))
}

/// Renders the synthetic shapes corpus; returns the number of records.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=0, categories=8, images_per_cat=60, grid=32))]
fn generate_toyset(out_dir: &str, seed: u64, categories: usize, images_per_cat: usize, grid: usize) -> PyResult<usize> {
    let spec = ToySpec {
        n_categories: categories,
        images_per_cat,
        grid,
        seed,
    };
    Ok(toyset::generate_toyset(&spec, out_dir).map_err(py_err)?.len())
}

/// Number of generated records the rule-based checker rejects.
#[pyfunction]
fn check_toyset(dir: &str) -> PyResult<usize> {
    toyset::check_toyset(dir).map_err(py_err)
}

#[pyfunction]
fn rotate_image(image: &PyTensor, label: usize) -> PyResult<PyTensor> {
    Ok(PyTensor {
        inner: selfsup::rotate_image(&image.inner, label).map_err(py_err)?,
    })
}

/// Runs a command line invocation, e.g. `["gen-toyset", "--out", "toy"]`;
/// returns the process exit code the binary would use.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("metaquill".to_string()).chain(args);
    match cli::Cli::try_parse_from(argv) {
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
        Ok(parsed) => match cli::run(parsed) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
    }
}

#[pymodule]
#[pyo3(name = "metaquill")]
fn metaquill_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyExample>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(score_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(bleu4, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(cider, m)?)?;
    m.add_function(wrap_pyfunction!(meteor_s, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(variety_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_stats, m)?)?;
    m.add_function(wrap_pyfunction!(generate_toyset, m)?)?;
    m.add_function(wrap_pyfunction!(check_toyset, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_image, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
