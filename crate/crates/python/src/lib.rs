//! Python bindings for the `finlora` engine.

use std::path::PathBuf;

use finlora::harness::{self, EvalOptions, OptimizerChoice, RunConfig, TaskRecord};
use finlora::model::{self, decode_tokens, encode_text, ToyModel};
use finlora::numerics::{bf16, Tensor};
use finlora::quant::{self, CodebookId, QuantConfig};
use finlora::{optim, planner};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(finlora_py, FinloraError, PyException);

fn err(e: finlora::Error) -> PyErr {
    FinloraError::new_err(e.to_string())
}

fn quant_config(bits: u8, block_size: usize, codebook: &str) -> PyResult<QuantConfig> {
    let book = match codebook {
        "int" => CodebookId::IntAbsmax,
        "nf4" => CodebookId::Nf4,
        other => {
            return Err(FinloraError::new_err(format!(
                "unknown codebook `{other}` (int or nf4)"
            )))
        }
    };
    QuantConfig::new(bits, block_size, book).map_err(err)
}

/// Block-quantized values. Build with `quantize`.
#[pyclass(module = "finlora_py", frozen)]
struct Quantized {
    inner: quant::QuantizedTensor,
}

#[pymethods]
impl Quantized {
    fn dequantize(&self) -> PyResult<Vec<f64>> {
        Ok(quant::dequantize(&self.inner).map_err(err)?.into_data())
    }

    #[getter]
    fn codes(&self) -> PyResult<Vec<i32>> {
        self.inner.codes().map_err(err)
    }

    #[getter]
    fn scales(&self) -> Vec<f32> {
        self.inner.scales().to_vec()
    }

    /// Packed codes plus scales, in bytes.
    #[getter]
    fn nbytes(&self) -> usize {
        quant::packed_bytes(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }
}

#[pyfunction]
#[pyo3(signature = (values, bits=8, block_size=64, codebook="int"))]
fn quantize(values: Vec<f64>, bits: u8, block_size: usize, codebook: &str) -> PyResult<Quantized> {
    let cfg = quant_config(bits, block_size, codebook)?;
    let inner = quant::quantize(&Tensor::vector(&values), cfg).map_err(err)?;
    Ok(Quantized { inner })
}

#[pyfunction]
fn round_bf16(values: Vec<f64>) -> Vec<f64> {
    values.into_iter().map(bf16::round).collect()
}

/// One-bit compression with error feedback: `(signs, scale, residual)`.
#[pyfunction]
fn compress_1bit(values: Vec<f64>, residual: Vec<f64>) -> PyResult<(Vec<f64>, f64, Vec<f64>)> {
    let c =
        optim::compress_1bit(&Tensor::vector(&values), &Tensor::vector(&residual)).map_err(err)?;
    let signs = (0..c.signs.len()).map(|i| c.signs.sign(i)).collect();
    Ok((signs, c.scale, c.residual.into_data()))
}

#[pyfunction]
#[pyo3(signature = (arch="llama3-8b", rank=8, bits=16))]
fn plan<'py>(py: Python<'py>, arch: &str, rank: usize, bits: u8) -> PyResult<Bound<'py, PyDict>> {
    let r = planner::plan_preset(arch, rank, bits).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("arch", r.arch)?;
    d.set_item("rank", r.rank)?;
    d.set_item("bits", r.bits)?;
    d.set_item("base_params", r.base_params)?;
    d.set_item("trainable_params", r.trainable_params)?;
    d.set_item("adapter_bytes", r.adapter_bytes)?;
    d.set_item("adapter_mib", r.adapter_mib)?;
    d.set_item("model_bytes_16", r.model_bytes_16)?;
    d.set_item("model_bytes_8", r.model_bytes_8)?;
    d.set_item("model_bytes_4", r.model_bytes_4)?;
    d.set_item("ratio_8", r.ratio_8)?;
    d.set_item("ratio_4", r.ratio_4)?;
    d.set_item("total_gb", r.total_gb)?;
    Ok(d)
}

#[pyfunction]
fn accuracy(preds: Vec<String>, golds: Vec<String>) -> PyResult<f64> {
    harness::accuracy(&preds, &golds).map_err(err)
}

#[pyfunction]
fn weighted_f1(preds: Vec<String>, golds: Vec<String>, classes: Vec<String>) -> PyResult<f64> {
    Ok(harness::weighted_f1(&preds, &golds, &classes)
        .map_err(err)?
        .weighted_f1)
}

fn record_to_dict<'py>(py: Python<'py>, r: &TaskRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("input", &r.input)?;
    d.set_item("output", &r.output)?;
    d.set_item("task_id", &r.task_id)?;
    if let Some(c) = &r.context {
        d.set_item("context", c)?;
    }
    Ok(d)
}

fn dict_to_record(d: &Bound<'_, PyDict>) -> PyResult<TaskRecord> {
    let get = |k: &str| -> PyResult<Option<String>> {
        match d.get_item(k)? {
            Some(v) if !v.is_none() => Ok(Some(v.extract()?)),
            _ => Ok(None),
        }
    };
    let need =
        |k: &str| get(k)?.ok_or_else(|| FinloraError::new_err(format!("record is missing `{k}`")));
    Ok(TaskRecord {
        input: need("input")?,
        output: need("output")?,
        task_id: get("task_id")?.unwrap_or_else(|| "task".into()),
        context: get("context")?,
    })
}

#[pyfunction]
#[pyo3(signature = (n, seed=0))]
fn synthetic_task<'py>(py: Python<'py>, n: usize, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    harness::synthetic_task(n, seed)
        .iter()
        .map(|r| record_to_dict(py, r))
        .collect()
}

/// Toy decoder with a frozen (optionally quantized) base and LoRA adapters
/// on q, k and v.
#[pyclass(module = "finlora_py")]
struct Model {
    inner: ToyModel,
}

fn run_config(rank: usize, bits: u8, seed: u64) -> RunConfig {
    RunConfig {
        rank,
        bits,
        seed,
        ..RunConfig::default()
    }
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (rank=8, bits=8, seed=0))]
    fn new(rank: usize, bits: u8, seed: u64) -> PyResult<Self> {
        let inner = run_config(rank, bits, seed).build_model().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, path).map_err(err)
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.inner.trainable_count()
    }

    #[getter]
    fn base_hash(&self) -> String {
        self.inner.base_hash()
    }

    /// Logits, one row per input token.
    fn forward(&self, text: &str) -> PyResult<Vec<Vec<f64>>> {
        let logits = self.inner.forward(&encode_text(text)).map_err(err)?;
        Ok((0..logits.rows()).map(|i| logits.row(i).to_vec()).collect())
    }

    #[pyo3(signature = (prompt, max_new_tokens=8))]
    fn generate(&self, prompt: &str, max_new_tokens: usize) -> PyResult<String> {
        let stop = encode_text(harness::ANSWER_END)[0];
        let out = self
            .inner
            .generate(&encode_text(prompt), max_new_tokens, Some(stop))
            .map_err(err)?;
        Ok(decode_tokens(&out))
    }

    #[pyo3(signature = (records, one_shot=false, max_new_tokens=8))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        records: Vec<Bound<'py, PyDict>>,
        one_shot: bool,
        max_new_tokens: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let recs = records
            .iter()
            .map(dict_to_record)
            .collect::<PyResult<Vec<_>>>()?;
        let opts = EvalOptions {
            one_shot,
            max_new_tokens,
            ..EvalOptions::default()
        };
        let r = py
            .detach(|| harness::run_eval(&self.inner, &recs, &opts))
            .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("n", r.n)?;
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("weighted_f1", r.weighted_f1)?;
        d.set_item("predictions", r.predictions)?;
        d.set_item("mean_latency_seconds", r.mean_latency_seconds)?;
        Ok(d)
    }
}

/// Finetunes a fresh model on `records`; returns the model and one dict per
/// epoch.
#[pyfunction]
#[pyo3(signature = (records, *, rank=8, bits=8, seed=0, epochs=1, lr=1e-4, batch_size=8, workers=1, optimizer="zero_one_adam"))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    records: Vec<Bound<'py, PyDict>>,
    rank: usize,
    bits: u8,
    seed: u64,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    workers: usize,
    optimizer: &str,
) -> PyResult<(Model, Vec<Bound<'py, PyDict>>)> {
    let recs = records
        .iter()
        .map(dict_to_record)
        .collect::<PyResult<Vec<_>>>()?;
    let optimizer = match optimizer {
        "adam" => OptimizerChoice::Adam,
        "zero_one_adam" => OptimizerChoice::ZeroOneAdam,
        other => {
            return Err(FinloraError::new_err(format!(
                "unknown optimizer `{other}`"
            )))
        }
    };
    let cfg = RunConfig {
        epochs,
        lr,
        batch_size,
        workers,
        optimizer,
        ..run_config(rank, bits, seed)
    };
    let (model, log, _) = py
        .detach(|| harness::train(&cfg, &recs, &[], |_| Ok(())))
        .map_err(err)?;
    let epochs = log
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("loss", e.loss)?;
            d.set_item("worker_hours", e.worker_hours)?;
            d.set_item("bits_transmitted", e.bits_transmitted)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    Ok((Model { inner: model }, epochs))
}

#[pymodule]
fn finlora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FinloraError", m.py().get_type::<FinloraError>())?;
    m.add_class::<Quantized>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(round_bf16, m)?)?;
    m.add_function(wrap_pyfunction!(compress_1bit, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_task, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
