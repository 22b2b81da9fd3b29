//! Python bindings: the prototype bank, the omni-correlation math, the
//! warm-up schedule, segmentation metrics, and the dataset/train/evaluate
//! pipeline, all under a single `caml_py` extension module.
//!
//! Matrices cross the boundary as plain lists of lists and volumes as flat
//! lists plus a dims tuple; everything here is desk-scale, so no buffer
//! protocol is needed.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use caml_core::autodiff::{Tape, Tensor};
use caml_core::error::CamlError;
use caml_core::{losses, metrics, occ, trainer, volgen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: CamlError) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn matrix_to_tensor(rows: &[Vec<f32>], what: &str) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{what} must have rows")));
    }
    let width = rows[0].len();
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "{what} rows must be non-empty and equal-length"
        )));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(&[rows.len(), width], flat))
}

fn tensor_to_matrix(t: &Tensor) -> Vec<Vec<f32>> {
    let shape = t.shape();
    let (m, n) = (shape[0], shape[1]);
    let v = t.value();
    (0..m).map(|i| v[i * n..(i + 1) * n].to_vec()).collect()
}

fn label_grid(data: Vec<u8>, dims: (usize, usize, usize), what: &str) -> PyResult<volgen::LabelGrid> {
    volgen::LabelGrid::new([dims.0, dims.1, dims.2], data)
        .map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

/// FIFO prototype memory over labeled samples; embeddings are
/// L2-normalized on entry and evicted oldest-first per sample.
#[pyclass(name = "PrototypeBank")]
struct PyPrototypeBank {
    inner: occ::PrototypeBank,
}

#[pymethods]
impl PyPrototypeBank {
    #[new]
    fn new(sample_ids: Vec<u64>, n_slots: usize, proj_dim: usize, n_classes: usize) -> Self {
        PyPrototypeBank {
            inner: occ::PrototypeBank::new(&sample_ids, n_slots, proj_dim, n_classes),
        }
    }

    fn enqueue(&mut self, sample_id: u64, class: usize, embedding: Vec<f32>) -> PyResult<()> {
        self.inner.enqueue(sample_id, class, &embedding).map_err(err)
    }

    fn class_count(&self, class: usize) -> usize {
        self.inner.class_count(class)
    }

    fn is_warm(&self) -> bool {
        self.inner.is_warm()
    }

    fn total_entries(&self) -> usize {
        self.inner.total_entries()
    }

    fn queue_len(&self, sample_id: u64) -> Option<usize> {
        self.inner.queue_len(sample_id)
    }

    /// Draws `j` prototypes per class (seeded); None while any class is
    /// still empty. Returns (rows, classes).
    fn sample_prototypes(
        &self,
        j: usize,
        seed: u64,
    ) -> Option<(Vec<Vec<f32>>, Vec<usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        occ::sample_prototypes(&self.inner, j, &mut rng)
            .map(|set| (tensor_to_matrix(&set.z_p), set.classes))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        occ::write_bank_dump(&path, &self.inner).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyPrototypeBank {
            inner: occ::read_bank_dump(&path).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "PrototypeBank(slots={}, dim={}, classes={}, entries={}, warm={})",
            self.inner.n_slots(),
            self.inner.proj_dim(),
            self.inner.n_classes(),
            self.inner.total_entries(),
            self.inner.is_warm()
        )
    }
}

/// Row-stochastic correlation of embeddings against prototypes:
/// softmax over prototypes of temperature-scaled cosine similarities.
#[pyfunction]
#[pyo3(signature = (z, z_p, temperature = 10.0))]
fn omni_correlation(
    z: Vec<Vec<f32>>,
    z_p: Vec<Vec<f32>>,
    temperature: f32,
) -> PyResult<Vec<Vec<f32>>> {
    let tape = Tape::inference();
    let zt = matrix_to_tensor(&z, "z")?;
    let pt = matrix_to_tensor(&z_p, "z_p")?;
    let sim = occ::omni_correlation(&tape, &zt, &pt, temperature).map_err(err)?;
    Ok(tensor_to_matrix(&sim))
}

/// Cross-branch consistency: mean over rows of the cross entropy between
/// the two correlation matrices.
#[pyfunction]
fn occ_loss(sim_vp: Vec<Vec<f32>>, sim_ap: Vec<Vec<f32>>) -> PyResult<f32> {
    let tape = Tape::inference();
    let a = matrix_to_tensor(&sim_vp, "sim_vp")?;
    let b = matrix_to_tensor(&sim_ap, "sim_ap")?;
    Ok(occ::occ_loss(&tape, &a, &b).map_err(err)?.value()[0])
}

/// Gaussian ramp e^(-5 (1 - t/t_max)^2) scaled by beta; beta exactly from
/// t_max onward.
#[pyfunction]
fn warmup_weight(t: usize, t_max: usize, beta: f32) -> PyResult<f32> {
    losses::warmup_weight(t, t_max, beta).map_err(err)
}

/// Assembles the training objective for one iteration; returns the
/// breakdown as a dict. `l_o = None` marks the pre-warm phase and
/// contributes zero.
#[pyfunction]
#[pyo3(signature = (l_s, l_c, l_o, t, beta_c = 1.0, beta_o = 0.1, t_max = 800))]
fn total_loss(
    py: Python<'_>,
    l_s: f32,
    l_c: f32,
    l_o: Option<f32>,
    t: usize,
    beta_c: f32,
    beta_o: f32,
    t_max: usize,
) -> PyResult<Py<PyDict>> {
    let weights = losses::LossWeights { beta_c, beta_o, t_max };
    let b = losses::total_loss(l_s, l_c, l_o, t, &weights).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("l_s", b.l_s)?;
    d.set_item("l_c", b.l_c)?;
    d.set_item("l_o", b.l_o)?;
    d.set_item("lambda_c", b.lambda_c)?;
    d.set_item("lambda_o", b.lambda_o)?;
    d.set_item("total", b.total)?;
    Ok(d.into())
}

#[pyfunction]
fn dice(pred: Vec<u8>, gt: Vec<u8>, dims: (usize, usize, usize)) -> PyResult<f64> {
    metrics::dice(&label_grid(pred, dims, "pred")?, &label_grid(gt, dims, "gt")?).map_err(err)
}

#[pyfunction]
fn jaccard(pred: Vec<u8>, gt: Vec<u8>, dims: (usize, usize, usize)) -> PyResult<f64> {
    metrics::jaccard(&label_grid(pred, dims, "pred")?, &label_grid(gt, dims, "gt")?).map_err(err)
}

/// (hd95, asd) between the foreground surfaces; raises when either mask
/// has no surface.
#[pyfunction]
#[pyo3(signature = (pred, gt, dims, spacing = (1.0, 1.0, 1.0)))]
fn surface_metrics(
    pred: Vec<u8>,
    gt: Vec<u8>,
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
) -> PyResult<(f64, f64)> {
    metrics::surface_metrics(
        &label_grid(pred, dims, "pred")?,
        &label_grid(gt, dims, "gt")?,
        [spacing.0, spacing.1, spacing.2],
    )
    .map_err(err)
}

/// Score-matrix entry counts of the two-stage attention against a joint
/// attention over all b*k tokens: (factorized, joint).
#[pyfunction]
fn attention_score_entries(b: usize, k: usize, heads: usize) -> (u64, u64) {
    (
        caml_core::cma::factorized_score_entries(b, k, heads),
        caml_core::cma::joint_score_entries(b, k, heads),
    )
}

/// Writes a synthetic dataset (volumes, labels, manifest.txt); returns
/// (total samples, labeled samples).
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 0, samples = 40, dims = (32, 32, 32), labeled_fraction = 0.1))]
fn generate_data(
    out_dir: PathBuf,
    seed: u64,
    samples: usize,
    dims: (usize, usize, usize),
    labeled_fraction: f64,
) -> PyResult<(usize, usize)> {
    let manifest = volgen::generate_dataset(
        seed,
        samples,
        [dims.0, dims.1, dims.2],
        labeled_fraction,
        &out_dir,
    )
    .map_err(err)?;
    Ok((manifest.entries.len(), manifest.labeled_count()))
}

/// Runs dual-branch training and writes checkpoints plus run.csv into
/// `out_dir`; returns one dict per iteration with the loss breakdown.
#[pyfunction]
#[pyo3(signature = (
    manifest, out_dir, iterations = 800, crop = (16, 16, 16), batch_size = 4,
    seed = 0, lr = 0.01, enable_cma = true, enable_occ = true,
    beta_c = 1.0, beta_o = 0.1, top_i = 8, proto_j = 4, bank_slots = 64
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    manifest: PathBuf,
    out_dir: PathBuf,
    iterations: usize,
    crop: (usize, usize, usize),
    batch_size: usize,
    seed: u64,
    lr: f32,
    enable_cma: bool,
    enable_occ: bool,
    beta_c: f32,
    beta_o: f32,
    top_i: usize,
    proto_j: usize,
    bank_slots: usize,
) -> PyResult<Vec<Py<PyDict>>> {
    let cfg = trainer::TrainConfig {
        manifest,
        crop: [crop.0, crop.1, crop.2],
        batch_size,
        iterations,
        seed,
        lr,
        enable_cma,
        enable_occ,
        beta_c,
        beta_o,
        top_i,
        proto_j,
        bank_slots,
        ..trainer::TrainConfig::default()
    };
    cfg.validate().map_err(err)?;
    let log = trainer::train_run(&cfg, &out_dir).map_err(err)?;
    log.rows
        .iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("iteration", r.iteration)?;
            d.set_item("L_s", r.breakdown.l_s)?;
            d.set_item("l_c", r.breakdown.l_c)?;
            d.set_item("l_o", r.breakdown.l_o)?;
            d.set_item("lambda_c", r.breakdown.lambda_c)?;
            d.set_item("lambda_o", r.breakdown.lambda_o)?;
            d.set_item("total", r.breakdown.total)?;
            d.set_item("m", r.m)?;
            d.set_item("n", r.n)?;
            Ok(d.into())
        })
        .collect()
}

/// Sliding-window evaluation of a trained vanilla branch; `ckpt` is a run
/// directory or an fv checkpoint file. Returns one dict per sample
/// (hd95/asd are None when a surface is empty).
#[pyfunction]
#[pyo3(signature = (
    ckpt, manifest, window = (16, 16, 16), stride = (8, 8, 8), split = "all",
    n_levels = 3, base_channels = 8, proj_dim = 16
))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    ckpt: PathBuf,
    manifest: PathBuf,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
    split: &str,
    n_levels: usize,
    base_channels: usize,
    proj_dim: usize,
) -> PyResult<Vec<Py<PyDict>>> {
    let split = match split {
        "all" => trainer::EvalSplit::All,
        "labeled" => trainer::EvalSplit::Labeled,
        "unlabeled" => trainer::EvalSplit::Unlabeled,
        other => {
            return Err(PyValueError::new_err(format!(
                "split must be all, labeled, or unlabeled, got {other:?}"
            )))
        }
    };
    let ckpt = if ckpt.is_dir() { ckpt.join("fv.ckpt") } else { ckpt };
    let rows = trainer::evaluate_checkpoint(
        &ckpt,
        &manifest,
        split,
        [window.0, window.1, window.2],
        [stride.0, stride.1, stride.2],
        n_levels,
        base_channels,
        proj_dim,
    )
    .map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new_bound(py);
            d.set_item("sample_id", r.sample_id)?;
            d.set_item("dice", r.dice)?;
            d.set_item("jaccard", r.jaccard)?;
            d.set_item("hd95", r.hd95)?;
            d.set_item("asd", r.asd)?;
            Ok(d.into())
        })
        .collect()
}

#[pymodule]
fn caml_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPrototypeBank>()?;
    m.add_function(wrap_pyfunction!(omni_correlation, m)?)?;
    m.add_function(wrap_pyfunction!(occ_loss, m)?)?;
    m.add_function(wrap_pyfunction!(warmup_weight, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard, m)?)?;
    m.add_function(wrap_pyfunction!(surface_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(attention_score_entries, m)?)?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
