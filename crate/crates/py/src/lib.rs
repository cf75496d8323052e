//! Python module `dsfnet_py`. Images cross the boundary as nested lists:
//! `[3][H][W]` floats for RGB, `[H][W]` for masks and saliency maps.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dsfnet::data::{synth_generate, Checkpoint, Difficulty};
use dsfnet::dsf::{dsf_param_count, dsf_receptive_field, DsfConfig};
use dsfnet::metrics::{evaluate as evaluate_pair, MaskPair};
use dsfnet::model::DsfNet;
use dsfnet::train::{load_model, predict_image, train_run, Precision, RunConfig};
use dsfnet::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor<f64>, h: usize, w: usize) -> Vec<Vec<f64>> {
    t.data().chunks(w).take(h).map(<[f64]>::to_vec).collect()
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(usize, usize, Vec<f64>)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("expected a non-empty rectangular grid"));
    }
    Ok((h, w, rows.concat()))
}

/// Synthetic samples as `(image, mask)` pairs.
#[pyfunction]
#[pyo3(signature = (count, extent, seed = 0, difficulty = "easy"))]
fn synth(count: usize, extent: usize, seed: u64, difficulty: &str) -> PyResult<Vec<(Vec<Vec<Vec<f64>>>, Vec<Vec<u8>>)>> {
    let d: Difficulty = difficulty.parse().map_err(py_err)?;
    let samples = synth_generate(count, extent, seed, d).map_err(py_err)?;
    Ok(samples
        .into_iter()
        .map(|s| {
            let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
            let image = s.image.data().chunks(h * w).map(|p| p.chunks(w).map(<[f64]>::to_vec).collect()).collect();
            let mask = s.mask.data().chunks(w).map(|r| r.iter().map(|&v| u8::from(v >= 0.5)).collect()).collect();
            (image, mask)
        })
        .collect())
}

/// F-measure, MAE, PRI, VOI, GCE and BDE (None without boundaries) of one map.
#[pyfunction]
#[pyo3(signature = (saliency, truth, threshold = 0.5, beta_sq = 0.3))]
fn evaluate<'py>(
    py: Python<'py>,
    saliency: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    threshold: f64,
    beta_sq: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (h, w, s) = flatten(&saliency)?;
    let (gh, gw, g) = flatten(&truth)?;
    if (h, w) != (gh, gw) {
        return Err(PyValueError::new_err(format!("extent mismatch: {h}x{w} vs {gh}x{gw}")));
    }
    let s = Tensor::new(vec![1, h, w], s).map_err(py_err)?;
    let g = Tensor::new(vec![1, h, w], g).map_err(py_err)?;
    let pair = MaskPair::from_tensors(&s, &g).map_err(py_err)?;
    let r = evaluate_pair(&pair, threshold, beta_sq).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("f", r.f_score)?;
    d.set_item("mae", r.mae)?;
    d.set_item("pri", r.pri)?;
    d.set_item("voi", r.voi)?;
    d.set_item("gce", r.gce)?;
    d.set_item("bde", r.bde)?;
    Ok(d)
}

/// Weight count of one factorized unit (M in, N out, K branches, n×n kernels).
#[pyfunction]
fn unit_param_count(in_channels: usize, out_channels: usize, branches: usize, kernel: usize) -> PyResult<usize> {
    let cfg = DsfConfig::new(in_channels, out_channels, branches, kernel, 1);
    cfg.validate().map_err(py_err)?;
    Ok(dsf_param_count(&cfg))
}

#[pyfunction]
fn receptive_field(kernel: usize, branches: usize) -> usize {
    dsf_receptive_field(kernel, branches)
}

/// Runs training from a TOML config and returns a summary.
#[pyfunction]
#[pyo3(signature = (config, out = None, resume = None))]
fn train<'py>(py: Python<'py>, config: PathBuf, out: Option<PathBuf>, resume: Option<PathBuf>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = RunConfig::load(&config).map_err(py_err)?;
    if let Some(o) = out {
        cfg.output.dir = o;
    }
    let s = py
        .detach(|| match cfg.run.precision {
            Precision::F32 => train_run::<f32>(&cfg, resume.as_deref()),
            Precision::F64 => train_run::<f64>(&cfg, resume.as_deref()),
        })
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("iterations", s.iterations)?;
    d.set_item("first_loss", s.first_loss)?;
    d.set_item("final_loss", s.final_loss)?;
    d.set_item("best_loss", s.best_loss)?;
    d.set_item("out_dir", s.out_dir)?;
    Ok(d)
}

/// A trained network, evaluated in f64.
#[pyclass]
struct Model {
    net: DsfNet<f64>,
}

#[pymethods]
impl Model {
    #[new]
    fn new(ckpt: PathBuf, config: PathBuf) -> PyResult<Self> {
        let cfg = RunConfig::load(&config).map_err(py_err)?;
        let ck = Checkpoint::load(&ckpt).map_err(py_err)?;
        Ok(Model {
            net: load_model(&cfg, &ck).map_err(py_err)?,
        })
    }

    /// Saliency map in [0, 1] for a `[3][H][W]` image.
    fn predict(&mut self, image: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        if image.len() != 3 {
            return Err(PyValueError::new_err("expected 3 channels"));
        }
        let planes = image.iter().map(|p| flatten(p)).collect::<PyResult<Vec<_>>>()?;
        let (h, w) = (planes[0].0, planes[0].1);
        if planes.iter().any(|p| (p.0, p.1) != (h, w)) {
            return Err(PyValueError::new_err("channel extents differ"));
        }
        let data = planes.into_iter().flat_map(|p| p.2).collect();
        let x = Tensor::new(vec![3, h, w], data).map_err(py_err)?;
        let map = predict_image(&mut self.net, &x).map_err(py_err)?;
        Ok(rows(&map, h, w))
    }

    fn param_count(&self) -> usize {
        self.net.params.iter().map(|(_, t)| t.len()).sum()
    }
}

#[pymodule]
fn dsfnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(unit_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(receptive_field, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_rejects_ragged_rows() {
        assert!(flatten(&[vec![1.0, 2.0], vec![3.0]]).is_err());
        assert!(flatten(&[]).is_err());
        assert_eq!(flatten(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(), (2, 2, vec![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn counts_match_the_core_library() {
        assert_eq!(receptive_field(3, 4), 17);
        assert_eq!(unit_param_count(128, 128, 4, 3).unwrap(), 40960);
    }
}
