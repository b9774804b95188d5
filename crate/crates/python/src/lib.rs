//! Python bindings. Matrices cross the boundary as lists of rows of Python
//! `complex` values.

use num_complex::Complex64;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use neurocal::baselines::{self, WmmseOptions};
use neurocal::calibration::{self, CalibratedZf, TrainHyper};
use neurocal::channel::{self, SystemConfig};
use neurocal::harness::{self, ExperimentConfig};
use neurocal::ComplexMatrix;

pyo3::create_exception!(neurocal_py, NeurocalError, PyException);

type Rows = Vec<Vec<Complex64>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    NeurocalError::new_err(e.to_string())
}

fn to_matrix(rows: Rows) -> PyResult<ComplexMatrix> {
    let n_rows = rows.len();
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(err("ragged matrix rows"));
    }
    let flat: Vec<Complex64> = rows.into_iter().flatten().collect();
    ComplexMatrix::from_row_major(n_rows, n_cols, &flat).map_err(err)
}

fn to_rows(m: &ComplexMatrix) -> Rows {
    (0..m.rows())
        .map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect())
        .collect()
}

/// System parameters in linear watts.
#[pyclass(name = "SystemConfig", from_py_object)]
#[derive(Clone)]
struct PySystemConfig {
    inner: SystemConfig,
}

#[pymethods]
impl PySystemConfig {
    #[new]
    #[pyo3(signature = (antennas=16, users=4, pilot_length=None, power_dl_dbm=5.0, power_ul_dbm=-10.0, noise_dl_dbm=-85.0, noise_ul_dbm=-85.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        antennas: usize,
        users: usize,
        pilot_length: Option<usize>,
        power_dl_dbm: f64,
        power_ul_dbm: f64,
        noise_dl_dbm: f64,
        noise_ul_dbm: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = SystemConfig {
            antennas,
            users,
            pilot_length: pilot_length.unwrap_or(users),
            power_dl: channel::dbm_to_watts(power_dl_dbm),
            power_ul: channel::dbm_to_watts(power_ul_dbm),
            noise_dl: channel::dbm_to_watts(noise_dl_dbm),
            noise_ul: channel::dbm_to_watts(noise_ul_dbm),
            rng_seed: seed,
            ..SystemConfig::default()
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn antennas(&self) -> usize {
        self.inner.antennas
    }

    #[getter]
    fn users(&self) -> usize {
        self.inner.users
    }

    #[getter]
    fn power_dl(&self) -> f64 {
        self.inner.power_dl
    }

    #[getter]
    fn noise_dl(&self) -> f64 {
        self.inner.noise_dl
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(err)
    }
}

/// Downlink channels `H_DL^H` (`K x M`) of samples `start..start + count`.
#[pyfunction]
fn downlink_channels(cfg: &PySystemConfig, start: u64, count: usize) -> Vec<Rows> {
    channel::generate_batch(&cfg.inner, start, count)
        .iter()
        .map(|s| to_rows(&s.downlink_rows()))
        .collect()
}

#[pyfunction]
fn zf(h: Rows, power: f64) -> PyResult<Rows> {
    Ok(to_rows(&baselines::zf(&to_matrix(h)?, power).map_err(err)?.v))
}

#[pyfunction]
fn mrt(h: Rows, power: f64) -> PyResult<Rows> {
    Ok(to_rows(&baselines::mrt(&to_matrix(h)?, power).map_err(err)?.v))
}

/// Returns the beamformer and the sum-rate trace.
#[pyfunction]
fn wmmse(h: Rows, power: f64, noise: f64) -> PyResult<(Rows, Vec<f64>)> {
    let out = baselines::wmmse(&to_matrix(h)?, power, noise, &WmmseOptions::default()).map_err(err)?;
    Ok((to_rows(&out.beamformer.v), out.trace))
}

#[pyfunction]
fn sum_rate(h: Rows, v: Rows, noise: f64) -> PyResult<f64> {
    baselines::sum_rate(&to_matrix(h)?, &to_matrix(v)?, noise).map_err(err)
}

#[pyfunction]
fn ls_estimate(y: Rows, pilots: Rows) -> PyResult<Rows> {
    Ok(to_rows(
        &calibration::ls_estimate(&to_matrix(y)?, &to_matrix(pilots)?).map_err(err)?,
    ))
}

/// ZF with a learned per-user input calibration.
#[pyclass(name = "CalibratedZf")]
struct PyCalibratedZf {
    inner: CalibratedZf,
}

#[pymethods]
impl PyCalibratedZf {
    /// Untrained model; behaves exactly like ZF.
    #[staticmethod]
    #[pyo3(signature = (antennas, hidden=vec![128, 512, 512], seed=0))]
    fn identity(antennas: usize, hidden: Vec<usize>, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: CalibratedZf::identity(antennas, &hidden, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: CalibratedZf::load(dir).map_err(err)?.0,
        })
    }

    fn beamform(&self, h: Rows, power: f64) -> PyResult<Rows> {
        let b = calibration::calibrated_zf_beamform(&to_matrix(h)?, &self.inner, power).map_err(err)?;
        Ok(to_rows(&b.v))
    }

    /// Held-out sum-rates on samples `start..start + count` of `cfg`.
    fn sum_rates(&self, cfg: &PySystemConfig, start: u64, count: usize) -> PyResult<Vec<f64>> {
        let samples = channel::generate_batch(&cfg.inner, start, count);
        self.inner.sum_rates(&samples, &cfg.inner).map_err(err)
    }
}

/// Trains on samples `0..n_train` and reports held-out rates on the next
/// `n_test`. `hyper_json` overrides training hyperparameters.
#[pyfunction]
#[pyo3(signature = (cfg, n_train, n_test, hyper_json=None))]
fn train_perfect_csi(
    py: Python<'_>,
    cfg: &PySystemConfig,
    n_train: usize,
    n_test: usize,
    hyper_json: Option<&str>,
) -> PyResult<(PyCalibratedZf, Vec<f64>)> {
    let hyper: TrainHyper = match hyper_json {
        Some(text) => serde_json::from_str(text).map_err(err)?,
        None => TrainHyper::default(),
    };
    let cfg = cfg.inner.clone();
    let (model, curve) = py
        .detach(|| {
            let train = channel::generate_batch(&cfg, 0, n_train);
            let test = channel::generate_batch(&cfg, n_train as u64, n_test);
            calibration::train_perfect_csi(&train, &test, &cfg, &hyper)
        })
        .map_err(err)?;
    let heldout = curve.iter().map(|e| e.heldout_sum_rate).collect();
    Ok((PyCalibratedZf { inner: model }, heldout))
}

/// Runs an experiment from its JSON text; returns the CSV report.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(err)?;
    let report = py.detach(|| harness::run_experiment(&cfg)).map_err(err)?;
    report.to_csv().map_err(err)
}

#[pyfunction]
fn dbm_to_watts(dbm: f64) -> f64 {
    channel::dbm_to_watts(dbm)
}

#[pymodule]
fn neurocal_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NeurocalError", m.py().get_type::<NeurocalError>())?;
    m.add_class::<PySystemConfig>()?;
    m.add_class::<PyCalibratedZf>()?;
    m.add_function(wrap_pyfunction!(downlink_channels, m)?)?;
    m.add_function(wrap_pyfunction!(zf, m)?)?;
    m.add_function(wrap_pyfunction!(mrt, m)?)?;
    m.add_function(wrap_pyfunction!(wmmse, m)?)?;
    m.add_function(wrap_pyfunction!(sum_rate, m)?)?;
    m.add_function(wrap_pyfunction!(ls_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(train_perfect_csi, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(dbm_to_watts, m)?)?;
    Ok(())
}
