//! Python bindings for the `falconbc` core crate.

use std::collections::HashMap;
use std::path::PathBuf;

use clap::Parser;
use falconbc::cfm::{self, CfmHyper, PriorBox, SampleOptions};
use falconbc::circuit::{SimSettings, StenosisLocation};
use falconbc::desk::{self, BcParam};
use falconbc::inflow::{self, N_HARMONICS};
use falconbc::pipeline::{self, GenSpec};
use falconbc::tuning::{self, DeOptions, TuningProblem, TuningTargets};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn param(name: &str) -> PyResult<BcParam> {
    match name.to_ascii_lowercase().as_str() {
        "rc2" => Ok(BcParam::Rc2),
        "rc4" => Ok(BcParam::Rc4),
        "rcr6" => Ok(BcParam::Rcr6),
        _ => Err(PyValueError::new_err(format!("unknown parameterization {name:?}"))),
    }
}

fn lesion(loc: Option<&str>, severity: f64) -> PyResult<Option<(StenosisLocation, f64)>> {
    let Some(loc) = loc else { return Ok(None) };
    let l = StenosisLocation::ALL
        .into_iter()
        .find(|l| format!("{l:?}").eq_ignore_ascii_case(loc))
        .ok_or_else(|| PyValueError::new_err(format!("unknown stenosis location {loc:?}")))?;
    if !(0.0..1.0).contains(&severity) {
        return Err(PyValueError::new_err("severity must be in [0, 1)"));
    }
    Ok(Some((l, severity)))
}

/// Fourier inflow waveform.
#[pyclass(module = "falconbc_py", name = "Inflow", from_py_object)]
#[derive(Clone)]
struct PyInflow(inflow::FourierInflow);

#[pymethods]
impl PyInflow {
    /// The reference waveform used by the default topology.
    #[staticmethod]
    fn nominal() -> Self {
        Self(desk::nominal_inflow())
    }

    /// Least-squares fit of `N_HARMONICS` harmonics to samples over one period.
    #[staticmethod]
    #[pyo3(signature = (t, q, period, harmonics = N_HARMONICS))]
    fn fit(t: Vec<f64>, q: Vec<f64>, period: f64, harmonics: usize) -> PyResult<Self> {
        if t.len() != q.len() {
            return Err(PyValueError::new_err("t and q differ in length"));
        }
        let samples: Vec<(f64, f64)> = t.into_iter().zip(q).collect();
        inflow::fit_fourier(&samples, period, harmonics).map(Self).map_err(err)
    }

    #[getter]
    fn period(&self) -> f64 {
        self.0.period
    }

    #[getter]
    fn features(&self) -> Vec<f64> {
        self.0.pack_features().to_vec()
    }

    fn eval(&self, t: f64) -> f64 {
        self.0.eval(t)
    }

    fn sample(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        self.0.sample_uniform(n).into_iter().unzip()
    }

    fn cycle_volume(&self) -> f64 {
        self.0.cycle_volume()
    }
}

/// Trained conditional flow-matching posterior.
#[pyclass(module = "falconbc_py", name = "CfmModel")]
struct PyCfmModel(cfm::CfmModel);

#[pymethods]
impl PyCfmModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        cfm::CfmModel::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn x_names(&self) -> Vec<String> {
        self.0.x_names.clone()
    }

    #[getter]
    fn y_names(&self) -> Vec<String> {
        self.0.y_names.clone()
    }

    #[getter]
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.0.bounds.lo.clone(), self.0.bounds.hi.clone())
    }

    /// Posterior draws for one observation, rejected against the training box.
    #[pyo3(signature = (y, n, seed = 0, max_tries = 100_000))]
    fn sample(&self, y: Vec<f64>, n: usize, seed: u64, max_tries: usize) -> PyResult<Vec<Vec<f64>>> {
        let opts = SampleOptions {
            seed,
            max_tries,
            ..SampleOptions::default()
        };
        cfm::sample_posterior(&self.0, &y, n, &self.0.bounds, &opts)
            .map(|p| p.samples)
            .map_err(err)
    }
}

/// Trains a posterior on `(x, y)` rows. Bounds default to the training range.
#[pyfunction]
#[pyo3(signature = (x, y, x_val, y_val, x_names, y_names, hidden = vec![64, 64], epochs = 2000, lr = 2e-3, batch = 64, patience = 300, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn train_cfm(
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
    x_val: Vec<Vec<f64>>,
    y_val: Vec<Vec<f64>>,
    x_names: Vec<String>,
    y_names: Vec<String>,
    hidden: Vec<usize>,
    epochs: usize,
    lr: f64,
    batch: usize,
    patience: usize,
    seed: u64,
) -> PyResult<(PyCfmModel, Vec<f64>)> {
    let hyper = CfmHyper {
        hidden,
        epochs,
        lr,
        batch,
        patience,
        seed,
        ..CfmHyper::default()
    };
    let d = x.first().map_or(0, Vec::len);
    let lo = (0..d).map(|j| x.iter().map(|r| r[j]).fold(f64::INFINITY, f64::min)).collect();
    let hi = (0..d).map(|j| x.iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    let bounds = PriorBox::new(lo, hi).map_err(err)?;
    let (m, log) = cfm::CfmModel::fit(&x, &y, &x_val, &y_val, bounds, x_names, y_names, &hyper).map_err(err)?;
    Ok((PyCfmModel(m), log.val_loss))
}

/// Clinical summary of one simulation of the default network.
#[pyfunction]
#[pyo3(signature = (param_name, values, location = None, severity = 0.0))]
fn simulate(param_name: &str, values: Vec<f64>, location: Option<&str>, severity: f64) -> PyResult<HashMap<String, f64>> {
    let p = param(param_name)?;
    let mut cfg = desk::topology(lesion(location, severity)?);
    p.apply(&mut cfg, &values).map_err(err)?;
    let net = falconbc::circuit::build_network(&cfg).map_err(err)?;
    let tr = falconbc::circuit::simulate(&net, &desk::nominal_inflow(), &SimSettings::default()).map_err(err)?;
    let s = falconbc::circuit::summarize(&tr).map_err(err)?;
    Ok(HashMap::from([
        ("P_dia".to_string(), s.p_dia),
        ("P_sys".to_string(), s.p_sys),
        ("Q_left".to_string(), s.q_mean[0]),
        ("Q_right".to_string(), s.q_mean[1]),
        ("flow_split".to_string(), s.flow_split_left),
    ]))
}

#[pyfunction]
fn nominal(param_name: &str) -> PyResult<(Vec<String>, Vec<f64>)> {
    let p = param(param_name)?;
    Ok((p.names(), p.nominal()))
}

/// Synthetic healthy dataset as a column dictionary.
#[pyfunction]
#[pyo3(signature = (param_name, n, seed = 0))]
fn generate_dataset(param_name: &str, n: usize, seed: u64) -> PyResult<HashMap<String, Vec<f64>>> {
    let table = pipeline::generate_dataset(&GenSpec::healthy(param(param_name)?, n, seed)).map_err(err)?;
    table
        .columns()
        .into_iter()
        .map(|c| table.column(&c).map(|v| (c, v)).map_err(err))
        .collect()
}

/// Mean absolute and signed errors per target; `predicted[i][k][j]` is draw
/// `k` of target `j` for test point `i`.
#[pyfunction]
fn reconstruction_metrics(
    predicted: Vec<Vec<Vec<f64>>>,
    truth: Vec<Vec<f64>>,
    names: Vec<String>,
) -> PyResult<HashMap<String, (f64, f64)>> {
    let r = pipeline::reconstruction_metrics(&predicted, &truth, &names).map_err(err)?;
    Ok(r.targets.iter().map(|t| (t.name.clone(), (t.abs_mean, t.sign_mean))).collect())
}

/// Differential-evolution tuning of the six outlet RCR values to pressure
/// targets. Returns the parameters and the achieved `(P_sys, P_dia)`.
#[pyfunction]
#[pyo3(signature = (p_sys, p_dia, location = None, severity = 0.0, pop = 30, max_gen = 60, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn tune(
    py: Python<'_>,
    p_sys: f64,
    p_dia: f64,
    location: Option<&str>,
    severity: f64,
    pop: usize,
    max_gen: usize,
    seed: u64,
) -> PyResult<(Vec<f64>, f64, f64)> {
    let problem = TuningProblem {
        topology: desk::topology(lesion(location, severity)?),
        inflow: desk::nominal_inflow(),
        targets: TuningTargets::new(p_sys, p_dia).map_err(err)?,
        settings: SimSettings::default(),
    };
    let bounds: Vec<(f64, f64)> = desk::NOMINAL_RCR6.iter().map(|v| (0.3 * v, 3.0 * v)).collect();
    let opts = DeOptions {
        pop,
        max_gen,
        seed,
        ..DeOptions::default()
    };
    let r = py
        .detach(|| tuning::diff_evolution(|x| problem.objective(x), &bounds, None, &opts))
        .map_err(err)?;
    let s = falconbc::circuit::summarize(&problem.simulate(&r.x).map_err(err)?).map_err(err)?;
    Ok((r.x, s.p_sys, s.p_dia))
}

#[pyfunction]
fn rescale_resistances(r: Vec<f64>, total: f64) -> PyResult<Vec<f64>> {
    tuning::rescale_resistances(&r, total).map_err(err)
}

#[pyfunction]
fn parallel_resistance(r: Vec<f64>) -> f64 {
    tuning::parallel_resistance(&r)
}

#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    falconbc::anatomy::chamfer_points(&a, &b).map_err(err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> PyResult<i32> {
    let argv = std::iter::once("falconbc".to_string()).chain(args);
    let parsed = falconbc::cli::Args::try_parse_from(argv).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(falconbc::cli::main_with(parsed))
}

#[pymodule]
fn falconbc_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInflow>()?;
    m.add_class::<PyCfmModel>()?;
    m.add_function(wrap_pyfunction!(train_cfm, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(nominal, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(tune, m)?)?;
    m.add_function(wrap_pyfunction!(rescale_resistances, m)?)?;
    m.add_function(wrap_pyfunction!(parallel_resistance, m)?)?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("N_HARMONICS", N_HARMONICS)?;
    Ok(())
}
