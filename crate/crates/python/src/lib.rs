//! Python bindings: metrics, communication cost, synthetic data, the aggregator and whole experiments.

use fedgame::aggregator::{aggregator_rng, meta_loss, AggregatorConfig, AggregatorState, HeadDeltas, PassOptions};
use fedgame::experiment::{run_experiment as run_core, ExperimentConfig};
use fedgame::protocol::{comm_cost as comm_core, AggregatorKind, CommPreset};
use fedgame::{metrics, ClientId, Error, LayerKind, Layout};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::Toml(_) | Error::Shape(_) | Error::Usage(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn kind(name: &str) -> PyResult<AggregatorKind> {
    AggregatorKind::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown aggregator kind `{name}`")))
}

/// Mean pinball loss of `yhat` against `y` at quantile `q`.
#[pyfunction]
fn quantile_score(y: Vec<f64>, yhat: Vec<f64>, q: f64) -> PyResult<f64> {
    metrics::quantile_score(&y, &yhat, q).map_err(to_py)
}

/// Fraction of `y` inside `[lower, upper]`.
#[pyfunction]
fn icp(y: Vec<f64>, lower: Vec<f64>, upper: Vec<f64>) -> PyResult<f64> {
    metrics::icp(&y, &lower, &upper).map_err(to_py)
}

/// Mean interval length.
#[pyfunction]
fn mil(lower: Vec<f64>, upper: Vec<f64>) -> PyResult<f64> {
    metrics::mil(&lower, &upper).map_err(to_py)
}

/// Per-round traffic for `n_clients`, either for a reference model (`preset`)
/// or for an explicit `total_params` / `head_params` split.
#[pyfunction]
#[pyo3(signature = (n_clients, preset=None, total_params=None, head_params=None, kind="game"))]
fn comm_cost<'py>(
    py: Python<'py>,
    n_clients: usize,
    preset: Option<&str>,
    total_params: Option<usize>,
    head_params: Option<usize>,
    kind: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let layout = match (preset, total_params, head_params) {
        (Some(p), None, None) => CommPreset::parse(p).ok_or_else(|| PyValueError::new_err(format!("unknown preset `{p}`")))?.layout(),
        (None, Some(total), Some(head)) if head <= total => Layout::builder()
            .push("body", total - head, LayerKind::Dense)
            .push("head", head, LayerKind::OutputHead)
            .build(),
        _ => return Err(PyValueError::new_err("pass either preset, or total_params and head_params with head_params <= total_params")),
    };
    let c = comm_core(n_clients, &layout, self::kind(kind)?);
    let d = PyDict::new(py);
    d.set_item("clients", c.clients)?;
    d.set_item("total_params", c.total_params)?;
    d.set_item("head_params", c.head_params)?;
    d.set_item("upstream_params", c.upstream_params)?;
    d.set_item("downstream_params", c.downstream_params)?;
    d.set_item("upstream_bytes", c.upstream_bytes)?;
    d.set_item("downstream_bytes", c.downstream_bytes)?;
    d.set_item("ratio", c.ratio)?;
    d.set_item("overhead_percent", c.overhead_percent())?;
    Ok(d)
}

/// Clustered synthetic demand series, one dict per client.
#[pyfunction]
#[pyo3(signature = (n_clients, n_clusters, length, noise_sd=0.1, seed=0))]
fn synth<'py>(py: Python<'py>, n_clients: usize, n_clusters: usize, length: usize, noise_sd: f64, seed: u64) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let shards = fedgame::data::synth_generate(n_clients, n_clusters, length, noise_sd, seed).map_err(to_py)?;
    shards
        .into_iter()
        .map(|s| {
            let d = PyDict::new(py);
            d.set_item("client_id", s.client_id.0)?;
            d.set_item("name", s.name)?;
            d.set_item("cluster", s.cluster)?;
            d.set_item("interval_secs", s.interval_secs)?;
            d.set_item("values", s.values)?;
            Ok(d)
        })
        .collect()
}

/// Every problem with a TOML experiment config; empty when it is valid.
#[pyfunction]
fn validate_config(toml_text: &str) -> PyResult<Vec<String>> {
    Ok(ExperimentConfig::from_toml_str(toml_text).map_err(to_py)?.problems())
}

/// Runs an experiment from TOML text and returns its reports as a JSON string
/// with keys `reports`, `eval`, `diagnostics`.
#[pyfunction]
#[pyo3(signature = (toml_text, seed=None, method=None))]
fn run_experiment(py: Python<'_>, toml_text: &str, seed: Option<u64>, method: Option<&str>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_toml_str(toml_text).map_err(to_py)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = method {
        cfg.protocol.aggregator_kind = kind(m)?;
    }
    let out = py.detach(|| run_core(&cfg)).map_err(to_py)?;
    let json = serde_json::json!({
        "reports": out.reports,
        "eval": out.eval,
        "diagnostics": out.diagnostics,
    });
    Ok(json.to_string())
}

/// The graph-attention mixture-of-experts aggregator over clients `0..n_clients`.
#[pyclass(module = "fedgame_py")]
struct Aggregator {
    state: AggregatorState,
}

type Matrix = Vec<Vec<f64>>;

fn head_deltas(deltas: Vec<Vec<f64>>) -> HeadDeltas {
    deltas.into_iter().enumerate().map(|(i, d)| (ClientId(i as u32), d)).collect()
}

#[pymethods]
impl Aggregator {
    #[new]
    #[pyo3(signature = (head_dim, n_clients, seed=0, embed_dim=None, num_experts=None, top_k=None, temperature=None, w_self=None, alpha=None, beta=None, server_lr=None, noise=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        head_dim: usize,
        n_clients: u32,
        seed: u64,
        embed_dim: Option<usize>,
        num_experts: Option<usize>,
        top_k: Option<usize>,
        temperature: Option<f64>,
        w_self: Option<f64>,
        alpha: Option<f64>,
        beta: Option<f64>,
        server_lr: Option<f64>,
        noise: Option<bool>,
    ) -> PyResult<Self> {
        let d = AggregatorConfig::default();
        let config = AggregatorConfig {
            embed_dim: embed_dim.unwrap_or(d.embed_dim),
            num_experts: num_experts.unwrap_or(d.num_experts),
            top_k: top_k.unwrap_or(d.top_k),
            temperature: temperature.unwrap_or(d.temperature),
            w_self: w_self.unwrap_or(d.w_self),
            alpha: alpha.unwrap_or(d.alpha),
            beta: beta.unwrap_or(d.beta),
            server_lr: server_lr.unwrap_or(d.server_lr),
            noise_enabled: noise.unwrap_or(d.noise_enabled),
            ..d
        };
        let ids: Vec<ClientId> = (0..n_clients).map(ClientId).collect();
        let state = AggregatorState::new(config, head_dim, &ids, aggregator_rng(seed)).map_err(to_py)?;
        Ok(Aggregator { state })
    }

    /// Number of trainable parameters.
    fn num_params(&self) -> usize {
        self.state.params().len()
    }

    /// Noise-free personalized deltas (one list per client) and the N×N attention matrix
    /// (zero diagonal).
    fn aggregate(&self, deltas: Vec<Vec<f64>>) -> PyResult<(Matrix, Matrix)> {
        let n = deltas.len();
        let agg = self.state.aggregate(&head_deltas(deltas)).map_err(to_py)?;
        let mut attention = vec![vec![0.0; n]; n];
        for row in &agg.rows {
            for (j, w) in row.neighbors.iter().zip(&row.weights) {
                attention[row.client_id.0 as usize][j.0 as usize] = *w;
            }
        }
        Ok((agg.deltas.into_values().collect(), attention))
    }

    /// Gate mixtures over experts, one row per client.
    fn expert_mix(&self, deltas: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let agg = self.state.aggregate(&head_deltas(deltas)).map_err(to_py)?;
        Ok(agg.rows.into_iter().map(|r| r.expert_mix).collect())
    }

    /// Mean meta-loss of the noise-free aggregation.
    fn meta_loss(&self, deltas: Vec<Vec<f64>>) -> PyResult<f64> {
        self.state.meta_loss_value(&head_deltas(deltas), &PassOptions::default()).map_err(to_py)
    }

    /// One Adam step on the meta-loss; returns the loss before the step.
    fn train_step(&mut self, deltas: Vec<Vec<f64>>) -> PyResult<f64> {
        self.state.train_step(&head_deltas(deltas)).map_err(to_py)
    }
}

/// `α‖pers − own‖² + β(1 − cos(pers, own))` for one client.
#[pyfunction]
#[pyo3(name = "meta_loss", signature = (personalized, own, alpha=0.5, beta=0.5))]
fn meta_loss_py(personalized: Vec<f64>, own: Vec<f64>, alpha: f64, beta: f64) -> PyResult<f64> {
    meta_loss(&personalized, &own, alpha, beta).map_err(to_py)
}

/// Names of the available aggregator kinds.
#[pyfunction]
fn aggregator_kinds() -> Vec<&'static str> {
    AggregatorKind::ALL.iter().map(|k| k.name()).collect()
}

/// Default experiment config as TOML text.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_toml().map_err(to_py)
}

#[pymodule]
fn fedgame_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantile_score, m)?)?;
    m.add_function(wrap_pyfunction!(icp, m)?)?;
    m.add_function(wrap_pyfunction!(mil, m)?)?;
    m.add_function(wrap_pyfunction!(comm_cost, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(meta_loss_py, m)?)?;
    m.add_function(wrap_pyfunction!(aggregator_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_class::<Aggregator>()?;
    Ok(())
}
