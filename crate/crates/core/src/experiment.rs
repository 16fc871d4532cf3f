//! Experiment configuration, execution and report files.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorConfig;
use crate::data::{self, make_windows, SplitFractions};
use crate::error::{Error, Result};
use crate::forecaster::ForecasterConfig;
use crate::metrics::{EvalReport, Summary};
use crate::params::ClientId;
use crate::protocol::{attention_diagnostics, stream_rng, streams, AggregatorKind, ClientData, Federation, HyperParams, RoundDiagnostics, RoundReport};

/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "FEDGAME_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Clustered synthetic demand series.
    Synth {
        #[serde(default = "defaults::clients")]
        clients: usize,
        #[serde(default = "defaults::clusters")]
        clusters: usize,
        #[serde(default = "defaults::length")]
        length: usize,
        #[serde(default = "defaults::noise_sd")]
        noise_sd: f64,
    },
    /// `timestamp,station_id,demand_kwh` file.
    Csv {
        path: PathBuf,
        /// Sampling interval in seconds; inferred from the data when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        interval_secs: Option<i64>,
    },
}

mod defaults {
    pub fn clients() -> usize {
        8
    }
    pub fn clusters() -> usize {
        2
    }
    pub fn length() -> usize {
        1200
    }
    pub fn noise_sd() -> f64 {
        0.1
    }
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth {
            clients: defaults::clients(),
            clusters: defaults::clusters(),
            length: defaults::length(),
            noise_sd: defaults::noise_sd(),
        }
    }
}

impl DataSource {
    fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            DataSource::Synth {
                clients,
                clusters,
                length,
                noise_sd,
            } => {
                if *clients == 0 {
                    out.push("data.clients must be >= 1".to_string());
                }
                if *clusters == 0 || clusters > clients {
                    out.push(format!("data.clusters ({clusters}) must satisfy 1 <= data.clusters <= data.clients ({clients})"));
                }
                if *length == 0 {
                    out.push("data.length must be >= 1".to_string());
                }
                if !(noise_sd.is_finite() && *noise_sd >= 0.0) {
                    out.push("data.noise_sd must be finite and >= 0".to_string());
                }
            }
            DataSource::Csv { path, interval_secs } => {
                if path.as_os_str().is_empty() {
                    out.push("data.path must not be empty".to_string());
                }
                if interval_secs.is_some_and(|s| s <= 0) {
                    out.push("data.interval_secs must be > 0".to_string());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub methods: Vec<AggregatorKind>,
    /// Runs per method, with master seeds `seed, seed + 1, ...`.
    pub seeds: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                AggregatorKind::Game,
                AggregatorKind::Mean,
                AggregatorKind::SingleAttention,
                AggregatorKind::Fedavg,
                AggregatorKind::LocalOnly,
            ],
            seeds: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub protocol: HyperParams,
    pub forecaster: ForecasterConfig,
    pub aggregator: AggregatorConfig,
    pub data: DataSource,
    pub splits: SplitFractions,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("fedgame-out"),
            protocol: HyperParams::default(),
            forecaster: ForecasterConfig::default(),
            aggregator: AggregatorConfig::default(),
            data: DataSource::default(),
            splits: SplitFractions::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// Every problem with the configuration, each naming its key.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.protocol.problems("protocol.");
        out.extend(self.forecaster.problems("forecaster."));
        out.extend(self.aggregator.problems("aggregator."));
        out.extend(self.data.problems());
        out.extend(self.splits.problems("splits."));
        if self.ablation.methods.is_empty() {
            out.push("ablation.methods must not be empty".to_string());
        }
        if self.ablation.seeds == 0 {
            out.push("ablation.seeds must be >= 1".to_string());
        }
        if self.output_dir.as_os_str().is_empty() {
            out.push("output_dir must not be empty".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(p))
        }
    }

    /// Client datasets for this configuration; synthetic data comes from the data stream.
    pub fn load_clients(&self) -> Result<Vec<ClientData>> {
        let shards = match &self.data {
            DataSource::Synth {
                clients,
                clusters,
                length,
                noise_sd,
            } => {
                let seed = stream_rng(self.seed, streams::DATA).next_u64();
                data::synth_generate(*clients, *clusters, *length, *noise_sd, seed)?
            }
            DataSource::Csv { path, interval_secs } => data::load_csv_with_interval(path, *interval_secs)?,
        };
        shards
            .iter()
            .map(|s| {
                let split = make_windows(s, self.forecaster.history_len, self.forecaster.horizon, self.splits)?;
                Ok(ClientData {
                    id: s.client_id,
                    name: s.name.clone(),
                    cluster: s.cluster,
                    train: split.train,
                    test: split.test,
                })
            })
            .collect()
    }

    pub fn federation(&self) -> Result<Federation> {
        self.validate()?;
        Federation::new(
            self.protocol.clone(),
            self.forecaster.clone(),
            self.aggregator.clone(),
            self.seed,
            self.load_clients()?,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<RoundReport>,
    pub eval: EvalReport,
    pub diagnostics: Vec<RoundDiagnostics>,
    pub clusters: Option<BTreeMap<ClientId, usize>>,
}

/// Validates, builds the federation, runs every round and evaluates on the test windows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let fed = cfg.federation()?;
    let state = fed.initial_state()?;
    let (state, reports) = fed.run(state, cfg.protocol.rounds)?;
    let eval = fed.evaluate(&state)?;
    let clusters = fed.cluster_labels();
    let diagnostics = attention_diagnostics(&reports, clusters.as_ref());
    Ok(ExperimentOutcome {
        reports,
        eval,
        diagnostics,
        clusters,
    })
}

/// Files written by [`write_outputs`].
pub const OUTPUT_FILES: [&str; 6] = [
    "rounds.jsonl",
    "eval.json",
    "eval.csv",
    "attention.csv",
    "diagnostics.csv",
    "config.toml",
];

/// Writes the run's reports plus the effective configuration into `dir`.
pub fn write_outputs(outcome: &ExperimentOutcome, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut rounds = BufWriter::new(File::create(dir.join("rounds.jsonl"))?);
    for r in &outcome.reports {
        serde_json::to_writer(&mut rounds, r)?;
        rounds.write_all(b"\n")?;
    }
    rounds.flush()?;
    outcome.eval.write_json(dir.join("eval.json"))?;
    outcome.eval.write_csv(dir.join("eval.csv"))?;

    let mut att = csv::Writer::from_path(dir.join("attention.csv"))?;
    att.write_record(["round", "i", "j", "w_ij"])?;
    for r in &outcome.reports {
        let Some(m) = &r.attention else { continue };
        for (i, row) in m.iter().enumerate() {
            for (j, w) in row.iter().enumerate() {
                if i != j {
                    att.write_record([r.round.to_string(), r.clients[i].0.to_string(), r.clients[j].0.to_string(), w.to_string()])?;
                }
            }
        }
    }
    att.flush()?;

    let mut diag = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    diag.write_record(["round", "entropy", "variance", "intra_cluster_mass"])?;
    for d in &outcome.diagnostics {
        diag.write_record([
            d.round.to_string(),
            d.entropy.to_string(),
            d.variance.to_string(),
            d.intra_cluster_mass.map(|m| m.to_string()).unwrap_or_default(),
        ])?;
    }
    diag.flush()?;

    let mut effective = cfg.clone();
    effective.output_dir = dir.to_path_buf();
    fs::write(dir.join("config.toml"), effective.to_toml()?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub method: AggregatorKind,
    /// Median over seeds of the macro-averaged metrics.
    pub median: Summary,
    pub per_seed: Vec<(u64, Summary)>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs every configured method over the same seeds; only the aggregation changes between rows.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    cfg.ablation
        .methods
        .iter()
        .map(|&method| {
            let per_seed = (0..cfg.ablation.seeds)
                .map(|s| {
                    let mut c = cfg.clone();
                    c.protocol.aggregator_kind = method;
                    c.seed = cfg.seed.wrapping_add(s);
                    log::info!("ablation: {method}, seed {}", c.seed);
                    Ok((c.seed, run_experiment(&c)?.eval.macro_avg))
                })
                .collect::<Result<Vec<_>>>()?;
            let pick = |f: fn(&Summary) -> f64| median(&mut per_seed.iter().map(|(_, s)| f(s)).collect::<Vec<_>>());
            Ok(AblationRow {
                method,
                median: Summary {
                    qs: pick(|s| s.qs),
                    mil: pick(|s| s.mil),
                    icp: pick(|s| s.icp),
                },
                per_seed,
            })
        })
        .collect()
}

/// `ablation.csv` (medians) and `ablation_runs.csv` (one row per seed).
pub fn write_ablation(rows: &[AblationRow], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("ablation.csv"))?;
    w.write_record(["method", "qs", "mil", "icp"])?;
    for r in rows {
        w.write_record([r.method.name().to_string(), r.median.qs.to_string(), r.median.mil.to_string(), r.median.icp.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("ablation_runs.csv"))?;
    w.write_record(["method", "seed", "qs", "mil", "icp"])?;
    for r in rows {
        for (seed, s) in &r.per_seed {
            w.write_record([r.method.name().to_string(), seed.to_string(), s.qs.to_string(), s.mil.to_string(), s.icp.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Exit status for a failed command: 2 for configuration problems, 1 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Validation(_) | Error::Config(_) | Error::Toml(_) => 2,
        _ => 1,
    }
}

/// Output directory precedence: explicit flag, then environment, then the config file.
pub fn resolve_output_dir(cfg: &ExperimentConfig, flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone(),
    }
}
