//! Series ingestion, windowing, normalization and the synthetic non-IID generator.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ClientId;

/// Standard deviations below this are replaced by it when z-scoring.
pub const STD_FLOOR: f64 = 1e-8;

pub const CSV_COLUMNS: [&str; 3] = ["timestamp", "station_id", "demand_kwh"];

const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// One client's demand series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesShard {
    pub client_id: ClientId,
    /// Station identifier as it appears in the source.
    pub name: String,
    pub values: Vec<f64>,
    /// Unix seconds of `values[0]`.
    pub start: i64,
    /// Seconds between consecutive values; 0 when unknown.
    pub interval_secs: i64,
    /// Ground-truth cluster, known only for synthetic data.
    pub cluster: Option<usize>,
}

impl SeriesShard {
    pub fn timestamp(&self, index: usize) -> i64 {
        self.start + self.interval_secs * index as i64
    }
}

/// Per-client z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::identity();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt().max(STD_FLOOR),
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Normalized `(input window, target horizon)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    /// Series index of the first input value of each sample, when known.
    origins: Vec<usize>,
    pub stats: Normalization,
}

impl WindowedDataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, stats: Normalization) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::shape(format!(
                "{} input windows but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Self {
            origins: (0..inputs.len()).collect(),
            inputs,
            targets,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample(&self, index: usize) -> Option<(&[f64], &[f64])> {
        Some((self.inputs.get(index)?.as_slice(), self.targets.get(index)?.as_slice()))
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[Vec<f64>] {
        &self.targets
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub const TRAIN_ONLY: Self = Self {
        train: 1.0,
        val: 0.0,
        test: 0.0,
    };

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
            out.push(format!("{prefix}splits must be finite and non-negative"));
        } else if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            out.push(format!("{prefix}splits must sum to 1"));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDatasets {
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
    pub stats: Normalization,
}

/// Chronological split followed by stride-1 windowing inside each part.
///
/// The z-score statistics come from the training part only and are applied to
/// all three. A part too short for one window comes back empty.
pub fn make_windows(shard: &SeriesShard, history: usize, horizon: usize, splits: SplitFractions) -> Result<SplitDatasets> {
    if history == 0 || horizon == 0 {
        return Err(Error::usage("history and horizon must both be >= 1"));
    }
    let problems = splits.problems("");
    if !problems.is_empty() {
        return Err(Error::usage(problems.join("; ")));
    }
    let n = shard.values.len();
    let n_train = (n as f64 * splits.train).floor() as usize;
    let n_val = ((n as f64 * splits.val).floor() as usize).min(n - n_train);
    let bounds = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n)];
    let stats = Normalization::fit(&shard.values[..n_train]);

    let mut parts = bounds.iter().zip(["train", "val", "test"]).map(|(&(lo, hi), label)| {
        let segment = &shard.values[lo..hi];
        let span = history + horizon;
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        let mut origins = Vec::new();
        if segment.len() >= span {
            for s in 0..=segment.len() - span {
                inputs.push(segment[s..s + history].iter().map(|v| stats.normalize(*v)).collect());
                targets.push(segment[s + history..s + span].iter().map(|v| stats.normalize(*v)).collect());
                origins.push(lo + s);
            }
        } else if hi > lo || label == "train" {
            log::warn!(
                "{}: {label} split has {} values, fewer than one window of {}",
                shard.name,
                segment.len(),
                span
            );
        }
        WindowedDataset {
            inputs,
            targets,
            origins,
            stats,
        }
    });
    Ok(SplitDatasets {
        train: parts.next().expect("three parts"),
        val: parts.next().expect("three parts"),
        test: parts.next().expect("three parts"),
        stats,
    })
}

fn parse_timestamp(raw: &str) -> Option<i64> {
    let raw = raw.trim();
    if let Ok(secs) = raw.parse::<i64>() {
        return Some(secs);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(raw, fmt).ok())
        .map(|dt| dt.and_utc().timestamp())
}

/// Reads `timestamp,station_id,demand_kwh` rows into one shard per station.
///
/// Rows are sorted by timestamp (stable for ties). The sampling interval is the
/// smallest positive step seen for the station, and missing intervals are
/// filled with zero demand.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<SeriesShard>> {
    load_csv_with_interval(path, None)
}

pub fn load_csv_with_interval(path: impl AsRef<Path>, interval_secs: Option<i64>) -> Result<Vec<SeriesShard>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut cols = [0usize; 3];
    for (slot, name) in cols.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers.iter().position(|h| h == name).ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: format!("missing column `{name}`"),
        })?;
    }
    let mut stations: BTreeMap<String, Vec<(i64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let row_err = |msg: String| Error::Row {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let ts_raw = record.get(cols[0]).unwrap_or_default();
        let ts = parse_timestamp(ts_raw).ok_or_else(|| row_err(format!("unparseable timestamp `{ts_raw}`")))?;
        let station = record.get(cols[1]).unwrap_or_default().to_string();
        let raw = record.get(cols[2]).unwrap_or_default();
        let value: f64 = raw
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| row_err(format!("invalid demand `{raw}`")))?;
        stations.entry(station).or_default().push((ts, value));
    }

    let mut shards = Vec::with_capacity(stations.len());
    for (idx, (name, mut rows)) in stations.into_iter().enumerate() {
        rows.sort_by_key(|r| r.0);
        let step = interval_secs.or_else(|| rows.windows(2).map(|w| w[1].0 - w[0].0).filter(|d| *d > 0).min());
        let mut values = Vec::with_capacity(rows.len());
        for (k, &(ts, v)) in rows.iter().enumerate() {
            if let (Some(step), Some(prev)) = (step, k.checked_sub(1).map(|p| rows[p].0)) {
                let gap = ts - prev;
                if step > 0 && gap > step {
                    values.extend(std::iter::repeat_n(0.0, (gap / step - 1) as usize));
                }
            }
            values.push(v);
        }
        shards.push(SeriesShard {
            client_id: ClientId(idx as u32),
            name,
            start: rows.first().map_or(0, |r| r.0),
            interval_secs: step.unwrap_or(0),
            values,
            cluster: None,
        });
    }
    Ok(shards)
}

/// Writes shards in the same schema [`load_csv`] reads.
pub fn write_csv(shards: &[SeriesShard], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(CSV_COLUMNS)?;
    for shard in shards {
        for (i, v) in shard.values.iter().enumerate() {
            let ts = DateTime::from_timestamp(shard.timestamp(i), 0)
                .map(|d| d.naive_utc().format(TIMESTAMP_FORMAT).to_string())
                .unwrap_or_else(|| shard.timestamp(i).to_string());
            writer.write_record([ts, shard.name.clone(), v.to_string()])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Base period (in steps) of the first cluster; cluster `c` uses `BASE_PERIOD / (2c + 1)`.
const BASE_PERIOD: f64 = 48.0;
/// Relative per-client amplitude jitter, applied only when `noise_sd > 0`.
const AMPLITUDE_JITTER: f64 = 0.1;

/// Non-IID demand series with known cluster structure.
///
/// Each cluster has an archetype made of two sinusoids with its own period,
/// phase and amplitude, clipped at zero. Clients are assigned to clusters in
/// contiguous blocks and add amplitude jitter plus Gaussian noise on top.
pub fn synth_generate(n_clients: usize, n_clusters: usize, length: usize, noise_sd: f64, seed: u64) -> Result<Vec<SeriesShard>> {
    if n_clusters == 0 || n_clusters > n_clients {
        return Err(Error::usage(format!(
            "need 1 <= n_clusters <= n_clients, got {n_clusters} clusters for {n_clients} clients"
        )));
    }
    if !(noise_sd.is_finite() && noise_sd >= 0.0) {
        return Err(Error::usage("noise_sd must be finite and non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let archetypes: Vec<Vec<f64>> = (0..n_clusters)
        .map(|c| {
            let period = BASE_PERIOD / (2 * c + 1) as f64;
            let amp = rng.random_range(2.0..4.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            let phase2 = rng.random_range(0.0..2.0 * PI);
            let level = amp * rng.random_range(0.8..1.2);
            (0..length)
                .map(|t| {
                    let t = t as f64;
                    level + amp * (2.0 * PI * t / period + phase).sin() + 0.3 * amp * (4.0 * PI * t / period + phase2).sin()
                })
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, noise_sd).map_err(|e| Error::usage(e.to_string()))?;
    let jitter = if noise_sd > 0.0 { AMPLITUDE_JITTER } else { 0.0 };
    Ok((0..n_clients)
        .map(|i| {
            let cluster = i * n_clusters / n_clients;
            let factor = 1.0 + jitter * rng.random_range(-1.0..=1.0);
            let values = archetypes[cluster]
                .iter()
                .map(|a| (factor * a + normal.sample(&mut rng)).max(0.0))
                .collect();
            SeriesShard {
                client_id: ClientId(i as u32),
                name: format!("synth-{i:02}"),
                values,
                start: 0,
                interval_secs: 300,
                cluster: Some(cluster),
            }
        })
        .collect())
}
