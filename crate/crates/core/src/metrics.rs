//! Probabilistic forecast scores: quantile score (QS), interval coverage (ICP)
//! and mean interval length (MIL).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::forecaster::ForecasterModel;
use crate::params::ClientId;

/// Asymmetric absolute deviation of one prediction.
#[inline]
pub fn pinball_term(y: f64, yhat: f64, q: f64) -> f64 {
    if y < yhat {
        (1.0 - q) * (yhat - y)
    } else {
        q * (y - yhat)
    }
}

/// d/dŷ of [`pinball_term`]; the tie `y == ŷ` takes the `y >= ŷ` branch.
#[inline]
pub fn pinball_slope(y: f64, yhat: f64, q: f64) -> f64 {
    if y < yhat {
        1.0 - q
    } else {
        -q
    }
}

fn check_pair(a: usize, b: usize, what: &str) -> Result<()> {
    if a == 0 {
        return Err(Error::usage(format!("{what} of an empty sample")));
    }
    if a != b {
        return Err(Error::shape(format!("{what}: inputs have {a} and {b} entries")));
    }
    Ok(())
}

pub fn quantile_score(y: &[f64], yhat: &[f64], q: f64) -> Result<f64> {
    check_pair(y.len(), yhat.len(), "quantile score")?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::usage(format!("quantile {q} outside (0, 1)")));
    }
    let mut acc = 0.0;
    for (yy, yh) in y.iter().zip(yhat) {
        acc += pinball_term(*yy, *yh, q);
    }
    Ok(acc / y.len() as f64)
}

/// Fraction of observations with `lower ≤ y ≤ upper`. Crossed bounds are not
/// repaired, so they only cover when `y` sits between them as given.
pub fn icp(y: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_pair(y.len(), lower.len(), "interval coverage")?;
    check_pair(y.len(), upper.len(), "interval coverage")?;
    let covered = y
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(yy, (lo, hi))| *lo <= *yy && *yy <= *hi)
        .count();
    Ok(covered as f64 / y.len() as f64)
}

pub fn mil(lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_pair(lower.len(), upper.len(), "mean interval length")?;
    let mut acc = 0.0;
    for (lo, hi) in lower.iter().zip(upper) {
        acc += (hi - lo).abs();
    }
    Ok(acc / lower.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: ClientId,
    pub name: String,
    pub qs: f64,
    pub mil: f64,
    pub icp: f64,
    /// Observations per quantile (test windows × horizon).
    pub n: usize,
    pub qs_per_quantile: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub qs: f64,
    pub mil: f64,
    pub icp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub quantiles: Vec<f64>,
    pub clients: Vec<ClientEval>,
    /// Unweighted mean over clients.
    pub macro_avg: Summary,
    /// Mean over clients weighted by `n`.
    pub weighted_avg: Summary,
    /// Clients skipped for lack of test windows.
    pub excluded: Vec<String>,
}

pub struct EvalInput<'a> {
    pub client_id: ClientId,
    pub name: &'a str,
    pub model: &'a ForecasterModel,
    pub data: &'a WindowedDataset,
}

/// Scores every client's model on its test windows in the original units.
pub fn evaluate(inputs: &[EvalInput<'_>]) -> Result<EvalReport> {
    let quantiles = inputs
        .first()
        .map(|i| i.model.config().quantiles.clone())
        .ok_or_else(|| Error::usage("nothing to evaluate"))?;
    let nq = quantiles.len();
    let mut clients = Vec::new();
    let mut excluded = Vec::new();
    for input in inputs {
        if input.model.config().quantiles != quantiles {
            return Err(Error::usage("all models must predict the same quantiles"));
        }
        if input.data.is_empty() {
            excluded.push(input.name.to_string());
            continue;
        }
        let stats = input.data.stats;
        let mut y = Vec::new();
        let mut yhat = vec![Vec::new(); nq];
        for (window, target) in input.data.inputs().iter().zip(input.data.targets()) {
            let pred = input.model.forward(window)?;
            for (t, v) in target.iter().enumerate() {
                y.push(stats.denormalize(*v));
                for (j, col) in yhat.iter_mut().enumerate() {
                    col.push(stats.denormalize(pred[t * nq + j]));
                }
            }
        }
        let qs_per_quantile = quantiles
            .iter()
            .zip(&yhat)
            .map(|(q, col)| quantile_score(&y, col, *q))
            .collect::<Result<Vec<_>>>()?;
        let (lower, upper) = (&yhat[0], &yhat[nq - 1]);
        clients.push(ClientEval {
            client_id: input.client_id,
            name: input.name.to_string(),
            qs: qs_per_quantile.iter().sum::<f64>() / nq as f64,
            mil: mil(lower, upper)?,
            icp: icp(&y, lower, upper)?,
            n: y.len(),
            qs_per_quantile,
        });
    }
    if clients.is_empty() {
        return Err(Error::usage("no client has test windows"));
    }
    let count = clients.len() as f64;
    let macro_avg = Summary {
        qs: clients.iter().map(|c| c.qs).sum::<f64>() / count,
        mil: clients.iter().map(|c| c.mil).sum::<f64>() / count,
        icp: clients.iter().map(|c| c.icp).sum::<f64>() / count,
    };
    let total: f64 = clients.iter().map(|c| c.n as f64).sum();
    let weighted = |f: fn(&ClientEval) -> f64| clients.iter().map(|c| f(c) * c.n as f64).sum::<f64>() / total;
    let weighted_avg = Summary {
        qs: weighted(|c| c.qs),
        mil: weighted(|c| c.mil),
        icp: weighted(|c| c.icp),
    };
    Ok(EvalReport {
        quantiles,
        clients,
        macro_avg,
        weighted_avg,
        excluded,
    })
}

impl EvalReport {
    /// Per-client rows with columns `client_id,qs,mil,icp,n`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["client_id", "qs", "mil", "icp", "n"])?;
        for c in &self.clients {
            w.write_record([c.name.clone(), c.qs.to_string(), c.mil.to_string(), c.icp.to_string(), c.n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}
