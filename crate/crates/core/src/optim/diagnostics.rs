use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::problems::Problem;
use crate::util::{squared_distance, squared_norm};

/// Snapshot statistics of all replicas at one iteration boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `mu = (1/P) sum_i W^i`.
    pub mu: Vec<f64>,
    /// `Gamma = sum_i ||W^i - mu||^2`.
    pub gamma: f64,
    pub loss_mu: f64,
    pub grad_norm_sq_mu: f64,
}

pub fn compute_diagnostics(replicas: &[Vec<f64>], problem: &dyn Problem) -> Diagnostics {
    let d = problem.dim();
    let mut mu = vec![0.0; d];
    for w in replicas {
        for (m, x) in mu.iter_mut().zip(w) {
            *m += x;
        }
    }
    let p = replicas.len() as f64;
    mu.iter_mut().for_each(|m| *m /= p);
    let gamma = replicas.iter().map(|w| squared_distance(w, &mu)).sum();
    let mut grad = vec![0.0; d];
    problem.gradient(&mu, &mut grad);
    Diagnostics {
        loss_mu: problem.loss(&mu),
        grad_norm_sq_mu: squared_norm(&grad),
        gamma,
        mu,
    }
}

pub const METRICS_COLUMNS: [&str; 8] = [
    "iteration",
    "sim_time_ms",
    "loss_mu",
    "grad_norm_sq_mu",
    "gamma",
    "max_staleness",
    "msgs_total",
    "bytes_total",
];

/// One CSV row: the state after iteration `iteration` completed at every
/// worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: u64,
    /// Time at which the last worker finished the iteration.
    pub sim_time_ms: f64,
    pub loss_mu: f64,
    pub grad_norm_sq_mu: f64,
    pub gamma: f64,
    /// Age in iterations of the oldest buffer averaged in this iteration.
    pub max_staleness: u64,
    pub msgs_total: u64,
    pub bytes_total: u64,
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], out: W) -> csv::Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for record in records {
        writer.serialize(record)?;
    }
    if records.is_empty() {
        writer.write_record(METRICS_COLUMNS)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: Read>(input: R) -> csv::Result<Vec<MetricsRecord>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
