//! CSV outputs of the command-line runs.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::denoiser::{Condition, StateVector};
use crate::error::{Error, Result};
use crate::srrl::MetricsRow;

pub const METRICS_HEADER: &str =
    "round,epoch,mean_reward,std_reward,max_reward,min_reward,objective,clip_fraction,skipped";

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Streams training metrics, one flushed row per batch.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self { inner: csv::Writer::from_writer(File::create(path)?) })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.serialize(row).map_err(csv_err)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// One reflective sample per line: `round,condition,sample,x0..x{d-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub round: usize,
    pub condition: Condition,
    pub sample: usize,
    pub x: StateVector,
}

pub fn write_samples(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.x.dim());
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header = vec!["round".to_string(), "condition".into(), "sample".into()];
    header.extend((0..dim).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.round.to_string(), r.condition.to_string(), r.sample.to_string()];
        row.extend(r.x.as_slice().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `round,mean_reward` for rounds `0..=K`.
pub fn write_eval(path: &Path, means: &[f64]) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "round,mean_reward")?;
    for (k, m) in means.iter().enumerate() {
        writeln!(f, "{k},{m}")?;
    }
    Ok(())
}
