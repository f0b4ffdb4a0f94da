//! Per-iteration loss log as CSV.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// One optimizer update. Terms inactive in the current phase are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iter: usize,
    pub phase: u8,
    pub nll_x: f64,
    pub nll_y: f64,
    pub content: f64,
    pub domain: Option<f64>,
    pub ds_pixel: Option<f64>,
    pub ds_perceptual: Option<f64>,
    pub ds_adversarial: Option<f64>,
    pub sr_pixel: Option<f64>,
    pub sr_perceptual: Option<f64>,
    pub sr_adversarial: Option<f64>,
    pub disc: Option<f64>,
    /// Flow objective of the update.
    pub total: f64,
    /// Flow gradient norm before clipping.
    pub grad_norm: f64,
    pub lr_model: f64,
    pub lr_disc: f64,
}

/// Appending CSV writer, flushed after every record.
pub struct LossLog {
    path: PathBuf,
    writer: csv::Writer<File>,
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> TrainError + '_ {
    move |source| TrainError::Log { path: path.to_path_buf(), source }
}

impl LossLog {
    /// Starts a new log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
        Ok(LossLog { path: path.into(), writer: csv::Writer::from_writer(file) })
    }

    /// Keeps the records before `next_iter` and continues after them.
    pub fn resume(path: &Path, next_iter: usize) -> Result<Self> {
        let kept: Vec<LossRecord> = if path.exists() { read_log(path)?.into_iter().filter(|r| r.iter < next_iter).collect() } else { Vec::new() };
        let mut log = Self::create(path)?;
        for r in &kept {
            log.write(r)?;
        }
        Ok(log)
    }

    pub fn write(&mut self, record: &LossRecord) -> Result<()> {
        self.writer.serialize(record).map_err(csv_err(&self.path))?;
        self.writer.flush().map_err(|source| TrainError::Io { path: self.path.clone(), source })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LossRecord>> {
    let file = OpenOptions::new().read(true).open(path).map_err(|source| TrainError::Io { path: path.into(), source })?;
    csv::Reader::from_reader(file).deserialize().collect::<std::result::Result<_, _>>().map_err(csv_err(path))
}

/// Trailing mean over `window` records ending at index `i` inclusive.
pub fn smoothed(values: &[f64], i: usize, window: usize) -> f64 {
    let lo = (i + 1).saturating_sub(window.max(1));
    let s = &values[lo..=i];
    s.iter().sum::<f64>() / s.len() as f64
}
