//! In-memory corpus, its on-disk layout and the held-out split.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{DataError, Result};
use crate::image::{read_png, write_png, RgbImage};

pub const THETA_FILE: &str = "theta.csv";
/// Fractions of source ids held out for validation and test.
pub const VAL_FRACTION: f64 = 0.1;
pub const TEST_FRACTION: f64 = 0.1;

/// An image and the id of the source it was made from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
}

/// One row of `theta.csv`. `seed` regenerates the HR image, its
/// degradation parameters and the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaRecord {
    pub id: String,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// HR and LR images with provenance ids. Samples sharing an id come from
/// the same source and must never be paired in a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub scale: usize,
    pub hr: Vec<Sample>,
    pub lr: Vec<Sample>,
    /// Empty for corpora that were not synthesized.
    pub theta: Vec<ThetaRecord>,
}

/// Disjoint partition of a corpus by source id.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| DataError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| DataError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let files = png_files(dir)?;
    files
        .par_iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok(Sample { id, image: read_png(p)? })
        })
        .collect()
}

impl Corpus {
    /// Sorted distinct source ids over both sides.
    pub fn ids(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.hr.iter().chain(&self.lr).map(|s| s.id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn len(&self) -> usize {
        self.ids().len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty() && self.lr.is_empty()
    }

    /// Writes `hr/<id>.png`, `lr/<id>.png` and, when present, `theta.csv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (side, samples) in [("hr", &self.hr), ("lr", &self.lr)] {
            let sub = dir.join(side);
            fs::create_dir_all(&sub).map_err(|e| DataError::io(&sub, e))?;
            samples.par_iter().try_for_each(|s| write_png(&sub.join(format!("{}.png", s.id)), &s.image))?;
        }
        if !self.theta.is_empty() {
            let path = dir.join(THETA_FILE);
            let csv_err = |source| DataError::Csv { path: path.clone(), source };
            let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
            w.write_record(["id", "blur_sigma", "noise_sigma", "seed"]).map_err(csv_err)?;
            for t in &self.theta {
                w.write_record([t.id.clone(), t.blur_sigma.to_string(), t.noise_sigma.to_string(), t.seed.to_string()]).map_err(csv_err)?;
            }
            w.flush().map_err(|e| DataError::io(&path, e))?;
        }
        Ok(())
    }

    /// Loads a corpus directory. `theta.csv` is optional; the scale is the
    /// ratio of HR to LR sides and must be the same for every image.
    pub fn load(dir: &Path) -> Result<Self> {
        let hr = load_dir(&dir.join("hr"))?;
        let lr = load_dir(&dir.join("lr"))?;
        if hr.is_empty() || lr.is_empty() {
            return Err(DataError::Corpus(format!("{} needs PNG images in both hr/ and lr/", dir.display())));
        }
        let scale = infer_scale(&hr, &lr)?;
        let theta_path = dir.join(THETA_FILE);
        let theta = if theta_path.exists() { read_theta(&theta_path)? } else { Vec::new() };
        Ok(Corpus { scale, hr, lr, theta })
    }

    /// Restriction to the given source ids.
    pub fn subset(&self, ids: &BTreeSet<String>) -> Corpus {
        let keep = |v: &[Sample]| v.iter().filter(|s| ids.contains(&s.id)).cloned().collect();
        Corpus { scale: self.scale, hr: keep(&self.hr), lr: keep(&self.lr), theta: self.theta.iter().filter(|t| ids.contains(&t.id)).cloned().collect() }
    }

    /// Splits sorted source ids into the last 10% for test, the 10% before
    /// that for validation and the rest for training.
    pub fn split(&self) -> Result<CorpusSplit> {
        let ids = self.ids();
        let n = ids.len();
        let n_test = (n as f64 * TEST_FRACTION).round() as usize;
        let n_val = (n as f64 * VAL_FRACTION).round() as usize;
        if n_test == 0 || n_val == 0 || n_val + n_test >= n {
            return Err(DataError::Corpus(format!("{n} source ids are too few for a train/val/test split")));
        }
        let n_train = n - n_val - n_test;
        let part = |r: std::ops::Range<usize>| self.subset(&ids[r].iter().cloned().collect());
        Ok(CorpusSplit { train: part(0..n_train), val: part(n_train..n_train + n_val), test: part(n_train + n_val..n) })
    }

    /// LR image paired with each HR image of the same id, for evaluation
    /// on synthetic data.
    pub fn pairs(&self) -> Vec<(&Sample, &Sample)> {
        self.hr.iter().filter_map(|h| self.lr.iter().find(|l| l.id == h.id).map(|l| (h, l))).collect()
    }
}

fn infer_scale(hr: &[Sample], lr: &[Sample]) -> Result<usize> {
    let (h, l) = (&hr[0].image, &lr[0].image);
    if l.width == 0 || h.width % l.width != 0 {
        return Err(DataError::Corpus(format!("HR width {} is not a multiple of LR width {}", h.width, l.width)));
    }
    let scale = h.width / l.width;
    for s in hr {
        if s.image.width % scale != 0 || s.image.height % scale != 0 {
            return Err(DataError::Corpus(format!("HR image {} ({}x{}) is not divisible by scale {scale}", s.id, s.image.width, s.image.height)));
        }
    }
    for (a, b) in hr.iter().zip(lr).filter(|(a, b)| a.id == b.id) {
        if a.image.width != scale * b.image.width || a.image.height != scale * b.image.height {
            return Err(DataError::Corpus(format!("image {} breaks the HR/LR scale {scale}", a.id)));
        }
    }
    Ok(scale)
}

fn read_theta(path: &Path) -> Result<Vec<ThetaRecord>> {
    let csv_err = |source| DataError::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        let field = |i: usize| row.get(i).ok_or_else(|| DataError::Corpus(format!("{}: short row {:?}", path.display(), row)));
        let num = |i: usize| -> Result<f64> { field(i)?.parse().map_err(|_| DataError::Corpus(format!("{}: bad number in {:?}", path.display(), row))) };
        out.push(ThetaRecord {
            id: field(0)?.to_string(),
            blur_sigma: num(1)?,
            noise_sigma: num(2)?,
            seed: field(3)?.parse().map_err(|_| DataError::Corpus(format!("{}: bad seed in {:?}", path.display(), row)))?,
        });
    }
    Ok(out)
}
