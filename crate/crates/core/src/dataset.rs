//! Observational IV data: loading, validation, and fold partitioning.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` observations of outcome `y`, binary treatment `d`, binary instrument
/// `z` and a covariate vector of fixed width `k`.
///
/// Covariates are stored row-major. Binary columns are kept as `f64` holding
/// exactly `0.0` or `1.0`.
#[derive(Debug, Clone, PartialEq)]
pub struct IvDataset {
    y: Vec<f64>,
    d: Vec<f64>,
    z: Vec<f64>,
    x: Vec<f64>,
    k: usize,
}

/// Mapping from CSV header names to the roles of an [`IvDataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub outcome: String,
    pub treatment: String,
    pub instrument: String,
    pub covariates: Vec<String>,
}

impl ColumnSchema {
    pub fn new(
        outcome: impl Into<String>,
        treatment: impl Into<String>,
        instrument: impl Into<String>,
        covariates: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        ColumnSchema {
            outcome: outcome.into(),
            treatment: treatment.into(),
            instrument: instrument.into(),
            covariates: covariates.into_iter().map(Into::into).collect(),
        }
    }
}

fn check_binary(values: &[f64], name: &str) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        if v != 0.0 && v != 1.0 {
            return Err(Error::Validation {
                row: i + 1,
                message: format!("{name} must be 0 or 1, found {v}"),
            });
        }
    }
    Ok(())
}

fn check_finite(values: &[f64], name: &str, width: usize) -> Result<()> {
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Validation {
                row: i / width + 1,
                message: format!("{name} is not finite ({v})"),
            });
        }
    }
    Ok(())
}

impl IvDataset {
    /// Builds a validated dataset. `x` is row-major with `k` columns.
    pub fn new(y: Vec<f64>, d: Vec<f64>, z: Vec<f64>, x: Vec<f64>, k: usize) -> Result<Self> {
        let n = y.len();
        if k == 0 {
            return Err(Error::InvalidData(
                "covariate width must be at least 1".into(),
            ));
        }
        if d.len() != n || z.len() != n || x.len() != n * k {
            return Err(Error::InvalidData(format!(
                "column lengths disagree: y={}, d={}, z={}, x={} (expected {}x{})",
                n,
                d.len(),
                z.len(),
                x.len(),
                n,
                k
            )));
        }
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        check_finite(&y, "outcome", 1)?;
        check_finite(&x, "covariate", k)?;
        check_binary(&d, "treatment")?;
        check_binary(&z, "instrument")?;
        Ok(IvDataset { y, d, z, x, k })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Row-major covariate block.
    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.k..(i + 1) * self.k]
    }

    /// Same observations with the instrument column replaced.
    pub fn with_instrument(&self, z: Vec<f64>) -> Result<Self> {
        IvDataset::new(self.y.clone(), self.d.clone(), z, self.x.clone(), self.k)
    }

    /// Keeps the rows for which `keep` is true, in order.
    pub fn filter_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.n() {
            return Err(Error::Shape(format!(
                "row mask has length {}, dataset has {} rows",
                keep.len(),
                self.n()
            )));
        }
        let mut y = Vec::new();
        let mut d = Vec::new();
        let mut z = Vec::new();
        let mut x = Vec::new();
        for i in (0..self.n()).filter(|&i| keep[i]) {
            y.push(self.y[i]);
            d.push(self.d[i]);
            z.push(self.z[i]);
            x.extend_from_slice(self.x_row(i));
        }
        IvDataset::new(y, d, z, x, self.k)
    }

    /// Writes the dataset with the given header names. Floats are written in
    /// shortest round-trip form so that `load_csv` recovers them exactly.
    pub fn save_csv(&self, path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<()> {
        let path = path.as_ref();
        if schema.covariates.len() != self.k {
            return Err(Error::Config(format!(
                "schema lists {} covariates, dataset has {}",
                schema.covariates.len(),
                self.k
            )));
        }
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
        let mut header = vec![
            schema.outcome.as_str(),
            schema.treatment.as_str(),
            schema.instrument.as_str(),
        ];
        header.extend(schema.covariates.iter().map(String::as_str));
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for i in 0..self.n() {
            let mut line = format!("{:?},{},{}", self.y[i], self.d[i] as u8, self.z[i] as u8);
            for v in self.x_row(i) {
                line.push_str(&format!(",{v:?}"));
            }
            writeln!(out, "{line}").map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{raw}` is not a number ({e})"),
    })
}

/// Column names of a comma-separated file.
pub fn read_header(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read header: {e}")))?;
    Ok(headers.iter().map(str::to_string).collect())
}

/// Loads a comma-separated file with a header row. Row numbers in errors are
/// 1-based and count data rows only.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<IvDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read header: {e}")))?
        .clone();
    let locate = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.to_string(),
            })
    };
    if schema.covariates.is_empty() {
        return Err(Error::Config(
            "schema must name at least one covariate".into(),
        ));
    }
    let iy = locate(&schema.outcome)?;
    let id = locate(&schema.treatment)?;
    let iz = locate(&schema.instrument)?;
    let ix = schema
        .covariates
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>>>()?;

    let (mut y, mut d, mut z, mut x) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::InvalidData(format!("row {row}: {e}")))?;
        let cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| Error::Parse {
                row,
                column: name.to_string(),
                message: "missing cell".into(),
            })?;
            parse_cell(raw, row, name)
        };
        y.push(cell(iy, &schema.outcome)?);
        let dv = cell(id, &schema.treatment)?;
        let zv = cell(iz, &schema.instrument)?;
        for (value, name) in [(dv, &schema.treatment), (zv, &schema.instrument)] {
            if value != 0.0 && value != 1.0 {
                return Err(Error::Validation {
                    row,
                    message: format!("column `{name}` must be 0 or 1, found {value}"),
                });
            }
        }
        d.push(dv);
        z.push(zv);
        for (&idx, name) in ix.iter().zip(&schema.covariates) {
            x.push(cell(idx, name)?);
        }
    }
    IvDataset::new(y, d, z, x, schema.covariates.len())
}

/// Assignment of every observation to one of `L` folds (0-based internally).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPartition {
    assignments: Vec<usize>,
    folds: usize,
}

impl FoldPartition {
    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn n(&self) -> usize {
        self.assignments.len()
    }

    /// Fold index in `0..L` of observation `i`.
    pub fn fold_of(&self, i: usize) -> usize {
        self.assignments[i]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Indices of fold `fold`, ascending.
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    /// Indices outside fold `fold`, ascending.
    pub fn complement(&self, fold: usize) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Shuffles `0..n` with a seeded generator and deals the permutation
/// round-robin into `folds` groups.
pub fn partition_folds(n: usize, folds: usize, seed: u64) -> Result<FoldPartition> {
    if folds < 2 {
        return Err(Error::Config(format!(
            "fold count must be at least 2, got {folds}"
        )));
    }
    if n < 2 * folds {
        return Err(Error::Config(format!(
            "need at least {} observations for {folds} folds, got {n}",
            2 * folds
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignments = vec![0; n];
    for (slot, &i) in order.iter().enumerate() {
        assignments[i] = slot % folds;
    }
    Ok(FoldPartition { assignments, folds })
}
