//! Capture records, stratification by covariate vector, and the lexicographic
//! encoding of capture configurations.

use crate::error::{Error, Result};
use crate::Scalar;
use std::io::Read;
use std::path::Path;

/// Largest supported number of lists; every stratum carries dense vectors of
/// length 2^J.
pub const MAX_LISTS: usize = 20;

/// One captured unit: its J-list capture history and covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRecord<T> {
    /// h_j = 1 if the unit was caught by list j.
    pub history: Vec<u8>,
    pub covariates: Vec<T>,
}

/// All captured units sharing one covariate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum<T> {
    /// Covariate vector x_i.
    pub x: Vec<T>,
    /// Number of units captured in the stratum.
    pub n: u64,
    /// Counts per capture configuration in lexicographic order, with the
    /// all-zero configuration excluded: y[e - 1] counts configuration e.
    pub y: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub strata: Vec<Stratum<T>>,
    pub n_lists: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn n_strata(&self) -> usize {
        self.strata.len()
    }

    /// Total number of captured units, n.
    pub fn n_observed(&self) -> u64 {
        self.strata.iter().map(|s| s.n).sum()
    }

    pub fn n_configs(&self) -> usize {
        1usize << self.n_lists
    }

    /// Per-stratum counts n_i as a scalar vector.
    pub fn counts(&self) -> nalgebra::DVector<T> {
        nalgebra::DVector::from_iterator(
            self.strata.len(),
            self.strata.iter().map(|s| T::from_u64(s.n).unwrap()),
        )
    }
}

/// Index of a capture history in lexicographic order, h_1 most significant:
/// index = sum_j h_j 2^(J-j). The all-zero history maps to 0.
pub fn encode_history(bits: &[u8]) -> Result<usize> {
    if bits.is_empty() || bits.len() > MAX_LISTS {
        return Err(Error::Dimension(format!(
            "history length {} outside 1..={MAX_LISTS}",
            bits.len()
        )));
    }
    let mut idx = 0usize;
    for &b in bits {
        if b > 1 {
            return Err(Error::Invalid(format!("history entry {b} is not 0/1")));
        }
        idx = (idx << 1) | b as usize;
    }
    Ok(idx)
}

/// Inverse of [`encode_history`]: the J-bit binary expansion of `index`.
pub fn decode_history(index: usize, n_lists: usize) -> Vec<u8> {
    (0..n_lists)
        .map(|j| ((index >> (n_lists - 1 - j)) & 1) as u8)
        .collect()
}

/// Group records into strata by exact covariate equality, in first-appearance
/// order, accumulating configuration counts with the h = 0 slot dropped.
pub fn stratify<T: Scalar>(records: &[CaptureRecord<T>]) -> Result<Dataset<T>> {
    if records.is_empty() {
        return Err(Error::Invalid("no capture records".into()));
    }
    let n_lists = records[0].history.len();
    if n_lists < 2 || n_lists > MAX_LISTS {
        return Err(Error::Dimension(format!(
            "number of lists {n_lists} outside 2..={MAX_LISTS}"
        )));
    }
    let n_cov = records[0].covariates.len();
    let k = 1usize << n_lists;

    let mut strata: Vec<Stratum<T>> = Vec::new();
    for (r, rec) in records.iter().enumerate() {
        if rec.history.len() != n_lists {
            return Err(Error::Dimension(format!(
                "record {r} has history length {}, expected {n_lists}",
                rec.history.len()
            )));
        }
        if rec.covariates.len() != n_cov {
            return Err(Error::Dimension(format!(
                "record {r} has {} covariates, expected {n_cov}",
                rec.covariates.len()
            )));
        }
        let idx = encode_history(&rec.history)?;
        if idx == 0 {
            return Err(Error::Invalid(format!(
                "record {r} has an all-zero capture history; never-captured units are unobservable"
            )));
        }
        match strata.iter_mut().find(|s| s.x == rec.covariates) {
            Some(s) => {
                s.n += 1;
                s.y[idx - 1] += 1;
            }
            None => {
                let mut y = vec![0u64; k - 1];
                y[idx - 1] = 1;
                strata.push(Stratum {
                    x: rec.covariates.clone(),
                    n: 1,
                    y,
                });
            }
        }
    }
    Ok(Dataset { strata, n_lists })
}

/// Parse a capture CSV: header row, then J binary capture columns followed by
/// numeric covariate columns. Returns the records in file order together with
/// the covariate column names.
pub fn parse_capture_csv<T: Scalar>(
    path: impl AsRef<Path>,
    n_lists: usize,
) -> Result<(Vec<CaptureRecord<T>>, Vec<String>)> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_capture_reader(file, n_lists)
}

pub fn parse_capture_reader<T: Scalar>(
    reader: impl Read,
    n_lists: usize,
) -> Result<(Vec<CaptureRecord<T>>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Invalid(format!("cannot read CSV header: {e}")))?
        .clone();
    if headers.len() < n_lists {
        return Err(Error::Dimension(format!(
            "CSV has {} columns but {n_lists} capture columns were requested",
            headers.len()
        )));
    }
    let names: Vec<String> = headers.iter().skip(n_lists).map(str::to_owned).collect();
    let width = headers.len();

    let mut records = Vec::new();
    for (r, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            row: r + 1,
            column: 0,
            message: e.to_string(),
        })?;
        if row.len() != width {
            return Err(Error::Parse {
                row: r + 1,
                column: row.len(),
                message: format!("ragged row: {} fields, expected {width}", row.len()),
            });
        }
        let mut history = Vec::with_capacity(n_lists);
        for c in 0..n_lists {
            match row[c].trim() {
                "0" => history.push(0),
                "1" => history.push(1),
                other => {
                    return Err(Error::Parse {
                        row: r + 1,
                        column: c + 1,
                        message: format!("capture cell must be 0 or 1, got {other:?}"),
                    })
                }
            }
        }
        let mut covariates = Vec::with_capacity(width - n_lists);
        for c in n_lists..width {
            let cell = row[c].trim();
            if cell.is_empty() {
                return Err(Error::Parse {
                    row: r + 1,
                    column: c + 1,
                    message: "missing value".into(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row: r + 1,
                column: c + 1,
                message: format!("not a number: {cell:?}"),
            })?;
            covariates.push(T::c(v));
        }
        records.push(CaptureRecord {
            history,
            covariates,
        });
    }
    if records.is_empty() {
        return Err(Error::Invalid("CSV contains no data rows".into()));
    }
    Ok((records, names))
}

/// Emit records in the same CSV dialect that [`parse_capture_csv`] reads.
pub fn write_capture_csv<T: Scalar>(
    path: impl AsRef<Path>,
    records: &[CaptureRecord<T>],
    covariate_names: &[String],
) -> Result<()> {
    let n_lists = records.first().map_or(0, |r| r.history.len());
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = (1..=n_lists).map(|j| format!("h{j}")).collect();
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)
        .map_err(|e| Error::Invalid(e.to_string()))?;
    for rec in records {
        let mut row: Vec<String> = rec.history.iter().map(|b| b.to_string()).collect();
        row.extend(
            rec.covariates
                .iter()
                .map(|v| format!("{}", v.to_f64().unwrap())),
        );
        w.write_record(&row)
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
