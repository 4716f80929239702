//! Datasets of input/output sequences and latent codes.

use nalgebra::{DMatrix, DVector};

use crate::error::{MtdsError, Result};

/// One input/output sequence. `mask[(t, j)] == false` marks `y[(t, j)]`
/// as missing; missing entries are never read by any likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub seq_id: String,
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub mask: DMatrix<bool>,
}

impl SequenceRecord {
    pub fn new(seq_id: impl Into<String>, u: DMatrix<f64>, y: DMatrix<f64>, mask: DMatrix<bool>) -> Result<Self> {
        let rec = SequenceRecord {
            seq_id: seq_id.into(),
            u,
            y,
            mask,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// A record with every observation present.
    pub fn complete(seq_id: impl Into<String>, u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(y.nrows(), y.ncols(), true);
        Self::new(seq_id, u, y, mask)
    }

    pub fn len(&self) -> usize {
        self.y.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.y.nrows() == 0
    }

    pub fn n_u(&self) -> usize {
        self.u.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.y.ncols()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn validate(&self) -> Result<()> {
        let t = self.y.nrows();
        if self.u.nrows() != t {
            return Err(MtdsError::Dataset(format!(
                "{}: U has {} rows but Y has {}",
                self.seq_id,
                self.u.nrows(),
                t
            )));
        }
        if self.mask.shape() != self.y.shape() {
            return Err(MtdsError::Dataset(format!(
                "{}: mask shape {:?} differs from Y shape {:?}",
                self.seq_id,
                self.mask.shape(),
                self.y.shape()
            )));
        }
        if self.u.iter().any(|v| !v.is_finite()) {
            return Err(MtdsError::Dataset(format!("{}: non-finite input", self.seq_id)));
        }
        for (v, &m) in self.y.iter().zip(self.mask.iter()) {
            if m && !v.is_finite() {
                return Err(MtdsError::Dataset(format!(
                    "{}: non-finite observed value",
                    self.seq_id
                )));
            }
        }
        Ok(())
    }

    /// The first `t` steps of the sequence.
    pub fn prefix(&self, t: usize) -> SequenceRecord {
        let t = t.min(self.len());
        SequenceRecord {
            seq_id: self.seq_id.clone(),
            u: self.u.rows(0, t).into_owned(),
            y: self.y.rows(0, t).into_owned(),
            mask: self.mask.rows(0, t).into_owned(),
        }
    }

    /// Steps `start..start+len` as a new record with id `id#start`.
    pub fn segment(&self, start: usize, len: usize) -> SequenceRecord {
        SequenceRecord {
            seq_id: format!("{}#{}", self.seq_id, start),
            u: self.u.rows(start, len).into_owned(),
            y: self.y.rows(start, len).into_owned(),
            mask: self.mask.rows(start, len).into_owned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<SequenceRecord>,
    pub n_u: usize,
    pub n_y: usize,
}

impl SequenceDataset {
    pub fn new(sequences: Vec<SequenceRecord>, n_u: usize, n_y: usize) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for rec in &sequences {
            if rec.n_u() != n_u || rec.n_y() != n_y {
                return Err(MtdsError::Dataset(format!(
                    "{}: shape ({}, {}) does not match dataset ({n_u}, {n_y})",
                    rec.seq_id,
                    rec.n_u(),
                    rec.n_y()
                )));
            }
            if rec.is_empty() {
                return Err(MtdsError::Dataset(format!("{}: empty sequence", rec.seq_id)));
            }
            if !seen.insert(rec.seq_id.as_str()) {
                return Err(MtdsError::Dataset(format!("duplicate seq_id {}", rec.seq_id)));
            }
        }
        Ok(SequenceDataset { sequences, n_u, n_y })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn get(&self, seq_id: &str) -> Option<&SequenceRecord> {
        self.sequences.iter().find(|r| r.seq_id == seq_id)
    }

    /// Dataset without sequence `idx` (used for leave-one-out folds).
    pub fn without(&self, idx: usize) -> SequenceDataset {
        let sequences = self
            .sequences
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, r)| r.clone())
            .collect();
        SequenceDataset {
            sequences,
            n_u: self.n_u,
            n_y: self.n_y,
        }
    }

    /// Splits every sequence into consecutive segments of `len` steps
    /// (the tail shorter than `len` is kept as its own segment).
    pub fn segmented(&self, len: usize) -> SequenceDataset {
        let len = len.max(1);
        let mut sequences = Vec::new();
        for rec in &self.sequences {
            let mut start = 0;
            while start < rec.len() {
                let l = len.min(rec.len() - start);
                sequences.push(rec.segment(start, l));
                start += len;
            }
        }
        SequenceDataset {
            sequences,
            n_u: self.n_u,
            n_y: self.n_y,
        }
    }

    /// Per-channel mean and variance over observed entries.
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        (0..self.n_y)
            .map(|j| {
                let vals: Vec<f64> = self
                    .sequences
                    .iter()
                    .flat_map(|r| (0..r.len()).filter(|&t| r.mask[(t, j)]).map(|t| r.y[(t, j)]))
                    .collect();
                if vals.is_empty() {
                    return (0.0, 1.0);
                }
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                (mean, var)
            })
            .collect()
    }
}

/// A point in the latent space, `z ∈ ℝ^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub DVector<f64>);

impl LatentCode {
    pub fn new(z: DVector<f64>) -> Result<Self> {
        if z.is_empty() {
            return Err(MtdsError::invalid("z", "latent dimension must be at least 1"));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(MtdsError::invalid("z", "non-finite entry"));
        }
        Ok(LatentCode(z))
    }

    pub fn zeros(k: usize) -> Self {
        LatentCode(DVector::zeros(k))
    }

    pub fn from_slice(z: &[f64]) -> Result<Self> {
        Self::new(DVector::from_column_slice(z))
    }

    pub fn k(&self) -> usize {
        self.0.len()
    }
}

impl std::ops::Deref for LatentCode {
    type Target = DVector<f64>;
    fn deref(&self) -> &DVector<f64> {
        &self.0
    }
}
