//! Result-matrix bookkeeping and the ACC / BWT / ADAPT summaries.

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::Model;

/// `R[i][j]`: accuracy (percent) on target domain `j` after adapting to
/// domain `i`. Only `j ≤ i` is ever defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultMatrix {
    n: usize,
    cells: Vec<Option<f64>>,
}

impl ResultMatrix {
    pub fn new(n_domains: usize) -> Result<Self> {
        if n_domains == 0 {
            return Err(Error::State("result matrix needs at least one domain".into()));
        }
        Ok(Self {
            n: n_domains,
            cells: vec![None; n_domains * n_domains],
        })
    }

    /// Builds a matrix from lower-triangular rows (`rows[i].len() == i + 1`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(rows.len())?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != i + 1 {
                return Err(Error::State(format!("row {i} has {} entries, expected {}", row.len(), i + 1)));
            }
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_domains(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i < self.n && j < self.n {
            self.cells[i * self.n + j]
        } else {
            None
        }
    }

    /// Writes `R[i][j]` once.
    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= self.n || j > i {
            return Err(Error::State(format!("cell ({i}, {j}) is outside the lower triangle of {}", self.n)));
        }
        if !(0.0..=100.0).contains(&value) {
            return Err(Error::State(format!("accuracy {value} outside [0, 100]")));
        }
        let cell = &mut self.cells[i * self.n + j];
        if cell.is_some() {
            return Err(Error::State(format!("cell ({i}, {j}) already written")));
        }
        *cell = Some(value);
        Ok(())
    }

    /// Row `i` if every column `0..=i` is defined.
    pub fn row(&self, i: usize) -> Option<Vec<f64>> {
        (0..=i).map(|j| self.get(i, j)).collect()
    }

    pub fn is_complete(&self) -> bool {
        (0..self.n).all(|i| self.row(i).is_some())
    }

    pub fn diagonal(&self) -> Option<Vec<f64>> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Rows with absent cells as `None`, for serialization.
    pub fn to_rows(&self) -> Vec<Vec<Option<f64>>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j)).collect())
            .collect()
    }
}

/// Percentage of correct argmax predictions on a labeled dataset.
pub fn accuracy(model: &mut Model, dataset: &DomainDataset) -> Result<f64> {
    let labels = dataset
        .labels()
        .ok_or_else(|| Error::Dataset(format!("domain {} has no labels to evaluate against", dataset.domain_id)))?
        .to_vec();
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("domain {} is empty", dataset.domain_id)));
    }
    let logits = model.predict_logits(&dataset.all(), 256)?;
    Ok(accuracy_from_logits(&logits.data().chunks(logits.shape()[1]).collect::<Vec<_>>(), &labels))
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy_from_logits(rows: &[&[f64]], labels: &[usize]) -> f64 {
    let correct = rows.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    100.0 * correct as f64 / labels.len() as f64
}

/// Mean of the final row.
pub fn acc_metric(r: &ResultMatrix) -> Result<f64> {
    let last = r
        .row(r.n - 1)
        .ok_or_else(|| Error::State("final row of the result matrix is incomplete".into()))?;
    Ok(last.iter().sum::<f64>() / r.n as f64)
}

/// Mean change on each earlier domain between just after its adaptation and
/// the end of the sequence. Absent for a single domain.
pub fn bwt_metric(r: &ResultMatrix) -> Result<Option<f64>> {
    if r.n < 2 {
        return Ok(None);
    }
    let last = r
        .row(r.n - 1)
        .ok_or_else(|| Error::State("final row of the result matrix is incomplete".into()))?;
    let diag = r
        .diagonal()
        .ok_or_else(|| Error::State("diagonal of the result matrix is incomplete".into()))?;
    let total: f64 = (0..r.n - 1).map(|i| last[i] - diag[i]).sum();
    Ok(Some(total / (r.n - 1) as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Mean of the diagonal.
    #[default]
    Corrected,
    /// Diagonal sum divided by `N − 1`, as the formula is printed.
    PaperLiteral,
}

pub fn adapt_metric(r: &ResultMatrix, mode: AdaptMode) -> Result<f64> {
    let diag = r
        .diagonal()
        .ok_or_else(|| Error::State("diagonal of the result matrix is incomplete".into()))?;
    let sum: f64 = diag.iter().sum();
    match mode {
        AdaptMode::Corrected => Ok(sum / r.n as f64),
        AdaptMode::PaperLiteral if r.n < 2 => Err(Error::State(
            "literal ADAPT divides by N - 1, undefined for a single domain".into(),
        )),
        AdaptMode::PaperLiteral => Ok(sum / (r.n - 1) as f64),
    }
}

/// ACC, BWT and ADAPT of one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub bwt: Option<f64>,
    pub adapt: f64,
}

impl Metrics {
    pub fn from_matrix(r: &ResultMatrix, mode: AdaptMode) -> Result<Self> {
        Ok(Self {
            acc: acc_metric(r)?,
            bwt: bwt_metric(r)?,
            adapt: adapt_metric(r, mode)?,
        })
    }
}
