use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: [&str; 5] = ["method", "seed", "trained_task", "eval_task", "accuracy"];
pub const SUMMARY_HEADER: [&str; 4] = ["method", "seed", "trained_task", "mean_accuracy"];

/// `acc[i][j]`, the accuracy on task `j`'s test set after training task `i ≥ j`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalMatrix {
    rows: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the row for the next trained task; it must cover exactly the tasks seen so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.rows.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "row {} must have {} entries, got {}",
                self.rows.len(),
                self.rows.len() + 1,
                row.len()
            )));
        }
        if let Some(a) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("accuracy {a} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn get(&self, trained: usize, eval: usize) -> Option<f64> {
        self.rows.get(trained).and_then(|r| r.get(eval)).copied()
    }

    /// Mean accuracy over all tasks seen after training task `i`.
    pub fn row_mean(&self, i: usize) -> Option<f64> {
        let r = self.rows.get(i)?;
        Some(r.iter().sum::<f64>() / r.len() as f64)
    }

    pub fn final_mean(&self) -> Option<f64> {
        self.rows.len().checked_sub(1).and_then(|i| self.row_mean(i))
    }

    pub fn final_row(&self) -> Option<&[f64]> {
        self.rows.last().map(Vec::as_slice)
    }
}

/// Fraction of `predicted[i] == labels[i]`.
pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() {
        return Err(Error::Dimension {
            op: "accuracy",
            left: (predicted.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if labels.is_empty() {
        return Err(Error::EmptyBatch("accuracy"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn write_metrics(path: &Path, method: &str, seed: u64, m: &EvalMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for (i, row) in m.rows.iter().enumerate() {
        for (j, a) in row.iter().enumerate() {
            w.write_record([method, &seed.to_string(), &i.to_string(), &j.to_string(), &a.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_summary(path: &Path, method: &str, seed: u64, m: &EvalMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SUMMARY_HEADER)?;
    for i in 0..m.num_tasks() {
        let mean = m.row_mean(i).expect("row exists");
        w.write_record([method, &seed.to_string(), &i.to_string(), &mean.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Rebuilds `(method, seed, matrix)` from a metrics CSV.
pub fn read_metrics(path: &Path) -> Result<(String, u64, EvalMatrix)> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(Error::InvalidArgument(format!("{}: unexpected header", path.display())));
    }
    let bad = |what: &str| Error::InvalidArgument(format!("{}: bad {what}", path.display()));
    let mut method = None;
    let mut seed = 0;
    let mut cells: Vec<(usize, usize, f64)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        method.get_or_insert_with(|| rec[0].to_string());
        seed = rec[1].parse().map_err(|_| bad("seed"))?;
        let i = rec[2].parse().map_err(|_| bad("trained_task"))?;
        let j = rec[3].parse().map_err(|_| bad("eval_task"))?;
        let a = rec[4].parse().map_err(|_| bad("accuracy"))?;
        cells.push((i, j, a));
    }
    let mut m = EvalMatrix::new();
    let tasks = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    for i in 0..tasks {
        let mut row: Vec<(usize, f64)> = cells.iter().filter(|c| c.0 == i).map(|c| (c.1, c.2)).collect();
        row.sort_by_key(|c| c.0);
        if row.iter().enumerate().any(|(k, c)| c.0 != k) {
            return Err(bad("lower-triangular layout"));
        }
        m.push_row(row.into_iter().map(|c| c.1).collect())?;
    }
    Ok((method.unwrap_or_default(), seed, m))
}
