//! Accuracy matrix and trajectory metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower-triangular `A[t][j]`: accuracy on task `j` after training task `t`
/// (both 0-based here, `j <= t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    num_tasks: usize,
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(num_tasks: usize) -> Self {
        Self {
            num_tasks,
            rows: Vec::with_capacity(num_tasks),
        }
    }

    /// Builds a complete matrix from its rows.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new(rows.len());
        for row in rows {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Appends the row for the next task; it must have one entry per task so far.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let t = self.rows.len();
        if t >= self.num_tasks {
            return Err(Error::contract(format!("matrix already has {t} rows")));
        }
        if row.len() != t + 1 {
            return Err(Error::contract(format!(
                "row {} needs {} entries, got {}",
                t + 1,
                t + 1,
                row.len()
            )));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("accuracy {v} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn num_tasks(&self) -> usize {
        self.num_tasks
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.num_tasks
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(j)).copied()
    }

    /// One line per task; cells above the diagonal are empty. Values use the
    /// shortest representation that parses back to the same bits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for j in 1..=self.num_tasks {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for (t, row) in self.rows.iter().enumerate() {
            out.push_str(&(t + 1).to_string());
            for j in 0..self.num_tasks {
                out.push(',');
                if let Some(v) = row.get(j) {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`AccuracyMatrix::to_csv`].
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse("empty CSV".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.first() != Some(&"t") {
            return Err(Error::Parse("line 1: header must start with `t`".into()));
        }
        let n = cols.len() - 1;
        for (j, c) in cols[1..].iter().enumerate() {
            if *c != format!("task_{}", j + 1) {
                return Err(Error::Parse(format!("line 1: unexpected column `{c}`")));
            }
        }
        let mut m = Self::new(n);
        for (i, line) in lines {
            let lineno = i + 1;
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != n + 1 {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {} cells, got {}",
                    n + 1,
                    cells.len()
                )));
            }
            let t = m.rows.len();
            if cells[0] != (t + 1).to_string() {
                return Err(Error::Parse(format!("line {lineno}: expected row {}", t + 1)));
            }
            let mut row = Vec::with_capacity(t + 1);
            for (j, cell) in cells[1..].iter().enumerate() {
                if j <= t {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::Parse(format!("line {lineno}: bad number `{cell}`")))?;
                    row.push(v);
                } else if !cell.is_empty() {
                    return Err(Error::Parse(format!(
                        "line {lineno}: entry above the diagonal"
                    )));
                }
            }
            m.push_row(row)
                .map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
        }
        if !m.is_complete() {
            return Err(Error::Parse(format!(
                "expected {n} rows, found {}",
                m.rows.len()
            )));
        }
        Ok(m)
    }
}

/// Trajectory metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean over sessions of the mean accuracy on tasks seen so far.
    pub avg_acc: f64,
    /// Mean accuracy over all tasks after the last session.
    pub final_acc: f64,
    /// Mean final accuracy on tasks before the last; absent for one task.
    pub stability: Option<f64>,
    /// Mean accuracy on each task right after learning it.
    pub plasticity: f64,
}

pub fn compute_metrics(a: &AccuracyMatrix) -> Result<Metrics> {
    let n = a.num_tasks();
    if n == 0 || !a.is_complete() {
        return Err(Error::contract(format!(
            "accuracy matrix has {} of {n} rows",
            a.rows().len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let rows = a.rows();
    let avg_acc = rows.iter().map(|r| mean(r)).sum::<f64>() / n as f64;
    let last = &rows[n - 1];
    let stability = (n > 1).then(|| mean(&last[..n - 1]));
    let diag: Vec<f64> = (0..n).map(|t| rows[t][t]).collect();
    Ok(Metrics {
        avg_acc,
        final_acc: mean(last),
        stability,
        plasticity: mean(&diag),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_task() {
        let m = compute_metrics(&AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap()).unwrap();
        assert_eq!(m.avg_acc, 0.9);
        assert_eq!(m.final_acc, 0.9);
        assert_eq!(m.stability, None);
        assert_eq!(m.plasticity, 0.9);
    }

    #[test]
    fn two_tasks() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
        let m = compute_metrics(&a).unwrap();
        assert!((m.avg_acc - 0.825).abs() < 1e-15);
        assert!((m.final_acc - 0.75).abs() < 1e-15);
        assert!((m.stability.unwrap() - 0.8).abs() < 1e-15);
        assert!((m.plasticity - 0.8).abs() < 1e-15);
    }

    #[test]
    fn all_ones() {
        let rows = (1..=4).map(|t| vec![1.0; t]).collect();
        let m = compute_metrics(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
        assert_eq!((m.avg_acc, m.final_acc, m.stability, m.plasticity), (1.0, 1.0, Some(1.0), 1.0));
    }

    #[test]
    fn incomplete_matrix() {
        let mut a = AccuracyMatrix::new(3);
        a.push_row(vec![0.5]).unwrap();
        assert!(matches!(compute_metrics(&a), Err(Error::Contract(_))));
        assert!(compute_metrics(&AccuracyMatrix::new(0)).is_err());
    }

    #[test]
    fn row_shape_and_range() {
        let mut a = AccuracyMatrix::new(2);
        assert!(a.push_row(vec![0.5, 0.5]).is_err());
        assert!(a.push_row(vec![1.5]).is_err());
        a.push_row(vec![0.5]).unwrap();
        a.push_row(vec![0.5, 0.25]).unwrap();
        assert!(a.push_row(vec![0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
        assert_eq!(a.to_csv(), "t,task_1,task_2\n1,0.9,\n2,0.8,0.7\n");
    }

    #[test]
    fn csv_rejects_garbage() {
        for bad in [
            "",
            "x,task_1\n1,0.5\n",
            "t,task_1\n1,abc\n",
            "t,task_1,task_2\n1,0.5,0.5\n2,0.5,0.5\n",
            "t,task_1,task_2\n1,0.5,\n",
            "t,task_1\n2,0.5\n",
        ] {
            assert!(AccuracyMatrix::from_csv(bad).is_err(), "{bad:?}");
        }
    }

    proptest::proptest! {
        #[test]
        fn csv_round_trip(n in 1usize..6, seed in proptest::collection::vec(0.0f64..=1.0, 21)) {
            let mut k = 0;
            let rows: Vec<Vec<f64>> = (1..=n).map(|t| (0..t).map(|_| { k += 1; seed[k - 1] }).collect()).collect();
            let a = AccuracyMatrix::from_rows(rows).unwrap();
            proptest::prop_assert_eq!(AccuracyMatrix::from_csv(&a.to_csv()).unwrap(), a);
        }

        #[test]
        fn metrics_in_unit_interval(n in 1usize..6, seed in proptest::collection::vec(0.0f64..=1.0, 21)) {
            let mut k = 0;
            let rows: Vec<Vec<f64>> = (1..=n).map(|t| (0..t).map(|_| { k += 1; seed[k - 1] }).collect()).collect();
            let m = compute_metrics(&AccuracyMatrix::from_rows(rows).unwrap()).unwrap();
            for v in [m.avg_acc, m.final_acc, m.plasticity, m.stability.unwrap_or(0.0)] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
