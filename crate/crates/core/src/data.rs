//! Observation tables and dense column-major matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense column-major matrix. Columns are contiguous, which is what the
/// coordinate-descent solver wants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl ColMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        ColMatrix { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn from_columns(nrows: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(nrows * columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != nrows {
                return Err(Error::Argument(format!(
                    "column {j} has length {} but {nrows} rows were expected",
                    c.len()
                )));
            }
            data.extend_from_slice(c);
        }
        Ok(ColMatrix { nrows, ncols: columns.len(), data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        let mut m = ColMatrix::zeros(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != ncols {
                return Err(Error::Argument(format!("row {i} has length {}, expected {ncols}", r.len())));
            }
            for (j, &x) in r.iter().enumerate() {
                m.set(i, j, x);
            }
        }
        Ok(m)
    }

    #[inline]
    pub fn nrows(&self) -> usize {
        self.nrows
    }

    #[inline]
    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nrows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[j * self.nrows + i] = x;
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.ncols).map(|j| self.get(i, j)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> ColMatrix {
        let mut out = ColMatrix::zeros(rows.len(), self.ncols);
        for j in 0..self.ncols {
            let src = self.col(j);
            let dst = out.col_mut(j);
            for (d, &i) in dst.iter_mut().zip(rows) {
                *d = src[i];
            }
        }
        out
    }

    /// `X * beta`.
    pub fn matvec(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.ncols, "coefficient length mismatch");
        let mut out = vec![0.0; self.nrows];
        for (j, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                for (o, &x) in out.iter_mut().zip(self.col(j)) {
                    *o += b * x;
                }
            }
        }
        out
    }
}

/// Observation table `(Y, T, Z, V)`.
///
/// `z` holds the subpopulation-defining covariates and `v` the auxiliary
/// covariates, both one column per variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub y: Vec<f64>,
    pub t: Vec<u8>,
    pub z: ColMatrix,
    pub v: ColMatrix,
    pub z_names: Vec<String>,
    pub v_names: Vec<String>,
}

impl Dataset {
    /// Builds a dataset with generated column names, checking shapes and
    /// value domains.
    pub fn new(y: Vec<f64>, t: Vec<u8>, z: ColMatrix, v: ColMatrix) -> Result<Self> {
        let z_names = (1..=z.ncols()).map(|j| format!("Z{j}")).collect();
        let v_names = (1..=v.ncols()).map(|j| format!("V{j}")).collect();
        Self::with_names(y, t, z, v, z_names, v_names)
    }

    pub fn with_names(
        y: Vec<f64>,
        t: Vec<u8>,
        z: ColMatrix,
        v: ColMatrix,
        z_names: Vec<String>,
        v_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if t.len() != n || z.nrows() != n || v.nrows() != n {
            return Err(Error::Argument(format!(
                "row counts disagree: y={n}, t={}, z={}, v={}",
                t.len(),
                z.nrows(),
                v.nrows()
            )));
        }
        if z_names.len() != z.ncols() || v_names.len() != v.ncols() {
            return Err(Error::Argument("column name count mismatch".into()));
        }
        if let Some(i) = t.iter().position(|&x| x > 1) {
            return Err(Error::Data(format!("treatment at row {i} is {} (must be 0 or 1)", t[i])));
        }
        for (name, m) in [("z", &z), ("v", &v)] {
            for j in 0..m.ncols() {
                if let Some(i) = m.col(j).iter().position(|x| !x.is_finite()) {
                    return Err(Error::Data(format!("non-finite {name} value at row {i}, column {j}")));
                }
            }
        }
        Ok(Dataset { y, t, z, v, z_names, v_names })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_v(&self) -> usize {
        self.v.ncols()
    }

    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    pub fn treatment_f64(&self) -> Vec<f64> {
        self.t.iter().map(|&t| t as f64).collect()
    }

    pub fn z_row(&self, i: usize) -> Vec<f64> {
        self.z.row(i)
    }

    pub fn v_row(&self, i: usize) -> Vec<f64> {
        self.v.row(i)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            t: rows.iter().map(|&i| self.t[i]).collect(),
            z: self.z.select_rows(rows),
            v: self.v.select_rows(rows),
            z_names: self.z_names.clone(),
            v_names: self.v_names.clone(),
        }
    }

    /// Same covariates with the treatment labels swapped.
    pub fn relabeled(&self) -> Dataset {
        let mut d = self.clone();
        for t in d.t.iter_mut() {
            *t = 1 - *t;
        }
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_major_layout() {
        let m = ColMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.col(0), &[1.0, 3.0, 5.0]);
        assert_eq!(m.col(1), &[2.0, 4.0, 6.0]);
        assert_eq!(m.row(1), vec![3.0, 4.0]);
        assert_eq!(m.matvec(&[1.0, -1.0]), vec![-1.0, -1.0, -1.0]);
        let s = m.select_rows(&[2, 0]);
        assert_eq!(s.row(0), vec![5.0, 6.0]);
    }

    #[test]
    fn rejects_non_binary_treatment() {
        let z = ColMatrix::zeros(2, 1);
        let v = ColMatrix::zeros(2, 0);
        let err = Dataset::new(vec![0.0, 1.0], vec![0, 2], z, v).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }
}
