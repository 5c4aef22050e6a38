use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Images (one per row) with digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    x: Matrix,
    y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension {
                op: "LabeledSet",
                left: x.shape(),
                right: (y.len(), 1),
            });
        }
        Ok(Self { x, y })
    }

    pub fn empty(width: usize) -> Self {
        Self {
            x: Matrix::zeros(0, width),
            y: Vec::new(),
        }
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn width(&self) -> usize {
        self.x.cols()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }

    /// Rows whose label satisfies `keep`, in original order.
    pub fn filter_labels(&self, keep: impl Fn(usize) -> bool) -> LabeledSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(self.y[i])).collect();
        self.select(&idx)
    }

    pub fn concat(&self, other: &LabeledSet) -> Result<LabeledSet> {
        let x = self.x.vstack(&other.x)?;
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        LabeledSet::new(x, y)
    }

    /// Number of rows per label value `0..classes`.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for &l in &self.y {
            if l < classes {
                c[l] += 1;
            }
        }
        c
    }

    pub(crate) fn zeroize(&mut self) {
        self.x.zeroize();
        self.y.iter_mut().for_each(|l| *l = 0);
    }

    pub fn into_parts(self) -> (Matrix, Vec<usize>) {
        (self.x, self.y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_concat_counts() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = LabeledSet::new(x, vec![3, 1, 3, 2]).unwrap();
        let threes = s.filter_labels(|l| l == 3);
        assert_eq!(threes.x().as_slice(), &[0.0, 2.0]);
        let both = threes.concat(&s.select(&[1])).unwrap();
        assert_eq!(both.y(), &[3, 3, 1]);
        assert_eq!(both.class_counts(4), vec![0, 1, 0, 2]);
        assert!(LabeledSet::new(Matrix::zeros(2, 1), vec![0]).is_err());
    }
}
