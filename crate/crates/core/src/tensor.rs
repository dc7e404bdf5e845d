//! Shape-tagged row-major arrays.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major (C-contiguous) array with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorOf<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> TensorOf<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product::<usize>();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    /// Builds a `[rows, cols]` matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[S]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has length {} but row 0 has {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Views a rank-2 tensor as a matrix.
    pub fn matrix(&self) -> Result<MatrixRef<'_, S>> {
        match self.shape.as_slice() {
            [r, c] => Ok(MatrixRef::new(*r, *c, &self.data)),
            other => Err(Error::Dimension(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    /// Copies the given rows of a rank-2 tensor into a new `[idx.len(), cols]` tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let m = self.matrix()?;
        let mut data = Vec::with_capacity(idx.len() * m.cols());
        for &i in idx {
            if i >= m.rows() {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    m.rows()
                )));
            }
            data.extend_from_slice(m.row(i));
        }
        Self::new(vec![idx.len(), m.cols()], data)
    }

    pub fn map<T: Scalar>(&self, f: impl Fn(S) -> T) -> TensorOf<T> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixRef<'a, S> {
    rows: usize,
    cols: usize,
    data: &'a [S],
}

impl<'a, S> MatrixRef<'a, S> {
    /// Panics if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: &'a [S]) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &'a [S] {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &'a [S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &'a [S]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        let err = TensorOf::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { expected: 6, found: 5, .. }));
    }

    #[test]
    fn empty_shape_is_scalar_like() {
        let t = TensorOf::<f32>::new(vec![0], vec![]).unwrap();
        assert!(t.is_empty());
        let s = TensorOf::<f64>::new(vec![], vec![3.0]).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn select_rows_copies_in_order() {
        let t = TensorOf::<f32>::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let s = t.select_rows(&[2, 0]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.select_rows(&[3]).is_err());
    }

    #[test]
    fn ragged_rows_rejected() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0]];
        assert!(TensorOf::from_rows(&rows).is_err());
    }

    #[test]
    fn non_finite_is_located() {
        let t = TensorOf::<f32>::new(vec![3], vec![0.0, f32::NAN, 1.0]).unwrap();
        assert_eq!(t.first_non_finite(), Some(1));
    }
}
