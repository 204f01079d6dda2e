//! Append-only key/value cache for a single attention head.

use crate::error::{Error, Result};
use crate::math::Matrix;

/// Keys and values for one head's decode sequence, one row per position.
///
/// Nothing is ever evicted here; eviction baselines keep their own retained
/// set on top of a full cache.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Matrix,
    values: Matrix,
}

impl KvCache {
    pub fn new(head_dim: usize) -> Self {
        Self {
            keys: Matrix::empty(head_dim),
            values: Matrix::empty(head_dim),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.keys.cols()
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn append(&mut self, k: &[f64], v: &[f64]) -> Result<()> {
        let d = self.head_dim();
        if k.len() != d || v.len() != d {
            return Err(Error::shape(
                format!("key/value of length {d}"),
                format!("key {} / value {}", k.len(), v.len()),
            ));
        }
        self.keys.push_row(k)?;
        self.values.push_row(v)?;
        Ok(())
    }

    /// Copies the value rows at `indices`, which must be strictly increasing.
    pub fn gather_values(&self, indices: &[usize]) -> Result<Matrix> {
        gather_rows(&self.values, indices)
    }
}

pub(crate) fn gather_rows(m: &Matrix, indices: &[usize]) -> Result<Matrix> {
    if let Some(w) = indices.windows(2).find(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "gather indices must be strictly increasing, found {} then {}",
            w[0], w[1]
        )));
    }
    if let Some(&last) = indices.last() {
        if last >= m.rows() {
            return Err(Error::Index {
                index: last,
                len: m.rows(),
            });
        }
    }
    let mut out = Matrix::empty(m.cols());
    for &i in indices {
        out.push_row(m.row(i))?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cache_with(rows: usize, d: usize) -> KvCache {
        let mut c = KvCache::new(d);
        for i in 0..rows {
            let k: Vec<f64> = (0..d).map(|j| (i * d + j) as f64).collect();
            let v: Vec<f64> = k.iter().map(|x| -x).collect();
            c.append(&k, &v).unwrap();
        }
        c
    }

    fn checksum(m: &Matrix) -> u64 {
        m.as_slice()
            .iter()
            .fold(0u64, |h, x| h.rotate_left(5) ^ x.to_bits())
    }

    #[test]
    fn append_to_empty() {
        let mut c = KvCache::new(2);
        assert!(c.is_empty());
        c.append(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.keys().row(0), &[1.0, 2.0]);
        assert_eq!(c.values().row(0), &[3.0, 4.0]);
    }

    #[test]
    fn append_keeps_prior_rows() {
        let mut c = cache_with(3, 4);
        let (kc, vc) = (checksum(c.keys()), checksum(c.values()));
        c.append(&[9.0; 4], &[8.0; 4]).unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(checksum(&c.keys().head(3).unwrap()), kc);
        assert_eq!(checksum(&c.values().head(3).unwrap()), vc);
        assert_eq!(c.values().row(3), &[8.0; 4]);
    }

    #[test]
    fn many_appends() {
        let c = cache_with(1000, 3);
        assert_eq!(c.keys().rows(), 1000);
        assert_eq!(c.values().rows(), 1000);
    }

    #[test]
    fn append_shape_error() {
        let mut c = KvCache::new(4);
        assert!(matches!(c.append(&[0.0; 3], &[0.0; 4]), Err(Error::Shape { .. })));
        assert!(matches!(c.append(&[0.0; 4], &[0.0; 5]), Err(Error::Shape { .. })));
        assert!(c.is_empty());
    }

    #[test]
    fn gather_examples() {
        let c = cache_with(4, 2);
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(&c.gather_values(&all).unwrap(), c.values());

        let none = c.gather_values(&[]).unwrap();
        assert_eq!((none.rows(), none.cols()), (0, 2));

        let g = c.gather_values(&[1, 3]).unwrap();
        assert_eq!(g.row(0), c.values().row(1));
        assert_eq!(g.row(1), c.values().row(3));
    }

    #[test]
    fn gather_errors() {
        let c = cache_with(4, 2);
        assert!(matches!(c.gather_values(&[1, 4]), Err(Error::Index { index: 4, len: 4 })));
        assert!(matches!(c.gather_values(&[2, 1]), Err(Error::InvalidInput(_))));
        assert!(matches!(c.gather_values(&[1, 1]), Err(Error::InvalidInput(_))));
    }
}
