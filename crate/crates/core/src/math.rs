//! Numerical primitives shared by the engines, the fitter and the metrics.
//!
//! Vectors are plain `f64` slices. All reductions accumulate in `f64`, even
//! when the inputs were read from 32-bit trace storage.

use crate::error::{Error, Result};

/// Dense row-major matrix.
///
/// Used for key and value caches (one row per cached position) and for
/// gathered value subsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Empty matrix with `cols` columns and no rows.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape(
                format!("{} elements ({rows}x{cols})", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Self::empty(cols);
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Appends a row. Storage grows geometrically (amortized by `Vec`).
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::shape(
                format!("row of length {}", self.cols),
                format!("length {}", row.len()),
            ));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// New matrix made of the first `n` rows.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.rows {
            return Err(Error::Index {
                index: n,
                len: self.rows,
            });
        }
        Ok(Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        })
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::invalid(format!(
            "{what}: non-finite element {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// Max-subtracted softmax. The output sums to one within rounding.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of an empty vector"));
    }
    check_finite(logits, "softmax")?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let denom: f64 = out.iter().sum();
    for p in &mut out {
        *p /= denom;
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `q · K[i] / sqrt(head_dim)` for every cached key row.
pub fn scaled_dot_scores(q: &[f64], keys: &Matrix, head_dim: usize) -> Result<Vec<f64>> {
    if q.len() != head_dim || keys.cols() != head_dim {
        return Err(Error::shape(
            format!("query and key width {head_dim}"),
            format!("query {} / keys {}", q.len(), keys.cols()),
        ));
    }
    if keys.rows() == 0 {
        return Err(Error::invalid("no keys to score against"));
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    Ok(keys.row_iter().map(|k| dot(q, k) * scale).collect())
}

/// Empirical quantile with linear interpolation between order statistics.
///
/// Rank `h = tau * (n - 1)`; the result is `v[floor h] + frac(h) * (v[ceil h] - v[floor h])`
/// on the ascending-sorted values. Fixed so thresholds are reproducible.
pub fn quantile(values: &[f64], tau: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("quantile of an empty vector"));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::invalid(format!("quantile level {tau} outside [0, 1]")));
    }
    check_finite(values, "quantile")?;
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(quantile_sorted(&sorted, tau))
}

/// Same rule as [`quantile`] on data that is already sorted ascending.
pub fn quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let h = tau * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let lo_v = sorted[lo];
    lo_v + (h - lo as f64) * (sorted[hi] - lo_v)
}

/// `sum_i scores[i] * values.row(i)`.
pub fn weighted_sum(scores: &[f64], values: &Matrix) -> Result<Vec<f64>> {
    if scores.len() != values.rows() {
        return Err(Error::shape(
            format!("{} scores", values.rows()),
            format!("{} scores", scores.len()),
        ));
    }
    let mut out = vec![0.0; values.cols()];
    for (&s, row) in scores.iter().zip(values.row_iter()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += s * v;
        }
    }
    Ok(out)
}

/// Weighted sum restricted to the listed rows, without materializing a gathered copy.
pub(crate) fn weighted_sum_indexed(scores: &[f64], values: &Matrix, indices: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; values.cols()];
    for &i in indices {
        let s = scores[i];
        for (o, &v) in out.iter_mut().zip(values.row(i)) {
            *o += s * v;
        }
    }
    out
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
