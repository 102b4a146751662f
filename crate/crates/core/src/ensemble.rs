//! Column-major ensembles and their sample statistics.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// An ensemble of `M` state vectors of dimension `N`, stored as the columns
/// of an `N x M` matrix so each member is contiguous in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    data: DMatrix<f64>,
}

impl Ensemble {
    pub fn new(data: DMatrix<f64>) -> Self {
        assert!(data.ncols() >= 1, "ensemble needs at least one member");
        Ensemble { data }
    }

    /// 1-D ensemble from scalar members.
    pub fn from_rows(xs: &[f64]) -> Self {
        Ensemble::new(DMatrix::from_row_slice(1, xs.len(), xs))
    }

    /// Ensemble from member state vectors (all of equal dimension).
    pub fn from_members(members: &[Vec<f64>]) -> Result<Self> {
        let m = members.len();
        if m == 0 {
            return Err(Error::Dimension("empty ensemble".into()));
        }
        let n = members[0].len();
        if members.iter().any(|x| x.len() != n) {
            return Err(Error::Dimension("ragged member dimensions".into()));
        }
        let mut data = DMatrix::zeros(n, m);
        for (i, x) in members.iter().enumerate() {
            data.column_mut(i).copy_from_slice(x);
        }
        Ok(Ensemble { data })
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn size(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn member(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.data.as_slice()[i * n..(i + 1) * n]
    }

    pub fn member_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.dim();
        &mut self.data.as_mut_slice()[i * n..(i + 1) * n]
    }

    /// Sample mean over members.
    pub fn mean(&self) -> DVector<f64> {
        let m = self.size() as f64;
        let mut mu = DVector::zeros(self.dim());
        for i in 0..self.size() {
            for (k, v) in self.member(i).iter().enumerate() {
                mu[k] += v;
            }
        }
        mu / m
    }

    /// Unbiased sample covariance with the 1/(M-1) normalisation, so that a
    /// two-member ensemble {0, 2} has variance 2. Requires M >= 2.
    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        let m = self.size();
        assert!(m >= 2, "covariance needs at least two members");
        let mu = self.mean();
        let mut cov = DMatrix::zeros(n, n);
        let mut d = vec![0.0; n];
        for i in 0..m {
            for (k, v) in self.member(i).iter().enumerate() {
                d[k] = v - mu[k];
            }
            for a in 0..n {
                for b in a..n {
                    cov[(a, b)] += d[a] * d[b];
                }
            }
        }
        let w = 1.0 / (m as f64 - 1.0);
        for a in 0..n {
            for b in a..n {
                cov[(a, b)] *= w;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        cov
    }

    /// Projections `h . x_i` of all members onto a scalar observable.
    pub fn project(&self, h: &[f64]) -> Vec<f64> {
        assert_eq!(h.len(), self.dim());
        (0..self.size())
            .map(|i| {
                self.member(i)
                    .iter()
                    .zip(h)
                    .map(|(x, w)| x * w)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Rescale anomalies about the sample mean by `rho` in place. Leaves the
    /// mean unchanged and multiplies the sample covariance by `rho^2`.
    pub fn inflate(&mut self, rho: f64) {
        let mu = self.mean();
        for i in 0..self.size() {
            for (k, v) in self.member_mut(i).iter_mut().enumerate() {
                *v = mu[k] + rho * (*v - mu[k]);
            }
        }
    }

    /// True if every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.data.as_slice().iter().all(|v| v.is_finite())
    }
}

/// Root mean square difference between two equal-length sequences of equal
/// dimension vectors, averaging squared errors over both time and component.
pub fn rmse(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let mut sum = 0.0;
    let mut count = 0usize;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (u, v) in x.iter().zip(y) {
            let d = u - v;
            sum += d * d;
            count += 1;
        }
    }
    (sum / count as f64).sqrt()
}
