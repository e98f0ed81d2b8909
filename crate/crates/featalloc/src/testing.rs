//! Brute-force reference implementations and Monte Carlo helpers used by the
//! test suite. Everything here deliberately avoids the production code paths
//! it is used to check.

use nalgebra::DMatrix;

use crate::allocation::FeatureAllocation;
use crate::lglfm::NoiseScales;

/// Collapsed likelihood computed the slow way: the N x N column covariance
/// sigma_A^2 Z Z^T + sigma_X^2 I is factored directly and the D data columns
/// are scored as independent multivariate normals.
pub fn dense_mvn_log_likelihood(
    z: &FeatureAllocation,
    x: &DMatrix<f64>,
    scales: &NoiseScales,
) -> f64 {
    let n = x.nrows();
    let d = x.ncols();
    let sa2 = scales.sigma_a() * scales.sigma_a();
    let sx2 = scales.sigma_x() * scales.sigma_x();
    let mut cov = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let zz: f64 = (0..z.n_features())
                .filter(|&k| z.get(i, k) && z.get(j, k))
                .count() as f64;
            cov[(i, j)] = sa2 * zz + if i == j { sx2 } else { 0.0 };
        }
    }
    let chol = cov.cholesky().expect("covariance is positive definite");
    let log_det: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>() * 2.0;
    let mut total = -0.5 * (n * d) as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * d as f64 * log_det;
    for j in 0..d {
        let column = x.column(j).into_owned();
        let solved = chol.solve(&column);
        total -= 0.5 * column.dot(&solved);
    }
    total
}

/// Sample mean and Monte Carlo standard error of a sequence.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    assert!(values.len() >= 2, "need at least two values");
    let mean = values.iter().sum::<f64>() / m;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Streaming accumulator for a scalar statistic's mean and standard error.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunningMoments {
    count: f64,
    sum: f64,
    sum_sq: f64,
}

impl RunningMoments {
    pub fn push(&mut self, value: f64) {
        self.count += 1.0;
        self.sum += value;
        self.sum_sq += value * value;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count
    }

    pub fn variance(&self) -> f64 {
        (self.sum_sq - self.sum * self.sum / self.count) / (self.count - 1.0)
    }

    pub fn standard_error(&self) -> f64 {
        (self.variance() / self.count).sqrt()
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }
}
