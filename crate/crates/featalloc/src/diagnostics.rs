//! Monte Carlo summaries of feature-allocation draws and chains:
//! pairwise shared-feature means, squared correlations, feature-count
//! histograms, sampler accuracy metrics, and DIC.

use std::collections::BTreeMap;

use crate::allocation::FeatureAllocation;
use crate::error::{Error, Result};
use crate::priors::{feature_count_pmf, Mass};

/// Pairwise expected shared features and overall sharing summaries.
#[derive(Clone, Debug)]
pub struct SharingSummary {
    /// pair_means[i][j]: Monte Carlo mean of the shared feature count of
    /// customers i and j; the diagonal holds each customer's mean feature
    /// count.
    pub pair_means: Vec<Vec<f64>>,
    /// Mean of the strict upper triangle.
    pub overall_mean: f64,
    /// Mean over draws with K > 0 of (total ones) / K; absent if every draw
    /// is empty.
    pub customers_per_feature: Option<f64>,
}

/// Streaming reducer behind [`sharing_summary`]; partial states merge so
/// per-chain summaries can be combined.
#[derive(Clone, Debug)]
pub struct SharingAccumulator {
    n: usize,
    draws: usize,
    pair_sums: Vec<Vec<f64>>,
    per_feature_sum: f64,
    per_feature_draws: usize,
}

impl SharingAccumulator {
    pub fn new(n_customers: usize) -> Self {
        Self {
            n: n_customers,
            draws: 0,
            pair_sums: vec![vec![0.0; n_customers]; n_customers],
            per_feature_sum: 0.0,
            per_feature_draws: 0,
        }
    }

    pub fn push(&mut self, z: &FeatureAllocation) -> Result<()> {
        if z.n_customers() != self.n {
            return Err(Error::Validation(format!(
                "draw has {} customers, expected {}",
                z.n_customers(),
                self.n
            )));
        }
        self.draws += 1;
        for i in 0..self.n {
            self.pair_sums[i][i] += z.row_sum(i) as f64;
            for j in (i + 1)..self.n {
                let shared = z.shared_feature_count(i, j) as f64;
                self.pair_sums[i][j] += shared;
                self.pair_sums[j][i] += shared;
            }
        }
        if z.n_features() > 0 {
            self.per_feature_sum += z.total_ones() as f64 / z.n_features() as f64;
            self.per_feature_draws += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SharingAccumulator) {
        assert_eq!(self.n, other.n);
        self.draws += other.draws;
        self.per_feature_sum += other.per_feature_sum;
        self.per_feature_draws += other.per_feature_draws;
        for i in 0..self.n {
            for j in 0..self.n {
                self.pair_sums[i][j] += other.pair_sums[i][j];
            }
        }
    }

    pub fn finish(&self) -> Result<SharingSummary> {
        if self.draws == 0 {
            return Err(Error::Validation(
                "sharing summary needs at least one draw".to_string(),
            ));
        }
        let m = self.draws as f64;
        let pair_means: Vec<Vec<f64>> = self
            .pair_sums
            .iter()
            .map(|row| row.iter().map(|s| s / m).collect())
            .collect();
        let mut upper = 0.0;
        let mut pairs = 0usize;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                upper += pair_means[i][j];
                pairs += 1;
            }
        }
        Ok(SharingSummary {
            overall_mean: if pairs > 0 { upper / pairs as f64 } else { 0.0 },
            customers_per_feature: (self.per_feature_draws > 0)
                .then(|| self.per_feature_sum / self.per_feature_draws as f64),
            pair_means,
        })
    }
}

/// Monte Carlo means of pairwise shared feature counts over a set of draws.
pub fn sharing_summary<'a, I>(draws: I) -> Result<SharingSummary>
where
    I: IntoIterator<Item = &'a FeatureAllocation>,
{
    let mut iter = draws.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Validation("sharing summary needs at least one draw".to_string()))?;
    let mut acc = SharingAccumulator::new(first.n_customers());
    acc.push(first)?;
    for z in iter {
        acc.push(z)?;
    }
    acc.finish()
}

/// Squared sample correlation between customers' binary feature rows,
/// computed across the pooled columns of all draws. Pairs involving a
/// constant row report 0.
pub fn squared_correlation<'a, I>(draws: I) -> Result<Vec<Vec<f64>>>
where
    I: IntoIterator<Item = &'a FeatureAllocation>,
{
    let mut n = None;
    let mut count = vec![];
    let mut cross = vec![];
    let mut total_columns = 0usize;
    for z in draws {
        let nc = *n.get_or_insert(z.n_customers());
        if z.n_customers() != nc {
            return Err(Error::Validation("draws disagree on N".to_string()));
        }
        if count.is_empty() {
            count = vec![0usize; nc];
            cross = vec![vec![0usize; nc]; nc];
        }
        total_columns += z.n_features();
        for k in 0..z.n_features() {
            let column = z.column(k);
            for i in 0..nc {
                if column[i] {
                    count[i] += 1;
                    for j in 0..nc {
                        if column[j] {
                            cross[i][j] += 1;
                        }
                    }
                }
            }
        }
    }
    let nc = n.ok_or_else(|| {
        Error::Validation("squared correlation needs at least one draw".to_string())
    })?;
    let t = total_columns as f64;
    let mut result = vec![vec![0.0; nc]; nc];
    if total_columns == 0 {
        return Ok(result);
    }
    for i in 0..nc {
        for j in 0..nc {
            let mean_i = count[i] as f64 / t;
            let mean_j = count[j] as f64 / t;
            let var_i = mean_i - mean_i * mean_i;
            let var_j = mean_j - mean_j * mean_j;
            if var_i <= 0.0 || var_j <= 0.0 {
                continue;
            }
            let cov = cross[i][j] as f64 / t - mean_i * mean_j;
            result[i][j] = (cov * cov) / (var_i * var_j);
        }
    }
    Ok(result)
}

/// The two accuracy metrics of the sampler-validation experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AccuracyReport {
    /// Largest absolute difference between the empirical frequency of K = k
    /// and the Poisson(alpha H_N) pmf, over all k.
    pub max_feature_prob_error: f64,
    /// Absolute difference between alpha N and the mean of trace(Z Z^T).
    pub mean_active_feature_error: f64,
}

/// Compares feature-count frequencies and mean active features against the
/// exact laws, given the draws' feature counts and total one-counts.
pub fn accuracy_report<'a, I>(draws: I, mass: Mass, n_customers: usize) -> Result<AccuracyReport>
where
    I: IntoIterator<Item = &'a FeatureAllocation>,
{
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut m = 0usize;
    let mut ones = 0.0;
    for z in draws {
        if z.n_customers() != n_customers {
            return Err(Error::Validation("draws disagree on N".to_string()));
        }
        *counts.entry(z.n_features()).or_insert(0) += 1;
        ones += z.total_ones() as f64;
        m += 1;
    }
    if m == 0 {
        return Err(Error::Validation(
            "accuracy report needs at least one draw".to_string(),
        ));
    }
    let max_k = counts.keys().max().copied().unwrap_or(0);
    let mut max_error = 0.0f64;
    // Scan well past both the observed range and the bulk of the Poisson
    // mass so missing tail categories are compared against their pmf.
    let rate = mass.get() * crate::priors::harmonic(n_customers);
    let scan_to = max_k.max((3.0 * rate + 20.0) as usize);
    for k in 0..=scan_to {
        let empirical = counts.get(&k).copied().unwrap_or(0) as f64 / m as f64;
        let exact = feature_count_pmf(k, mass, n_customers);
        max_error = max_error.max((empirical - exact).abs());
    }
    Ok(AccuracyReport {
        max_feature_prob_error: max_error,
        mean_active_feature_error: (mass.get() * n_customers as f64 - ones / m as f64).abs(),
    })
}

/// Empirical pmf of the feature count over a set of draws.
pub fn feature_count_histogram<'a, I>(draws: I) -> Result<BTreeMap<usize, f64>>
where
    I: IntoIterator<Item = &'a FeatureAllocation>,
{
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut m = 0usize;
    for z in draws {
        *counts.entry(z.n_features()).or_insert(0) += 1;
        m += 1;
    }
    if m == 0 {
        return Err(Error::Validation(
            "histogram needs at least one draw".to_string(),
        ));
    }
    Ok(counts
        .into_iter()
        .map(|(k, c)| (k, c as f64 / m as f64))
        .collect())
}

/// Deviance information criterion from per-sample log-likelihoods:
/// mean deviance plus half the sample variance of the deviance, with
/// deviance = -2 log-likelihood. Lower is better.
pub fn dic(log_likelihoods: &[f64]) -> Result<f64> {
    if log_likelihoods.len() < 2 {
        return Err(Error::Validation(
            "DIC needs at least two samples with recorded log-likelihoods".to_string(),
        ));
    }
    let m = log_likelihoods.len() as f64;
    let deviances: Vec<f64> = log_likelihoods.iter().map(|l| -2.0 * l).collect();
    let mean = deviances.iter().sum::<f64>() / m;
    let variance = deviances.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m - 1.0);
    Ok(mean + 0.5 * variance)
}
