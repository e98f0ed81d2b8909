//! Exact log-pmf evaluation, generative sampling, and feature-count laws for
//! the Indian buffet process (IBP) and the attraction Indian buffet
//! distribution (AIBD), plus an exhaustive small-instance enumerator used as
//! a test oracle.
//!
//! Both pmfs factor into a combinatorial term over identical columns, a
//! Poisson term for new dishes, and a double product of Bernoulli terms for
//! existing dishes. They differ only in the Bernoulli probability: the IBP
//! uses dish popularity m / i, while the AIBD weights previous customers by
//! pairwise similarity,
//!
//! ```text
//! p(arrival i takes dish k) = h_ik * (i - 1) / i,
//! h_ik = sum_{j<i} lambda(rho_j, rho_i) z_{rho_j, k} / sum_{j<i} lambda(rho_j, rho_i).
//! ```
//!
//! With a constant similarity, h_ik = m / (i - 1) and the AIBD collapses to
//! the IBP exactly. Everything here is computed and returned in log space;
//! the x_i! factors that appear in both the combinatorial numerator and the
//! Poisson denominator are cancelled algebraically rather than evaluated.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::allocation::{AllocationKey, FeatureAllocation};
use crate::error::{Error, Result};
use crate::perm::Permutation;
use crate::similarity::SimilarityMatrix;

/// The mass parameter: the expected number of features per customer.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Mass(f64);

impl Mass {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value.is_finite() {
            Ok(Self(value))
        } else {
            Err(Error::InvalidArgument(format!(
                "mass must be a positive real, got {}",
                value
            )))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Parameters of the IBP prior.
#[derive(Clone, Debug)]
pub struct IbpParams {
    pub mass: Mass,
    pub n_customers: usize,
}

impl IbpParams {
    pub fn new(mass: Mass, n_customers: usize) -> Result<Self> {
        if n_customers == 0 {
            return Err(Error::InvalidArgument(
                "need at least one customer".to_string(),
            ));
        }
        Ok(Self { mass, n_customers })
    }
}

/// Parameters of the AIBD prior: mass, arrival order, and similarities.
#[derive(Clone, Debug)]
pub struct AibdParams {
    pub mass: Mass,
    pub permutation: Permutation,
    pub similarity: SimilarityMatrix,
}

impl AibdParams {
    pub fn new(mass: Mass, permutation: Permutation, similarity: SimilarityMatrix) -> Result<Self> {
        if permutation.len() != similarity.n() {
            return Err(Error::Validation(format!(
                "permutation has {} entries but the similarity matrix is {}x{}",
                permutation.len(),
                similarity.n(),
                similarity.n()
            )));
        }
        Ok(Self {
            mass,
            permutation,
            similarity,
        })
    }

    pub fn n_customers(&self) -> usize {
        self.permutation.len()
    }
}

/// The n-th harmonic number, sum of 1/i for i in 1..=n.
pub fn harmonic(n: usize) -> f64 {
    assert!(n >= 1, "harmonic number requires n >= 1");
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

pub(crate) fn ln_factorial(k: usize) -> f64 {
    ln_gamma(k as f64 + 1.0)
}

/// Log Poisson pmf at `k` with the given rate.
pub(crate) fn poisson_logpmf(k: usize, rate: f64) -> f64 {
    k as f64 * rate.ln() - rate - ln_factorial(k)
}

/// Poisson(alpha H_n) pmf at `k`: the law of the total feature count for
/// both the IBP and the AIBD, invariant to similarities and arrival order.
pub fn feature_count_pmf(k: usize, mass: Mass, n_customers: usize) -> f64 {
    poisson_logpmf(k, mass.get() * harmonic(n_customers)).exp()
}

/// Feature-count law of the distance-dependent IBP: Poisson with rate
/// alpha * sum_i 1/h_i where h_i is the i-th row sum of the proximity
/// matrix. Only this count law is implemented; the dd-IBP pmf over feature
/// allocations requires an intractable marginalization.
pub fn ddibp_feature_count_pmf(k: usize, mass: Mass, proximity: &DMatrix<f64>) -> Result<f64> {
    if proximity.nrows() != proximity.ncols() || proximity.nrows() == 0 {
        return Err(Error::Validation(format!(
            "proximity matrix must be square and nonempty, found {}x{}",
            proximity.nrows(),
            proximity.ncols()
        )));
    }
    let mut rate = 0.0;
    for i in 0..proximity.nrows() {
        let h: f64 = proximity.row(i).iter().sum();
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Validation(format!(
                "proximity row {} sums to {}, expected a positive value",
                i + 1,
                h
            )));
        }
        rate += mass.get() / h;
    }
    Ok(poisson_logpmf(k, rate).exp())
}

/// Per-arrival similarity weights: everything the Bernoulli part of the pmf
/// needs once the arrival order and similarity matrix are fixed.
///
/// Position indices are 0-based; position p corresponds to the (p+1)-th
/// arrival of the restaurant process.
#[derive(Clone, Debug)]
pub(crate) struct ArrivalWeights {
    /// weights[p][j] = similarity between the j-th and p-th arrivals, j < p.
    weights: Vec<Vec<f64>>,
    /// denominators[p] = sum of weights[p].
    denominators: Vec<f64>,
    order: Vec<usize>,
    positions: Vec<usize>,
}

impl ArrivalWeights {
    pub fn new(similarity: &SimilarityMatrix, permutation: &Permutation) -> Result<Self> {
        let n = permutation.len();
        let order = permutation.order().to_vec();
        let mut weights = Vec::with_capacity(n);
        let mut denominators = Vec::with_capacity(n);
        for p in 0..n {
            let row: Vec<f64> = (0..p)
                .map(|j| similarity.get(order[j], order[p]))
                .collect();
            let mut sum = KahanSum::new();
            for &w in &row {
                sum.add(w);
            }
            let denominator = sum.value();
            if p > 0 && !(denominator > 0.0) {
                return Err(Error::ZeroSimilarityDenominator { arrival: p + 1 });
            }
            weights.push(row);
            denominators.push(denominator);
        }
        Ok(Self {
            weights,
            denominators,
            positions: permutation.positions(),
            order,
        })
    }

    /// Uniform weights in the natural order: the IBP as a special case.
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: (0..n).map(|p| vec![1.0; p]).collect(),
            denominators: (0..n).map(|p| p as f64).collect(),
            order: (0..n).collect(),
            positions: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.order.len()
    }

    pub fn position_of(&self, customer: usize) -> usize {
        self.positions[customer]
    }

    /// Arrival position of the first customer holding the feature.
    pub fn first_position(&self, column: &[bool]) -> Option<usize> {
        (0..self.n()).find(|&p| column[self.order[p]])
    }

    /// Probability that the arrival at position p takes an existing dish
    /// whose similarity-weighted numerator is `numerator`.
    fn take_probability(&self, p: usize, numerator: f64) -> f64 {
        let h = numerator / self.denominators[p];
        h * p as f64 / (p + 1) as f64
    }

    fn numerator(&self, p: usize, column: &[bool]) -> f64 {
        let mut sum = KahanSum::new();
        for (j, &w) in self.weights[p].iter().enumerate() {
            if column[self.order[j]] {
                sum.add(w);
            }
        }
        sum.value()
    }

    /// Sum of the log Bernoulli factors contributed by one feature column.
    pub fn column_log_bernoulli(&self, column: &[bool]) -> f64 {
        let first = match self.first_position(column) {
            Some(p) => p,
            None => return 0.0,
        };
        let mut total = 0.0;
        for p in (first + 1)..self.n() {
            let prob = self.take_probability(p, self.numerator(p, column));
            total += if column[self.order[p]] {
                prob.ln()
            } else {
                (-prob).ln_1p()
            };
        }
        total
    }

    /// Change in this column's log-pmf contribution (Bernoulli factors plus
    /// the log of its first-take position) if the bit of `customer` were
    /// flipped. Positions before the flipped customer are untouched by the
    /// flip, so the scan starts there. Both the current and the flipped
    /// column must be nonzero.
    pub fn column_flip_delta(&self, column: &[bool], customer: usize) -> f64 {
        let pf = self.positions[customer];
        let old_bit = column[customer];
        let first_old = self.first_position(column).expect("column is nonzero");
        let first_new = if old_bit {
            if first_old == pf {
                ((pf + 1)..self.n())
                    .find(|&p| column[self.order[p]])
                    .expect("flipped column is nonzero")
            } else {
                first_old
            }
        } else {
            first_old.min(pf)
        };

        let mut delta = (first_old as f64 + 1.0).ln() - (first_new as f64 + 1.0).ln();
        // Factors at positions before the flipped customer are identical in
        // both states, so the scan starts at its position.
        for p in pf..self.n() {
            let at_p = self.order[p];
            let num_old = self.numerator(p, column);
            let num_new = if p > pf {
                if old_bit {
                    num_old - self.weights[p][pf]
                } else {
                    num_old + self.weights[p][pf]
                }
            } else {
                num_old
            };
            if first_old < p {
                let prob = self.take_probability(p, num_old);
                let z = column[at_p];
                delta -= if z { prob.ln() } else { (-prob).ln_1p() };
            }
            if first_new < p {
                let prob = self.take_probability(p, num_new);
                let z = if p == pf { !old_bit } else { column[at_p] };
                delta += if z { prob.ln() } else { (-prob).ln_1p() };
            }
        }
        delta
    }

    /// Log Bernoulli factors of a singleton feature owned by `customer`:
    /// every later arrival declines the dish.
    pub fn singleton_log_bernoulli(&self, customer: usize) -> f64 {
        let pf = self.positions[customer];
        let mut total = 0.0;
        for p in (pf + 1)..self.n() {
            let prob = self.take_probability(p, self.weights[p][pf]);
            total += (-prob).ln_1p();
        }
        total
    }

    /// Full log-pmf of an allocation under these weights.
    pub fn log_pmf(&self, z: &FeatureAllocation, mass: Mass) -> f64 {
        let n = self.n();
        debug_assert_eq!(z.n_customers(), n);
        let alpha = mass.get();
        let mut total = z.n_features() as f64 * alpha.ln() - alpha * harmonic(n);
        for column in z.columns() {
            let first = self.first_position(column).expect("no all-zero columns");
            total -= (first as f64 + 1.0).ln();
            total += self.column_log_bernoulli(column);
        }
        let mut counts: std::collections::HashMap<&[bool], usize> = std::collections::HashMap::new();
        for column in z.columns() {
            *counts.entry(column.as_slice()).or_insert(0) += 1;
        }
        for (_, count) in counts {
            total -= ln_factorial(count);
        }
        total
    }

    /// One draw from the constructive restaurant process.
    pub fn sample<R: Rng + ?Sized>(&self, mass: Mass, rng: &mut R) -> FeatureAllocation {
        let n = self.n();
        let alpha = mass.get();
        let mut columns: Vec<Vec<bool>> = Vec::new();
        for p in 0..n {
            let customer = self.order[p];
            for column in columns.iter_mut() {
                let prob = self.take_probability(p, self.numerator(p, column));
                if rng.gen::<f64>() < prob {
                    column[customer] = true;
                }
            }
            let rate = alpha / (p + 1) as f64;
            let new_dishes = Poisson::new(rate).expect("positive rate").sample(rng) as usize;
            for _ in 0..new_dishes {
                let mut column = vec![false; n];
                column[customer] = true;
                columns.push(column);
            }
        }
        FeatureAllocation::new(n, columns).expect("constructed columns are valid")
    }
}

/// Log of the IBP pmf. The empty allocation has log-pmf -alpha H_N.
pub fn ibp_logpmf(z: &FeatureAllocation, params: &IbpParams) -> f64 {
    assert_eq!(
        z.n_customers(),
        params.n_customers,
        "allocation and parameters disagree on N"
    );
    let n = params.n_customers;
    let alpha = params.mass.get();
    let order = Permutation::natural(n);
    let stats = z.stats(&order);
    let mut total = z.n_features() as f64 * alpha.ln() - alpha * harmonic(n);
    for p in 0..n {
        total -= stats.new_dishes[p] as f64 * ((p + 1) as f64).ln();
    }
    for &count in &stats.column_multiplicities {
        total -= ln_factorial(count);
    }
    for p in 1..n {
        let i = (p + 1) as f64;
        for k in 0..z.n_features() {
            let m = stats.prior_counts[p][k];
            if m == 0 {
                continue;
            }
            let prob = m as f64 / i;
            total += if z.get(p, k) {
                prob.ln()
            } else {
                (-prob).ln_1p()
            };
        }
    }
    total
}

/// Log of the AIBD pmf. Errors if some h_ik denominator is zero, which can
/// happen under the window decay function.
pub fn aibd_logpmf(z: &FeatureAllocation, params: &AibdParams) -> Result<f64> {
    if z.n_customers() != params.n_customers() {
        return Err(Error::Validation(format!(
            "allocation has {} customers but parameters have {}",
            z.n_customers(),
            params.n_customers()
        )));
    }
    let weights = ArrivalWeights::new(&params.similarity, &params.permutation)?;
    Ok(weights.log_pmf(z, params.mass))
}

/// One IBP draw from the constructive process.
pub fn sample_ibp<R: Rng + ?Sized>(params: &IbpParams, rng: &mut R) -> FeatureAllocation {
    ArrivalWeights::uniform(params.n_customers).sample(params.mass, rng)
}

/// One AIBD draw from the constructive process in arrival order.
pub fn sample_aibd<R: Rng + ?Sized>(params: &AibdParams, rng: &mut R) -> Result<FeatureAllocation> {
    let weights = ArrivalWeights::new(&params.similarity, &params.permutation)?;
    Ok(weights.sample(params.mass, rng))
}

/// Guard on the exhaustive enumerator: the number of allocations grows as
/// binom(2^N - 2 + K, K) summed over K.
pub const ENUMERATE_MAX_N: usize = 4;
pub const ENUMERATE_MAX_K: usize = 4;

/// Every distinct left-ordered-form allocation with `n` customers and at
/// most `max_k` features, each exactly once.
pub fn enumerate_allocations(n: usize, max_k: usize) -> Result<Vec<AllocationKey>> {
    if n == 0 || n > ENUMERATE_MAX_N || max_k > ENUMERATE_MAX_K {
        return Err(Error::InvalidArgument(format!(
            "enumeration is limited to 1 <= n <= {} and max_k <= {}",
            ENUMERATE_MAX_N, ENUMERATE_MAX_K
        )));
    }
    // Column patterns in descending binary order (row 1 most significant),
    // so nonincreasing pattern sequences are exactly the left-ordered forms.
    let patterns: Vec<u32> = (1..(1u32 << n)).rev().collect();
    let mut keys = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    loop {
        let columns: Vec<Vec<bool>> = stack
            .iter()
            .map(|&idx| pattern_to_column(patterns[idx], n))
            .collect();
        let z = FeatureAllocation::new(n, columns).expect("patterns are nonzero");
        keys.push(z.left_ordered_form());
        // Advance: deepen with a repeat of the last pattern if allowed,
        // otherwise increment the trailing index.
        if stack.len() < max_k {
            let next = stack.last().copied().unwrap_or(0);
            stack.push(next);
            continue;
        }
        loop {
            match stack.pop() {
                None => return Ok(keys),
                Some(idx) => {
                    if idx + 1 < patterns.len() {
                        stack.push(idx + 1);
                        break;
                    }
                }
            }
        }
    }
}

fn pattern_to_column(pattern: u32, n: usize) -> Vec<bool> {
    (0..n).map(|row| (pattern >> (n - 1 - row)) & 1 == 1).collect()
}

/// Compensated (Kahan) summation, used when accumulating similarity
/// numerators and denominators.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct KahanSum {
    sum: f64,
    compensation: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: f64) {
        let y = value - self.compensation;
        let t = self.sum + y;
        self.compensation = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}
