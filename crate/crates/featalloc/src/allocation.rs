//! Binary feature-allocation matrices and their combinatorial statistics.
//!
//! A feature allocation assigns each of N customers to any number of latent
//! binary features (dishes). It is stored column-major: each feature is a
//! length-N bit vector. Columns of all zeros are dropped on construction, so
//! K = 0 encodes the empty allocation. Because feature labels carry no
//! meaning, equality and hashing go through the left-ordered form
//! [`AllocationKey`], which identifies the column multiset.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::perm::Permutation;

/// An N x K binary matrix of customers by features, with no all-zero column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureAllocation {
    n_customers: usize,
    columns: Vec<Vec<bool>>,
}

impl FeatureAllocation {
    /// Builds an allocation from feature columns, dropping all-zero columns.
    pub fn new(n_customers: usize, columns: Vec<Vec<bool>>) -> Result<Self> {
        if n_customers == 0 {
            return Err(Error::Validation(
                "a feature allocation needs at least one customer".to_string(),
            ));
        }
        for (k, column) in columns.iter().enumerate() {
            if column.len() != n_customers {
                return Err(Error::Validation(format!(
                    "feature {} has {} entries, expected {}",
                    k,
                    column.len(),
                    n_customers
                )));
            }
        }
        let columns = columns.into_iter().filter(|c| c.iter().any(|&b| b)).collect();
        Ok(Self {
            n_customers,
            columns,
        })
    }

    pub fn empty(n_customers: usize) -> Self {
        Self::new(n_customers, Vec::new()).expect("n_customers > 0")
    }

    /// Parses rows of 0/1 entries (customer-major).
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Validation("no rows".to_string()));
        }
        let k = rows[0].len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("rows have unequal lengths".to_string()));
        }
        let mut columns = vec![vec![false; n]; k];
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => columns[j][i] = true,
                    _ => {
                        return Err(Error::Validation(format!(
                            "entry ({}, {}) is {}, expected 0 or 1",
                            i + 1,
                            j + 1,
                            v
                        )))
                    }
                }
            }
        }
        Self::new(n, columns)
    }

    pub fn n_customers(&self) -> usize {
        self.n_customers
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn get(&self, customer: usize, feature: usize) -> bool {
        self.columns[feature][customer]
    }

    pub fn column(&self, feature: usize) -> &[bool] {
        &self.columns[feature]
    }

    pub fn columns(&self) -> &[Vec<bool>] {
        &self.columns
    }

    /// Number of customers holding the feature.
    pub fn column_sum(&self, feature: usize) -> usize {
        self.columns[feature].iter().filter(|&&b| b).count()
    }

    /// Number of features held by the customer.
    pub fn row_sum(&self, customer: usize) -> usize {
        self.columns.iter().filter(|c| c[customer]).count()
    }

    /// Total number of ones, i.e. trace(Z Z^T).
    pub fn total_ones(&self) -> usize {
        (0..self.n_features()).map(|k| self.column_sum(k)).sum()
    }

    /// Number of features shared by two distinct customers.
    pub fn shared_feature_count(&self, i: usize, j: usize) -> usize {
        assert!(
            i < self.n_customers && j < self.n_customers && i != j,
            "customers must be distinct and in range"
        );
        self.columns.iter().filter(|c| c[i] && c[j]).count()
    }

    /// Canonical form: columns sorted descending by binary value, with the
    /// most significant digit in row 1. Invariant under column permutation.
    pub fn left_ordered_form(&self) -> AllocationKey {
        let mut columns = self.columns.clone();
        columns.sort_unstable_by(|a, b| b.cmp(a));
        AllocationKey {
            n_customers: self.n_customers,
            columns,
        }
    }

    /// Per-arrival statistics with respect to an explicit arrival order.
    ///
    /// Arrival positions are 0-based here; the pmfs convert to the 1-based
    /// positions of the constructive restaurant process.
    pub fn stats(&self, order: &Permutation) -> AllocationStats {
        assert_eq!(
            order.len(),
            self.n_customers,
            "order length must equal the number of customers"
        );
        let n = self.n_customers;
        let k = self.n_features();
        let mut new_dishes = vec![0usize; n];
        let mut dishes_before = vec![0usize; n];
        let mut prior_counts = vec![vec![0usize; k]; n];
        for (j, column) in self.columns.iter().enumerate() {
            let mut running = 0usize;
            let mut first_seen = None;
            for p in 0..n {
                prior_counts[p][j] = running;
                if column[order.item_at(p)] {
                    if first_seen.is_none() {
                        first_seen = Some(p);
                    }
                    running += 1;
                }
            }
            new_dishes[first_seen.expect("no all-zero columns")] += 1;
        }
        let mut cumulative = 0usize;
        for p in 0..n {
            dishes_before[p] = cumulative;
            cumulative += new_dishes[p];
        }
        let mut multiplicity: HashMap<&[bool], usize> = HashMap::new();
        for column in &self.columns {
            *multiplicity.entry(column.as_slice()).or_insert(0) += 1;
        }
        let mut column_multiplicities: Vec<usize> = multiplicity.into_values().collect();
        column_multiplicities.sort_unstable();
        AllocationStats {
            new_dishes,
            dishes_before,
            prior_counts,
            column_multiplicities,
        }
    }

    /// One feature per line as an N-character '0'/'1' string (row 1 first).
    pub fn to_compact_lines(&self) -> Vec<String> {
        self.columns.iter().map(|c| column_string(c)).collect()
    }

    /// Inverse of [`Self::to_compact_lines`]; `n_customers` disambiguates the
    /// empty allocation.
    pub fn from_compact_lines(n_customers: usize, lines: &[String]) -> Result<Self> {
        let mut columns = Vec::with_capacity(lines.len());
        for line in lines {
            let mut column = Vec::with_capacity(line.len());
            for ch in line.trim().chars() {
                match ch {
                    '0' => column.push(false),
                    '1' => column.push(true),
                    _ => {
                        return Err(Error::Validation(format!(
                            "invalid character `{}` in feature string",
                            ch
                        )))
                    }
                }
            }
            columns.push(column);
        }
        Self::new(n_customers, columns)
    }

    /// Flips one bit in place. Sampler-internal: the caller must ensure the
    /// column stays nonzero.
    pub(crate) fn flip(&mut self, customer: usize, feature: usize) {
        let column = &mut self.columns[feature];
        column[customer] = !column[customer];
        debug_assert!(column.iter().any(|&b| b), "flip produced an empty column");
    }

    /// Removes the columns at `features` (indices into the current columns).
    pub(crate) fn remove_features(&mut self, features: &[usize]) {
        if features.is_empty() {
            return;
        }
        let mut keep = vec![true; self.columns.len()];
        for &m in features {
            keep[m] = false;
        }
        let mut iter = keep.iter();
        self.columns.retain(|_| *iter.next().expect("lengths match"));
    }

    /// Appends a feature held only by `customer`.
    pub(crate) fn push_singleton(&mut self, customer: usize) {
        let mut column = vec![false; self.n_customers];
        column[customer] = true;
        self.columns.push(column);
    }

    /// CSV of 0/1 with N rows and K columns, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_customers {
            let row: Vec<&str> = self
                .columns
                .iter()
                .map(|c| if c[i] { "1" } else { "0" })
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn column_string(column: &[bool]) -> String {
    column.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Left-ordered-form identity of a feature allocation: two allocations map
/// to equal keys iff their column multisets are equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AllocationKey {
    n_customers: usize,
    columns: Vec<Vec<bool>>,
}

impl AllocationKey {
    pub fn n_customers(&self) -> usize {
        self.n_customers
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn to_allocation(&self) -> FeatureAllocation {
        FeatureAllocation {
            n_customers: self.n_customers,
            columns: self.columns.clone(),
        }
    }
}

impl fmt::Display for AllocationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.columns.is_empty() {
            return write!(f, "-");
        }
        let strings: Vec<String> = self.columns.iter().map(|c| column_string(c)).collect();
        write!(f, "{}", strings.join("|"))
    }
}

/// Combinatorial statistics of an allocation under a given arrival order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AllocationStats {
    /// x: number of new dishes taken at each arrival position.
    pub new_dishes: Vec<usize>,
    /// y: number of dishes sampled before each arrival position.
    pub dishes_before: Vec<usize>,
    /// m[p][k]: customers that took dish k before arrival position p.
    pub prior_counts: Vec<Vec<usize>>,
    /// K_h: multiplicities of identical columns (sorted, one entry per
    /// realized pattern).
    pub column_multiplicities: Vec<usize>,
}
