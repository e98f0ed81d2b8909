//! Customer arrival orders.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// A permutation of `0..n`, read as an arrival order: `order()[p]` is the
/// (0-based) customer index that arrives at position `p`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    /// The identity order `0, 1, ..., n-1`.
    pub fn natural(n_items: usize) -> Self {
        Self {
            order: (0..n_items).collect(),
        }
    }

    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &item in &order {
            if item >= n || seen[item] {
                return Err(Error::Validation(format!(
                    "not a permutation of 0..{}: {:?}",
                    n, order
                )));
            }
            seen[item] = true;
        }
        Ok(Self { order })
    }

    /// Parses a comma-separated 1-based list such as `"2,1,3"`.
    pub fn from_one_based_str(s: &str) -> Result<Self> {
        let mut order = Vec::new();
        for field in s.split(',') {
            let value: usize = field.trim().parse().map_err(|_| {
                Error::InvalidArgument(format!("invalid permutation entry `{}`", field.trim()))
            })?;
            if value == 0 {
                return Err(Error::InvalidArgument(
                    "permutation entries are 1-based".to_string(),
                ));
            }
            order.push(value - 1);
        }
        Self::from_order(order).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn uniform<R: Rng + ?Sized>(n_items: usize, rng: &mut R) -> Self {
        let mut order: Vec<usize> = (0..n_items).collect();
        order.shuffle(rng);
        Self { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Customer arriving at position `p`.
    pub fn item_at(&self, position: usize) -> usize {
        self.order[position]
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Inverse map: `positions()[customer]` is the customer's arrival position.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (p, &item) in self.order.iter().enumerate() {
            pos[item] = p;
        }
        pos
    }

    /// 1-based entries for display and serialization.
    pub fn to_one_based(&self) -> Vec<usize> {
        self.order.iter().map(|&i| i + 1).collect()
    }

    /// In-place shuffle of the contents at `positions`, leaving the rest
    /// fixed. The proposal used by the permutation update.
    pub fn shuffle_subset<R: Rng + ?Sized>(&mut self, positions: &[usize], rng: &mut R) {
        let mut values: Vec<usize> = positions.iter().map(|&p| self.order[p]).collect();
        values.shuffle(rng);
        for (&p, &v) in positions.iter().zip(values.iter()) {
            self.order[p] = v;
        }
    }
}
