//! Pairwise distances, decay functions, and the similarity matrix.
//!
//! A decay function maps a distance d and temperature tau to a similarity.
//! The three requirements on a valid decay function are: (i) nonincreasing in
//! d for fixed tau; (ii) f(t1,d1) f(t2,d2) <= f(t2,d1) f(t1,d2) for d1 <= d2
//! and t1 <= t2; (iii) at tau = 0 it is a positive constant in d, which is
//! what collapses the attraction distribution back to the exchangeable case.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Symmetric N x N nonnegative distances with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn new(d: DMatrix<f64>) -> Result<Self> {
        if d.nrows() != d.ncols() || d.nrows() == 0 {
            return Err(Error::Validation(format!(
                "distance matrix must be square and nonempty, found {}x{}",
                d.nrows(),
                d.ncols()
            )));
        }
        for i in 0..d.nrows() {
            if d[(i, i)] != 0.0 {
                return Err(Error::Validation(format!(
                    "distance matrix diagonal entry ({}, {}) is {}, expected 0",
                    i + 1,
                    i + 1,
                    d[(i, i)]
                )));
            }
            for j in 0..i {
                let (a, b) = (d[(i, j)], d[(j, i)]);
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::Validation(format!(
                        "distance ({}, {}) is {}, expected a finite nonnegative value",
                        i + 1,
                        j + 1,
                        a
                    )));
                }
                if a != b {
                    return Err(Error::Validation(format!(
                        "distance matrix is not symmetric at ({}, {}): {} vs {}",
                        i + 1,
                        j + 1,
                        a,
                        b
                    )));
                }
            }
        }
        Ok(Self { d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        if flat.len() != n * n {
            return Err(Error::Validation("distance rows are ragged".to_string()));
        }
        Self::new(DMatrix::from_row_slice(n, n, &flat))
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// True if some off-diagonal distance is exactly zero. Ties at zero
    /// distance degrade the reciprocal decay and make arrival orders harder
    /// to identify, so callers may want [`Self::with_jitter`].
    pub fn has_zero_off_diagonal(&self) -> bool {
        let n = self.n();
        (0..n).any(|i| (0..i).any(|j| self.d[(i, j)] == 0.0))
    }

    /// Adds `epsilon` to every off-diagonal distance.
    pub fn with_jitter(&self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(
                "jitter must be positive".to_string(),
            ));
        }
        let mut d = self.d.clone();
        for i in 0..d.nrows() {
            for j in 0..d.ncols() {
                if i != j {
                    d[(i, j)] += epsilon;
                }
            }
        }
        Self::new(d)
    }
}

/// Default jitter added by the CLI when off-diagonal zero distances are
/// present and `--jitter` is requested.
pub const DEFAULT_JITTER: f64 = 1e-5;

/// Decay functions mapping (tau, d) to a similarity.
#[derive(Clone, Debug, PartialEq)]
pub enum DecayFunction {
    /// f(tau, d) = c for a positive constant c.
    Constant(f64),
    /// f(tau, d) = exp(-tau d).
    Exponential,
    /// f(tau, d) = (d + shift)^(-tau), shift > 0.
    Reciprocal { shift: f64 },
    /// f(tau, d) = 1 if d <= 1/tau, else 0; at tau = 0 the window is infinite.
    Window,
}

impl DecayFunction {
    pub fn constant(c: f64) -> Result<Self> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "constant decay value must be a positive real, got {}",
                c
            )));
        }
        Ok(Self::Constant(c))
    }

    pub fn reciprocal(shift: f64) -> Result<Self> {
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "reciprocal decay shift must be positive, got {}",
                shift
            )));
        }
        Ok(Self::Reciprocal { shift })
    }

    /// Evaluates the decay function at temperature `tau` and distance `d`.
    pub fn evaluate(&self, tau: f64, d: f64) -> Result<f64> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be a finite nonnegative real, got {}",
                tau
            )));
        }
        if !(d >= 0.0) || !d.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "distance must be a finite nonnegative real, got {}",
                d
            )));
        }
        Ok(match self {
            DecayFunction::Constant(c) => *c,
            DecayFunction::Exponential => (-tau * d).exp(),
            DecayFunction::Reciprocal { shift } => (d + shift).powf(-tau),
            DecayFunction::Window => {
                if tau == 0.0 || d <= 1.0 / tau {
                    1.0
                } else {
                    0.0
                }
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecayFunction::Constant(_) => "constant",
            DecayFunction::Exponential => "exponential",
            DecayFunction::Reciprocal { .. } => "reciprocal",
            DecayFunction::Window => "window",
        }
    }
}

/// Element-wise transformed distances: lambda[i][j] = f(tau, d[i][j]).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    lambda: DMatrix<f64>,
}

impl SimilarityMatrix {
    /// Applies `f` at temperature `tau` to every entry of `distances`.
    pub fn from_distances(
        distances: &DistanceMatrix,
        f: &DecayFunction,
        tau: f64,
    ) -> Result<Self> {
        let n = distances.n();
        let mut lambda = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let value = f.evaluate(tau, distances.get(i, j))?;
                lambda[(i, j)] = value;
                lambda[(j, i)] = value;
            }
        }
        Ok(Self { lambda })
    }

    /// All-ones similarities: the exchangeable special case.
    pub fn uniform(n: usize) -> Self {
        Self {
            lambda: DMatrix::from_element(n, n, 1.0),
        }
    }

    /// Wraps an explicit similarity matrix, validating symmetry and
    /// nonnegativity.
    pub fn from_matrix(lambda: DMatrix<f64>) -> Result<Self> {
        if lambda.nrows() != lambda.ncols() || lambda.nrows() == 0 {
            return Err(Error::Validation(format!(
                "similarity matrix must be square and nonempty, found {}x{}",
                lambda.nrows(),
                lambda.ncols()
            )));
        }
        for i in 0..lambda.nrows() {
            for j in 0..=i {
                let v = lambda[(i, j)];
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Validation(format!(
                        "similarity ({}, {}) is {}, expected a finite nonnegative value",
                        i + 1,
                        j + 1,
                        v
                    )));
                }
                if v != lambda[(j, i)] {
                    return Err(Error::Validation(format!(
                        "similarity matrix is not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(Self { lambda })
    }

    pub fn n(&self) -> usize {
        self.lambda.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lambda[(i, j)]
    }
}

/// Outcome of checking one decay-function requirement on a grid.
#[derive(Clone, Debug, PartialEq)]
pub enum AxiomResult {
    Pass,
    Fail { detail: String },
}

impl AxiomResult {
    pub fn passed(&self) -> bool {
        matches!(self, AxiomResult::Pass)
    }
}

/// Grid-based report for the three decay-function requirements.
#[derive(Clone, Debug, PartialEq)]
pub struct AxiomReport {
    /// (i) nonincreasing in d for fixed tau.
    pub monotone: AxiomResult,
    /// (ii) f(t1,d1) f(t2,d2) <= f(t2,d1) f(t1,d2) for d1 <= d2, t1 <= t2.
    pub ratio_ordering: AxiomResult,
    /// (iii) f(0, d) is a positive constant in d.
    pub zero_temperature: AxiomResult,
}

impl AxiomReport {
    pub fn all_passed(&self) -> bool {
        self.monotone.passed() && self.ratio_ordering.passed() && self.zero_temperature.passed()
    }
}

const AXIOM_SLACK: f64 = 1e-12;

/// Checks the three requirements for an arbitrary function on the cross
/// product of the supplied grids, reporting the first violating tuple.
pub fn validate_axioms_fn<F>(f: F, tau_grid: &[f64], d_grid: &[f64]) -> Result<AxiomReport>
where
    F: Fn(f64, f64) -> f64,
{
    if tau_grid.is_empty() || d_grid.is_empty() {
        return Err(Error::InvalidArgument(
            "axiom validation needs nonempty grids".to_string(),
        ));
    }
    let sorted = |g: &[f64]| g.windows(2).all(|w| w[0] <= w[1]);
    if !sorted(tau_grid) || !sorted(d_grid) {
        return Err(Error::InvalidArgument(
            "axiom validation grids must be sorted ascending".to_string(),
        ));
    }

    let mut monotone = AxiomResult::Pass;
    'outer_i: for &tau in tau_grid {
        for w in d_grid.windows(2) {
            let (lo, hi) = (f(tau, w[0]), f(tau, w[1]));
            if hi > lo + AXIOM_SLACK {
                monotone = AxiomResult::Fail {
                    detail: format!(
                        "f({tau}, {}) = {lo} < f({tau}, {}) = {hi}",
                        w[0], w[1]
                    ),
                };
                break 'outer_i;
            }
        }
    }

    let mut ratio_ordering = AxiomResult::Pass;
    'outer_ii: for (a, &tau1) in tau_grid.iter().enumerate() {
        for &tau2 in &tau_grid[a..] {
            for (b, &d1) in d_grid.iter().enumerate() {
                for &d2 in &d_grid[b..] {
                    let lhs = f(tau1, d1) * f(tau2, d2);
                    let rhs = f(tau2, d1) * f(tau1, d2);
                    if lhs > rhs + AXIOM_SLACK * lhs.max(1.0) {
                        ratio_ordering = AxiomResult::Fail {
                            detail: format!(
                                "f({tau1},{d1})*f({tau2},{d2}) = {lhs} > f({tau2},{d1})*f({tau1},{d2}) = {rhs}"
                            ),
                        };
                        break 'outer_ii;
                    }
                }
            }
        }
    }

    let reference = f(0.0, d_grid[0]);
    let mut zero_temperature = if reference > 0.0 && reference.is_finite() {
        AxiomResult::Pass
    } else {
        AxiomResult::Fail {
            detail: format!("f(0, {}) = {} is not in (0, inf)", d_grid[0], reference),
        }
    };
    if zero_temperature.passed() {
        for &d in d_grid {
            let value = f(0.0, d);
            if (value - reference).abs() > AXIOM_SLACK * reference.max(1.0) {
                zero_temperature = AxiomResult::Fail {
                    detail: format!("f(0, {}) = {} differs from f(0, {}) = {}", d, value, d_grid[0], reference),
                };
                break;
            }
        }
    }

    Ok(AxiomReport {
        monotone,
        ratio_ordering,
        zero_temperature,
    })
}

/// [`validate_axioms_fn`] specialized to a built-in decay function.
pub fn validate_axioms(
    f: &DecayFunction,
    tau_grid: &[f64],
    d_grid: &[f64],
) -> Result<AxiomReport> {
    validate_axioms_fn(
        |tau, d| f.evaluate(tau, d).expect("grids are validated"),
        tau_grid,
        d_grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau_grid() -> Vec<f64> {
        vec![0.0, 0.2, 0.5, 1.0, 2.0, 5.0]
    }

    fn d_grid() -> Vec<f64> {
        vec![0.0, 0.1, 0.3, 0.5, 1.0, 2.0, 4.0]
    }

    #[test]
    fn exponential_matches_reported_similarities() {
        let f = DecayFunction::Exponential;
        // exp(-0.12) and exp(-5 * 0.12), quoted to two decimals as 0.89/0.55.
        let v1 = f.evaluate(1.0, 0.12).unwrap();
        assert!((v1 - 0.887).abs() < 5e-4);
        let v5 = f.evaluate(5.0, 0.12).unwrap();
        assert!((v5 - 0.549).abs() < 5e-4);
    }

    #[test]
    fn tau_zero_is_constant_in_distance() {
        for f in [
            DecayFunction::constant(2.5).unwrap(),
            DecayFunction::Exponential,
            DecayFunction::reciprocal(0.7).unwrap(),
            DecayFunction::Window,
        ] {
            let at_zero = f.evaluate(0.0, 0.0).unwrap();
            for d in [0.0, 0.5, 3.0, 100.0] {
                assert_eq!(f.evaluate(0.0, d).unwrap(), at_zero, "{:?}", f);
            }
            assert!(at_zero > 0.0);
        }
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        assert!(DecayFunction::Exponential.evaluate(-1.0, 0.5).is_err());
        assert!(DecayFunction::Exponential.evaluate(1.0, -0.5).is_err());
        assert!(DecayFunction::reciprocal(0.0).is_err());
        assert!(DecayFunction::reciprocal(-2.0).is_err());
        assert!(DecayFunction::constant(0.0).is_err());
    }

    #[test]
    fn window_is_an_indicator() {
        let f = DecayFunction::Window;
        assert_eq!(f.evaluate(2.0, 0.4).unwrap(), 1.0);
        assert_eq!(f.evaluate(2.0, 0.6).unwrap(), 0.0);
        assert_eq!(f.evaluate(2.0, 0.5).unwrap(), 1.0);
        assert_eq!(f.evaluate(0.0, 1e12).unwrap(), 1.0);
    }

    #[test]
    fn constant_decay_gives_flat_similarity_matrix() {
        let d = DistanceMatrix::from_rows(&[
            vec![0.0, 1.0, 2.0],
            vec![1.0, 0.0, 3.0],
            vec![2.0, 3.0, 0.0],
        ])
        .unwrap();
        let s =
            SimilarityMatrix::from_distances(&d, &DecayFunction::constant(0.8).unwrap(), 4.2)
                .unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), 0.8);
            }
        }
    }

    #[test]
    fn similarity_matrix_is_symmetric() {
        let d = DistanceMatrix::from_rows(&[
            vec![0.0, 0.3, 1.4],
            vec![0.3, 0.0, 0.9],
            vec![1.4, 0.9, 0.0],
        ])
        .unwrap();
        for f in [
            DecayFunction::Exponential,
            DecayFunction::reciprocal(1.0).unwrap(),
            DecayFunction::Window,
        ] {
            let s = SimilarityMatrix::from_distances(&d, &f, 2.0).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(s.get(i, j), s.get(j, i));
                }
            }
        }
    }

    #[test]
    fn distance_matrix_validation() {
        assert!(DistanceMatrix::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![0.5, 1.0], vec![1.0, 0.0]]).is_err());
        assert!(DistanceMatrix::from_rows(&[vec![0.0, -1.0], vec![-1.0, 0.0]]).is_err());
        let ok = DistanceMatrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(ok.has_zero_off_diagonal());
        let jittered = ok.with_jitter(DEFAULT_JITTER).unwrap();
        assert!(!jittered.has_zero_off_diagonal());
        assert_eq!(jittered.get(0, 1), DEFAULT_JITTER);
        assert_eq!(jittered.get(0, 0), 0.0);
    }

    #[test]
    fn built_in_decays_pass_all_axioms() {
        for f in [
            DecayFunction::constant(1.3).unwrap(),
            DecayFunction::Exponential,
            DecayFunction::reciprocal(0.4).unwrap(),
            DecayFunction::Window,
        ] {
            let report = validate_axioms(&f, &tau_grid(), &d_grid()).unwrap();
            assert!(report.all_passed(), "{:?}: {:?}", f, report);
        }
    }

    #[test]
    fn increasing_function_fails_monotonicity() {
        let report = validate_axioms_fn(|_tau, d| 1.0 + d, &tau_grid(), &d_grid()).unwrap();
        assert!(!report.monotone.passed());
    }

    #[test]
    fn ratio_axiom_catches_violations() {
        // f(tau, d) = exp(+tau d) satisfies (iii) but inverts the ratio order.
        let report =
            validate_axioms_fn(|tau, d| (tau * d).exp(), &tau_grid(), &d_grid()).unwrap();
        assert!(!report.ratio_ordering.passed());
    }

    #[test]
    fn temperature_accentuates_distance_for_built_ins() {
        // f(tau, d1) / f(tau, d2) is nondecreasing in tau for d1 < d2.
        let (d1, d2) = (0.3, 1.7);
        for f in [
            DecayFunction::constant(2.0).unwrap(),
            DecayFunction::Exponential,
            DecayFunction::reciprocal(0.5).unwrap(),
        ] {
            let mut last = 0.0;
            for tau in [0.0, 0.5, 1.0, 2.0, 4.0] {
                let ratio = f.evaluate(tau, d1).unwrap() / f.evaluate(tau, d2).unwrap();
                assert!(ratio >= last - 1e-12, "{:?} at tau {}", f, tau);
                last = ratio;
            }
        }
    }
}
