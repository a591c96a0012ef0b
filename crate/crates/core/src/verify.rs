//! Randomised equivalence checks between the Winograd engine, its three
//! strategies and the direct convolution oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::reference::{direct_conv, ConvSpec};
use crate::tensor::{Shape, Tensor4D};
use crate::winograd::{conv3x3_winograd, Strategy};

/// Relative tolerance for engine-vs-oracle comparisons.
pub const REL_TOL: f32 = 1e-4;
/// Absolute floor below which differences always pass.
pub const ABS_FLOOR: f32 = 1e-5;

/// Worst-case element differences between two equally sized arrays.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ErrorStats {
    pub max_abs: f32,
    /// Largest `|a - b| / |b|` among elements whose difference exceeds the
    /// absolute floor.
    pub max_rel: f32,
    /// Elements where `|a - b| > max(rel · |b|, abs_floor)`.
    pub violations: usize,
}

impl ErrorStats {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn worst(self, other: ErrorStats) -> ErrorStats {
        ErrorStats {
            max_abs: self.max_abs.max(other.max_abs),
            max_rel: self.max_rel.max(other.max_rel),
            violations: self.violations + other.violations,
        }
    }
}

/// Compare `actual` with `expected` elementwise under `rel` with an absolute floor.
pub fn compare(actual: &[f32], expected: &[f32], rel: f32, abs_floor: f32) -> ErrorStats {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    let mut stats = ErrorStats::default();
    for (&a, &b) in actual.iter().zip(expected) {
        let diff = (a - b).abs();
        if !diff.is_finite() {
            stats.violations += 1;
            stats.max_abs = f32::INFINITY;
            continue;
        }
        stats.max_abs = stats.max_abs.max(diff);
        if diff > abs_floor {
            stats.max_rel = stats.max_rel.max(diff / b.abs());
            if diff > rel * b.abs() {
                stats.violations += 1;
            }
        }
    }
    stats
}

pub fn compare_tensors(actual: &Tensor4D, expected: &Tensor4D) -> ErrorStats {
    assert_eq!(actual.shape(), expected.shape(), "shape mismatch");
    compare(actual.data(), expected.data(), REL_TOL, ABS_FLOOR)
}

/// A random convolution instance.
#[derive(Clone, Debug)]
pub struct ConvCase {
    pub input: Tensor4D,
    pub weights: Tensor4D,
    pub bias: Option<Vec<f32>>,
}

impl ConvCase {
    /// Draw `n ≤ 4, c ≤ 8, k ≤ 8, 4 ≤ h = w ≤ 32`, values in `[-1, 1]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        let n = rng.gen_range(1..=4);
        let c = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let hw = rng.gen_range(4..=32);
        let mut draw = |shape: Shape| {
            let data = (0..shape.len()).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
            Tensor4D::from_vec(shape, data).expect("valid shape")
        };
        let input = draw(Shape::new(n, c, hw, hw));
        let weights = draw(Shape::new(k, c, 3, 3));
        let bias = if rng.gen_bool(0.5) {
            Some((0..k).map(|_| rng.gen_range(-1.0f32..=1.0)).collect())
        } else {
            None
        };
        Self {
            input,
            weights,
            bias,
        }
    }

    pub fn oracle(&self) -> Tensor4D {
        let spec = ConvSpec::same3x3(self.weights.shape().n);
        direct_conv(&self.input, &self.weights, self.bias.as_deref(), &spec)
            .expect("random case is well formed")
    }

    pub fn winograd(&self, strategy: Strategy) -> Tensor4D {
        conv3x3_winograd(&self.input, &self.weights, self.bias.as_deref(), strategy, None)
            .expect("random case is well formed")
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyReport {
    pub trials: usize,
    /// Worst engine-vs-oracle error over all strategies.
    pub oracle: ErrorStats,
    /// Worst pairwise error between strategies.
    pub strategies: ErrorStats,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.oracle.passed() && self.strategies.passed()
    }
}

/// Run `trials` random instances through every strategy and the oracle.
pub fn run_verification(trials: usize, seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport {
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let case = ConvCase::random(&mut rng);
        let expected = case.oracle();
        let outs: Vec<Tensor4D> = Strategy::ALL.iter().map(|&s| case.winograd(s)).collect();
        for out in &outs {
            report.oracle = report.oracle.worst(compare_tensors(out, &expected));
        }
        for a in 0..outs.len() {
            for b in a + 1..outs.len() {
                report.strategies = report.strategies.worst(compare_tensors(&outs[a], &outs[b]));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_applies_floor_and_relative_bound() {
        let s = compare(&[1.0, 0.0], &[1.00005, 5e-6], REL_TOL, ABS_FLOOR);
        assert!(s.passed());
        let s = compare(&[1.0], &[1.001], REL_TOL, ABS_FLOOR);
        assert_eq!(s.violations, 1);
        let s = compare(&[f32::NAN], &[1.0], REL_TOL, ABS_FLOOR);
        assert!(!s.passed());
    }

    #[test]
    fn small_verification_run_passes() {
        let r = run_verification(5, 3);
        assert!(r.passed(), "{r:?}");
    }
}
