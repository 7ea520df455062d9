//! Operation counters shared by the exact and feature-based interaction paths.

use std::cell::Cell;

/// Counts the work done inside interaction computations.
///
/// `kernel_evals` counts pairwise kernel evaluations on the exact path;
/// `feature_madds` counts multiply-adds on the feature path (projection,
/// aggregation and read-out). Neither includes network or cost arithmetic.
#[derive(Debug, Default, Clone)]
pub struct OpCounter {
    kernel_evals: Cell<u64>,
    feature_madds: Cell<u64>,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_kernel_evals(&self, n: u64) {
        self.kernel_evals.set(self.kernel_evals.get() + n);
    }

    pub fn add_feature_madds(&self, n: u64) {
        self.feature_madds.set(self.feature_madds.get() + n);
    }

    pub fn kernel_evals(&self) -> u64 {
        self.kernel_evals.get()
    }

    pub fn feature_madds(&self) -> u64 {
        self.feature_madds.get()
    }

    /// Total interaction work in whichever unit applies.
    pub fn total(&self) -> u64 {
        self.kernel_evals() + self.feature_madds()
    }

    pub fn reset(&self) {
        self.kernel_evals.set(0);
        self.feature_madds.set(0);
    }
}
