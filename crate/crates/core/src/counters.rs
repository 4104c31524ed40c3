//! Operation counters used to account for the cost of Gaussian selection and
//! patch estimation independently of wall-clock time.

use serde::{Deserialize, Serialize};
use std::ops::AddAssign;

/// Multiply and evaluation tallies. Each worker keeps its own copy and the
/// copies are summed afterwards, so totals do not depend on scheduling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounter {
    /// Number of per-component selection scores evaluated.
    pub score_evals: u64,
    /// Multiplies spent in Gaussian selection (projections, squared norms, scores).
    pub select_mults: u64,
    /// Multiplies spent in Wiener patch estimation.
    pub estimate_mults: u64,
}

impl OpCounter {
    pub fn total_mults(&self) -> u64 {
        self.select_mults + self.estimate_mults
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: Self) {
        self.score_evals += rhs.score_evals;
        self.select_mults += rhs.select_mults;
        self.estimate_mults += rhs.estimate_mults;
    }
}
