use serde::{Deserialize, Serialize};

use crate::corpus::NUM_CLASSES;
use crate::error::{invalid, Result};

/// Counts indexed `[reference][prediction]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut cm = Self::new();
        for (t, p) in pairs {
            cm.add(t, p)?;
        }
        Ok(cm)
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(invalid(format!("class index out of range: ({truth}, {pred})")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (r, o) in self.counts.iter_mut().zip(&other.counts) {
            for (a, b) in r.iter_mut().zip(o) {
                *a += b;
            }
        }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Mean of per-class recalls; every class needs support.
    pub fn uar(&self) -> Result<f64> {
        let mut sum = 0.0;
        for c in 0..NUM_CLASSES {
            let s = self.support(c);
            if s == 0 {
                return Err(invalid(format!("class {c} has no support; UAR undefined")));
            }
            sum += self.counts[c][c] as f64 / s as f64;
        }
        Ok(sum / NUM_CLASSES as f64)
    }

    /// Overall accuracy.
    pub fn war(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(invalid("empty confusion matrix"));
        }
        Ok(self.correct() as f64 / n as f64)
    }
}
