//! Training-free Task-ID prediction by cosine similarity to stored prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::metrics::AccuracyMatrix;
use crate::prototype::{DomainPrototypeSet, Granularity, PrototypeKind};
use crate::util::{argmax, cosine};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskIdPrediction {
    /// Position of the winning set in the candidate list.
    pub position: usize,
    /// Domain index stored in the winning set.
    pub domain: usize,
    /// Best score per candidate set.
    pub scores: Vec<f64>,
    /// Best-matching category within the winning set (0 at domain
    /// granularity).
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discriminator {
    pub kind: PrototypeKind,
    pub granularity: Granularity,
}

impl Default for Discriminator {
    fn default() -> Self {
        Self {
            kind: PrototypeKind::Combined,
            granularity: Granularity::Category,
        }
    }
}

impl Discriminator {
    /// Per-set best cosine and the category achieving it.
    fn best(&self, feature: &[f64], set: &DomainPrototypeSet) -> (f64, usize) {
        match self.granularity {
            Granularity::Category => {
                let scores: Vec<f64> = set.vectors(self.kind).iter().map(|p| cosine(feature, p)).collect();
                let j = argmax(&scores);
                (scores[j], j)
            }
            Granularity::Domain => (cosine(feature, &set.domain_prototype(self.kind)), 0),
        }
    }

    /// Argmax over candidate sets of their best score; ties go to the lower
    /// position.
    pub fn predict(&self, feature: &[f64], sets: &[&DomainPrototypeSet]) -> Result<TaskIdPrediction> {
        contract!(!sets.is_empty(), "Task-ID prediction needs at least one seen domain");
        let best: Vec<(f64, usize)> = sets.iter().map(|s| self.best(feature, s)).collect();
        let scores: Vec<f64> = best.iter().map(|b| b.0).collect();
        let position = argmax(&scores);
        Ok(TaskIdPrediction {
            position,
            domain: sets[position].domain,
            category: best[position].1,
            scores,
        })
    }

    /// Lower-triangular Task-ID accuracy: entry `[u][n]` (n <= u) is the
    /// fraction of dataset `n` test images assigned to `n` when the first
    /// `u + 1` sets are registered. `test_features[n]` are the frozen test
    /// features of dataset `n`, both lists in task order.
    pub fn accuracy_matrix(
        &self,
        columns: Vec<String>,
        sets: &[DomainPrototypeSet],
        test_features: &[Vec<Vec<f64>>],
    ) -> Result<AccuracyMatrix> {
        let n = sets.len();
        contract!(test_features.len() == n, "{} test sets for {n} domains", test_features.len());
        let mut values = vec![vec![0.0; n]; n];
        let all: Vec<&DomainPrototypeSet> = sets.iter().collect();
        for u in 0..n {
            for (k, feats) in test_features.iter().enumerate().take(u + 1) {
                contract!(!feats.is_empty(), "dataset {k} has no test images");
                let mut correct = 0usize;
                for f in feats {
                    if self.predict(f, &all[..=u])?.position == k {
                        correct += 1;
                    }
                }
                values[u][k] = correct as f64 / feats.len() as f64;
            }
        }
        AccuracyMatrix::new(columns, values)
    }
}
