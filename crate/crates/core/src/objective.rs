//! Empirical AUC, its sigmoid-smoothed surrogate, and the episode loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("AUC needs at least one {0} score")]
    EmptyClass(&'static str),
    #[error("scores must be finite")]
    NonFinite,
}

/// Anomaly scores of one episode's query set, split by true label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub anomaly_scores: Vec<f64>,
    pub normal_scores: Vec<f64>,
}

impl EpisodeScore {
    pub fn new(anomaly_scores: Vec<f64>, normal_scores: Vec<f64>) -> Self {
        Self {
            anomaly_scores,
            normal_scores,
        }
    }

    fn validate(&self) -> Result<(), ObjectiveError> {
        if self.anomaly_scores.is_empty() {
            return Err(ObjectiveError::EmptyClass("anomaly"));
        }
        if self.normal_scores.is_empty() {
            return Err(ObjectiveError::EmptyClass("normal"));
        }
        if !self
            .anomaly_scores
            .iter()
            .chain(&self.normal_scores)
            .all(|x| x.is_finite())
        {
            return Err(ObjectiveError::NonFinite);
        }
        Ok(())
    }

    /// The same scores with the classes exchanged.
    pub fn swapped(&self) -> Self {
        Self::new(self.normal_scores.clone(), self.anomaly_scores.clone())
    }
}

/// How an (anomaly, normal) pair with equal scores is counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieRule {
    /// A tie counts as a miss: `I(a > a′)`.
    #[default]
    Strict,
    /// A tie counts one half, as in the Mann–Whitney convention.
    Half,
}

/// Fraction of (anomaly, normal) pairs ranked correctly, ties counted as misses.
pub fn empirical_auc(es: &EpisodeScore) -> Result<f64, ObjectiveError> {
    empirical_auc_with(es, TieRule::Strict)
}

pub fn empirical_auc_with(es: &EpisodeScore, ties: TieRule) -> Result<f64, ObjectiveError> {
    es.validate()?;
    let mut normals = es.normal_scores.clone();
    normals.sort_by(f64::total_cmp);
    let mut hits = 0.0;
    for &a in &es.anomaly_scores {
        let below = normals.partition_point(|&n| n < a);
        hits += below as f64;
        if ties == TieRule::Half {
            let equal = normals[below..].partition_point(|&n| n <= a);
            hits += 0.5 * equal as f64;
        }
    }
    Ok(hits / (es.anomaly_scores.len() * normals.len()) as f64)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean of `σ(a − n)` over all (anomaly, normal) pairs.
pub fn smoothed_auc(es: &EpisodeScore) -> Result<f64, ObjectiveError> {
    es.validate()?;
    let mut total = 0.0;
    for &a in &es.anomaly_scores {
        for &n in &es.normal_scores {
            total += sigmoid(a - n);
        }
    }
    Ok(total / (es.anomaly_scores.len() * es.normal_scores.len()) as f64)
}

/// Negative smoothed AUC.
pub fn episode_loss(es: &EpisodeScore) -> Result<f64, ObjectiveError> {
    smoothed_auc(es).map(|x| -x)
}

/// Smoothed AUC of column-vector score nodes, recorded on `tape`.
pub fn smoothed_auc_on_tape(tape: &mut Tape, anomaly_scores: Var, normal_scores: Var) -> Var {
    let diff = tape.pairwise_diff(anomaly_scores, normal_scores);
    let sig = tape.sigmoid(diff);
    tape.mean(sig)
}

/// Negative smoothed AUC, recorded on `tape`.
pub fn episode_loss_on_tape(tape: &mut Tape, anomaly_scores: Var, normal_scores: Var) -> Var {
    let auc = smoothed_auc_on_tape(tape, anomaly_scores, normal_scores);
    tape.neg(auc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn brute_force(es: &EpisodeScore) -> f64 {
        let mut hits = 0usize;
        for a in &es.anomaly_scores {
            for n in &es.normal_scores {
                if a > n {
                    hits += 1;
                }
            }
        }
        hits as f64 / (es.anomaly_scores.len() * es.normal_scores.len()) as f64
    }

    #[test]
    fn small_hand_example() {
        // pairs (3,2) (3,0) (1,0) are correct, (1,2) is not
        let es = EpisodeScore::new(vec![3.0, 1.0], vec![2.0, 0.0]);
        assert_eq!(empirical_auc(&es).unwrap(), 0.75);
        assert_eq!(brute_force(&es), 0.75);
    }

    #[test]
    fn perfect_and_tied() {
        let es = EpisodeScore::new(vec![5.0, 6.0], vec![1.0, 2.0, 3.0]);
        assert_eq!(empirical_auc(&es).unwrap(), 1.0);
        let tied = EpisodeScore::new(vec![2.0; 3], vec![2.0; 4]);
        assert_eq!(empirical_auc(&tied).unwrap(), 0.0);
        assert_eq!(empirical_auc_with(&tied, TieRule::Half).unwrap(), 0.5);
        assert_eq!(smoothed_auc(&tied).unwrap(), 0.5);
        assert_eq!(episode_loss(&tied).unwrap(), -0.5);
    }

    #[test]
    fn smoothed_single_pair() {
        let es = EpisodeScore::new(vec![1.0], vec![0.0]);
        assert!((smoothed_auc(&es).unwrap() - 0.731_058_578_6).abs() < 1e-10);
        let far = EpisodeScore::new(vec![1e3], vec![0.0]);
        assert_eq!(smoothed_auc(&far).unwrap(), 1.0);
        assert_eq!(episode_loss(&far).unwrap(), -1.0);
    }

    #[test]
    fn empty_class_rejected() {
        let es = EpisodeScore::new(vec![], vec![1.0]);
        assert_eq!(empirical_auc(&es), Err(ObjectiveError::EmptyClass("anomaly")));
        let es = EpisodeScore::new(vec![1.0], vec![]);
        assert_eq!(smoothed_auc(&es), Err(ObjectiveError::EmptyClass("normal")));
    }

    #[test]
    fn loss_gradient_sign_on_anomaly_scores() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::column_vector(&[0.3, -1.0, 2.0]));
        let n = tape.leaf(Matrix::column_vector(&[0.0, 0.5]));
        let loss = episode_loss_on_tape(&mut tape, a, n);
        let es = EpisodeScore::new(vec![0.3, -1.0, 2.0], vec![0.0, 0.5]);
        assert!((tape.scalar(loss) - episode_loss(&es).unwrap()).abs() < 1e-15);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&x| x <= 0.0));
        assert!(g.get(n).unwrap().data().iter().all(|&x| x >= 0.0));
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            a in prop::collection::vec(-3i32..3, 1..12),
            n in prop::collection::vec(-3i32..3, 1..12),
        ) {
            // small integer range forces plenty of ties
            let es = EpisodeScore::new(
                a.iter().map(|&x| x as f64).collect(),
                n.iter().map(|&x| x as f64).collect(),
            );
            prop_assert_eq!(empirical_auc(&es).unwrap(), brute_force(&es));
        }

        #[test]
        fn smoothed_is_antisymmetric_under_class_swap(
            a in prop::collection::vec(-5.0f64..5.0, 1..10),
            n in prop::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let es = EpisodeScore::new(a, n);
            let total = smoothed_auc(&es).unwrap() + smoothed_auc(&es.swapped()).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn empirical_invariant_under_increasing_maps(
            a in prop::collection::vec(-5.0f64..5.0, 1..10),
            n in prop::collection::vec(-5.0f64..5.0, 1..10),
        ) {
            let es = EpisodeScore::new(a, n);
            let f = |x: f64| (0.5 * x).exp() * 3.0 + x.powi(3);
            let mapped = EpisodeScore::new(
                es.anomaly_scores.iter().map(|&x| f(x)).collect(),
                es.normal_scores.iter().map(|&x| f(x)).collect(),
            );
            prop_assert_eq!(empirical_auc(&es).unwrap(), empirical_auc(&mapped).unwrap());
        }
    }
}
