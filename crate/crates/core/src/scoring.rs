//! Penalty-weighted draft scores and best-draft selection.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reflector::{Issue, IssueType};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoringError {
    #[error("weight for {0} must be a finite non-negative number, got {1}")]
    BadWeight(IssueType, f64),
    #[error("no weight for issue type {0}")]
    MissingWeight(IssueType),
    #[error("the system weight is fixed at 0")]
    SystemWeight,
    #[error("no usable draft to select")]
    NoUsableDraft,
}

/// Non-negative penalty per issue type. `system` always weighs 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<IssueType, f64>", into = "BTreeMap<IssueType, f64>")]
pub struct WeightTable {
    weights: BTreeMap<IssueType, f64>,
}

impl Default for WeightTable {
    fn default() -> Self {
        Self::new([
            (IssueType::Missing, 3.0),
            (IssueType::Contradiction, 3.0),
            (IssueType::Negation, 2.0),
            (IssueType::Laterality, 2.0),
            (IssueType::Localization, 2.0),
            (IssueType::Unsupported, 1.0),
        ])
        .expect("default weights are valid")
    }
}

impl WeightTable {
    /// Every non-system type needs a weight; `system` may be given only as 0.
    pub fn new(weights: impl IntoIterator<Item = (IssueType, f64)>) -> Result<Self, ScoringError> {
        let mut map = BTreeMap::new();
        for (t, w) in weights {
            if t == IssueType::System {
                if w != 0.0 {
                    return Err(ScoringError::SystemWeight);
                }
                continue;
            }
            if !w.is_finite() || w < 0.0 {
                return Err(ScoringError::BadWeight(t, w));
            }
            map.insert(t, w);
        }
        if let Some(t) = IssueType::ALL
            .into_iter()
            .find(|t| *t != IssueType::System && !map.contains_key(t))
        {
            return Err(ScoringError::MissingWeight(t));
        }
        map.insert(IssueType::System, 0.0);
        Ok(Self { weights: map })
    }

    pub fn weight(&self, t: IssueType) -> f64 {
        self.weights[&t]
    }

    /// The same table with every weight multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self, ScoringError> {
        Self::new(self.weights.iter().map(|(t, w)| (*t, w * c)))
    }
}

impl TryFrom<BTreeMap<IssueType, f64>> for WeightTable {
    type Error = ScoringError;

    fn try_from(map: BTreeMap<IssueType, f64>) -> Result<Self, Self::Error> {
        Self::new(map)
    }
}

impl From<WeightTable> for BTreeMap<IssueType, f64> {
    fn from(t: WeightTable) -> Self {
        t.weights
    }
}

/// `-Σ w[type]` over the issues. Summed per type in a fixed order, so the
/// result does not depend on issue order.
pub fn score(issues: &[Issue], weights: &WeightTable) -> f64 {
    let mut counts: BTreeMap<IssueType, usize> = BTreeMap::new();
    for issue in issues {
        *counts.entry(issue.issue_type).or_default() += 1;
    }
    let penalty: f64 = counts
        .into_iter()
        .map(|(t, n)| n as f64 * weights.weight(t))
        .sum();
    0.0 - penalty
}

/// A draft as seen by [`select`]. `issues: None` marks an error draft,
/// which scores −∞.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub pass_index: usize,
    pub issues: Option<&'a [Issue]>,
}

/// Scores closer than this (relative) are ties, so rescaling the weights
/// cannot flip a tie through rounding.
const TIE_TOLERANCE: f64 = 1e-9;

fn same_score(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

/// Position in `candidates` of the best draft: highest score, then fewer
/// issues, then lower pass index.
pub fn select(candidates: &[Candidate<'_>], weights: &WeightTable) -> Result<usize, ScoringError> {
    let mut best: Option<(usize, f64, usize, usize)> = None;
    for (pos, c) in candidates.iter().enumerate() {
        let Some(issues) = c.issues else { continue };
        let s = score(issues, weights);
        let better = match best {
            None => true,
            Some((_, bs, bn, bj)) => {
                if same_score(s, bs) {
                    (issues.len(), c.pass_index) < (bn, bj)
                } else {
                    s > bs
                }
            }
        };
        if better {
            best = Some((pos, s, issues.len(), c.pass_index));
        }
    }
    best.map(|(pos, ..)| pos).ok_or(ScoringError::NoUsableDraft)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn issues(types: &[IssueType]) -> Vec<Issue> {
        types.iter().map(|t| Issue::new(*t, "m")).collect()
    }

    #[test]
    fn score_examples() {
        let w = WeightTable::default();
        assert_eq!(score(&[], &w), 0.0);
        assert_eq!(
            score(&issues(&[IssueType::Missing, IssueType::Unsupported]), &w),
            -4.0
        );
        assert_eq!(score(&issues(&[IssueType::System]), &w), 0.0);
    }

    #[test]
    fn select_examples() {
        let w = WeightTable::default();
        let a = issues(&[IssueType::Missing, IssueType::Unsupported]);
        let b = issues(&[]);
        let c = issues(&[IssueType::Negation]);
        let cands = [
            Candidate { pass_index: 0, issues: Some(&a) },
            Candidate { pass_index: 1, issues: Some(&b) },
            Candidate { pass_index: 2, issues: Some(&c) },
        ];
        assert_eq!(select(&cands, &w), Ok(1));

        let sys = issues(&[IssueType::System]);
        let cands = [
            Candidate { pass_index: 0, issues: Some(&sys) },
            Candidate { pass_index: 1, issues: Some(&b) },
        ];
        assert_eq!(select(&cands, &w), Ok(1));

        let cands = [
            Candidate { pass_index: 0, issues: None },
            Candidate { pass_index: 1, issues: None },
        ];
        assert_eq!(select(&cands, &w), Err(ScoringError::NoUsableDraft));
        assert_eq!(select(&[], &w), Err(ScoringError::NoUsableDraft));

        // error draft loses to any scored draft
        let cands = [
            Candidate { pass_index: 0, issues: None },
            Candidate { pass_index: 1, issues: Some(&a) },
        ];
        assert_eq!(select(&cands, &w), Ok(1));

        // equal score and count: lower pass index
        let cands = [
            Candidate { pass_index: 4, issues: Some(&c) },
            Candidate { pass_index: 2, issues: Some(&c) },
        ];
        assert_eq!(select(&cands, &w), Ok(1));
    }

    #[test]
    fn weight_validation() {
        assert!(matches!(
            WeightTable::new([(IssueType::Missing, 1.0)]),
            Err(ScoringError::MissingWeight(_))
        ));
        let mut full: BTreeMap<IssueType, f64> = WeightTable::default().into();
        full.insert(IssueType::Negation, -1.0);
        assert!(matches!(
            WeightTable::try_from(full.clone()),
            Err(ScoringError::BadWeight(IssueType::Negation, _))
        ));
        full.insert(IssueType::Negation, 2.0);
        full.insert(IssueType::System, 1.0);
        assert_eq!(WeightTable::try_from(full), Err(ScoringError::SystemWeight));
        let parsed: WeightTable = toml::from_str(
            "missing = 5\ncontradiction = 3\nnegation = 2\nlaterality = 2\nlocalization = 2\nunsupported = 0.5\n",
        )
        .unwrap();
        assert_eq!(parsed.weight(IssueType::Missing), 5.0);
        assert_eq!(parsed.weight(IssueType::System), 0.0);
    }

    fn issue_type() -> impl Strategy<Value = IssueType> {
        proptest::sample::select(IssueType::ALL.to_vec())
    }

    fn issue_list() -> impl Strategy<Value = Vec<Issue>> {
        proptest::collection::vec(issue_type(), 0..12)
            .prop_map(|ts| ts.into_iter().map(|t| Issue::new(t, "m")).collect())
    }

    fn weights() -> impl Strategy<Value = WeightTable> {
        proptest::collection::vec(0.0f64..10.0, 6).prop_map(|w| {
            WeightTable::new(
                IssueType::ALL
                    .into_iter()
                    .filter(|t| *t != IssueType::System)
                    .zip(w),
            )
            .unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn permutation_invariant(list in issue_list(), w in weights(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = list.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(score(&list, &w), score(&shuffled, &w));
        }

        #[test]
        fn additive(a in issue_list(), b in issue_list(), w in weights()) {
            let joined: Vec<Issue> = a.iter().chain(&b).cloned().collect();
            let lhs = score(&joined, &w);
            let rhs = score(&a, &w) + score(&b, &w);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }

        #[test]
        fn monotone(list in issue_list(), extra in issue_type(), w in weights()) {
            let mut more = list.clone();
            more.push(Issue::new(extra, "m"));
            prop_assert!(score(&more, &w) <= score(&list, &w));
            if extra == IssueType::System {
                prop_assert_eq!(score(&more, &w), score(&list, &w));
            }
        }

        #[test]
        fn sub_multiset_scores_higher(list in issue_list(), mask in proptest::collection::vec(any::<bool>(), 12), w in weights()) {
            let sub: Vec<Issue> = list.iter().zip(&mask).filter(|(_, k)| **k).map(|(i, _)| i.clone()).collect();
            prop_assert!(score(&sub, &w) >= score(&list, &w));
        }

        #[test]
        fn select_invariant_under_scaling(
            lists in proptest::collection::vec(proptest::option::weighted(0.85, issue_list()), 1..6),
            w in weights(),
            c in 0.001f64..1000.0,
        ) {
            let cands: Vec<Candidate<'_>> = lists
                .iter()
                .enumerate()
                .map(|(j, l)| Candidate { pass_index: j, issues: l.as_deref() })
                .collect();
            prop_assert_eq!(select(&cands, &w), select(&cands, &w.scaled(c).unwrap()));
        }
    }
}
