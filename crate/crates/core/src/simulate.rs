//! Seeded Monte-Carlo of best-of-k selection under a per-pass error model.
//!
//! Each trial draws `k_max` candidates; candidate `j` carries an issue of
//! type `t` with probability `p[t]`, independently. For every `k` the best
//! of the first `k` candidates is selected with the real scoring rule, so
//! curves are nested within a trial.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::reflector::{Issue, IssueType};
use crate::scoring::{score, select, Candidate, WeightTable};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("cannot read error model: {0}")]
    Io(String),
    #[error("error model is not a JSON object of probabilities: {0}")]
    Parse(String),
    #[error("probability for {0} must be in [0, 1], got {1}")]
    BadProbability(IssueType, f64),
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("k_max must be at least 1")]
    NoPasses,
}

/// Per-pass occurrence probability of each issue type.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorModel {
    probabilities: BTreeMap<IssueType, f64>,
}

impl ErrorModel {
    pub fn new(probabilities: BTreeMap<IssueType, f64>) -> Result<Self, SimError> {
        for (t, p) in &probabilities {
            if !(0.0..=1.0).contains(p) {
                return Err(SimError::BadProbability(*t, *p));
            }
        }
        Ok(Self { probabilities })
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let map: BTreeMap<IssueType, f64> =
            serde_json::from_str(text).map_err(|e| SimError::Parse(e.to_string()))?;
        Self::new(map)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn draw(&self, rng: &mut impl Rng) -> Vec<Issue> {
        self.probabilities
            .iter()
            .filter(|(_, p)| rng.random_bool(**p))
            .map(|(t, _)| Issue::new(*t, "simulated"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimRow {
    pub k: usize,
    pub mean_best_score: f64,
    /// Share of trials whose selected candidate has no localization issue.
    pub localization_proxy: f64,
}

pub fn simulate(
    model: &ErrorModel,
    weights: &WeightTable,
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<SimRow>, SimError> {
    if trials == 0 {
        return Err(SimError::NoTrials);
    }
    if k_max == 0 {
        return Err(SimError::NoPasses);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut score_sum = vec![0.0; k_max];
    let mut localized = vec![0usize; k_max];
    for _ in 0..trials {
        let pool: Vec<Vec<Issue>> = (0..k_max).map(|_| model.draw(&mut rng)).collect();
        let candidates: Vec<Candidate<'_>> = pool
            .iter()
            .enumerate()
            .map(|(j, issues)| Candidate {
                pass_index: j,
                issues: Some(issues),
            })
            .collect();
        for k in 1..=k_max {
            let pos = select(&candidates[..k], weights).expect("all candidates usable");
            score_sum[k - 1] += score(&pool[pos], weights);
            if pool[pos].iter().all(|i| i.issue_type != IssueType::Localization) {
                localized[k - 1] += 1;
            }
        }
    }
    Ok((0..k_max)
        .map(|i| SimRow {
            k: i + 1,
            mean_best_score: score_sum[i] / trials as f64,
            localization_proxy: localized[i] as f64 / trials as f64,
        })
        .collect())
}

pub fn write_csv(rows: &[SimRow], out: impl std::io::Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
