//! BLEU-4 and ROUGE-L over the shared tokenizer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::token_sequence;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TextError {
    #[error("reference report has no tokens")]
    EmptyReference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextScores {
    pub bleu: f64,
    pub rouge_l: f64,
}

const MAX_ORDER: usize = 4;

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Sentence BLEU with uniform weights up to 4-grams. Orders 2 to 4 use
/// add-one smoothing; unigram precision is unsmoothed.
pub fn bleu_tokens(candidate: &[String], reference: &[String]) -> Result<f64, TextError> {
    if reference.is_empty() {
        return Err(TextError::EmptyReference);
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, c)| (*c).min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln() / MAX_ORDER as f64;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * log_sum.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure.
pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> Result<f64, TextError> {
    if reference.is_empty() {
        return Err(TextError::EmptyReference);
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

pub fn text_metrics(candidate: &str, reference: &str) -> Result<TextScores, TextError> {
    let c = token_sequence(candidate);
    let r = token_sequence(reference);
    Ok(TextScores {
        bleu: bleu_tokens(&c, &r)?,
        rouge_l: rouge_l_tokens(&c, &r)?,
    })
}
