use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::LanguageSpec;
use crate::error::{Error, Result};

fn ngram_counts<T: Eq + Hash>(s: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 in [0, 100]: pooled clipped n-gram precisions,
/// uniform weights, brevity penalty, no smoothing.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Eval("BLEU of an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Eval(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hyps.iter().zip(refs) {
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let rc = ngram_counts(rf, n);
            for (g, k) in ngram_counts(h, n) {
                matched[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if matched.iter().any(|&m| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = (1.0 - r as f64 / c as f64).min(0.0);
    Ok(100.0 * (bp + log_p).exp())
}

/// Strict majority of tokens belong to `tgt`. Empty output is off-target.
pub fn is_in_target(tokens: &[String], tgt: usize, langs: &[LanguageSpec]) -> bool {
    let content: Vec<&String> = tokens.iter().filter(|t| !is_special_token(t)).collect();
    let own = content.iter().filter(|t| langs[tgt].owns(t)).count();
    2 * own > content.len()
}

fn is_special_token(t: &str) -> bool {
    t.starts_with('<') && t.ends_with('>')
}

/// Fraction of off-target hypotheses; 0 for an empty set.
pub fn off_target_rate(hyps: &[Vec<String>], tgt: usize, langs: &[LanguageSpec]) -> f64 {
    if hyps.is_empty() {
        return 0.0;
    }
    let off = hyps.iter().filter(|h| !is_in_target(h, tgt, langs)).count();
    off as f64 / hyps.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InTargetResult {
    /// Sentence indices where every system is in-target.
    pub subset: Vec<usize>,
    /// Per system; `None` when the subset is empty.
    pub bleu: Vec<Option<f64>>,
}

/// BLEU of each system restricted to the sentences that all systems put in
/// the target language.
pub fn in_target_bleu(
    systems: &[Vec<Vec<String>>],
    refs: &[Vec<String>],
    tgt: usize,
    langs: &[LanguageSpec],
) -> Result<InTargetResult> {
    if systems.len() < 2 {
        return Err(Error::Eval(
            "in-target comparison needs two or more systems".into(),
        ));
    }
    if let Some(s) = systems.iter().find(|s| s.len() != refs.len()) {
        return Err(Error::Eval(format!(
            "system has {} outputs for {} references",
            s.len(),
            refs.len()
        )));
    }
    let subset: Vec<usize> = (0..refs.len())
        .filter(|&i| systems.iter().all(|s| is_in_target(&s[i], tgt, langs)))
        .collect();
    let sub_refs: Vec<Vec<String>> = subset.iter().map(|&i| refs[i].clone()).collect();
    let bleu = systems
        .iter()
        .map(|s| {
            if subset.is_empty() {
                return Ok(None);
            }
            let hyps: Vec<Vec<String>> = subset.iter().map(|&i| s[i].clone()).collect();
            corpus_bleu(&hyps, &sub_refs).map(Some)
        })
        .collect::<Result<_>>()?;
    if subset.is_empty() {
        log::warn!("no sentence is in-target for every system");
    }
    Ok(InTargetResult { subset, bleu })
}
