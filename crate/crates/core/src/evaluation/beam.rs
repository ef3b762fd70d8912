use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Supplies next-token log-probabilities for a set of decoding rows.
pub trait StepScorer {
    /// Feeds one token per row and returns `[rows][vocab]` log-probabilities
    /// of the token that follows.
    fn step(&mut self, inputs: &[usize]) -> Result<Vec<Vec<f64>>>;

    /// Keeps the given rows, in order; indices may repeat.
    fn select_rows(&mut self, rows: &[usize]) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Output tokens, end-of-sentence excluded.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    /// Tokens emitted, end-of-sentence included.
    pub length: usize,
    pub score: f64,
    pub ended: bool,
}

pub fn length_penalized(logprob: f64, length: usize, alpha: f64) -> f64 {
    logprob / (length as f64).powf(alpha)
}

/// Higher score first, then the lexicographically smaller output.
fn better(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

struct Live {
    row: usize,
    tokens: Vec<usize>,
    logprob: f64,
}

/// Batched beam search. The scorer starts with one row per sentence;
/// `starts[i]` is the first input of sentence `i`.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    starts: &[usize],
    eos: usize,
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 || max_len == 0 || !(alpha >= 0.0) {
        return Err(Error::Config(format!(
            "need beam >= 1, max_len >= 1, penalty >= 0; got {beam}, {max_len}, {alpha}"
        )));
    }
    let n = starts.len();
    let mut live: Vec<Vec<Live>> = (0..n)
        .map(|i| {
            vec![Live {
                row: i,
                tokens: Vec::new(),
                logprob: 0.0,
            }]
        })
        .collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); n];
    for t in 1..=max_len {
        let mut inputs = Vec::new();
        for (i, hyps) in live.iter().enumerate() {
            inputs.extend(hyps.iter().map(|h| *h.tokens.last().unwrap_or(&starts[i])));
        }
        if inputs.is_empty() {
            break;
        }
        let lp = scorer.step(&inputs)?;
        if lp.len() != inputs.len() {
            return Err(Error::Eval(format!(
                "scorer returned {} rows for {}",
                lp.len(),
                inputs.len()
            )));
        }
        let mut keep = Vec::new();
        for i in 0..n {
            let hyps = std::mem::take(&mut live[i]);
            if hyps.is_empty() {
                continue;
            }
            // (logprob, parent, token); equal-length candidates rank by raw logprob
            let mut cand: Vec<(f64, usize, usize)> = Vec::new();
            for (h, hyp) in hyps.iter().enumerate() {
                let row = &lp[hyp.row];
                cand.extend(
                    row.iter()
                        .enumerate()
                        .map(|(w, &l)| (hyp.logprob + l, h, w)),
                );
            }
            cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cand.truncate(beam);
            for (logprob, h, w) in cand {
                let parent = &hyps[h];
                if w == eos || t == max_len {
                    let mut tokens = parent.tokens.clone();
                    if w != eos {
                        tokens.push(w);
                    }
                    finished[i].push(Hypothesis {
                        tokens,
                        logprob,
                        length: t,
                        score: length_penalized(logprob, t, alpha),
                        ended: w == eos,
                    });
                } else {
                    let mut tokens = parent.tokens.clone();
                    tokens.push(w);
                    live[i].push(Live {
                        row: keep.len(),
                        tokens,
                        logprob,
                    });
                    keep.push(parent.row);
                }
            }
            if finished[i].len() >= beam {
                keep.truncate(keep.len() - live[i].len());
                live[i].clear();
            }
        }
        if keep.is_empty() {
            break;
        }
        scorer.select_rows(&keep)?;
    }
    finished
        .into_iter()
        .map(|mut f| {
            f.sort_by(better);
            f.into_iter()
                .next()
                .ok_or_else(|| Error::Eval("beam search produced no hypothesis".into()))
        })
        .collect()
}

/// Argmax decoding, ties to the lower token id.
pub fn greedy_search<S: StepScorer>(
    scorer: &mut S,
    starts: &[usize],
    eos: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    let n = starts.len();
    let mut out: Vec<Hypothesis> = (0..n)
        .map(|_| Hypothesis {
            tokens: Vec::new(),
            logprob: 0.0,
            length: 0,
            score: 0.0,
            ended: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..n).collect();
    let mut inputs = starts.to_vec();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let lp = scorer.step(&inputs)?;
        let mut still = Vec::new();
        let mut rows = Vec::new();
        let mut next = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let (mut best, mut best_lp) = (0, f64::NEG_INFINITY);
            for (w, &l) in lp[r].iter().enumerate() {
                if l > best_lp {
                    best = w;
                    best_lp = l;
                }
            }
            let h = &mut out[i];
            h.logprob += best_lp;
            h.length += 1;
            if best == eos {
                h.ended = true;
            } else {
                h.tokens.push(best);
                still.push(i);
                rows.push(r);
                next.push(best);
            }
        }
        active = still;
        inputs = next;
        if !rows.is_empty() {
            scorer.select_rows(&rows)?;
        }
    }
    for h in &mut out {
        h.score = length_penalized(h.logprob, h.length, alpha);
    }
    Ok(out)
}

/// Log-softmax of one row of logits.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}
