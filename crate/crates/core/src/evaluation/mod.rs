//! Decoding and scoring: batched beam search over the incremental decoder,
//! corpus BLEU, off-target rate, in-target BLEU, and pooled representation
//! export with similarity statistics.

mod beam;
mod metrics;
mod repr;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use beam::{beam_search, greedy_search, length_penalized, log_softmax, Hypothesis, StepScorer};
pub use metrics::{corpus_bleu, in_target_bleu, is_in_target, off_target_rate, InTargetResult};
pub use repr::{
    cosine, export_representations, parse_export, render_export, summarize, ProbeSentence, ReprRow,
    Tap, TapSummary, EXPORT_HEADER,
};

use crate::autodiff::Real;
use crate::corpus::{Corpus, Direction, Role, Split, Vocab, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{DecoderCache, EncoderFeed, Model};
use crate::transformer::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam: usize,
    pub length_penalty: f64,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn new(beam: usize, length_penalty: f64, max_len: usize) -> Result<Self> {
        let c = DecodeConfig {
            beam,
            length_penalty,
            max_len,
        };
        c.validate()?;
        Ok(c)
    }

    /// Beam 5, length penalty 1.
    pub fn standard(max_len: usize) -> Self {
        DecodeConfig {
            beam: 5,
            length_penalty: 1.0,
            max_len,
        }
    }

    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam: 1,
            length_penalty: 1.0,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 || self.max_len == 0 || !(self.length_penalty >= 0.0) {
            return Err(Error::Config(format!(
                "need beam >= 1, max_len >= 1, length penalty >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Scores rows with the model's incremental decoder.
pub struct ModelScorer<'a, T: Real> {
    model: &'a Model<T>,
    feed: EncoderFeed<T>,
    cache: DecoderCache<T>,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, sources: &[Vec<usize>]) -> Result<Self> {
        if sources.is_empty() || sources.iter().any(Vec::is_empty) {
            return Err(Error::Eval("empty source".into()));
        }
        let feed = model.encoder_feed(&TokenBatch::from_rows(sources, PAD))?;
        let cache = model.start_cache(&feed)?;
        Ok(ModelScorer { model, feed, cache })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn step(&mut self, inputs: &[usize]) -> Result<Vec<Vec<f64>>> {
        let states = self
            .model
            .decode_step(&mut self.cache, inputs, &self.feed)?;
        let logits = self.model.logits_from_states(&states)?.to_f64_vec();
        let v = self.model.config.vocab_size;
        Ok(logits.chunks(v).map(log_softmax).collect())
    }

    fn select_rows(&mut self, rows: &[usize]) -> Result<()> {
        self.cache = self.cache.select_rows(rows);
        Ok(())
    }
}

const DECODE_CHUNK: usize = 32;

/// Translates tagged source id sequences into `tgt_tag`'s language.
/// Returns output ids without the end-of-sentence token.
pub fn translate<T: Real>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    tgt_tag: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<usize>>> {
    Ok(translate_scored(model, sources, tgt_tag, cfg)?
        .into_iter()
        .map(|h| h.tokens)
        .collect())
}

pub fn translate_scored<T: Real>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    tgt_tag: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if sources.iter().any(Vec::is_empty) {
        return Err(Error::Eval("empty source".into()));
    }
    let max_len = cfg.max_len.min(model.config.max_len);
    // similar lengths share a batch
    let mut order: Vec<usize> = (0..sources.len()).collect();
    order.sort_by_key(|&i| (sources[i].len(), i));
    let mut out: Vec<Option<Hypothesis>> = vec![None; sources.len()];
    for chunk in order.chunks(DECODE_CHUNK) {
        let srcs: Vec<Vec<usize>> = chunk.iter().map(|&i| sources[i].clone()).collect();
        let mut scorer = ModelScorer::new(model, &srcs)?;
        let starts = vec![tgt_tag; srcs.len()];
        let hyps = if cfg.beam == 1 {
            greedy_search(&mut scorer, &starts, EOS, cfg.length_penalty, max_len)?
        } else {
            beam_search(
                &mut scorer,
                &starts,
                EOS,
                cfg.beam,
                cfg.length_penalty,
                max_len,
            )?
        };
        for (&i, h) in chunk.iter().zip(hyps) {
            out[i] = Some(h);
        }
    }
    Ok(out
        .into_iter()
        .map(|h| h.expect("every source decoded"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: String,
    pub role: Role,
    pub bleu: f64,
    pub off_target_rate: f64,
    pub sentences: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InTargetRow {
    pub direction: String,
    pub subset_size: usize,
    pub sentences: usize,
    /// This system first, then the comparison systems.
    pub bleu: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    pub directions: Vec<DirectionScore>,
    pub supervised_average: Option<f64>,
    pub zero_shot_average: Option<f64>,
    pub supervised_off_target: Option<f64>,
    pub zero_shot_off_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_target: Option<Vec<InTargetRow>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<Vec<TapSummary>>,
}

fn mean_of<'a>(
    rows: impl Iterator<Item = &'a DirectionScore>,
    f: fn(&DirectionScore) -> f64,
) -> Option<f64> {
    let v: Vec<f64> = rows.map(f).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl EvalReport {
    /// Aggregates are plain means of the rows, in row order.
    pub fn from_rows(directions: Vec<DirectionScore>) -> Self {
        let of = |role: Role| directions.iter().filter(move |d| d.role == role);
        EvalReport {
            config_digest: None,
            supervised_average: mean_of(of(Role::Supervised), |d| d.bleu),
            zero_shot_average: mean_of(of(Role::ZeroShot), |d| d.bleu),
            supervised_off_target: mean_of(of(Role::Supervised), |d| d.off_target_rate),
            zero_shot_off_target: mean_of(of(Role::ZeroShot), |d| d.off_target_rate),
            directions,
            in_target: None,
            similarity: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "evaluation report",
            detail: e.to_string(),
        })
    }
}

/// Hypotheses of one system, keyed by direction, as surface tokens.
pub type SystemOutputs = BTreeMap<Direction, Vec<Vec<String>>>;

/// Scores hypotheses against a corpus split.
pub fn score_outputs(corpus: &Corpus, split: Split, outputs: &SystemOutputs) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for d in corpus.split(split) {
        let Some(hyps) = outputs.get(&d.direction) else {
            continue;
        };
        if hyps.len() != d.tgt.len() {
            return Err(Error::Eval(format!(
                "{}: {} hypotheses for {} references",
                d.direction,
                hyps.len(),
                d.tgt.len()
            )));
        }
        rows.push(DirectionScore {
            direction: d.direction.to_string(),
            role: d.role,
            bleu: corpus_bleu(hyps, &d.tgt)?,
            off_target_rate: off_target_rate(hyps, d.direction.tgt, &corpus.languages),
            sentences: hyps.len(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Eval("no direction has hypotheses".into()));
    }
    Ok(EvalReport::from_rows(rows))
}

/// Adds the in-target block comparing `outputs` with other systems.
pub fn add_in_target(
    report: &mut EvalReport,
    corpus: &Corpus,
    split: Split,
    outputs: &SystemOutputs,
    others: &[SystemOutputs],
) -> Result<()> {
    let mut rows = Vec::new();
    for d in corpus.split(split) {
        let Some(mine) = outputs.get(&d.direction) else {
            continue;
        };
        let mut systems = vec![mine.clone()];
        for o in others {
            systems.push(
                o.get(&d.direction)
                    .ok_or_else(|| Error::Eval(format!("comparison system lacks {}", d.direction)))?
                    .clone(),
            );
        }
        let r = in_target_bleu(&systems, &d.tgt, d.direction.tgt, &corpus.languages)?;
        rows.push(InTargetRow {
            direction: d.direction.to_string(),
            subset_size: r.subset.len(),
            sentences: d.tgt.len(),
            bleu: r.bleu,
        });
    }
    report.in_target = Some(rows);
    Ok(())
}

/// Decodes every direction of `split`.
pub fn translate_split<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    split: Split,
    cfg: &DecodeConfig,
) -> Result<SystemOutputs> {
    let mut out = BTreeMap::new();
    for d in corpus.split(split) {
        let sources = d
            .src
            .iter()
            .map(|s| {
                let mut ids = vec![vocab.lang_tag(d.direction.src)];
                ids.extend(vocab.encode(s)?);
                Ok(ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let hyps = translate(model, &sources, vocab.lang_tag(d.direction.tgt), cfg)?;
        out.insert(d.direction, hyps.iter().map(|h| vocab.decode(h)).collect());
        log::info!("decoded {}", d.direction);
    }
    Ok(out)
}

/// Translates and scores a split in one go.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    split: Split,
    cfg: &DecodeConfig,
) -> Result<(EvalReport, SystemOutputs)> {
    let outputs = translate_split(model, corpus, vocab, split, cfg)?;
    let mut report = score_outputs(corpus, split, &outputs)?;
    report.config_digest = Some(model.config.digest_hex());
    Ok((report, outputs))
}

/// Both sides of the first `per_direction` pairs of every direction in
/// `split`; each pair is its own group.
pub fn probe_sentences(
    corpus: &Corpus,
    vocab: &Vocab,
    split: Split,
    per_direction: usize,
) -> Result<Vec<ProbeSentence>> {
    let mut out = Vec::new();
    let mut group = 0;
    for d in corpus.split(split) {
        for (s, t) in d.src.iter().zip(&d.tgt).take(per_direction) {
            for (lang, toks) in [(d.direction.src, s), (d.direction.tgt, t)] {
                let mut ids = vec![vocab.lang_tag(lang)];
                ids.extend(vocab.encode(toks)?);
                out.push(ProbeSentence { group, lang, ids });
            }
            group += 1;
        }
    }
    Ok(out)
}
