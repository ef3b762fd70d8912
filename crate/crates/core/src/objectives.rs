//! Training losses: label-smoothed cross entropy, the semantic and
//! language contrastive losses over pooled branch outputs, the
//! reconstruction constraint, and their composition.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::error::{Error, Result};
use crate::transformer::TokenBatch;

/// Which contrastive objective a sample feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Semantic,
    Language,
}

/// Indices into the batch's sentence list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub kind: SampleKind,
}

/// Sentence bookkeeping for in-batch sampling.
///
/// Sentences `0..n` are the sources and `n..2n` the targets, so sentence
/// `i` and `i + n` form a parallel pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLayout {
    pub langs: Vec<usize>,
}

impl PairLayout {
    pub fn new(src_langs: &[usize], tgt_langs: &[usize]) -> Result<Self> {
        if src_langs.len() != tgt_langs.len() {
            return Err(Error::Corpus(format!(
                "{} source languages for {} targets",
                src_langs.len(),
                tgt_langs.len()
            )));
        }
        Ok(PairLayout {
            langs: src_langs.iter().chain(tgt_langs).copied().collect(),
        })
    }

    pub fn n_pairs(&self) -> usize {
        self.langs.len() / 2
    }

    pub fn partner(&self, i: usize) -> usize {
        let n = self.n_pairs();
        if i < n {
            i + n
        } else {
            i - n
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Samples {
    pub semantic: Vec<PairSample>,
    pub language: Vec<PairSample>,
    /// Anchors with no other sentence of their language in the batch.
    pub language_skipped: usize,
}

/// Draws one semantic and (when possible) one language sample per source
/// sentence.
///
/// The semantic negative is any sentence other than the anchor and its
/// partner, in any language. The language positive is another sentence of
/// the anchor's language from either side of the batch, the language
/// negative any sentence in a different language.
pub fn sample_pairs<R: Rng + ?Sized>(layout: &PairLayout, rng: &mut R) -> Result<Samples> {
    let n = layout.n_pairs();
    if n < 2 {
        return Err(Error::Corpus(format!(
            "in-batch sampling needs at least 2 pairs, got {n}"
        )));
    }
    let total = 2 * n;
    let mut out = Samples::default();
    for a in 0..n {
        let partner = layout.partner(a);
        let lang = layout.langs[a];

        let others: Vec<usize> = (0..total).filter(|&j| j != a && j != partner).collect();
        let negative = others[rng.gen_range(0..others.len())];
        out.semantic.push(PairSample {
            anchor: a,
            positive: partner,
            negative,
            kind: SampleKind::Semantic,
        });

        let same: Vec<usize> = (0..total)
            .filter(|&j| j != a && layout.langs[j] == lang)
            .collect();
        let diff: Vec<usize> = (0..total).filter(|&j| layout.langs[j] != lang).collect();
        if same.is_empty() || diff.is_empty() {
            out.language_skipped += 1;
            continue;
        }
        let positive = same[rng.gen_range(0..same.len())];
        let negative = diff[rng.gen_range(0..diff.len())];
        out.language.push(PairSample {
            anchor: a,
            positive,
            negative,
            kind: SampleKind::Language,
        });
    }
    Ok(out)
}

/// Mean over unmasked positions: `states [B, T, D]`, `mask [B, T]` → `[B, D]`.
pub fn pool<T: Real>(g: &mut Graph<T>, states: Var, mask: &Tensor<T>) -> Result<Var> {
    Ok(g.masked_mean(states, mask, 1)?)
}

/// Batch mean of unmasked lengths.
pub fn average_length(batch: &TokenBatch) -> f64 {
    let total: usize = (0..batch.batch).map(|r| batch.row_len(r)).sum();
    total as f64 / batch.batch as f64
}

fn contrastive<T: Real>(
    g: &mut Graph<T>,
    reprs: Var,
    samples: &[PairSample],
    lambda2: f64,
) -> Result<Var> {
    let pick = |f: fn(&PairSample) -> usize| samples.iter().map(f).collect::<Vec<_>>();
    let anchors = g.index_select(reprs, &pick(|s| s.anchor))?;
    let pos = g.index_select(reprs, &pick(|s| s.positive))?;
    let neg = g.index_select(reprs, &pick(|s| s.negative))?;
    let cos_pos = g.cosine_similarity(anchors, pos)?;
    let cos_neg = g.cosine_similarity(anchors, neg)?;
    let mp = g.mean(cos_pos)?;
    let mn = g.mean(cos_neg)?;
    // (1 - mean cos+) + λ2 (1 + mean cos-)
    let pos_term = g.scale(mp, T::lit(-1.0));
    let pos_term = g.add_scalar(pos_term, T::one());
    let neg_term = g.add_scalar(mn, T::one());
    let neg_term = g.scale(neg_term, T::lit(lambda2));
    Ok(g.add(pos_term, neg_term)?)
}

/// Pulls parallel pairs together and pushes random pairs apart, over
/// pooled semantic-branch outputs `[N, D]`.
pub fn semantic_loss<T: Real>(
    g: &mut Graph<T>,
    reprs: Var,
    samples: &[PairSample],
    lambda2: f64,
) -> Result<Var> {
    if samples.is_empty() {
        return Err(TensorError::EmptyAxis {
            op: "semantic-loss",
            axis: 0,
        }
        .into());
    }
    contrastive(g, reprs, samples, lambda2)
}

/// Same form as [`semantic_loss`] over pooled language-branch outputs.
/// With no usable samples the term is a constant zero.
pub fn language_loss<T: Real>(
    g: &mut Graph<T>,
    reprs: Var,
    samples: &[PairSample],
    lambda2: f64,
) -> Result<Var> {
    if samples.is_empty() {
        log::warn!("no same-language partners in batch; language loss is 0");
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    contrastive(g, reprs, samples, lambda2)
}

/// Per sentence, the L2 norm of `h - h_sem - h_lang` over unmasked
/// positions and all features, divided by `d_avg`; averaged over the batch.
pub fn reconstruction_loss<T: Real>(
    g: &mut Graph<T>,
    h: Var,
    h_sem: Var,
    h_lang: Var,
    mask: &Tensor<T>,
    d_avg: f64,
) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 || mask.shape() != &shape[..2] {
        return Err(TensorError::Shape {
            op: "reconstruction",
            shapes: vec![shape, mask.shape().to_vec()],
        }
        .into());
    }
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    let r = g.sub(h, h_sem)?;
    let r = g.sub(r, h_lang)?;
    let full_mask: Vec<T> = mask
        .data()
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(d))
        .collect();
    let m = g.constant(Tensor::new(vec![b, t, d], full_mask)?);
    let r = g.mul(r, m)?;
    let r = g.reshape(r, &[b, t * d])?;
    let norms = g.l2_norm(r)?;
    let norms = g.scale(norms, T::lit(1.0 / d_avg));
    Ok(g.mean(norms)?)
}

/// Label-smoothed token-level cross entropy over unmasked gold positions.
pub fn cross_entropy<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    gold: &TokenBatch,
    smoothing: f64,
) -> Result<Var> {
    let weights: Vec<T> = gold
        .valid
        .iter()
        .map(|&v| if v { T::one() } else { T::zero() })
        .collect();
    Ok(g.cross_entropy(logits, &gold.ids, &weights, smoothing)?)
}

/// One step's loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ce: f64,
    pub l_sem: f64,
    pub l_lang: f64,
    pub l_recons: f64,
    pub l_det: f64,
    pub l_joint: f64,
    pub d_avg: f64,
}

fn det_sum(l_sem: f64, l_lang: f64, l_recons: f64, lambda1: f64) -> f64 {
    l_sem + (l_lang + lambda1 * l_recons)
}

fn joint_sum(l_ce: f64, l_det: f64, d_avg: f64, lambda: f64) -> f64 {
    l_ce + (lambda * d_avg) * l_det
}

impl LossBreakdown {
    /// Exact recomposition of `l_det` and `l_joint` from the components.
    pub fn identities_hold(&self, w: &JointWeights) -> bool {
        if !w.use_det_loss {
            return self.l_det == 0.0 && self.l_joint == self.l_ce;
        }
        let det = det_sum(self.l_sem, self.l_lang, self.l_recons, w.lambda1);
        det == self.l_det && joint_sum(self.l_ce, det, self.d_avg, w.lambda) == self.l_joint
    }

    pub fn all_finite(&self) -> bool {
        [
            self.l_ce,
            self.l_sem,
            self.l_lang,
            self.l_recons,
            self.l_det,
            self.l_joint,
            self.d_avg,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weights of the composed objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointWeights {
    pub lambda: f64,
    pub lambda1: f64,
    pub use_det_loss: bool,
}

impl JointWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda1 >= 0.0) {
            return Err(Error::Config(format!(
                "negative loss weight: lambda {} lambda1 {}",
                self.lambda, self.lambda1
            )));
        }
        Ok(())
    }
}

/// `l_det = l_sem + l_lang + λ1·l_recons`,
/// `l_joint = l_ce + λ·d_avg·l_det`; without the disentangling loss
/// `l_det` is 0 and `l_joint = l_ce`.
///
/// Floating-point association is fixed as `l_sem + (l_lang + λ1·l_recons)`
/// and `l_ce + (λ·d_avg)·l_det`; [`LossBreakdown::identities_hold`] checks
/// the same expressions.
pub fn joint_loss(
    l_ce: f64,
    l_sem: f64,
    l_lang: f64,
    l_recons: f64,
    d_avg: f64,
    w: &JointWeights,
) -> Result<LossBreakdown> {
    w.validate()?;
    if !w.use_det_loss {
        return Ok(LossBreakdown {
            l_ce,
            l_joint: l_ce,
            d_avg,
            ..Default::default()
        });
    }
    let l_det = det_sum(l_sem, l_lang, l_recons, w.lambda1);
    Ok(LossBreakdown {
        l_ce,
        l_sem,
        l_lang,
        l_recons,
        l_det,
        l_joint: joint_sum(l_ce, l_det, d_avg, w.lambda),
        d_avg,
    })
}

/// Graph form of [`joint_loss`].
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_graph<T: Real>(
    g: &mut Graph<T>,
    l_ce: Var,
    det: Option<(Var, Var, Var)>,
    d_avg: f64,
    w: &JointWeights,
) -> Result<Var> {
    w.validate()?;
    match det {
        Some((sem, lang, rec)) if w.use_det_loss => {
            let r = g.scale(rec, T::lit(w.lambda1));
            let d = g.add(lang, r)?;
            let d = g.add(sem, d)?;
            let d = g.scale(d, T::lit(w.lambda * d_avg));
            Ok(g.add(l_ce, d)?)
        }
        _ => Ok(l_ce),
    }
}

/// Structured log record of one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub lr: f64,
    pub language_skipped: usize,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("loss record serializes")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line).map_err(|e| Error::Parse {
            what: "loss record",
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests;
