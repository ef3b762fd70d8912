use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::substream;
use crate::transformer::TokenBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tap {
    EncoderOutput,
    SemanticFfn,
    LanguageFfn,
    DecoderEmbedding,
    LinguisticEncoder,
    DecoderOutput,
    FusionLayer,
}

impl Tap {
    pub const ALL: [Tap; 7] = [
        Tap::EncoderOutput,
        Tap::SemanticFfn,
        Tap::LanguageFfn,
        Tap::DecoderEmbedding,
        Tap::LinguisticEncoder,
        Tap::DecoderOutput,
        Tap::FusionLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tap::EncoderOutput => "encoder-output",
            Tap::SemanticFfn => "semantic-ffn",
            Tap::LanguageFfn => "language-ffn",
            Tap::DecoderEmbedding => "decoder-embedding",
            Tap::LinguisticEncoder => "linguistic-encoder",
            Tap::DecoderOutput => "decoder-output",
            Tap::FusionLayer => "fusion-layer",
        }
    }

    pub fn encoder_side(self) -> bool {
        matches!(
            self,
            Tap::EncoderOutput | Tap::SemanticFfn | Tap::LanguageFfn
        )
    }

    pub fn parse_list(s: &str) -> Result<Vec<Tap>> {
        s.split(',').map(|t| t.trim().parse()).collect()
    }
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Tap> {
        Tap::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Tap::ALL.iter().map(|t| t.name()).collect();
            Error::Config(format!(
                "unknown tap {s:?}; valid taps: {}",
                valid.join(", ")
            ))
        })
    }
}

impl std::fmt::Display for Tap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// One sentence to probe. `ids` start with the sentence's own language tag;
/// sentences sharing `group` are translations of each other.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSentence {
    pub group: usize,
    pub lang: usize,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprRow {
    pub id: usize,
    pub group: usize,
    pub lang: usize,
    pub tap: Tap,
    pub vector: Vec<f64>,
}

const PROBE_CHUNK: usize = 64;

/// Mean-pooled state per sentence per tap, computed in eval mode with the
/// sentence itself as both encoder input and decoder input.
pub fn export_representations<T: Real>(
    model: &Model<T>,
    sentences: &[ProbeSentence],
    taps: &[Tap],
) -> Result<Vec<ReprRow>> {
    for &tap in taps {
        let missing = match tap {
            Tap::SemanticFfn | Tap::LanguageFfn => model.arch.disentangler.is_none(),
            Tap::LinguisticEncoder | Tap::FusionLayer => model.arch.ling_encoder.is_none(),
            _ => false,
        };
        if missing {
            return Err(Error::Config(format!(
                "tap {tap} is not present in this model"
            )));
        }
    }
    if sentences.iter().any(|s| s.ids.is_empty()) {
        return Err(Error::Eval("empty probe sentence".into()));
    }
    let d = model.config.d_model;
    let mut pooled: Vec<BTreeMap<Tap, Vec<f64>>> = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(PROBE_CHUNK) {
        let rows: Vec<Vec<usize>> = chunk.iter().map(|s| s.ids.clone()).collect();
        let batch = TokenBatch::from_rows(&rows, PAD);
        let mut g = Graph::<T>::eval();
        let p = model.bind(&mut g, false);
        let mut rng = substream(0, "eval");
        let pass = model.forward(&mut g, &p, &batch, &batch, &mut rng)?;
        let mut per_tap = BTreeMap::new();
        for &tap in taps {
            let v = match tap {
                Tap::EncoderOutput => pass.enc.states,
                Tap::SemanticFfn => pass.disentangled.as_ref().expect("checked").semantic,
                Tap::LanguageFfn => pass.disentangled.as_ref().expect("checked").language,
                Tap::DecoderEmbedding => pass.dec_embed,
                Tap::LinguisticEncoder => pass.h_ling.expect("checked"),
                Tap::DecoderOutput => pass.h_dec,
                Tap::FusionLayer => pass.h,
            };
            per_tap.insert(tap, g.value(v).to_f64_vec());
        }
        for r in 0..chunk.len() {
            let n = batch.row_len(r);
            let mut m = BTreeMap::new();
            for (&tap, vals) in &per_tap {
                let mut acc = vec![0.0; d];
                for j in 0..batch.len {
                    if batch.valid[r * batch.len + j] {
                        let off = (r * batch.len + j) * d;
                        acc.iter_mut()
                            .zip(&vals[off..off + d])
                            .for_each(|(a, x)| *a += x);
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f64);
                m.insert(tap, acc);
            }
            pooled.push(m);
        }
    }
    let mut out = Vec::with_capacity(sentences.len() * taps.len());
    for (id, (s, m)) in sentences.iter().zip(pooled).enumerate() {
        for &tap in taps {
            out.push(ReprRow {
                id,
                group: s.group,
                lang: s.lang,
                tap,
                vector: m[&tap].clone(),
            });
        }
    }
    Ok(out)
}

pub const EXPORT_HEADER: &str = "# id\tgroup\tlang\ttap\tvector";

/// Tab-separated export, values at six decimals.
pub fn render_export(config_digest: &str, rows: &[ReprRow]) -> String {
    let mut s = format!("# config_digest={config_digest}\n{EXPORT_HEADER}\n");
    for r in rows {
        let vals: Vec<String> = r.vector.iter().map(|v| format!("{v:.6}")).collect();
        writeln!(
            s,
            "{}\t{}\tL{}\t{}\t{}",
            r.id,
            r.group,
            r.lang,
            r.tap,
            vals.join(" ")
        )
        .unwrap();
    }
    s
}

pub fn parse_export(text: &str) -> Result<Vec<ReprRow>> {
    let bad = |n: usize, why: &str| Error::Parse {
        what: "representation export",
        detail: format!("line {}: {why}", n + 1),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(n, "expected 5 fields"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(n, "bad integer"));
        let lang = f[2]
            .strip_prefix('L')
            .ok_or_else(|| bad(n, "bad language"))?;
        out.push(ReprRow {
            id: num(f[0])?,
            group: num(f[1])?,
            lang: num(lang)?,
            tap: f[3].parse()?,
            vector: f[4]
                .split(' ')
                .map(|v| v.parse::<f64>().map_err(|_| bad(n, "bad value")))
                .collect::<Result<_>>()?,
        });
    }
    Ok(out)
}

/// Plain cosine; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TapSummary {
    pub tap: Tap,
    pub sentences: usize,
    pub within_language: Option<f64>,
    pub between_language: Option<f64>,
    /// Same group, different language. Encoder-side taps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallel_pair: Option<f64>,
    /// Different group. Encoder-side taps only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_pair: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean cosine over unordered sentence pairs, per tap.
pub fn summarize(rows: &[ReprRow]) -> Vec<TapSummary> {
    let mut by_tap: BTreeMap<Tap, Vec<&ReprRow>> = BTreeMap::new();
    for r in rows {
        by_tap.entry(r.tap).or_default().push(r);
    }
    by_tap
        .into_iter()
        .map(|(tap, rs)| {
            let (mut within, mut between, mut parallel, mut random) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for i in 0..rs.len() {
                for j in i + 1..rs.len() {
                    let (a, b) = (rs[i], rs[j]);
                    let c = cosine(&a.vector, &b.vector);
                    if a.lang == b.lang {
                        within.push(c);
                    } else {
                        between.push(c);
                    }
                    if a.group == b.group && a.lang != b.lang {
                        parallel.push(c);
                    } else if a.group != b.group {
                        random.push(c);
                    }
                }
            }
            let enc = tap.encoder_side();
            TapSummary {
                tap,
                sentences: rs.len(),
                within_language: mean(&within),
                between_language: mean(&between),
                parallel_pair: if enc { mean(&parallel) } else { None },
                random_pair: if enc { mean(&random) } else { None },
            }
        })
        .collect()
}
