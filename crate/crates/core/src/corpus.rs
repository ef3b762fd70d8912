//! Synthetic multilingual corpora.
//!
//! Every language realizes the same integer "semantic payload" through its
//! own token permutation, word order, and disjoint surface range. Training
//! data only pairs the center language with the others, so directions
//! between non-center languages are zero-shot.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::transformer::TokenBatch;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MANIFEST_VERSION: u32 = 1;
const MAX_SURFACE_TOKENS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Identity,
    Reverse,
    Rotate1,
}

impl WordOrder {
    fn for_language(lang: usize) -> Self {
        [WordOrder::Identity, WordOrder::Reverse, WordOrder::Rotate1][lang % 3]
    }

    pub fn apply<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match self {
            WordOrder::Identity => {}
            WordOrder::Reverse => v.reverse(),
            WordOrder::Rotate1 if !v.is_empty() => v.rotate_left(1),
            WordOrder::Rotate1 => {}
        }
        v
    }

    pub fn invert<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match self {
            WordOrder::Identity => {}
            WordOrder::Reverse => v.reverse(),
            WordOrder::Rotate1 if !v.is_empty() => v.rotate_right(1),
            WordOrder::Rotate1 => {}
        }
        v
    }
}

/// One synthetic language. Surface tokens are the decimal integers
/// `offset + perm[s]` for semantic symbols `s`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub id: usize,
    pub name: String,
    pub offset: usize,
    pub perm: Vec<usize>,
    pub order: WordOrder,
}

impl LanguageSpec {
    pub fn vocab_size(&self) -> usize {
        self.perm.len()
    }

    pub fn owns(&self, token: &str) -> bool {
        token
            .parse::<usize>()
            .is_ok_and(|v| v >= self.offset && v < self.offset + self.perm.len())
    }

    pub fn realize(&self, payload: &[usize]) -> Vec<String> {
        self.order
            .apply(payload)
            .iter()
            .map(|&s| (self.offset + self.perm[s]).to_string())
            .collect()
    }

    /// Inverse of [`LanguageSpec::realize`].
    pub fn payload(&self, surface: &[String]) -> Result<Vec<usize>> {
        let mut inv = vec![0; self.perm.len()];
        for (s, &p) in self.perm.iter().enumerate() {
            inv[p] = s;
        }
        let ordered = surface
            .iter()
            .map(|t| {
                t.parse::<usize>()
                    .ok()
                    .filter(|&v| v >= self.offset && v < self.offset + self.perm.len())
                    .map(|v| inv[v - self.offset])
                    .ok_or_else(|| Error::Corpus(format!("token {t:?} is not in {}", self.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.order.invert(&ordered))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_languages: usize,
    pub center: usize,
    pub pairs_per_direction: usize,
    pub valid_per_direction: usize,
    pub test_per_direction: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sem_vocab: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn desk(seed: u64) -> Self {
        CorpusSpec {
            n_languages: 4,
            center: 0,
            pairs_per_direction: 3000,
            valid_per_direction: 100,
            test_per_direction: 100,
            min_len: 3,
            max_len: 12,
            sem_vocab: 40,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_languages < 3 {
            return Err(Error::Corpus(format!(
                "{} languages leave no zero-shot direction; need at least 3",
                self.n_languages
            )));
        }
        if self.center >= self.n_languages {
            return Err(Error::Corpus(format!(
                "center L{} does not exist",
                self.center
            )));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Corpus(format!(
                "bad length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.sem_vocab == 0
            || self.sem_vocab.saturating_mul(self.n_languages) > MAX_SURFACE_TOKENS
        {
            return Err(Error::Corpus(format!(
                "vocabulary overflow: {} languages x {} symbols",
                self.n_languages, self.sem_vocab
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Supervised,
    ZeroShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Direction {
    pub src: usize,
    pub tgt: usize,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}-L{}", self.src, self.tgt)
    }
}

/// Parallel sentences of one direction in one split.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionData {
    pub direction: Direction,
    pub role: Role,
    pub src: Vec<Vec<String>>,
    pub tgt: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub src: usize,
    pub tgt: usize,
    pub role: Role,
    pub count: usize,
    pub src_file: String,
    pub tgt_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: CorpusSpec,
    pub languages: Vec<LanguageSpec>,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub languages: Vec<LanguageSpec>,
    pub splits: BTreeMap<Split, Vec<DirectionData>>,
}

fn make_languages(spec: &CorpusSpec) -> Vec<LanguageSpec> {
    (0..spec.n_languages)
        .map(|id| {
            let mut perm: Vec<usize> = (0..spec.sem_vocab).collect();
            if id != spec.center {
                perm.shuffle(&mut substream(spec.seed, &format!("corpus/perm/{id}")));
            }
            LanguageSpec {
                id,
                name: format!("L{id}"),
                offset: id * spec.sem_vocab,
                perm,
                order: if id == spec.center {
                    WordOrder::Identity
                } else {
                    WordOrder::for_language(id)
                },
            }
        })
        .collect()
}

fn random_payload<R: Rng>(spec: &CorpusSpec, rng: &mut R) -> Vec<usize> {
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.gen_range(0..spec.sem_vocab)).collect()
}

/// Generates every split. Test payloads never occur in train or valid.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let languages = make_languages(spec);
    let m = spec.n_languages;
    let supervised: Vec<Direction> = (0..m)
        .filter(|&l| l != spec.center)
        .flat_map(|l| {
            [
                Direction {
                    src: spec.center,
                    tgt: l,
                },
                Direction {
                    src: l,
                    tgt: spec.center,
                },
            ]
        })
        .collect();
    let all: Vec<Direction> = (0..m)
        .flat_map(|s| {
            (0..m)
                .filter(move |&t| t != s)
                .map(move |t| Direction { src: s, tgt: t })
        })
        .collect();
    let role = |d: &Direction| {
        if d.src == spec.center || d.tgt == spec.center {
            Role::Supervised
        } else {
            Role::ZeroShot
        }
    };

    let mut held_out: HashSet<Vec<usize>> = HashSet::new();
    let mut splits = BTreeMap::new();
    let realize = |d: Direction, payloads: Vec<Vec<usize>>, role: Role| DirectionData {
        direction: d,
        role,
        src: payloads
            .iter()
            .map(|p| languages[d.src].realize(p))
            .collect(),
        tgt: payloads
            .iter()
            .map(|p| languages[d.tgt].realize(p))
            .collect(),
    };

    let mut test = Vec::new();
    for d in &all {
        let mut rng = substream(spec.seed, &format!("corpus/test/{d}"));
        let payloads: Vec<Vec<usize>> = (0..spec.test_per_direction)
            .map(|_| random_payload(spec, &mut rng))
            .collect();
        held_out.extend(payloads.iter().cloned());
        test.push(realize(*d, payloads, role(d)));
    }
    for (split, per_dir) in [
        (Split::Train, spec.pairs_per_direction),
        (Split::Valid, spec.valid_per_direction),
    ] {
        let mut out = Vec::new();
        for d in &supervised {
            let mut rng = substream(spec.seed, &format!("corpus/{}/{d}", split.dir_name()));
            let mut payloads = Vec::with_capacity(per_dir);
            while payloads.len() < per_dir {
                let p = random_payload(spec, &mut rng);
                if !held_out.contains(&p) {
                    payloads.push(p);
                }
            }
            out.push(realize(*d, payloads, Role::Supervised));
        }
        splits.insert(split, out);
    }
    splits.insert(Split::Test, test);
    Ok(Corpus {
        spec: spec.clone(),
        languages,
        splits,
    })
}

fn write_lines(path: &Path, rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&r.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One sentence per line, tokens separated by single spaces.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

impl Corpus {
    pub fn manifest(&self) -> Manifest {
        let mut files = Vec::new();
        for (split, dirs) in &self.splits {
            for d in dirs {
                let stem = format!("{}/{}", split.dir_name(), d.direction);
                files.push(ManifestEntry {
                    split: *split,
                    src: d.direction.src,
                    tgt: d.direction.tgt,
                    role: d.role,
                    count: d.src.len(),
                    src_file: format!("{stem}.src"),
                    tgt_file: format!("{stem}.tgt"),
                });
            }
        }
        Manifest {
            format_version: MANIFEST_VERSION,
            spec: self.spec.clone(),
            languages: self.languages.clone(),
            files,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for split in Split::ALL {
            let p = dir.join(split.dir_name());
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let manifest = self.manifest();
        for (entry, data) in manifest.files.iter().zip(self.splits.values().flatten()) {
            write_lines(&dir.join(&entry.src_file), &data.src)?;
            write_lines(&dir.join(&entry.tgt_file), &data.tgt)?;
        }
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let mut splits: BTreeMap<Split, Vec<DirectionData>> = BTreeMap::new();
        for e in &manifest.files {
            let src = read_lines(&dir.join(&e.src_file))?;
            let tgt = read_lines(&dir.join(&e.tgt_file))?;
            if src.len() != e.count || tgt.len() != e.count {
                return Err(Error::Corpus(format!(
                    "{}: expected {} lines, found {} / {}",
                    e.src_file,
                    e.count,
                    src.len(),
                    tgt.len()
                )));
            }
            splits.entry(e.split).or_default().push(DirectionData {
                direction: Direction {
                    src: e.src,
                    tgt: e.tgt,
                },
                role: e.role,
                src,
                tgt,
            });
        }
        Ok(Corpus {
            spec: manifest.spec,
            languages: manifest.languages,
            splits,
        })
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(&self.languages)
    }

    pub fn split(&self, split: Split) -> &[DirectionData] {
        self.splits.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn examples(&self, split: Split, vocab: &Vocab) -> Result<Vec<ParallelExample>> {
        let mut out = Vec::new();
        for d in self.split(split) {
            for (s, t) in d.src.iter().zip(&d.tgt) {
                out.push(tag_and_encode(s, t, d.direction, vocab)?);
            }
        }
        Ok(out)
    }
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: "corpus manifest",
        detail: e.to_string(),
    })?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Corpus(format!(
            "manifest version {} is not supported",
            m.format_version
        )));
    }
    Ok(m)
}

/// Closed vocabulary: `<pad>`, `<eos>`, one tag per language, then every
/// language's surface tokens in range order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
    /// Owning language of every id; `None` for specials and tags.
    owner: Vec<Option<usize>>,
    n_languages: usize,
}

impl Vocab {
    pub fn new(languages: &[LanguageSpec]) -> Self {
        let mut tokens = vec!["<pad>".to_string(), "<eos>".to_string()];
        let mut owner = vec![None, None];
        for l in languages {
            tokens.push(format!("<{}>", l.name));
            owner.push(None);
        }
        for l in languages {
            for v in 0..l.vocab_size() {
                tokens.push((l.offset + v).to_string());
                owner.push(Some(l.id));
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            index,
            owner,
            n_languages: languages.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_languages(&self) -> usize {
        self.n_languages
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::Corpus(format!("unknown token {token:?}")))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn lang_tag(&self, lang: usize) -> usize {
        2 + lang
    }

    /// Language index of a tag id.
    pub fn tag_lang(&self, id: usize) -> Option<usize> {
        (2..2 + self.n_languages).contains(&id).then(|| id - 2)
    }

    /// Owning language of a surface token id.
    pub fn language_of(&self, id: usize) -> Option<usize> {
        self.owner.get(id).copied().flatten()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < 2 + self.n_languages
    }

    /// Surface tokens of `ids`, dropping specials.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !self.is_special(i))
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// A tagged, id-encoded sentence pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelExample {
    pub direction: Direction,
    /// Source tag followed by source ids.
    pub src_ids: Vec<usize>,
    /// Target tag followed by target ids.
    pub tgt_ids: Vec<usize>,
}

pub fn tag_and_encode(
    src: &[String],
    tgt: &[String],
    direction: Direction,
    vocab: &Vocab,
) -> Result<ParallelExample> {
    if src.is_empty() || tgt.is_empty() {
        return Err(Error::Corpus("empty sentence".into()));
    }
    let tag = |lang: usize, toks: &[String]| -> Result<Vec<usize>> {
        if lang >= vocab.n_languages() {
            return Err(Error::Corpus(format!("unknown language L{lang}")));
        }
        let mut ids = vec![vocab.lang_tag(lang)];
        ids.extend(vocab.encode(toks)?);
        Ok(ids)
    };
    Ok(ParallelExample {
        direction,
        src_ids: tag(direction.src, src)?,
        tgt_ids: tag(direction.tgt, tgt)?,
    })
}

/// One training/validation step's worth of pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Tagged sources.
    pub src: TokenBatch,
    /// Target tag then target tokens. Also the target side's encoder input.
    pub dec_in: TokenBatch,
    /// Target tokens then `<eos>`, aligned with `dec_in`.
    pub gold: TokenBatch,
    pub src_langs: Vec<usize>,
    pub tgt_langs: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&ParallelExample]) -> Self {
        let src: Vec<Vec<usize>> = examples.iter().map(|e| e.src_ids.clone()).collect();
        let dec: Vec<Vec<usize>> = examples.iter().map(|e| e.tgt_ids.clone()).collect();
        let gold: Vec<Vec<usize>> = examples
            .iter()
            .map(|e| {
                let mut g = e.tgt_ids[1..].to_vec();
                g.push(EOS);
                g
            })
            .collect();
        Batch {
            src: TokenBatch::from_rows(&src, PAD),
            dec_in: TokenBatch::from_rows(&dec, PAD),
            gold: TokenBatch::from_rows(&gold, PAD),
            src_langs: examples.iter().map(|e| e.direction.src).collect(),
            tgt_langs: examples.iter().map(|e| e.direction.tgt).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.src.batch
    }

    pub fn is_empty(&self) -> bool {
        self.src.batch == 0
    }

    /// Padded token count, source plus decoder side.
    pub fn padded_tokens(&self) -> usize {
        self.src.batch * (self.src.len + self.dec_in.len)
    }
}

fn example_cost(e: &ParallelExample) -> usize {
    e.src_ids.len() + e.tgt_ids.len()
}

/// Pairs per sorting window; batches are length-homogeneous within it.
const SORT_WINDOW: usize = 1024;

/// Shuffles with the epoch's stream, sorts by length inside fixed windows
/// of batches, and packs greedily under `max_tokens` padded tokens. A
/// trailing single-pair batch is dropped.
pub fn make_batches(
    examples: &[ParallelExample],
    max_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::Corpus("no examples to batch".into()));
    }
    if let Some(e) = examples.iter().find(|e| example_cost(e) > max_tokens) {
        return Err(Error::Corpus(format!(
            "example of {} tokens exceeds max_tokens {max_tokens}",
            example_cost(e)
        )));
    }
    let mut rng = substream(seed, &format!("data/epoch/{epoch}"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);

    let mut groups: Vec<Vec<usize>> = Vec::new();
    for chunk in order.chunks(SORT_WINDOW) {
        let mut chunk = chunk.to_vec();
        chunk.sort_by_key(|&i| (examples[i].src_ids.len(), examples[i].tgt_ids.len()));
        let mut cur: Vec<usize> = Vec::new();
        let (mut ms, mut mt) = (0, 0);
        for i in chunk {
            let e = &examples[i];
            let (ns, nt) = (ms.max(e.src_ids.len()), mt.max(e.tgt_ids.len()));
            if !cur.is_empty() && (cur.len() + 1) * (ns + nt) > max_tokens {
                groups.push(std::mem::take(&mut cur));
                ms = e.src_ids.len();
                mt = e.tgt_ids.len();
            } else {
                ms = ns;
                mt = nt;
            }
            cur.push(i);
        }
        if !cur.is_empty() {
            groups.push(cur);
        }
    }
    groups.retain(|g| g.len() >= 2);
    groups.shuffle(&mut rng);
    Ok(groups
        .iter()
        .map(|g| Batch::from_examples(&g.iter().map(|&i| &examples[i]).collect::<Vec<_>>()))
        .collect())
}
