//! Joint training: one forward through encoder, disentangler, decoder and
//! fusion per step, backward on the joint loss, Adam under a warmup plus
//! inverse-square-root schedule, periodic checkpoints with validation
//! scores, and resumption from the latest checkpoint.

mod optim;
mod select;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, lr_at, Adam, ADAM_BETAS, ADAM_EPS};
pub use select::{checkpoint_select, MetricOrder, Selection};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::checkpoint::{Checkpoint, Entry};
use crate::config::{parse_kv, parse_value};
use crate::corpus::{make_batches, Batch, ParallelExample};
use crate::error::{Error, Result};
use crate::evaluation::{corpus_bleu, translate, DecodeConfig};
use crate::model::Model;
use crate::objectives::{
    average_length, cross_entropy, joint_loss, joint_loss_graph, language_loss, pool,
    reconstruction_loss, sample_pairs, semantic_loss, JointWeights, LossBreakdown, LossRecord,
    PairLayout,
};
use crate::params::ParamVars;
use crate::rng::{substream, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectBy {
    ValidCe,
    ValidBleu,
}

impl std::str::FromStr for SelectBy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "valid-ce" => Ok(SelectBy::ValidCe),
            "valid-bleu" => Ok(SelectBy::ValidBleu),
            _ => Err(format!("unknown selection metric {s:?}")),
        }
    }
}

impl std::fmt::Display for SelectBy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SelectBy::ValidCe => "valid-ce",
            SelectBy::ValidBleu => "valid-bleu",
        })
    }
}

/// Optimization and bookkeeping settings. Architecture, toggles and loss
/// weights live in [`crate::ModelConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRunConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub max_tokens: usize,
    pub clip_norm: Option<f64>,
    pub keep_last: usize,
    pub top_n: usize,
    pub select_by: SelectBy,
    pub log_every: u64,
    /// Steps trained on cross entropy alone before the disentangling
    /// objective joins.
    pub det_start: u64,
}

impl TrainRunConfig {
    pub fn desk(seed: u64) -> Self {
        TrainRunConfig {
            peak_lr: 7e-4,
            warmup: 400,
            total_steps: 4000,
            seed,
            checkpoint_interval: 250,
            max_tokens: 1500,
            clip_norm: None,
            keep_last: 6,
            top_n: 3,
            select_by: SelectBy::ValidCe,
            log_every: 1,
            det_start: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr must be > 0, got {}", self.peak_lr));
        }
        if self.total_steps == 0 || self.warmup > self.total_steps {
            return bad(format!(
                "need 0 < warmup <= total_steps, got warmup {} total {}",
                self.warmup, self.total_steps
            ));
        }
        if self.checkpoint_interval == 0 || self.log_every == 0 {
            return bad("checkpoint_interval and log_every must be >= 1".into());
        }
        if self.top_n == 0 || self.keep_last < self.top_n {
            return bad(format!(
                "need 1 <= top_n <= keep_last, got {} and {}",
                self.top_n, self.keep_last
            ));
        }
        let saved = self.total_steps / self.checkpoint_interval;
        if saved < self.top_n as u64 {
            return bad(format!(
                "{} steps at interval {} save {saved} checkpoints, selection needs {}",
                self.total_steps, self.checkpoint_interval, self.top_n
            ));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup", self.warmup.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            (
                "clip_norm",
                self.clip_norm.map_or("none".to_string(), |c| c.to_string()),
            ),
            ("keep_last", self.keep_last.to_string()),
            ("top_n", self.top_n.to_string()),
            ("select_by", self.select_by.to_string()),
            ("log_every", self.log_every.to_string()),
            ("det_start", self.det_start.to_string()),
        ] {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Applies recognized keys, leaving others untouched.
    pub fn apply_kv(&mut self, kv: &BTreeMap<String, String>) -> Result<()> {
        for (k, v) in kv {
            match k.as_str() {
                "peak_lr" => self.peak_lr = parse_value(k, v)?,
                "warmup" => self.warmup = parse_value(k, v)?,
                "total_steps" => self.total_steps = parse_value(k, v)?,
                "seed" => self.seed = parse_value(k, v)?,
                "checkpoint_interval" => self.checkpoint_interval = parse_value(k, v)?,
                "max_tokens" => self.max_tokens = parse_value(k, v)?,
                "clip_norm" => {
                    self.clip_norm = match v.as_str() {
                        "none" | "off" => None,
                        _ => Some(parse_value(k, v)?),
                    }
                }
                "keep_last" => self.keep_last = parse_value(k, v)?,
                "top_n" => self.top_n = parse_value(k, v)?,
                "select_by" => self.select_by = parse_value(k, v)?,
                "log_every" => self.log_every = parse_value(k, v)?,
                "det_start" => self.det_start = parse_value(k, v)?,
                _ => {}
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = TrainRunConfig::desk(1);
        c.apply_kv(&parse_kv(text)?)?;
        c.validate()?;
        Ok(c)
    }
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub language_skipped: usize,
    pub lr: f64,
    pub grad_norm: f64,
}

impl StepReport {
    pub fn record(&self, step: u64) -> LossRecord {
        LossRecord {
            step,
            losses: self.losses,
            lr: self.lr,
            language_skipped: self.language_skipped,
        }
    }
}

pub fn joint_weights(model: &Model<impl Real>) -> JointWeights {
    JointWeights {
        lambda: model.config.lambda,
        lambda1: model.config.lambda1,
        use_det_loss: model.config.use_det_loss,
    }
}

/// Loss nodes of one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    /// Semantic, language and reconstruction terms when the disentangling
    /// objective is on.
    pub det: Option<(Var, Var, Var)>,
    pub joint: Var,
    pub d_avg: f64,
    pub language_skipped: usize,
}

impl LossVars {
    /// The breakdown recomputed in f64 from the component values.
    pub fn breakdown<T: Real>(&self, g: &Graph<T>, w: &JointWeights) -> Result<LossBreakdown> {
        let value = |v| g.value(v).item().as_f64();
        let (s, l, r) = self
            .det
            .map_or((0.0, 0.0, 0.0), |(a, b, c)| (value(a), value(b), value(c)));
        joint_loss(value(self.ce), s, l, r, self.d_avg, w)
    }
}

/// Builds the joint objective for `batch` on `g`: cross entropy through
/// encoder, disentangler, decoder and fusion, plus, when enabled, the
/// contrastive terms over pooled source and target branch outputs and the
/// reconstruction term over the source. `with_det` false leaves the
/// objective out for this step.
pub fn loss_graph<T: Real>(
    model: &Model<T>,
    g: &mut Graph<T>,
    p: &ParamVars,
    batch: &Batch,
    drop_rng: &mut StreamRng,
    sample_rng: &mut StreamRng,
    with_det: bool,
) -> Result<LossVars> {
    let weights = joint_weights(model);
    let pass = model.forward(g, p, &batch.src, &batch.dec_in, drop_rng)?;
    let ce = cross_entropy(g, pass.logits, &batch.gold, model.config.label_smoothing)?;
    let d_avg = average_length(&batch.src);

    let mut language_skipped = 0;
    let det = match (&pass.disentangled, weights.use_det_loss && with_det) {
        (Some(src_states), true) => {
            // targets go through the same encoder, tagged with their language
            let tgt_enc = model.encode(g, p, &batch.dec_in, drop_rng)?;
            let tgt_states = model
                .disentangle(g, p, &tgt_enc)?
                .expect("disentangler present");
            let src_mask = batch.src.mask::<T>();
            let tgt_mask = batch.dec_in.mask::<T>();
            let mut pooled = |a, b| -> Result<_> {
                let pa = pool(g, a, &src_mask)?;
                let pb = pool(g, b, &tgt_mask)?;
                Ok(g.concat(&[pa, pb], 0)?)
            };
            let sem = pooled(src_states.semantic, tgt_states.semantic)?;
            let lang = pooled(src_states.language, tgt_states.language)?;
            let layout = PairLayout::new(&batch.src_langs, &batch.tgt_langs)?;
            let samples = sample_pairs(&layout, sample_rng)?;
            language_skipped = samples.language_skipped;
            let l_sem = semantic_loss(g, sem, &samples.semantic, model.config.lambda2)?;
            let l_lang = language_loss(g, lang, &samples.language, model.config.lambda2)?;
            let l_rec = reconstruction_loss(
                g,
                src_states.original,
                src_states.semantic,
                src_states.language,
                &src_mask,
                d_avg,
            )?;
            Some((l_sem, l_lang, l_rec))
        }
        _ => None,
    };
    let joint = joint_loss_graph(g, ce, det, d_avg, &weights)?;
    Ok(LossVars {
        ce,
        det,
        joint,
        d_avg,
        language_skipped,
    })
}

/// Forward, backward and one Adam update on `batch` as step `step`
/// (1-based). Dropout and pair sampling draw from streams named after the
/// step, so a step replays identically wherever it is run.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    adam: &mut Adam<T>,
    batch: &Batch,
    step: u64,
    run: &TrainRunConfig,
) -> Result<StepReport> {
    let lr = lr_at(step, run.peak_lr, run.warmup)?;
    let mut drop_rng = substream(run.seed, &format!("dropout/step/{step}"));
    let mut sample_rng = substream(run.seed, &format!("sampling/step/{step}"));

    let mut g = Graph::train();
    let p = model.bind(&mut g, true);
    let with_det = step > run.det_start;
    let lv = loss_graph(
        model,
        &mut g,
        &p,
        batch,
        &mut drop_rng,
        &mut sample_rng,
        with_det,
    )?;
    let losses = lv.breakdown(&g, &joint_weights(model))?;
    if !losses.all_finite() || !g.value(lv.joint).item().as_f64().is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: serde_json::to_string(&losses).expect("losses serialize"),
        });
    }
    let (joint, language_skipped) = (lv.joint, lv.language_skipped);

    let mut grads_map = g.backward(joint)?;
    let mut grads: Vec<Option<Vec<T>>> = p.iter().map(|(_, v)| grads_map.take(v)).collect();
    drop(g);
    let grad_norm = match run.clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt(),
    };
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("gradient norm {grad_norm}"),
        });
    }
    adam.update(&mut model.params, &grads, lr);
    Ok(StepReport {
        losses,
        language_skipped,
        lr,
        grad_norm,
    })
}

/// Token-weighted label-smoothed cross entropy in eval mode.
pub fn validation_ce<T: Real>(model: &Model<T>, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let mut g = Graph::eval();
        let p = model.bind(&mut g, false);
        let mut rng = substream(0, "eval");
        let pass = model.forward(&mut g, &p, &b.src, &b.dec_in, &mut rng)?;
        let ce = cross_entropy(&mut g, pass.logits, &b.gold, model.config.label_smoothing)?;
        let n = b.gold.valid.iter().filter(|&&v| v).count();
        total += g.value(ce).item().as_f64() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Eval("empty validation set".into()));
    }
    Ok(total / tokens as f64)
}

/// Greedy corpus BLEU over the validation pairs, scored on token ids.
pub fn validation_bleu<T: Real>(model: &Model<T>, valid: &[ParallelExample]) -> Result<f64> {
    let mut by_tgt: BTreeMap<usize, Vec<&ParallelExample>> = BTreeMap::new();
    for e in valid {
        by_tgt.entry(e.tgt_ids[0]).or_default().push(e);
    }
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    let cfg = DecodeConfig::greedy(model.config.max_len);
    for (tag, exs) in by_tgt {
        let sources: Vec<Vec<usize>> = exs.iter().map(|e| e.src_ids.clone()).collect();
        hyps.extend(translate(model, &sources, tag, &cfg)?);
        refs.extend(exs.iter().map(|e| e.tgt_ids[1..].to_vec()));
    }
    corpus_bleu(&hyps, &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: u64,
    pub file: String,
    pub valid_ce: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_bleu: Option<f64>,
}

impl CheckpointRecord {
    pub fn metric(&self, by: SelectBy) -> Option<f64> {
        match by {
            SelectBy::ValidCe => Some(self.valid_ce),
            SelectBy::ValidBleu => self.valid_bleu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub last_step: u64,
    pub finished: bool,
    pub selection: Option<Selection>,
    pub selected_files: Vec<String>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_LOG: &str = "checkpoints.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const SELECTION_FILE: &str = "selection.json";
pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const RUN_CONFIG_FILE: &str = "run.cfg";

fn step_name(step: u64) -> String {
    format!("{CHECKPOINT_DIR}/step_{step:07}.slmt")
}

/// Model, optimizer and step as one checkpoint.
pub fn training_checkpoint<T: Real>(model: &Model<T>, adam: &Adam<T>) -> Checkpoint {
    let mut ck = model.to_checkpoint();
    for (i, (_, name, _)) in model.params.iter().enumerate() {
        ck.entries
            .push(Entry::from_tensor(&format!("adam.m.{name}"), &adam.m[i]));
        ck.entries
            .push(Entry::from_tensor(&format!("adam.v.{name}"), &adam.v[i]));
    }
    ck.entries.push(Entry::from_tensor(
        "train.step",
        &Tensor::<f64>::scalar(adam.step as f64),
    ));
    ck
}

pub fn restore_training<T: Real>(model: &mut Model<T>, ck: &Checkpoint) -> Result<Adam<T>> {
    model.load_params(ck)?;
    let mut adam = Adam::new(&model.params);
    for (i, (_, name, _)) in model.params.iter().enumerate() {
        for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
            let key = format!("adam.{kind}.{name}");
            let e = ck
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?;
            *slot = e.to_tensor();
        }
    }
    let step = ck
        .get("train.step")
        .ok_or_else(|| Error::Checkpoint("missing train.step".into()))?;
    adam.step = step.to_tensor::<f64>().item() as u64;
    Ok(adam)
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    // a torn final line from an interrupted run is ignored
    Ok(text
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_log(out: &Path) -> Result<Vec<CheckpointRecord>> {
    read_jsonl(&out.join(CHECKPOINT_LOG))
}

pub fn read_loss_log(out: &Path) -> Result<Vec<LossRecord>> {
    read_jsonl(&out.join(LOG_FILE))
}

/// Maps global steps onto per-epoch batch lists.
struct BatchStream {
    seed: u64,
    max_tokens: usize,
    epoch: u64,
    epoch_start: u64,
    batches: Vec<Batch>,
}

impl BatchStream {
    fn new(examples: &[ParallelExample], seed: u64, max_tokens: usize) -> Result<Self> {
        Ok(BatchStream {
            seed,
            max_tokens,
            epoch: 0,
            epoch_start: 1,
            batches: make_batches(examples, max_tokens, seed, 0)?,
        })
    }

    fn batch(&mut self, examples: &[ParallelExample], step: u64) -> Result<&Batch> {
        if self.batches.is_empty() {
            return Err(Error::Corpus(
                "batching produced no batch of 2+ pairs".into(),
            ));
        }
        while step >= self.epoch_start + self.batches.len() as u64 {
            self.epoch_start += self.batches.len() as u64;
            self.epoch += 1;
            self.batches = make_batches(examples, self.max_tokens, self.seed, self.epoch)?;
        }
        Ok(&self.batches[(step - self.epoch_start) as usize])
    }
}

/// A training run rooted at an output directory.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub adam: Adam<T>,
    pub run: TrainRunConfig,
    train: Vec<ParallelExample>,
    valid: Vec<ParallelExample>,
    valid_batches: Vec<Batch>,
    out: PathBuf,
}

impl<T: Real> Trainer<T> {
    /// Starts a fresh run in `out`, creating it if needed.
    pub fn new(
        model: Model<T>,
        run: TrainRunConfig,
        train: Vec<ParallelExample>,
        valid: Vec<ParallelExample>,
        out: &Path,
    ) -> Result<Self> {
        run.validate()?;
        let ck_dir = out.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        for (name, text) in [
            (MODEL_CONFIG_FILE, model.config.to_kv()),
            (RUN_CONFIG_FILE, run.to_kv()),
        ] {
            let p = out.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        for f in [LOG_FILE, CHECKPOINT_LOG, SELECTION_FILE] {
            let p = out.join(f);
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let valid_batches = make_batches(&valid, run.max_tokens, run.seed, u64::MAX)?;
        Ok(Trainer {
            adam: Adam::new(&model.params),
            model,
            run,
            train,
            valid,
            valid_batches,
            out: out.to_path_buf(),
        })
    }

    /// Reopens the run in `out` at its latest checkpoint, discarding log
    /// records written after it.
    pub fn resume(
        mut model: Model<T>,
        run: TrainRunConfig,
        train: Vec<ParallelExample>,
        valid: Vec<ParallelExample>,
        out: &Path,
    ) -> Result<Self> {
        run.validate()?;
        let records = read_checkpoint_log(out)?;
        let last = records
            .iter()
            .rev()
            .find(|r| out.join(&r.file).exists())
            .ok_or_else(|| {
                Error::Checkpoint(format!("no checkpoint to resume in {}", out.display()))
            })?
            .clone();
        let ck = Checkpoint::load(&out.join(&last.file))?;
        let adam = restore_training(&mut model, &ck)?;
        let kept: Vec<CheckpointRecord> = records
            .into_iter()
            .filter(|r| r.step <= last.step)
            .collect();
        write_jsonl(&out.join(CHECKPOINT_LOG), &kept)?;
        let log: Vec<LossRecord> = read_loss_log(out)?
            .into_iter()
            .filter(|r| r.step <= last.step)
            .collect();
        write_jsonl(&out.join(LOG_FILE), &log)?;
        let valid_batches = make_batches(&valid, run.max_tokens, run.seed, u64::MAX)?;
        log::info!("resuming from step {}", last.step);
        Ok(Trainer {
            model,
            adam,
            run,
            train,
            valid,
            valid_batches,
            out: out.to_path_buf(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    fn save_checkpoint(&self) -> Result<CheckpointRecord> {
        let step = self.adam.step;
        let file = step_name(step);
        training_checkpoint(&self.model, &self.adam).save(&self.out.join(&file))?;
        let valid_ce = validation_ce(&self.model, &self.valid_batches)?;
        let valid_bleu = match self.run.select_by {
            SelectBy::ValidBleu => Some(validation_bleu(&self.model, &self.valid)?),
            SelectBy::ValidCe => None,
        };
        let rec = CheckpointRecord {
            step,
            file,
            valid_ce,
            valid_bleu,
        };
        let mut records = read_checkpoint_log(&self.out)?;
        records.push(rec.clone());
        write_jsonl(&self.out.join(CHECKPOINT_LOG), &records)?;
        // only the most recent keep_last checkpoints stay on disk
        if records.len() > self.run.keep_last {
            for old in &records[..records.len() - self.run.keep_last] {
                let p = self.out.join(&old.file);
                if p.exists() {
                    fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                }
            }
        }
        log::info!("step {step}: checkpoint, valid ce {valid_ce:.4}");
        Ok(rec)
    }

    /// Trains up to `total_steps`, or until `stop_after` steps have been
    /// completed, whichever comes first.
    pub fn run(&mut self, stop_after: Option<u64>) -> Result<TrainSummary> {
        let mut stream = BatchStream::new(&self.train, self.run.seed, self.run.max_tokens)?;
        let log_path = self.out.join(LOG_FILE);
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let end = stop_after.map_or(self.run.total_steps, |s| s.min(self.run.total_steps));
        while self.adam.step < end {
            let step = self.adam.step + 1;
            let batch = stream.batch(&self.train, step)?.clone();
            let report = train_step(&mut self.model, &mut self.adam, &batch, step, &self.run)?;
            if step % self.run.log_every == 0 {
                writeln!(log, "{}", report.record(step).to_line())
                    .map_err(|e| Error::io(&log_path, e))?;
            }
            if step % 100 == 0 {
                log::info!(
                    "step {step}: ce {:.4} joint {:.4} lr {:.2e}",
                    report.losses.l_ce,
                    report.losses.l_joint,
                    report.lr
                );
            }
            if step % self.run.checkpoint_interval == 0 || step == self.run.total_steps {
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                self.save_checkpoint()?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let finished = self.adam.step >= self.run.total_steps;
        let mut summary = TrainSummary {
            last_step: self.adam.step,
            finished,
            selection: None,
            selected_files: Vec::new(),
        };
        if finished {
            let (sel, files) = select_from_log(&self.out, &self.run)?;
            let p = self.out.join(SELECTION_FILE);
            let text = serde_json::to_string_pretty(&sel).expect("selection serializes") + "\n";
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            summary.selection = Some(sel);
            summary.selected_files = files;
        }
        Ok(summary)
    }
}

/// Applies [`checkpoint_select`] to a run directory's checkpoint log.
pub fn select_from_log(out: &Path, run: &TrainRunConfig) -> Result<(Selection, Vec<String>)> {
    let records: Vec<CheckpointRecord> = read_checkpoint_log(out)?
        .into_iter()
        .filter(|r| out.join(&r.file).exists())
        .collect();
    let scored = records
        .iter()
        .map(|r| {
            r.metric(run.select_by).map(|m| (r.step, m)).ok_or_else(|| {
                Error::Checkpoint(format!("step {} has no {}", r.step, run.select_by))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let order = match run.select_by {
        SelectBy::ValidCe => MetricOrder::LowerIsBetter,
        SelectBy::ValidBleu => MetricOrder::HigherIsBetter,
    };
    let sel = checkpoint_select(&scored, run.keep_last, run.top_n, order)?;
    let files = sel.selected.iter().map(|s| step_name(*s)).collect();
    Ok((sel, files))
}
