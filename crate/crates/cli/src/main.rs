//! `slmt`: corpus generation, training, translation, scoring and
//! representation analysis for the disentangled multilingual translator.

mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use manifest::{hash_corpus, RunManifest};
use slmt::checkpoint::Checkpoint;
use slmt::corpus::{generate_corpus, read_lines, Corpus, CorpusSpec, Split, Vocab};
use slmt::evaluation::{
    add_in_target, export_representations, parse_export, probe_sentences, render_export,
    score_outputs, summarize, translate, DecodeConfig, DirectionScore, EvalReport, ProbeSentence,
    SystemOutputs, Tap,
};
use slmt::training::{
    read_checkpoint_log, TrainRunConfig, Trainer, CHECKPOINT_DIR, MODEL_CONFIG_FILE,
    RUN_CONFIG_FILE, SELECTION_FILE,
};
use slmt::{Model, ModelConfig};

#[derive(Parser, Debug)]
#[command(
    name = "slmt",
    version,
    about = "Multilingual translation with semantic/linguistic disentangling",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multilingual corpus
    GenData(GenDataArgs),
    /// Train a model (all components on unless disabled)
    Train(TrainArgs),
    /// Translate a file or a whole corpus split
    Translate(TranslateArgs),
    /// Score hypotheses: BLEU, off-target rate, in-target BLEU
    Evaluate(EvaluateArgs),
    /// Export pooled representations and similarity statistics
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Number of languages (at least 3)
    #[arg(long, default_value_t = 4)]
    languages: usize,
    /// Center language paired with every other language in training
    #[arg(long, default_value = "L0")]
    center: String,
    /// Training pairs per supervised direction
    #[arg(long, default_value_t = 3000)]
    pairs: usize,
    /// Validation pairs per supervised direction
    #[arg(long, default_value_t = 100)]
    valid: usize,
    /// Test pairs per direction (all directions)
    #[arg(long, default_value_t = 100)]
    test: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Content words per language
    #[arg(long, default_value_t = 40)]
    sem_vocab: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory (checkpoints, logs, configs)
    #[arg(long)]
    out: PathBuf,
    /// key=value file with model and run settings; flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random stream [default: 1]
    #[arg(long)]
    seed: Option<u64>,
    /// Total optimizer steps [default: 4000]
    #[arg(long)]
    steps: Option<u64>,
    /// Warmup steps [default: 400]
    #[arg(long)]
    warmup: Option<u64>,
    /// Peak learning rate [default: 7e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Steps between checkpoints [default: 250]
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Padded tokens per batch, source plus target [default: 1500]
    #[arg(long)]
    max_tokens: Option<usize>,
    /// Clip gradients to this global norm [default: off; 1.0 if given without a value]
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0")]
    clip_norm: Option<f64>,
    /// Cross-entropy-only steps before the disentangling objective joins [default: 0]
    #[arg(long)]
    det_start: Option<u64>,
    /// Checkpoint selection metric: valid-ce or valid-bleu [default: valid-ce]
    #[arg(long)]
    select_by: Option<String>,
    /// Checkpoints considered for selection [default: 6]
    #[arg(long)]
    keep_last: Option<usize>,
    /// Checkpoints selected [default: 3]
    #[arg(long)]
    top_n: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    d_model: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// [default: 128]
    #[arg(long)]
    ffn_dim: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    enc_layers: Option<usize>,
    /// [default: 2]
    #[arg(long)]
    dec_layers: Option<usize>,
    /// Linguistic encoder layers [default: 2]
    #[arg(long)]
    ling_layers: Option<usize>,
    /// [default: 0.1]
    #[arg(long)]
    dropout: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Weight of the disentangling objective [default: 0.05]
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight of the reconstruction term [default: 0.2]
    #[arg(long)]
    lambda1: Option<f64>,
    /// Negative-pair weight in the contrastive terms [default: 0.2]
    #[arg(long)]
    lambda2: Option<f64>,
    /// Drop the semantic/linguistic branches (requires --no-det-loss)
    #[arg(long)]
    no_disentangler: bool,
    /// Train without the semantic, language and reconstruction losses
    #[arg(long)]
    no_det_loss: bool,
    /// Drop the linguistic encoder and fusion layer
    #[arg(long)]
    no_ling_encoder: bool,
    /// Continue the run in --out from its latest checkpoint
    #[arg(long)]
    resume: bool,
    /// Stop once this many steps are done (the run stays resumable)
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Run directory written by `train`
    #[arg(long)]
    run: PathBuf,
    /// Checkpoint file [default: the best selected checkpoint of the run]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Corpus directory (vocabulary and language definitions)
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Source file, one tokenized sentence per line
    #[arg(long, requires = "tgt_lang", conflicts_with = "split")]
    input: Option<PathBuf>,
    /// Source language [default: detected per line]
    #[arg(long)]
    src_lang: Option<String>,
    /// Target language, e.g. L2
    #[arg(long, required_unless_present = "split")]
    tgt_lang: Option<String>,
    /// Translate every direction of a corpus split instead of --input
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    length_penalty: f64,
    /// Maximum output tokens [default: the model's maximum length]
    #[arg(long)]
    max_len: Option<usize>,
    /// Output file (with --input) or directory (with --split)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Hypothesis directory with <src>-<tgt>.hyp files; repeat to average
    /// several checkpoints' outputs
    #[arg(long, required = true)]
    hyps: Vec<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Other system's hypothesis directory for the in-target comparison
    #[arg(long)]
    in_target_with: Vec<PathBuf>,
    /// Report file (JSON)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelSource,
    /// Lines of `group<TAB>language<TAB>tokens` [default: pairs from --probe-split]
    #[arg(long)]
    sentences: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    probe_split: String,
    /// Pairs per direction taken from --probe-split
    #[arg(long, default_value_t = 20)]
    per_direction: usize,
    /// Comma-separated taps [default: all present in the model]
    #[arg(long)]
    taps: Option<String>,
    /// Export file; the summary goes to <out>.summary.json
    #[arg(long)]
    out: PathBuf,
}

/// Bad flags or flag combinations.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<slmt::Error>() {
        Some(slmt::Error::NonFinite { .. }) => 3,
        Some(slmt::Error::Config(_)) => 1,
        _ => 2,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Translate(a) => translate_cmd(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn parse_lang(s: &str, n_languages: usize) -> anyhow::Result<usize> {
    let id: usize = s
        .strip_prefix('L')
        .unwrap_or(s)
        .parse()
        .map_err(|_| usage(format!("bad language {s:?}; expected L0, L1, ...")))?;
    if id >= n_languages {
        return Err(usage(format!(
            "unknown language {s:?}; corpus has L0..L{}",
            n_languages - 1
        )));
    }
    Ok(id)
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.dir_name() == s)
        .ok_or_else(|| {
            usage(format!(
                "unknown split {s:?}; expected train, valid or test"
            ))
        })
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let mut m = RunManifest::start("gen-data", a.seed);
    if a.languages < 3 {
        return Err(usage(
            "--languages must be at least 3 so that zero-shot directions exist",
        ));
    }
    let spec = CorpusSpec {
        n_languages: a.languages,
        center: parse_lang(&a.center, a.languages)?,
        pairs_per_direction: a.pairs,
        valid_per_direction: a.valid,
        test_per_direction: a.test,
        min_len: a.min_len,
        max_len: a.max_len,
        sem_vocab: a.sem_vocab,
        seed: a.seed,
    };
    let corpus = generate_corpus(&spec).map_err(|e| usage(e.to_string()))?;
    corpus.write(&a.out)?;
    m.outputs.push(a.out.display().to_string());
    m.outputs_digest = Some(hash_corpus(&a.out)?);
    m.finish(&a.out.join("run_manifest.json"))?;
    log::info!(
        "wrote {} directions to {}",
        corpus.splits.values().map(Vec::len).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn train_configs(a: &TrainArgs, vocab: usize) -> anyhow::Result<(ModelConfig, TrainRunConfig)> {
    let mut model = ModelConfig::desk(vocab);
    let mut run = TrainRunConfig::desk(1);
    if let Some(p) = &a.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let kv = slmt::config::parse_kv(&text)?;
        model.apply_kv(&kv)?;
        run.apply_kv(&kv)?;
    }
    macro_rules! set {
        ($dst:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $dst = v;
            }
        };
    }
    set!(run.seed, a.seed);
    set!(run.total_steps, a.steps);
    set!(run.warmup, a.warmup);
    set!(run.peak_lr, a.lr);
    set!(run.checkpoint_interval, a.checkpoint_interval);
    set!(run.max_tokens, a.max_tokens);
    set!(run.keep_last, a.keep_last);
    set!(run.top_n, a.top_n);
    set!(run.det_start, a.det_start);
    if a.clip_norm.is_some() {
        run.clip_norm = a.clip_norm;
    }
    if let Some(s) = &a.select_by {
        run.select_by = s.parse().map_err(usage)?;
    }
    set!(model.d_model, a.d_model);
    set!(model.n_heads, a.heads);
    set!(model.ffn_dim, a.ffn_dim);
    set!(model.n_enc_layers, a.enc_layers);
    set!(model.n_dec_layers, a.dec_layers);
    set!(model.n_ling_layers, a.ling_layers);
    set!(model.dropout, a.dropout);
    set!(model.label_smoothing, a.label_smoothing);
    set!(model.lambda, a.lambda);
    set!(model.lambda1, a.lambda1);
    set!(model.lambda2, a.lambda2);
    model.vocab_size = vocab;
    if a.no_disentangler {
        model.use_disentangler = false;
    }
    if a.no_det_loss {
        model.use_det_loss = false;
    }
    if a.no_ling_encoder {
        model.use_ling_encoder = false;
    }
    model.validate().map_err(|e| usage(e.to_string()))?;
    run.validate().map_err(|e| usage(e.to_string()))?;
    Ok((model, run))
}

fn read_run_configs(run_dir: &Path) -> anyhow::Result<(ModelConfig, TrainRunConfig)> {
    let read = |f: &str| {
        let p = run_dir.join(f);
        fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))
    };
    Ok((
        ModelConfig::from_kv(&read(MODEL_CONFIG_FILE)?)?,
        TrainRunConfig::from_kv(&read(RUN_CONFIG_FILE)?)?,
    ))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let corpus = Corpus::load(&a.corpus).context("loading corpus")?;
    let vocab = corpus.vocab();
    let (model_cfg, run) = if a.resume {
        read_run_configs(&a.out)?
    } else {
        train_configs(&a, vocab.len())?
    };
    if model_cfg.vocab_size != vocab.len() {
        bail!(
            "run vocabulary {} does not match corpus {}",
            model_cfg.vocab_size,
            vocab.len()
        );
    }
    let mut m = RunManifest::start("train", run.seed);
    m.config_digest = Some(model_cfg.digest_hex());
    m.add_input(&a.corpus.join("manifest.json"))?;
    let train_ex = corpus.examples(Split::Train, &vocab)?;
    let valid_ex = corpus.examples(Split::Valid, &vocab)?;
    let model = Model::<f32>::new(model_cfg, run.seed)?;
    log::info!(
        "{} parameters, {} training pairs, {} steps",
        model.parameter_count(),
        train_ex.len(),
        run.total_steps
    );
    let mut trainer = if a.resume {
        Trainer::resume(model, run, train_ex, valid_ex, &a.out)?
    } else {
        Trainer::new(model, run, train_ex, valid_ex, &a.out)?
    };
    let summary = trainer.run(a.stop_after)?;
    m.outputs.push(a.out.display().to_string());
    m.outputs.extend(
        summary
            .selected_files
            .iter()
            .map(|f| a.out.join(f).display().to_string()),
    );
    m.finish(&a.out.join("run_manifest.json"))?;
    match &summary.selection {
        Some(s) => log::info!("selected steps {:?}, mean {}", s.selected, s.mean_metric),
        None => log::info!("stopped at step {}", summary.last_step),
    }
    Ok(())
}

fn best_checkpoint(run_dir: &Path) -> anyhow::Result<PathBuf> {
    let sel = run_dir.join(SELECTION_FILE);
    if sel.exists() {
        let s: slmt::training::Selection = serde_json::from_str(&fs::read_to_string(&sel)?)
            .with_context(|| format!("parsing {}", sel.display()))?;
        if let Some(step) = s.selected.first() {
            return Ok(run_dir.join(format!("{CHECKPOINT_DIR}/step_{step:07}.slmt")));
        }
    }
    let recs = read_checkpoint_log(run_dir)?;
    recs.iter()
        .rev()
        .map(|r| run_dir.join(&r.file))
        .find(|p| p.exists())
        .ok_or_else(|| anyhow!("no checkpoint in {}", run_dir.display()))
}

fn load_model(src: &ModelSource) -> anyhow::Result<(Model<f32>, PathBuf, Corpus)> {
    let (cfg, run) = read_run_configs(&src.run)?;
    let ck_path = match &src.checkpoint {
        Some(p) => p.clone(),
        None => best_checkpoint(&src.run)?,
    };
    let mut model = Model::<f32>::new(cfg, run.seed)?;
    model.load_params(&Checkpoint::load(&ck_path)?)?;
    let corpus = Corpus::load(&src.corpus).context("loading corpus")?;
    if corpus.vocab().len() != model.config.vocab_size {
        bail!("corpus vocabulary does not match the model");
    }
    Ok((model, ck_path, corpus))
}

/// Language holding most of the line's tokens.
fn detect_lang(tokens: &[String], vocab: &Vocab) -> Option<usize> {
    let mut counts = BTreeMap::new();
    for t in tokens {
        if let Some(l) = vocab.id(t).ok().and_then(|i| vocab.language_of(i)) {
            *counts.entry(l).or_insert(0usize) += 1;
        }
    }
    counts
        .into_iter()
        .max_by_key(|&(l, c)| (c, std::cmp::Reverse(l)))
        .map(|(l, _)| l)
}

fn render_lines(lines: &[Vec<String>]) -> String {
    lines.iter().map(|l| l.join(" ") + "\n").collect()
}

fn translate_cmd(a: TranslateArgs) -> anyhow::Result<()> {
    let (model, ck_path, corpus) = load_model(&a.model)?;
    let vocab = corpus.vocab();
    let n = vocab.n_languages();
    let cfg = DecodeConfig::new(
        a.beam,
        a.length_penalty,
        a.max_len.unwrap_or(model.config.max_len),
    )
    .map_err(|e| usage(e.to_string()))?;
    let mut m = RunManifest::start("translate", 0);
    m.config_digest = Some(model.config.digest_hex());
    m.add_input(&ck_path)?;
    m.add_input(&a.model.corpus.join("manifest.json"))?;
    let manifest_path;
    if let Some(input) = &a.input {
        let tgt = parse_lang(a.tgt_lang.as_deref().expect("clap requires it"), n)?;
        let src_lang = a
            .src_lang
            .as_deref()
            .map(|s| parse_lang(s, n))
            .transpose()?;
        m.add_input(input)?;
        let lines = read_lines(input)?;
        let sources = lines
            .iter()
            .enumerate()
            .map(|(i, toks)| {
                let l = match src_lang {
                    Some(l) => l,
                    None => detect_lang(toks, &vocab).ok_or_else(|| {
                        anyhow!("line {}: cannot tell the source language", i + 1)
                    })?,
                };
                let mut ids = vec![vocab.lang_tag(l)];
                ids.extend(
                    vocab
                        .encode(toks)
                        .with_context(|| format!("line {}", i + 1))?,
                );
                Ok(ids)
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let hyps = translate(&model, &sources, vocab.lang_tag(tgt), &cfg)?;
        let out: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(h)).collect();
        write_file(&a.out, &render_lines(&out))?;
        m.outputs.push(a.out.display().to_string());
        manifest_path = PathBuf::from(format!("{}.manifest.json", a.out.display()));
    } else {
        let split = parse_split(a.split.as_deref().expect("clap requires it"))?;
        let tgt = a
            .tgt_lang
            .as_deref()
            .map(|s| parse_lang(s, n))
            .transpose()?;
        fs::create_dir_all(&a.out)?;
        for d in corpus.split(split) {
            if tgt.is_some_and(|t| t != d.direction.tgt) {
                continue;
            }
            let sources = d
                .src
                .iter()
                .map(|s| {
                    let mut ids = vec![vocab.lang_tag(d.direction.src)];
                    ids.extend(vocab.encode(s)?);
                    Ok(ids)
                })
                .collect::<slmt::Result<Vec<_>>>()?;
            let hyps = translate(&model, &sources, vocab.lang_tag(d.direction.tgt), &cfg)?;
            let out: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(h)).collect();
            let path = a.out.join(format!("{}.hyp", d.direction));
            write_file(&path, &render_lines(&out))?;
            m.outputs.push(path.display().to_string());
            log::info!("translated {}", d.direction);
        }
        manifest_path = a.out.join("run_manifest.json");
    }
    m.finish(&manifest_path)
}

fn read_system(dir: &Path, corpus: &Corpus, split: Split) -> anyhow::Result<SystemOutputs> {
    let mut out = BTreeMap::new();
    for d in corpus.split(split) {
        let p = dir.join(format!("{}.hyp", d.direction));
        if p.exists() {
            let lines = read_lines(&p)?;
            if lines.len() != d.tgt.len() {
                bail!(
                    "{}: {} lines for {} references",
                    p.display(),
                    lines.len(),
                    d.tgt.len()
                );
            }
            out.insert(d.direction, lines);
        }
    }
    if out.is_empty() {
        bail!(
            "no <src>-<tgt>.hyp files for split {} in {}",
            split.dir_name(),
            dir.display()
        );
    }
    Ok(out)
}

/// Mean of several reports' per-direction rows, in row order.
fn average_reports(reports: &[EvalReport]) -> anyhow::Result<EvalReport> {
    let first = &reports[0];
    let mut rows = Vec::new();
    for (i, r) in first.directions.iter().enumerate() {
        let same: Vec<&DirectionScore> = reports.iter().map(|x| &x.directions[i]).collect();
        if same.iter().any(|s| s.direction != r.direction) {
            bail!("hypothesis sets cover different directions");
        }
        let k = same.len() as f64;
        rows.push(DirectionScore {
            bleu: same.iter().map(|s| s.bleu).sum::<f64>() / k,
            off_target_rate: same.iter().map(|s| s.off_target_rate).sum::<f64>() / k,
            ..r.clone()
        });
    }
    Ok(EvalReport::from_rows(rows))
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let split = parse_split(&a.split)?;
    let corpus = Corpus::load(&a.corpus).context("loading corpus")?;
    let mut m = RunManifest::start("evaluate", 0);
    m.add_input(&a.corpus.join("manifest.json"))?;
    let mut systems = Vec::new();
    for dir in &a.hyps {
        let sys = read_system(dir, &corpus, split)?;
        for d in sys.keys() {
            m.add_input(&dir.join(format!("{d}.hyp")))?;
        }
        systems.push(sys);
    }
    let reports = systems
        .iter()
        .map(|s| score_outputs(&corpus, split, s))
        .collect::<slmt::Result<Vec<_>>>()?;
    let mut report = if reports.len() == 1 {
        reports.into_iter().next().expect("one report")
    } else {
        average_reports(&reports)?
    };
    if !a.in_target_with.is_empty() {
        let others = a
            .in_target_with
            .iter()
            .map(|d| read_system(d, &corpus, split))
            .collect::<anyhow::Result<Vec<_>>>()?;
        add_in_target(&mut report, &corpus, split, &systems[0], &others)?;
    }
    write_file(&a.out, &report.to_json())?;
    m.outputs.push(a.out.display().to_string());
    m.finish(Path::new(&format!("{}.manifest.json", a.out.display())))?;
    if let (Some(s), Some(z)) = (report.supervised_average, report.zero_shot_average) {
        log::info!("supervised BLEU {s:.2}, zero-shot BLEU {z:.2}");
    }
    Ok(())
}

fn read_probe_file(path: &Path, vocab: &Vocab) -> anyhow::Result<Vec<ProbeSentence>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.splitn(3, '\t').collect();
            if f.len() != 3 {
                bail!(
                    "{}:{}: expected group, language and tokens",
                    path.display(),
                    i + 1
                );
            }
            let group = f[0]
                .parse()
                .with_context(|| format!("line {}: bad group", i + 1))?;
            let lang = parse_lang(f[1], vocab.n_languages())?;
            let toks: Vec<String> = f[2].split_whitespace().map(str::to_string).collect();
            let mut ids = vec![vocab.lang_tag(lang)];
            ids.extend(
                vocab
                    .encode(&toks)
                    .with_context(|| format!("line {}", i + 1))?,
            );
            Ok(ProbeSentence { group, lang, ids })
        })
        .collect()
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    let taps = match &a.taps {
        Some(t) => Tap::parse_list(t).map_err(|e| usage(e.to_string()))?,
        None => Vec::new(),
    };
    let (model, ck_path, corpus) = load_model(&a.model)?;
    let vocab = corpus.vocab();
    let taps = if a.taps.is_some() {
        taps
    } else {
        Tap::ALL
            .into_iter()
            .filter(|t| match t {
                Tap::SemanticFfn | Tap::LanguageFfn => model.config.use_disentangler,
                Tap::LinguisticEncoder | Tap::FusionLayer => model.config.use_ling_encoder,
                _ => true,
            })
            .collect()
    };
    let mut m = RunManifest::start("analyze", 0);
    m.config_digest = Some(model.config.digest_hex());
    m.add_input(&ck_path)?;
    m.add_input(&a.model.corpus.join("manifest.json"))?;
    let probes = match &a.sentences {
        Some(p) => {
            m.add_input(p)?;
            read_probe_file(p, &vocab)?
        }
        None => probe_sentences(
            &corpus,
            &vocab,
            parse_split(&a.probe_split)?,
            a.per_direction,
        )?,
    };
    let rows = export_representations(&model, &probes, &taps)?;
    let text = render_export(&model.config.digest_hex(), &rows);
    // statistics come from the rounded values actually written
    let summary = summarize(&parse_export(&text)?);
    write_file(&a.out, &text)?;
    let summary_path = PathBuf::from(format!("{}.summary.json", a.out.display()));
    write_file(
        &summary_path,
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    m.outputs.push(a.out.display().to_string());
    m.outputs.push(summary_path.display().to_string());
    m.finish(Path::new(&format!("{}.manifest.json", a.out.display())))
}
