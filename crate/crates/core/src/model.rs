//! Full translation model: encoder, optional disentangler, decoder,
//! optional linguistic encoder with fusion, tied output projection.

use crate::autodiff::{Graph, Real, Tensor, TensorError, Var};
use crate::checkpoint::{Checkpoint, Entry};
use crate::config::ModelConfig;
use crate::disentangler::{decoder_feed, DisentangledStates, Disentangler};
use crate::error::{Error, Result};
use crate::fusion::{FusionLayer, LinguisticEncoder};
use crate::params::{ParamStore, ParamVars};
use crate::rng::{substream, StreamRng};
use crate::transformer::{
    attention_bias, output_logits, Decoder, Embedder, Encoder, EncoderOutput, KvCache, TokenBatch,
};

#[derive(Debug, Clone)]
pub struct Architecture {
    pub embed: Embedder,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub disentangler: Option<Disentangler>,
    pub ling_encoder: Option<LinguisticEncoder>,
    pub fusion: Option<FusionLayer>,
}

#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub arch: Architecture,
}

/// Every intermediate of one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub enc: EncoderOutput,
    pub disentangled: Option<DisentangledStates>,
    pub feed: Var,
    pub dec_embed: Var,
    pub h_dec: Var,
    pub h_ling: Option<Var>,
    /// Logit-ready states: fused when the linguistic encoder is on.
    pub h: Var,
    pub logits: Var,
}

/// Decoder memory computed once per source batch, reused by every
/// incremental step.
#[derive(Debug, Clone)]
pub struct EncoderFeed<T> {
    pub states: Tensor<T>,
    pub source: TokenBatch,
    fingerprint: u64,
}

impl<T: Real> EncoderFeed<T> {
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

fn fingerprint<T: Real>(states: &Tensor<T>, source: &TokenBatch) -> u64 {
    // FNV-1a over the state bits and source ids
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for v in states.data() {
        eat(v.as_f64().to_bits());
    }
    for &id in &source.ids {
        eat(id as u64);
    }
    h
}

/// Incremental decoding state for `rows` hypotheses.
#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    feed_fingerprint: u64,
    generation: u64,
    len: usize,
    decoder: Vec<KvCache<T>>,
    ling: Vec<KvCache<T>>,
    memory: Vec<(Tensor<T>, Tensor<T>)>,
    memory_valid: Vec<bool>,
    src_len: usize,
    rows: usize,
}

impl<T: Real> DecoderCache<T> {
    /// Number of positions already fed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Reorders/duplicates hypotheses (beam bookkeeping).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let memory_valid = rows
            .iter()
            .flat_map(|&r| {
                self.memory_valid[r * self.src_len..(r + 1) * self.src_len]
                    .iter()
                    .copied()
            })
            .collect();
        DecoderCache {
            feed_fingerprint: self.feed_fingerprint,
            generation: self.generation,
            len: self.len,
            decoder: self.decoder.iter().map(|c| c.select_rows(rows)).collect(),
            ling: self.ling.iter().map(|c| c.select_rows(rows)).collect(),
            memory: self
                .memory
                .iter()
                .map(|(k, v)| (k.select_rows(rows), v.select_rows(rows)))
                .collect(),
            memory_valid,
            src_len: self.src_len,
            rows: rows.len(),
        }
    }
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let embed = Embedder::new(&mut store, seed, c.vocab_size, c.d_model, c.max_len);
        let encoder = Encoder::new(
            &mut store,
            seed,
            "encoder",
            c.n_enc_layers,
            c.d_model,
            c.n_heads,
            c.ffn_dim,
        );
        let decoder = Decoder::new(
            &mut store,
            seed,
            c.n_dec_layers,
            c.d_model,
            c.n_heads,
            c.ffn_dim,
        );
        let disentangler = c
            .use_disentangler
            .then(|| Disentangler::new(&mut store, seed, c.d_model, c.ffn_dim));
        let ling_encoder = c.use_ling_encoder.then(|| {
            LinguisticEncoder::new(
                &mut store,
                seed,
                c.n_ling_layers,
                c.d_model,
                c.n_heads,
                c.ffn_dim,
            )
        });
        let fusion = c
            .use_ling_encoder
            .then(|| FusionLayer::new(&mut store, seed, c.d_model, c.ffn_dim));
        Ok(Model {
            config,
            params: store,
            arch: Architecture {
                embed,
                encoder,
                decoder,
                disentangler,
                ling_encoder,
                fusion,
            },
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            digest: self.config.digest(),
            entries: self
                .params
                .iter()
                .map(|(_, name, t)| Entry::from_tensor(name, t))
                .collect(),
        }
    }

    /// Loads parameters by name; the checkpoint's config digest must match.
    pub fn load_params(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.digest != self.config.digest() {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let ids: Vec<_> = self
            .params
            .iter()
            .map(|(id, n, _)| (id, n.to_string()))
            .collect();
        for (id, name) in ids {
            let entry = ck
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            self.params.set(id, entry.to_tensor())?;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, tracked: bool) -> ParamVars {
        self.params.bind(g, tracked)
    }

    fn check_ids(&self, batch: &TokenBatch) -> Result<()> {
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding-lookup",
                index: bad,
                bound: self.config.vocab_size,
            }
            .into());
        }
        if batch.len > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: batch.len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        src: &TokenBatch,
        rng: &mut StreamRng,
    ) -> Result<EncoderOutput> {
        self.check_ids(src)?;
        if src.len == 0 || src.batch == 0 {
            return Err(TensorError::EmptyAxis {
                op: "encode",
                axis: 1,
            }
            .into());
        }
        let drop = self.config.dropout;
        let x = self
            .arch
            .embed
            .embed(g, p, &src.ids, src.batch, src.len, 0, drop, rng)?;
        let states = self
            .arch
            .encoder
            .forward(g, p, x, Some(&src.valid), false, drop, rng)?;
        Ok(EncoderOutput {
            states,
            source: src.clone(),
        })
    }

    /// Branch outputs, or `None` when the disentangler is disabled.
    pub fn disentangle(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        enc: &EncoderOutput,
    ) -> Result<Option<DisentangledStates>> {
        self.arch
            .disentangler
            .as_ref()
            .map(|d| d.disentangle(g, p, enc))
            .transpose()
    }

    pub fn embed_decoder_inputs(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        dec_in: &TokenBatch,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        self.check_ids(dec_in)?;
        if dec_in.len == 0 || dec_in.batch == 0 {
            return Err(TensorError::EmptyAxis {
                op: "decode",
                axis: 1,
            }
            .into());
        }
        self.arch.embed.embed(
            g,
            p,
            &dec_in.ids,
            dec_in.batch,
            dec_in.len,
            0,
            self.config.dropout,
            rng,
        )
    }

    /// Decoder states `[B, T, D]` given embedded decoder inputs.
    pub fn decode_teacher_forced(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        feed: Var,
        source: &TokenBatch,
        dec_embed: Var,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        self.arch.decoder.forward(
            g,
            p,
            dec_embed,
            feed,
            &source.valid,
            self.config.dropout,
            rng,
        )
    }

    pub fn linguistic_encode(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        dec_embed: Var,
        rng: &mut StreamRng,
    ) -> Result<Option<Var>> {
        self.arch
            .ling_encoder
            .as_ref()
            .map(|l| l.encode(g, p, dec_embed, self.config.dropout, rng))
            .transpose()
    }

    /// Fused states when the linguistic encoder is on, else `h_dec` itself.
    pub fn fuse(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        h_dec: Var,
        h_ling: Option<Var>,
    ) -> Result<Var> {
        match (&self.arch.fusion, h_ling) {
            (Some(f), Some(l)) => f.fuse(g, p, h_dec, l),
            _ => Ok(h_dec),
        }
    }

    pub fn output_logits(&self, g: &mut Graph<T>, p: &ParamVars, h: Var) -> Result<Var> {
        output_logits(g, p, &self.arch.embed, h)
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        src: &TokenBatch,
        dec_in: &TokenBatch,
        rng: &mut StreamRng,
    ) -> Result<ForwardPass> {
        if src.batch != dec_in.batch {
            return Err(TensorError::Shape {
                op: "forward",
                shapes: vec![vec![src.batch, src.len], vec![dec_in.batch, dec_in.len]],
            }
            .into());
        }
        let enc = self.encode(g, p, src, rng)?;
        let disentangled = self.disentangle(g, p, &enc)?;
        let feed = decoder_feed(&enc, disentangled.as_ref());
        let dec_embed = self.embed_decoder_inputs(g, p, dec_in, rng)?;
        let h_dec = self.decode_teacher_forced(g, p, feed, src, dec_embed, rng)?;
        let h_ling = self.linguistic_encode(g, p, dec_embed, rng)?;
        let h = self.fuse(g, p, h_dec, h_ling)?;
        let logits = self.output_logits(g, p, h)?;
        Ok(ForwardPass {
            enc,
            disentangled,
            feed,
            dec_embed,
            h_dec,
            h_ling,
            h,
            logits,
        })
    }

    /// Eval-mode logit-ready states `[B, T, D]` for a whole target prefix.
    pub fn teacher_forced_states(
        &self,
        src: &TokenBatch,
        dec_in: &TokenBatch,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let p = self.bind(&mut g, false);
        let mut rng = substream(0, "eval");
        let pass = self.forward(&mut g, &p, src, dec_in, &mut rng)?;
        Ok(g.value(pass.h).clone())
    }

    /// Runs the encoder (and disentangler) once in eval mode.
    pub fn encoder_feed(&self, src: &TokenBatch) -> Result<EncoderFeed<T>> {
        let mut g = Graph::eval();
        let p = self.bind(&mut g, false);
        let mut rng = substream(0, "eval");
        let enc = self.encode(&mut g, &p, src, &mut rng)?;
        let dis = self.disentangle(&mut g, &p, &enc)?;
        let feed = decoder_feed(&enc, dis.as_ref());
        let states = g.value(feed).clone();
        let fingerprint = fingerprint(&states, src);
        Ok(EncoderFeed {
            states,
            source: src.clone(),
            fingerprint,
        })
    }

    /// Empty cache with cross-attention keys/values precomputed from `feed`.
    pub fn start_cache(&self, feed: &EncoderFeed<T>) -> Result<DecoderCache<T>> {
        let mut g = Graph::eval();
        let p = self.bind(&mut g, false);
        let mem = g.constant(feed.states.clone());
        let mut memory = Vec::new();
        for layer in &self.arch.decoder.layers {
            let (k, v) = layer.cross_attn.project_kv(&mut g, &p, mem)?;
            memory.push((g.value(k).clone(), g.value(v).clone()));
        }
        let n_ling = self.arch.ling_encoder.as_ref().map_or(0, |l| l.n_layers());
        Ok(DecoderCache {
            feed_fingerprint: feed.fingerprint,
            generation: self.params.generation(),
            len: 0,
            decoder: vec![KvCache::empty(); self.arch.decoder.layers.len()],
            ling: vec![KvCache::empty(); n_ling],
            memory,
            memory_valid: feed.source.valid.clone(),
            src_len: feed.source.len,
            rows: feed.source.batch,
        })
    }

    /// Feeds one token per cache row and returns the logit-ready state
    /// `[rows, D]` of that position.
    pub fn decode_step(
        &self,
        cache: &mut DecoderCache<T>,
        next_ids: &[usize],
        feed: &EncoderFeed<T>,
    ) -> Result<Tensor<T>> {
        if cache.feed_fingerprint != feed.fingerprint {
            return Err(Error::StaleCache("encoder feed"));
        }
        if cache.generation != self.params.generation() {
            return Err(Error::StaleCache("model parameters"));
        }
        if next_ids.len() != cache.rows {
            return Err(TensorError::Shape {
                op: "decode-step",
                shapes: vec![vec![next_ids.len()], vec![cache.rows]],
            }
            .into());
        }
        let rows = cache.rows;
        let step_batch = TokenBatch {
            ids: next_ids.to_vec(),
            valid: vec![true; rows],
            batch: rows,
            len: 1,
        };
        self.check_ids(&step_batch)?;
        let mut g = Graph::eval();
        let p = self.bind(&mut g, false);
        let mut rng = substream(0, "eval");
        let x = self
            .arch
            .embed
            .embed(&mut g, &p, next_ids, rows, 1, cache.len, 0.0, &mut rng)?;
        let heads = self.config.n_heads;
        let cross_bias = attention_bias::<T>(
            rows,
            heads,
            1,
            cache.src_len,
            Some(&cache.memory_valid),
            false,
        );
        let mut h = x;
        for (i, layer) in self.arch.decoder.layers.iter().enumerate() {
            let (mk, mv) = &cache.memory[i];
            h = layer.step(
                &mut g,
                &p,
                h,
                &mut cache.decoder[i],
                mk,
                mv,
                cross_bias.clone(),
                &mut rng,
            )?;
        }
        let h_dec = self.arch.decoder.final_norm.forward(&mut g, &p, h)?;
        let h_ling = match &self.arch.ling_encoder {
            Some(l) => Some(l.step(&mut g, &p, x, &mut cache.ling, &mut rng)?),
            None => None,
        };
        let out = self.fuse(&mut g, &p, h_dec, h_ling)?;
        cache.len += 1;
        let d = self.config.d_model;
        Ok(g.value(out).clone().reshaped(vec![rows, d])?)
    }

    /// `[rows, D] → [rows, V]`.
    pub fn logits_from_states(&self, states: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let p = self.bind(&mut g, false);
        let s = g.constant(states.clone());
        let l = self.output_logits(&mut g, &p, s)?;
        Ok(g.value(l).clone())
    }
}
