//! Encoder–decoder Transformer: shared embeddings, sinusoidal positions,
//! pre-norm blocks, output projection tied to the embedding table.

mod layers;

pub use layers::{
    attention_bias, DecoderLayer, EncoderLayer, FeedForward, KvCache, LayerNorm, Linear,
    MultiHeadAttention, MASK_BIAS,
};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::StreamRng;

/// Right-padded id matrix `[batch, len]` with a validity flag per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub len: usize,
}

impl TokenBatch {
    pub fn from_rows(rows: &[Vec<usize>], pad_id: usize) -> Self {
        let len = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut valid = Vec::with_capacity(rows.len() * len);
        for r in rows {
            for j in 0..len {
                ids.push(r.get(j).copied().unwrap_or(pad_id));
                valid.push(j < r.len());
            }
        }
        TokenBatch {
            ids,
            valid,
            batch: rows.len(),
            len,
        }
    }

    pub fn row(&self, r: usize) -> Vec<usize> {
        (0..self.len)
            .filter(|&j| self.valid[r * self.len + j])
            .map(|j| self.ids[r * self.len + j])
            .collect()
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.valid[r * self.len..(r + 1) * self.len]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// `[batch, len]` tensor of ones at valid cells.
    pub fn mask<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.batch, self.len],
            self.valid
                .iter()
                .map(|&v| if v { T::one() } else { T::zero() })
                .collect(),
        )
        .expect("mask shape")
    }
}

/// Encoder states `[batch, src_len, d_model]` with the source mask.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    pub source: TokenBatch,
}

/// Token embedding scaled by `√d_model` plus sinusoidal position codes.
#[derive(Debug, Clone)]
pub struct Embedder {
    pub table: ParamId,
    pub d_model: usize,
    pub max_len: usize,
}

pub fn sinusoid(pos: usize, i: usize, d_model: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

impl Embedder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        vocab: usize,
        d_model: usize,
        max_len: usize,
    ) -> Self {
        let bound = (3.0 / d_model as f64).sqrt();
        let table = store.add_uniform(seed, "embed.weight", &[vocab, d_model], bound);
        Embedder {
            table,
            d_model,
            max_len,
        }
    }

    fn positions<T: Real>(&self, start: usize, len: usize) -> Tensor<T> {
        let d = self.d_model;
        let data = (start..start + len)
            .flat_map(|p| (0..d).map(move |i| T::lit(sinusoid(p, i, d))))
            .collect();
        Tensor::new(vec![len, d], data).expect("pe shape")
    }

    /// Embeds `ids [batch, len]` at positions `start..start+len`.
    #[allow(clippy::too_many_arguments)]
    pub fn embed<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        ids: &[usize],
        batch: usize,
        len: usize,
        start: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        if start + len > self.max_len {
            return Err(Error::SequenceTooLong {
                len: start + len,
                max: self.max_len,
            });
        }
        let e = g.embedding(p.get(self.table), ids, &[batch, len])?;
        let e = g.scale(e, T::lit((self.d_model as f64).sqrt()));
        let pe = g.constant(self.positions(start, len));
        let x = g.add(e, pe)?;
        Ok(g.dropout(x, dropout, rng)?)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Encoder {
            layers: (0..n_layers)
                .map(|i| {
                    EncoderLayer::new(
                        store,
                        seed,
                        &format!("{prefix}.layers.{i}"),
                        d_model,
                        heads,
                        ffn_dim,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(store, &format!("{prefix}.final_norm"), d_model),
        }
    }

    /// Runs the stack over `x [B, T, D]`. `key_valid` masks padded keys;
    /// `causal` restricts each position to itself and earlier ones.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        key_valid: Option<&[bool]>,
        causal: bool,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let heads = self.layers.first().map(|l| l.attn.heads).unwrap_or(1);
        let bias = attention_bias::<T>(s[0], heads, s[1], s[1], key_valid, causal);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, p, h, bias.clone(), dropout, rng)?;
        }
        self.final_norm.forward(g, p, h)
    }

    /// One causal incremental step over `x [R, 1, D]`.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        caches: &mut [KvCache<T>],
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let mut h = x;
        for (layer, cache) in self.layers.iter().zip(caches.iter_mut()) {
            h = layer.step(g, p, h, cache, rng)?;
        }
        self.final_norm.forward(g, p, h)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_norm: LayerNorm,
}

impl Decoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        Decoder {
            layers: (0..n_layers)
                .map(|i| {
                    DecoderLayer::new(
                        store,
                        seed,
                        &format!("decoder.layers.{i}"),
                        d_model,
                        heads,
                        ffn_dim,
                    )
                })
                .collect(),
            final_norm: LayerNorm::new(store, "decoder.final_norm", d_model),
        }
    }

    /// Teacher-forced pass over embedded decoder inputs `x [B, T, D]`
    /// attending to `memory [B, S, D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        memory: Var,
        memory_valid: &[bool],
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        let ms = g.shape(memory).to_vec();
        if xs.len() != 3 || ms.len() != 3 || xs[0] != ms[0] || xs[2] != ms[2] {
            return Err(crate::autodiff::TensorError::Shape {
                op: "decoder",
                shapes: vec![xs, ms],
            }
            .into());
        }
        let heads = self.layers.first().map(|l| l.self_attn.heads).unwrap_or(1);
        let self_bias = attention_bias::<T>(xs[0], heads, xs[1], xs[1], None, true);
        let cross_bias = attention_bias::<T>(xs[0], heads, xs[1], ms[1], Some(memory_valid), false);
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(
                g,
                p,
                h,
                memory,
                self_bias.clone(),
                cross_bias.clone(),
                dropout,
                rng,
            )?;
        }
        self.final_norm.forward(g, p, h)
    }
}

/// Projects states `[.., D]` onto the vocabulary with the transposed
/// embedding table. No softmax.
pub fn output_logits<T: Real>(
    g: &mut Graph<T>,
    p: &ParamVars,
    embed: &Embedder,
    states: Var,
) -> Result<Var> {
    let et = g.transpose(p.get(embed.table), 0, 1)?;
    Ok(g.matmul(states, et)?)
}
