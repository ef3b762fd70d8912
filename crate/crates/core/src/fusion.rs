//! Decoder-side linguistic encoder and the fusion layer that merges its
//! output with the decoder states.

use crate::autodiff::{Graph, Real, TensorError, Var};
use crate::error::Result;
use crate::params::{ParamStore, ParamVars};
use crate::rng::StreamRng;
use crate::transformer::{Encoder, KvCache, Linear};

/// Causally masked encoder stack over the decoder's input embeddings.
#[derive(Debug, Clone)]
pub struct LinguisticEncoder {
    pub stack: Encoder,
}

impl LinguisticEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        n_layers: usize,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        LinguisticEncoder {
            stack: Encoder::new(store, seed, "lingenc", n_layers, d_model, heads, ffn_dim),
        }
    }

    /// `embedded [B, T, D]` are the decoder input embeddings, positions
    /// already added.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        embedded: Var,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        self.stack.forward(g, p, embedded, None, true, dropout, rng)
    }

    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        embedded: Var,
        caches: &mut [KvCache<T>],
        rng: &mut StreamRng,
    ) -> Result<Var> {
        self.stack.step(g, p, embedded, caches, rng)
    }

    pub fn n_layers(&self) -> usize {
        self.stack.layers.len()
    }
}

/// `outer(ReLU(inner([h_dec; h_ling])))` with `inner: 2D → ffn_dim` and
/// `outer: ffn_dim → D`.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub inner: Linear,
    pub outer: Linear,
}

impl FusionLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        d_model: usize,
        ffn_dim: usize,
    ) -> Self {
        FusionLayer {
            inner: Linear::new(store, seed, "fusion.inner", 2 * d_model, ffn_dim),
            outer: Linear::new(store, seed, "fusion.outer", ffn_dim, d_model),
        }
    }

    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        h_dec: Var,
        h_ling: Var,
    ) -> Result<Var> {
        if g.shape(h_dec) != g.shape(h_ling) {
            return Err(TensorError::Shape {
                op: "fuse",
                shapes: vec![g.shape(h_dec).to_vec(), g.shape(h_ling).to_vec()],
            }
            .into());
        }
        let axis = g.shape(h_dec).len() - 1;
        let cat = g.concat(&[h_dec, h_ling], axis)?;
        let h = self.inner.forward(g, p, cat)?;
        let h = g.relu(h);
        self.outer.forward(g, p, h)
    }
}
