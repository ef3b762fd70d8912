use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::StreamRng;

/// Additive attention bias for disallowed positions. Large enough that
/// `exp` underflows to exactly zero after the max-shift in softmax.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weight `[in, out]` drawn from `U(-√(3/in), √(3/in))`, zero bias.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let bound = (3.0 / in_dim as f64).sqrt();
        let weight =
            store.add_uniform(seed, &format!("{prefix}.weight"), &[in_dim, out_dim], bound);
        let bias = store.add_constant(&format!("{prefix}.bias"), &[out_dim], 0.0);
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let y = g.matmul(x, p.get(self.weight))?;
        Ok(g.add(y, p.get(self.bias))?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add_constant(&format!("{prefix}.gain"), &[dim], 1.0),
            bias: store.add_constant(&format!("{prefix}.bias"), &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        Ok(g.layer_norm(x, p.get(self.gain), p.get(self.bias))?)
    }
}

/// `Linear(in → hidden)`, ReLU, `Linear(hidden → out)`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, seed, &format!("{prefix}.fc1"), in_dim, hidden),
            fc2: Linear::new(store, seed, &format!("{prefix}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.relu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Key/value history of one self-attention block during incremental
/// decoding, each `[rows, heads, t, head_dim]`.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    pub keys: Option<Tensor<T>>,
    pub values: Option<Tensor<T>>,
}

impl<T: Real> KvCache<T> {
    pub fn empty() -> Self {
        KvCache {
            keys: None,
            values: None,
        }
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        KvCache {
            keys: self.keys.as_ref().map(|t| t.select_rows(rows)),
            values: self.values.as_ref().map(|t| t.select_rows(rows)),
        }
    }
}

/// `[batch, heads, tq, tk]` bias: `MASK_BIAS` on padded keys and, when
/// `causal`, on keys after the query position.
pub fn attention_bias<T: Real>(
    batch: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    key_valid: Option<&[bool]>,
    causal: bool,
) -> Tensor<T> {
    let neg = T::lit(MASK_BIAS);
    let mut data = vec![T::zero(); batch * heads * tq * tk];
    let offset = tk.saturating_sub(tq);
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tq {
                let row = ((b * heads + h) * tq + i) * tk;
                for j in 0..tk {
                    let padded = key_valid.is_some_and(|kv| !kv[b * tk + j]);
                    if padded || (causal && j > i + offset) {
                        data[row + j] = neg;
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, heads, tq, tk], data).expect("bias shape")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        heads: usize,
    ) -> Self {
        MultiHeadAttention {
            query: Linear::new(store, seed, &format!("{prefix}.q"), d_model, d_model),
            key: Linear::new(store, seed, &format!("{prefix}.k"), d_model, d_model),
            value: Linear::new(store, seed, &format!("{prefix}.v"), d_model, d_model),
            output: Linear::new(store, seed, &format!("{prefix}.o"), d_model, d_model),
            heads,
        }
    }

    /// `[B, T, D] → [B, H, T, D/H]`
    pub fn split_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let r = g.reshape(x, &[b, t, self.heads, d / self.heads])?;
        Ok(g.permute(r, &[0, 2, 1, 3])?)
    }

    fn merge_heads<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (b, h, t, dh) = (s[0], s[1], s[2], s[3]);
        let p = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(p, &[b, t, h * dh])?)
    }

    /// Keys and values of `source`, split into heads.
    pub fn project_kv<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        source: Var,
    ) -> Result<(Var, Var)> {
        let k = self.key.forward(g, p, source)?;
        let k = self.split_heads(g, k)?;
        let v = self.value.forward(g, p, source)?;
        let v = self.split_heads(g, v)?;
        Ok((k, v))
    }

    /// Scaled dot-product attention of `query [B, Tq, D]` over pre-split
    /// keys/values, followed by the output projection.
    pub fn attend<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        query: Var,
        keys: Var,
        values: Var,
        bias: Option<Tensor<T>>,
    ) -> Result<Var> {
        let q = self.query.forward(g, p, query)?;
        let q = self.split_heads(g, q)?;
        let dh = g.shape(q)[3];
        let kt = g.transpose(keys, 2, 3)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = match bias {
            Some(b) => {
                let bv = g.constant(b);
                g.add(scores, bv)?
            }
            None => scores,
        };
        let probs = g.softmax(scores, 3)?;
        let ctx = g.matmul(probs, values)?;
        let merged = self.merge_heads(g, ctx)?;
        self.output.forward(g, p, merged)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        query: Var,
        source: Var,
        bias: Option<Tensor<T>>,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, p, source)?;
        self.attend(g, p, query, k, v, bias)
    }

    /// Self-attention for newly appended positions `x [R, n, D]`, with the
    /// history in `cache` (extended in place). Causal within the new block.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        cache: &mut KvCache<T>,
    ) -> Result<Var> {
        let (k_new, v_new) = self.project_kv(g, p, x)?;
        let (k, v) = match (&cache.keys, &cache.values) {
            (Some(k_old), Some(v_old)) => {
                let ko = g.constant(k_old.clone());
                let vo = g.constant(v_old.clone());
                (g.concat(&[ko, k_new], 2)?, g.concat(&[vo, v_new], 2)?)
            }
            _ => (k_new, v_new),
        };
        cache.keys = Some(g.value(k).clone());
        cache.values = Some(g.value(v).clone());
        let s = g.shape(k).to_vec();
        let n = g.shape(x)[1];
        let bias = (n > 1).then(|| attention_bias(s[0], s[1], n, s[2], None, true));
        self.attend(g, p, x, k, v, bias)
    }
}

/// Pre-norm self-attention block with a position-wise feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model),
            attn: MultiHeadAttention::new(
                store,
                seed,
                &format!("{prefix}.self_attn"),
                d_model,
                heads,
            ),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model),
            ffn: FeedForward::new(
                store,
                seed,
                &format!("{prefix}.ffn"),
                d_model,
                ffn_dim,
                d_model,
            ),
        }
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        bias: Tensor<T>,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, h, Some(bias))?;
        let a = g.dropout(a, dropout, rng)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x, dropout, rng)
    }

    fn feed_forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm2.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        let f = g.dropout(f, dropout, rng)?;
        Ok(g.add(x, f)?)
    }

    /// Causal incremental form, eval mode only.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        cache: &mut KvCache<T>,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.attn.step(g, p, h, cache)?;
        let x = g.add(x, a)?;
        self.feed_forward(g, p, x, 0.0, rng)
    }
}

/// Pre-norm block: causal self-attention, cross-attention, feed-forward.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        seed: u64,
        prefix: &str,
        d_model: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d_model),
            self_attn: MultiHeadAttention::new(
                store,
                seed,
                &format!("{prefix}.self_attn"),
                d_model,
                heads,
            ),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d_model),
            cross_attn: MultiHeadAttention::new(
                store,
                seed,
                &format!("{prefix}.cross_attn"),
                d_model,
                heads,
            ),
            norm3: LayerNorm::new(store, &format!("{prefix}.norm3"), d_model),
            ffn: FeedForward::new(
                store,
                seed,
                &format!("{prefix}.ffn"),
                d_model,
                ffn_dim,
                d_model,
            ),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        memory: Var,
        self_bias: Tensor<T>,
        cross_bias: Tensor<T>,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.self_attn.forward(g, p, h, h, Some(self_bias))?;
        let a = g.dropout(a, dropout, rng)?;
        let x = g.add(x, a)?;
        let (mk, mv) = self.cross_attn.project_kv(g, p, memory)?;
        self.cross_and_ffn(g, p, x, mk, mv, cross_bias, dropout, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_and_ffn<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        mem_keys: Var,
        mem_values: Var,
        cross_bias: Tensor<T>,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm2.forward(g, p, x)?;
        let c = self
            .cross_attn
            .attend(g, p, h, mem_keys, mem_values, Some(cross_bias))?;
        let c = g.dropout(c, dropout, rng)?;
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, p, x)?;
        let f = self.ffn.forward(g, p, h)?;
        let f = g.dropout(f, dropout, rng)?;
        Ok(g.add(x, f)?)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        x: Var,
        cache: &mut KvCache<T>,
        mem_keys: &Tensor<T>,
        mem_values: &Tensor<T>,
        cross_bias: Tensor<T>,
        rng: &mut StreamRng,
    ) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let a = self.self_attn.step(g, p, h, cache)?;
        let x = g.add(x, a)?;
        let mk = g.constant(mem_keys.clone());
        let mv = g.constant(mem_values.clone());
        self.cross_and_ffn(g, p, x, mk, mv, cross_bias, 0.0, rng)
    }
}
