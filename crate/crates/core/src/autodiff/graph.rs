use std::sync::Arc;

use rand::Rng;

use super::tensor::{Real, Tensor};
use super::TensorError;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether dropout is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Value<T> {
    Owned(Tensor<T>),
    Shared(Arc<Tensor<T>>),
}

impl<T> Value<T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        dim: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
        dim: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        outer: usize,
        inner: usize,
    },
    MaskedMean {
        x: Var,
        weights: Vec<T>,
        outer: usize,
        len: usize,
        inner: usize,
    },
    L2Norm {
        a: Var,
        dim: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        dim: usize,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        smoothing: T,
        vocab: usize,
        total_weight: T,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    IndexSelect {
        a: Var,
        indices: Vec<usize>,
        row: usize,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to each vector norm inside cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// Recording arena for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so reverse index order is a
/// valid topological order for the backward sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    backward_done: bool,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    // innermost output axis is contiguous in the loop
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_step = step[last];
    loop {
        let mut o = offset;
        for _ in 0..inner_len {
            out.push(src[o]);
            o += inner_step;
        }
        // advance the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            backward_done: false,
        }
    }

    pub fn train() -> Self {
        Self::new(Mode::Train)
    }

    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf; receives a gradient in `backward`.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(t),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&mut self, t: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(t),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> TensorError {
        TensorError::Shape {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    /// `a [.., m, k] · b`, where `b` is either a shared `[k, n]` matrix or
    /// a stack `[.., k, n]` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                T::gemm(
                    batch * m,
                    k,
                    n,
                    T::one(),
                    av,
                    k as isize,
                    1,
                    bv,
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        &av[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                        &bv[i * k * n..(i + 1) * k * n],
                        n as isize,
                        1,
                        T::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                    );
                }
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            tracked,
        ))
    }

    /// Elementwise sum. `b` may also have a shape equal to a trailing
    /// suffix of `a`'s shape, in which case it is repeated over the
    /// leading axes (bias and positional-table addition).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err("add", &[a, b]));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let out: Vec<T> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let t = Tensor::new(sa.to_vec(), out)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(t, Op::Add { a, b }, tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", &[a, b]));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(t, Op::Sub { a, b }, tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(t, Op::Mul { a, b }, tracked))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x * c).collect(),
        )
        .expect("same shape");
        let tracked = self.is_tracked(a);
        self.push(t, Op::Scale { a, c }, tracked)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x + c).collect(),
        )
        .expect("same shape");
        let tracked = self.is_tracked(a);
        self.push(t, Op::AddScalar { a }, tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| x.max(T::zero())).collect(),
        )
        .expect("same shape");
        let tracked = self.is_tracked(a);
        self.push(t, Op::Relu { a }, tracked)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(self.shape_err("softmax", &[a]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        if len == 0 {
            return Err(TensorError::EmptyAxis {
                op: "softmax",
                axis,
            });
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let tracked = self.is_tracked(a);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            },
            tracked,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let dim = *shape
            .last()
            .ok_or_else(|| self.shape_err("layer-norm", &[x]))?;
        if dim == 0 || self.shape(gain) != [dim] || self.shape(bias) != [dim] {
            return Err(self.shape_err("layer-norm", &[x, gain, bias]));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / dim;
        let eps = T::lit(LAYER_NORM_EPS);
        let inv_d = T::one() / T::lit(dim as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..dim {
                let h = (row[j] - mean) * rs;
                xhat[r * dim + j] = h;
                out[r * dim + j] = h * gv[j] + bv[j];
            }
        }
        let tracked = self.tracked_any(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                dim,
            },
            tracked,
        ))
    }

    /// Gathers rows of `table [V, D]`; output shape is `ids_shape + [D]`.
    pub fn embedding(
        &mut self,
        table: Var,
        ids: &[usize],
        ids_shape: &[usize],
    ) -> Result<Var, TensorError> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Shape {
                op: "embedding-lookup",
                shapes: vec![ts, ids_shape.to_vec()],
            });
        }
        let (vocab, dim) = (ts[0], ts[1]);
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding-lookup",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(dim);
        let tracked = self.is_tracked(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                dim,
            },
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first =
            parts
                .first()
                .map(|&p| self.shape(p).to_vec())
                .ok_or(TensorError::InvalidArgument(
                    "concat of zero tensors".into(),
                ))?;
        if axis >= first.len() {
            return Err(self.shape_err("concat", parts));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(self.shape_err("concat", parts));
            }
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.iter().copied().zip(widths).collect(),
                outer,
                inner,
            },
            tracked,
        ))
    }

    /// Mean over `axis` restricted to positions where `mask` is nonzero.
    /// `mask` has the shape `x.shape[..=axis]`.
    pub fn masked_mean(
        &mut self,
        x: Var,
        mask: &Tensor<T>,
        axis: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || mask.shape() != &shape[..=axis] {
            return Err(TensorError::Shape {
                op: "masked-mean",
                shapes: vec![shape, mask.shape().to_vec()],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let m = mask.data();
        let mut weights = vec![T::zero(); outer * len];
        for o in 0..outer {
            let count = m[o * len..(o + 1) * len]
                .iter()
                .filter(|&&v| v != T::zero())
                .count();
            if count == 0 {
                return Err(TensorError::AllMasked { op: "masked-mean" });
            }
            let w = T::one() / T::lit(count as f64);
            for j in 0..len {
                if m[o * len + j] != T::zero() {
                    weights[o * len + j] = w;
                }
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let w = weights[o * len + j];
                if w == T::zero() {
                    continue;
                }
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s * w;
                }
            }
        }
        let mut out_shape = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        let tracked = self.is_tracked(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MaskedMean {
                x,
                weights,
                outer,
                len,
                inner,
            },
            tracked,
        ))
    }

    /// Euclidean norm over the last axis.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let dim = *shape
            .last()
            .ok_or_else(|| self.shape_err("l2-norm", &[a]))?;
        let av = self.value(a).data();
        let out: Vec<T> = if dim == 0 {
            Vec::new()
        } else {
            av.chunks(dim)
                .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
                .collect()
        };
        let tracked = self.is_tracked(a);
        Ok(self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out)?,
            Op::L2Norm { a, dim },
            tracked,
        ))
    }

    /// Cosine similarity over the last axis, with [`COSINE_EPS`] added to
    /// each norm.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || self.shape(b) != shape.as_slice() {
            return Err(self.shape_err("cosine-similarity", &[a, b]));
        }
        let dim = shape[shape.len() - 1];
        let eps = T::lit(COSINE_EPS);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = if dim == 0 { 0 } else { av.len() / dim };
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &av[r * dim..(r + 1) * dim];
            let y = &bv[r * dim..(r + 1) * dim];
            let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
            let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
            let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
            out.push(dot / ((nx + eps) * (ny + eps)));
        }
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(
            Tensor::new(shape[..shape.len() - 1].to_vec(), out)?,
            Op::Cosine { a, b, dim },
            tracked,
        ))
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(a).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(a);
        let out = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let tracked = self.is_tracked(a);
        Ok(self.push(t, Op::Dropout { a, mask }, tracked))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Result<Var, TensorError> {
        let nd = self.shape(a).len();
        if ax1 >= nd || ax2 >= nd {
            return Err(self.shape_err("transpose", &[a]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(ax1, ax2);
        self.permute(a, &perm)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(self.shape_err("transpose", &[a]));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(self.shape_err("transpose", &[a]));
            }
        }
        let (out, out_shape) = permute_data(self.value(a).data(), &shape, perm);
        let tracked = self.is_tracked(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            tracked,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let tracked = self.is_tracked(a);
        Ok(self.push(t, Op::Reshape { a }, tracked))
    }

    /// Label-smoothed cross entropy averaged over rows with nonzero weight.
    ///
    /// `logits` is `[.., V]`; each row's loss is
    /// `-(1 - s)·log p[target] - (s / V)·Σ_j log p[j]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        smoothing: f64,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape
            .last()
            .ok_or_else(|| self.shape_err("label-smoothed-cross-entropy", &[logits]))?;
        let rows = if vocab == 0 {
            0
        } else {
            self.value(logits).numel() / vocab
        };
        if vocab == 0 || targets.len() != rows || weights.len() != rows {
            return Err(TensorError::Shape {
                op: "label-smoothed-cross-entropy",
                shapes: vec![shape, vec![targets.len()], vec![weights.len()]],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::InvalidArgument(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let total_weight: T = weights.iter().copied().sum();
        if total_weight <= T::zero() {
            return Err(TensorError::AllMasked {
                op: "label-smoothed-cross-entropy",
            });
        }
        let s = T::lit(smoothing);
        let uniform = s / T::lit(vocab as f64);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let w = weights[r];
            let row = &lv[r * vocab..(r + 1) * vocab];
            if targets[r] >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "label-smoothed-cross-entropy",
                    index: targets[r],
                    bound: vocab,
                });
            }
            if w == T::zero() {
                continue;
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&z| (z - mx).exp()).sum();
            let lse = mx + sum.ln();
            let mut sum_lp = T::zero();
            for (j, &z) in row.iter().enumerate() {
                let lp = z - lse;
                probs[r * vocab + j] = lp.exp();
                sum_lp = sum_lp + lp;
            }
            let nll = -(row[targets[r]] - lse);
            let loss = (T::one() - s) * nll - uniform * sum_lp;
            total = total + w * loss;
        }
        let tracked = self.is_tracked(logits);
        Ok(self.push(
            Tensor::scalar(total / total_weight),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                smoothing: s,
                vocab,
                total_weight,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let tracked = self.is_tracked(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, tracked)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(TensorError::EmptyAxis {
                op: "mean",
                axis: 0,
            });
        }
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let tracked = self.is_tracked(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a }, tracked))
    }

    /// Rows of the leading axis, in the order given (repeats allowed).
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(self.shape_err("index-select", &[a]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                op: "index-select",
                index: bad,
                bound: shape[0],
            });
        }
        let row: usize = shape[1..].iter().product();
        let t = self.value(a).select_rows(indices);
        let tracked = self.is_tracked(a);
        Ok(self.push(
            t,
            Op::IndexSelect {
                a,
                indices: indices.to_vec(),
                row,
            },
            tracked,
        ))
    }

    /// Clears the one-shot guard so the graph may be differentiated again.
    pub fn reset(&mut self) {
        self.backward_done = false;
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// A second call without [`Graph::reset`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !self.is_tracked(loss) {
            return Err(TensorError::UntrackedLoss);
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.get().data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    if *shared_rhs {
                        // dA = dC · Bᵀ
                        T::gemm(
                            batch * m,
                            n,
                            k,
                            T::one(),
                            g,
                            n as isize,
                            1,
                            bv,
                            1,
                            n as isize,
                            T::one(),
                            ga,
                            k as isize,
                            1,
                        );
                    } else {
                        for t in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::one(),
                                &g[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                &bv[t * k * n..(t + 1) * k * n],
                                1,
                                n as isize,
                                T::one(),
                                &mut ga[t * m * k..(t + 1) * m * k],
                                k as isize,
                                1,
                            );
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    if *shared_rhs {
                        // dB = Aᵀ · dC
                        T::gemm(
                            k,
                            batch * m,
                            n,
                            T::one(),
                            av,
                            1,
                            k as isize,
                            g,
                            n as isize,
                            1,
                            T::one(),
                            gb,
                            n as isize,
                            1,
                        );
                    } else {
                        for t in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                &av[t * m * k..(t + 1) * m * k],
                                1,
                                k as isize,
                                &g[t * m * n..(t + 1) * m * n],
                                n as isize,
                                1,
                                T::one(),
                                &mut gb[t * k * n..(t + 1) * k * n],
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let nb = gb.len().max(1);
                    for (j, &s) in g.iter().enumerate() {
                        gb[j % nb] = gb[j % nb] + s;
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (d, &s) in gb.iter_mut().zip(g) {
                        *d = *d - s;
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d = *d + s * y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for ((d, &s), &x) in gb.iter_mut().zip(g).zip(av) {
                        *d = *d + s * x;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s * *c;
                    }
                }
            }
            Op::AddScalar { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &s), &y) in ga.iter_mut().zip(g).zip(out) {
                        if y > T::zero() {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Softmax {
                a,
                outer,
                len,
                inner,
            } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..*outer {
                        for t in 0..*inner {
                            let base = o * len * inner + t;
                            let mut dot = T::zero();
                            for j in 0..*len {
                                dot = dot + g[base + j * inner] * out[base + j * inner];
                            }
                            for j in 0..*len {
                                let idx = base + j * inner;
                                ga[idx] = ga[idx] + out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
                dim,
            } => {
                let dim = *dim;
                let gv = self.value(*gain).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv_d = T::one() / T::lit(dim as f64);
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_d;
                        mean_dh_h = mean_dh_h * inv_d;
                        for j in 0..dim {
                            let dh = gr[j] * gv[j];
                            let idx = r * dim + j;
                            gx[idx] = gx[idx] + rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for (idx, (&s, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[idx % dim] = gg[idx % dim] + s * h;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for (idx, &s) in g.iter().enumerate() {
                        gb[idx % dim] = gb[idx % dim] + s;
                    }
                }
            }
            Op::Embedding { table, ids, dim } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        for (d, &s) in gt[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner,
            } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for o in 0..*outer {
                            let src =
                                &g[(o * total + offset) * inner..(o * total + offset + w) * inner];
                            for (d, &s) in
                                gp[o * w * inner..(o + 1) * w * inner].iter_mut().zip(src)
                            {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MaskedMean {
                x,
                weights,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for o in 0..*outer {
                        for j in 0..*len {
                            let w = weights[o * len + j];
                            if w == T::zero() {
                                continue;
                            }
                            let base = (o * len + j) * inner;
                            for t in 0..*inner {
                                gx[base + t] = gx[base + t] + g[o * inner + t] * w;
                            }
                        }
                    }
                }
            }
            Op::L2Norm { a, dim } => {
                let av = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, (&s, &nrm)) in g.iter().zip(out).enumerate() {
                        if nrm == T::zero() {
                            continue;
                        }
                        for j in r * dim..(r + 1) * dim {
                            ga[j] = ga[j] + s * av[j] / nrm;
                        }
                    }
                }
            }
            Op::Cosine { a, b, dim } => {
                let dim = *dim;
                let eps = T::lit(COSINE_EPS);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let rows = g.len();
                let mut stats = Vec::with_capacity(rows);
                for r in 0..rows {
                    let x = &av[r * dim..(r + 1) * dim];
                    let y = &bv[r * dim..(r + 1) * dim];
                    let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                    let nx = x.iter().map(|&v| v * v).sum::<T>().sqrt();
                    let ny = y.iter().map(|&v| v * v).sum::<T>().sqrt();
                    stats.push((dot, nx, ny));
                }
                // d/dx [dot / ((|x|+e)(|y|+e))] = y/(NxNy) - dot·x/(|x| Nx² Ny)
                let contrib =
                    |own: &[T], other: &[T], no: T, nt: T, dot: T, s: T, dst: &mut [T]| {
                        let denom = (no + eps) * (nt + eps);
                        let radial = if no > T::zero() {
                            dot / ((no + eps) * denom * no)
                        } else {
                            T::zero()
                        };
                        for j in 0..dim {
                            dst[j] = dst[j] + s * (other[j] / denom - radial * own[j]);
                        }
                    };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, &(dot, nx, ny)) in stats.iter().enumerate() {
                        contrib(
                            &av[r * dim..(r + 1) * dim],
                            &bv[r * dim..(r + 1) * dim],
                            nx,
                            ny,
                            dot,
                            g[r],
                            &mut ga[r * dim..(r + 1) * dim],
                        );
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (r, &(dot, nx, ny)) in stats.iter().enumerate() {
                        contrib(
                            &bv[r * dim..(r + 1) * dim],
                            &av[r * dim..(r + 1) * dim],
                            ny,
                            nx,
                            dot,
                            g[r],
                            &mut gb[r * dim..(r + 1) * dim],
                        );
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &s), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d = *d + s * m;
                    }
                }
            }
            Op::Permute { a, perm } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (back, _) = permute_data(g, node.value.get().shape(), &inverse);
                    for (d, s) in ga.iter_mut().zip(back) {
                        *d = *d + s;
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                smoothing,
                vocab,
                total_weight,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let vocab = *vocab;
                    let uniform = *smoothing / T::lit(vocab as f64);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w / *total_weight;
                        for j in 0..vocab {
                            let mut d = probs[r * vocab + j] - uniform;
                            if j == targets[r] {
                                d = d - (T::one() - *smoothing);
                            }
                            gl[r * vocab + j] = gl[r * vocab + j] + scale * d;
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = g[0] / T::lit(ga.len() as f64);
                    for d in ga.iter_mut() {
                        *d = *d + s;
                    }
                }
            }
            Op::IndexSelect { a, indices, row } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * row..(r + 1) * row];
                        for (d, &s) in ga[i * row..(i + 1) * row].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
}
