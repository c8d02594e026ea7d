//! Windowed multi-head self-attention with a learned relative position
//! bias, and the pre-norm transformer layer built on it.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear, ATTN_INIT_STD};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

pub const MLP_RATIO: usize = 4;

/// Non-overlapping `M×M` windows of an NHWC map: `[n · (h/M) · (w/M), M², c]`,
/// windows row-major over the grid and pixels row-major inside a window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub windows: Tensor,
    pub origin_shape: [usize; 4],
    pub window: usize,
}

impl WindowBatch {
    pub fn num_windows(&self) -> usize {
        self.windows.shape()[0]
    }
}

fn check_tiling(shape: [usize; 4], m: usize) -> Result<()> {
    let [_, h, w, _] = shape;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::Shape(format!("{h}×{w} is not tiled by {m}×{m} windows")));
    }
    Ok(())
}

const PARTITION: [usize; 6] = [0, 1, 3, 2, 4, 5];

pub fn window_partition(f: &Tensor, m: usize) -> Result<WindowBatch> {
    let shape = f.dims4()?;
    check_tiling(shape, m)?;
    let [n, h, w, c] = shape;
    let x = f.clone().reshape(&[n, h / m, m, w / m, m, c])?;
    let windows = tensor::permute(&x, &PARTITION).reshape(&[n * (h / m) * (w / m), m * m, c])?;
    Ok(WindowBatch {
        windows,
        origin_shape: shape,
        window: m,
    })
}

pub fn window_merge(wb: &WindowBatch) -> Result<Tensor> {
    let [n, h, w, c] = wb.origin_shape;
    let m = wb.window;
    check_tiling(wb.origin_shape, m)?;
    let x = wb.windows.clone().reshape(&[n, h / m, w / m, m, m, c])?;
    tensor::permute(&x, &PARTITION).reshape(&[n, h, w, c])
}

pub fn partition_var(g: &mut Graph, x: Var, m: usize) -> Var {
    let [n, h, w, c] = g.value(x).dims4().expect("partition input");
    let r = g.reshape(x, &[n, h / m, m, w / m, m, c]);
    let p = g.permute(r, &PARTITION);
    g.reshape(p, &[n * (h / m) * (w / m), m * m, c])
}

pub fn merge_var(g: &mut Graph, x: Var, shape: [usize; 4], m: usize) -> Var {
    let [n, h, w, c] = shape;
    let r = g.reshape(x, &[n, h / m, w / m, m, m, c]);
    let p = g.permute(r, &PARTITION);
    g.reshape(p, &[n, h, w, c])
}

/// Row of the `(2M−1)²` bias table for every ordered token pair of a window.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let t = m * m;
    let span = 2 * m - 1;
    let mut index = Vec::with_capacity(t * t);
    for i in 0..t {
        let (yi, xi) = (i / m, i % m);
        for j in 0..t {
            let (yj, xj) = (j / m, j % m);
            index.push((yi + m - 1 - yj) * span + (xi + m - 1 - xj));
        }
    }
    index
}

/// `softmax(q·kᵀ/√d + bias)·v` for `[batch·heads, t, d]` operands, the bias
/// being `[1, heads, t, t]` and shared across the batch.
pub fn scaled_dot_attention(g: &mut Graph, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize) -> Var {
    let &[bh, t, d] = g.shape(q) else {
        panic!("attention operands must be 3-D");
    };
    let scores = g.bmm(q, k, false, true);
    debug_assert_eq!(g.shape(scores), [bh, t, t]);
    let weights = g.attention_softmax(scores, bias, 1.0 / (d as f64).sqrt(), heads);
    g.bmm(weights, v, false, false)
}

fn check_attention_operands(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<(usize, usize)> {
    let (&[t, d], &[tk, dk], &[tv, _]) = (q.shape(), k.shape(), v.shape()) else {
        return Err(Error::Shape("q, k, v must be 2-D [tokens, dim]".into()));
    };
    if tk != t || tv != t || dk != d {
        return Err(Error::Shape(format!(
            "q {:?}, k {:?}, v {:?} disagree",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [t, t] {
            return Err(Error::Shape(format!("bias {:?}, expected [{t}, {t}]", b.shape())));
        }
    }
    let all = [Some(q), Some(k), Some(v), bias];
    if all.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("attention"));
    }
    Ok((t, d))
}

/// Single-head attention weights `softmax(q·kᵀ/√d + B)`, `[t, t]`.
pub fn attention_weights(q: &Tensor, k: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, d) = check_attention_operands(q, k, k, bias)?;
    let mut g = Graph::detached(false);
    let qv = g.constant(q.clone().reshape(&[1, t, d])?);
    let kv = g.constant(k.clone().reshape(&[1, t, d])?);
    let s = g.bmm(qv, kv, false, true);
    let mut s = g.scale(s, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        let bv = g.constant(b.clone().reshape(&[1, t, t])?);
        s = g.add(s, bv);
    }
    let w = g.softmax_last(s);
    g.value(w).clone().reshape(&[t, t])
}

/// Single-head attention output, `[t, d_v]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (t, _) = check_attention_operands(q, k, v, bias)?;
    let dv = v.shape()[1];
    let mut g = Graph::detached(false);
    let w = g.constant(attention_weights(q, k, bias)?.reshape(&[1, t, t])?);
    let vv = g.constant(v.clone().reshape(&[1, t, dv])?);
    let out = g.bmm(w, vv, false, false);
    g.value(out).clone().reshape(&[t, dv])
}

/// Window multi-head self-attention.
#[derive(Debug, Clone)]
pub struct Msa {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub bias_table: ParamId,
    index: Arc<Vec<usize>>,
    pub heads: usize,
    pub window: usize,
    pub dim: usize,
}

impl Msa {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{dim} channels do not split into {heads} heads");
        let span = 2 * window - 1;
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim),
            bias_table: store.add(
                format!("{name}.rel_bias"),
                trunc_normal(rng, &[span * span, heads], ATTN_INIT_STD),
            ),
            index: Arc::new(relative_position_index(window)),
            heads,
            window,
            dim,
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Var {
        let &[b, t, c] = g.shape(x) else { unreachable!() };
        let d = c / self.heads;
        let r = g.reshape(x, &[b, t, self.heads, d]);
        let p = g.permute(r, &[0, 2, 1, 3]);
        g.reshape(p, &[b * self.heads, t, d])
    }

    /// Attention over already partitioned tokens `[windows, M², c]`.
    pub fn forward_windows(&self, g: &mut Graph, x: Var) -> Var {
        let &[b, t, c] = g.shape(x) else {
            panic!("msa expects [windows, tokens, channels]");
        };
        let q = self.q.forward(g, x);
        let q = self.split_heads(g, q);
        let k = self.k.forward(g, x);
        let k = self.split_heads(g, k);
        let v = self.v.forward(g, x);
        let v = self.split_heads(g, v);
        let table = g.param(self.bias_table);
        let bias = g.gather_bias(table, self.index.clone(), t);
        let o = scaled_dot_attention(g, q, k, v, Some(bias), self.heads);
        let o = g.reshape(o, &[b, self.heads, t, c / self.heads]);
        let o = g.permute(o, &[0, 2, 1, 3]);
        let o = g.reshape(o, &[b, t, c]);
        self.proj.forward(g, o)
    }

    /// Attention over an NHWC map; output has the input shape.
    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let shape = g.value(f).dims4().expect("msa input");
        let w = partition_var(g, f, self.window);
        let o = self.forward_windows(g, w);
        merge_var(g, o, shape, self.window)
    }

    /// Checked evaluation on a plain tensor.
    pub fn apply(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        self.check_input(f)?;
        let mut g = Graph::new(store, false);
        let x = g.constant(f.clone());
        let y = self.forward(&mut g, x);
        Ok(g.value(y).clone())
    }

    fn check_input(&self, f: &Tensor) -> Result<()> {
        let shape = f.dims4()?;
        if shape[3] != self.dim {
            return Err(Error::Shape(format!("expected {} channels, got {}", self.dim, shape[3])));
        }
        check_tiling(shape, self.window)
    }
}

/// `x + MSA(LN(x))`, then `x + MLP(LN(x))` with a GELU MLP of ratio 4.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub msa: Msa,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            msa: Msa::new(store, rng, &format!("{name}.attn"), dim, heads, window),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), dim, MLP_RATIO * dim),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), MLP_RATIO * dim, dim),
        }
    }

    /// One layer over partitioned tokens `[windows, M², c]`.
    pub fn forward_windows(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.norm1.forward(g, x);
        let a = self.msa.forward_windows(g, n);
        let x = g.add(x, a);
        let n = self.norm2.forward(g, x);
        let h = self.fc1.forward(g, n);
        let h = g.gelu(h);
        let m = self.fc2.forward(g, h);
        g.add(x, m)
    }

    pub fn forward(&self, g: &mut Graph, f: Var) -> Var {
        let shape = g.value(f).dims4().expect("transformer input");
        let w = partition_var(g, f, self.msa.window);
        let o = self.forward_windows(g, w);
        merge_var(g, o, shape, self.msa.window)
    }

    pub fn apply(&self, store: &ParamStore, f: &Tensor) -> Result<Tensor> {
        self.msa.check_input(f)?;
        let mut g = Graph::new(store, false);
        let x = g.constant(f.clone());
        let y = self.forward(&mut g, x);
        Ok(g.value(y).clone())
    }

    /// Zero the MSA and MLP output projections, making the layer the identity.
    pub fn zero_output_projections(&self, store: &mut ParamStore) {
        self.msa.proj.zero(store);
        self.fc2.zero(store);
    }
}
