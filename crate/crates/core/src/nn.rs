//! Small trainable modules assembled from tensor ops: linear maps, layer
//! norm, multi-head attention, the two-layer GELU feed-forward used as an
//! expert, and embedding tables. Each module exposes `params`, which pushes
//! `(name, tensor)` pairs in a fixed order; checkpointing and the optimizer
//! both key off those names.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{ops, Element, Mask, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Gaussian init with draws quantized through f32, so f32 and f64 models
/// built from the same seed hold identical values.
pub fn init_normal<T: Element>(rng: &mut ChaCha12Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0f64, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::quantize(dist.sample(rng))).collect();
    Tensor::param(shape, data).expect("valid init shape")
}

pub fn init_const<T: Element>(shape: &[usize], v: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![T::of(v); n]).expect("valid init shape")
}

/// Uniform ints for masking decisions and the like.
pub fn rand_index(rng: &mut ChaCha12Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

pub type NamedParams<T> = Vec<(String, Tensor<T>)>;

pub struct Linear<T: Element> {
    pub w: Tensor<T>, // (in, out)
    pub b: Option<Tensor<T>>,
    in_dim: usize,
    out_dim: usize,
}

impl<T: Element> Linear<T> {
    pub fn new(rng: &mut ChaCha12Rng, in_dim: usize, out_dim: usize, bias: bool) -> Linear<T> {
        let std = (2.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            w: init_normal(rng, &[in_dim, out_dim], std),
            b: bias.then(|| init_const(&[out_dim], 0.0)),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = ops::matmul(x, &self.w)?;
        match &self.b {
            Some(b) => ops::add_bias(&y, b),
            None => Ok(y),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        if let Some(b) = &self.b {
            out.push((format!("{prefix}.b"), b.clone()));
        }
    }
}

pub struct LayerNorm<T: Element> {
    pub gain: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize) -> LayerNorm<T> {
        LayerNorm {
            gain: init_const(&[dim], 1.0),
            bias: init_const(&[dim], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gain, &self.bias, LN_EPS)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Pre-norm multi-head self-attention over one sequence `(n, dim)`. Returns
/// the projected attention output without the residual; callers add it.
pub struct Mha<T: Element> {
    pub ln: LayerNorm<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
    heads: usize,
    dim: usize,
}

impl<T: Element> Mha<T> {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, heads: usize) -> Result<Mha<T>> {
        if heads == 0 || dim % heads != 0 {
            return Err(shape_err(format!(
                "attention width {dim} not divisible into {heads} heads"
            )));
        }
        Ok(Mha {
            ln: LayerNorm::new(dim),
            wq: Linear::new(rng, dim, dim, true),
            wk: Linear::new(rng, dim, dim, true),
            wv: Linear::new(rng, dim, dim, true),
            wo: Linear::new(rng, dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mask: Option<&Mask>) -> Result<Tensor<T>> {
        let (n, d) = x.dims2()?;
        if d != self.dim {
            return Err(shape_err(format!(
                "attention expects width {}, got {d}",
                self.dim
            )));
        }
        if let Some(m) = mask {
            if m.rows() != n || m.cols() != n {
                return Err(shape_err(format!(
                    "attention mask ({}, {}) against sequence of {n}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        let xn = self.ln.forward(x)?;
        let q = self.wq.forward(&xn)?;
        let k = self.wk.forward(&xn)?;
        let v = self.wv.forward(&xn)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = ops::slice_cols(&q, h * dh, dh)?;
            let kh = ops::slice_cols(&k, h * dh, dh)?;
            let vh = ops::slice_cols(&v, h * dh, dh)?;
            let scores = ops::scale(&ops::matmul(&qh, &ops::transpose(&kh)?)?, scale);
            let attn = match mask {
                Some(m) => ops::masked_softmax_rows(&scores, m)?,
                None => ops::softmax_rows(&scores)?,
            };
            head_outs.push(ops::matmul(&attn, &vh)?);
        }
        self.wo.forward(&ops::concat_cols(&head_outs)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.ln.params(&format!("{prefix}.ln"), out);
        self.wq.params(&format!("{prefix}.wq"), out);
        self.wk.params(&format!("{prefix}.wk"), out);
        self.wv.params(&format!("{prefix}.wv"), out);
        self.wo.params(&format!("{prefix}.wo"), out);
    }
}

/// Expert feed-forward: two linear maps with a GELU between, no residual
/// inside. Routing decides which streams pass through which expert.
pub struct FeedForward<T: Element> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> FeedForward<T> {
    pub fn new(rng: &mut ChaCha12Rng, dim: usize, hidden: usize) -> FeedForward<T> {
        FeedForward {
            fc1: Linear::new(rng, dim, hidden, true),
            fc2: Linear::new(rng, hidden, dim, true),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(&ops::gelu(&self.fc1.forward(x)?))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        self.fc1.params(&format!("{prefix}.fc1"), out);
        self.fc2.params(&format!("{prefix}.fc2"), out);
    }
}

pub struct Embedding<T: Element> {
    pub table: Tensor<T>, // (vocab, dim)
    vocab: usize,
}

impl<T: Element> Embedding<T> {
    pub fn new(rng: &mut ChaCha12Rng, vocab: usize, dim: usize) -> Embedding<T> {
        Embedding {
            table: init_normal(rng, &[vocab, dim], 0.02),
            vocab,
        }
    }

    pub fn forward(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        ops::gather_rows(&self.table, &idx)
    }

    /// Rows `0..n` of the table, for learned positional embeddings.
    pub fn first_rows(&self, n: usize) -> Result<Tensor<T>> {
        let idx: Vec<usize> = (0..n).collect();
        ops::gather_rows(&self.table, &idx)
    }

    pub fn row(&self, i: usize) -> Result<Tensor<T>> {
        ops::gather_rows(&self.table, &[i])
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams<T>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}
