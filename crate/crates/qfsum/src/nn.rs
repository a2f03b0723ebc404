//! Neural building blocks assembled by the model: linear layers, token
//! embeddings, layer/batch normalization, multi-head attention, transformer
//! encoder/decoder layers, sinusoidal position encodings, and the
//! batch-normalized projection head used for contrastive embeddings.
//!
//! Every block exposes `collect_parameters`, which appends `(name, tensor)`
//! pairs under a caller-supplied prefix in a fixed order. That order defines
//! the optimizer slot layout and the checkpoint tensor layout, so it must not
//! change between releases.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// Additive attention-mask value for disallowed positions. Large enough that
/// the masked score underflows to exactly zero after the softmax.
const MASK_NEG: f64 = -1e30;

/// Epsilon inside normalization denominators.
const NORM_EPS: f64 = 1e-5;

fn uniform_init(rng: &mut ChaCha8Rng, count: usize, bound: f64) -> Vec<f64> {
    (0..count).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Fully connected layer computing `x W + b` with `W` of shape
/// (input dim × output dim).
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weight initialization, zero bias.
    pub fn new(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Linear {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Linear {
            weight: Tensor::param(in_dim, out_dim, uniform_init(rng, in_dim * out_dim, bound)),
            bias: Tensor::param(1, out_dim, vec![0.0; out_dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add_bias(&self.bias)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Token-embedding table; row `i` is the embedding of token id `i`.
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    /// Rows drawn from U(-√(3/dim), √(3/dim)) so each row has variance 1/dim;
    /// the model scales lookups by √dim for unit-variance inputs.
    pub fn new(rng: &mut ChaCha8Rng, vocab_size: usize, dim: usize) -> Embedding {
        let bound = (3.0 / dim as f64).sqrt();
        Embedding {
            table: Tensor::param(vocab_size, dim, uniform_init(rng, vocab_size * dim, bound)),
        }
    }

    pub fn forward(&self, ids: &[u32]) -> Tensor {
        self.table.gather_rows(ids)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}

/// Per-row layer normalization with learnable scale and shift.
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gamma: Tensor::param(1, dim, vec![1.0; dim]),
            beta: Tensor::param(1, dim, vec![0.0; dim]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.layer_norm(&self.gamma, &self.beta, NORM_EPS)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Inverted-dropout context threaded through layer forwards. A rate of zero
/// (the default configuration) makes `apply` the identity, keeping forwards
/// deterministic.
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub training: bool,
    pub rng: &'a RefCell<ChaCha8Rng>,
}

impl DropoutCtx<'_> {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        if !self.training || self.rate <= 0.0 {
            return x.clone();
        }
        let keep = 1.0 - self.rate;
        let mut rng = self.rng.borrow_mut();
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        drop(rng);
        x.hadamard(&Tensor::constant(x.rows(), x.cols(), mask))
    }
}

/// Multi-head scaled dot-product attention. Queries come from the first
/// argument, keys and values from the second; an optional additive mask of
/// shape (query len × key len) disables positions.
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    num_heads: usize,
    head_dim: usize,
}

impl MultiHeadAttention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, num_heads: usize) -> MultiHeadAttention {
        assert!(num_heads >= 1 && dim % num_heads == 0, "dim must split evenly across heads");
        MultiHeadAttention {
            query: Linear::new(rng, dim, dim),
            key: Linear::new(rng, dim, dim),
            value: Linear::new(rng, dim, dim),
            output: Linear::new(rng, dim, dim),
            num_heads,
            head_dim: dim / num_heads,
        }
    }

    pub fn forward(&self, queries: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Tensor {
        let q = self.query.forward(queries);
        let k = self.key.forward(memory);
        let v = self.value.forward(memory);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for h in 0..self.num_heads {
            let (c0, c1) = (h * self.head_dim, (h + 1) * self.head_dim);
            let qh = q.slice_cols(c0, c1);
            let kh = k.slice_cols(c0, c1);
            let vh = v.slice_cols(c0, c1);
            let mut scores = qh.matmul_nt(&kh).scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m);
            }
            heads.push(scores.softmax_rows().matmul(&vh));
        }
        self.output.forward(&Tensor::concat_cols(&heads))
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.query.collect_parameters(&format!("{prefix}.query"), out);
        self.key.collect_parameters(&format!("{prefix}.key"), out);
        self.value.collect_parameters(&format!("{prefix}.value"), out);
        self.output.collect_parameters(&format!("{prefix}.output"), out);
    }
}

/// Two-layer position-wise feed-forward block with ReLU.
pub struct FeedForward {
    pub expand: Linear,
    pub contract: Linear,
}

impl FeedForward {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            expand: Linear::new(rng, dim, hidden),
            contract: Linear::new(rng, hidden, dim),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.contract.forward(&self.expand.forward(x).relu())
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.expand.collect_parameters(&format!("{prefix}.expand"), out);
        self.contract.collect_parameters(&format!("{prefix}.contract"), out);
    }
}

/// Post-norm transformer encoder layer: self-attention and feed-forward
/// sublayers, each wrapped in residual + layer norm.
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, heads: usize) -> EncoderLayer {
        EncoderLayer {
            self_attn: MultiHeadAttention::new(rng, dim, heads),
            norm1: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, hidden),
            norm2: LayerNorm::new(dim),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &DropoutCtx<'_>) -> Tensor {
        let attended = ctx.apply(&self.self_attn.forward(x, x, None));
        let x = self.norm1.forward(&x.add(&attended));
        let transformed = ctx.apply(&self.ffn.forward(&x));
        self.norm2.forward(&x.add(&transformed))
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect_parameters(&format!("{prefix}.self_attn"), out);
        self.norm1.collect_parameters(&format!("{prefix}.norm1"), out);
        self.ffn.collect_parameters(&format!("{prefix}.ffn"), out);
        self.norm2.collect_parameters(&format!("{prefix}.norm2"), out);
    }
}

/// Post-norm transformer decoder layer: causal self-attention, cross-attention
/// over the encoder memory, and feed-forward, each with residual + layer norm.
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize, heads: usize) -> DecoderLayer {
        DecoderLayer {
            self_attn: MultiHeadAttention::new(rng, dim, heads),
            norm1: LayerNorm::new(dim),
            cross_attn: MultiHeadAttention::new(rng, dim, heads),
            norm2: LayerNorm::new(dim),
            ffn: FeedForward::new(rng, dim, hidden),
            norm3: LayerNorm::new(dim),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        memory: &Tensor,
        causal: &Tensor,
        ctx: &DropoutCtx<'_>,
    ) -> Tensor {
        let attended = ctx.apply(&self.self_attn.forward(x, x, Some(causal)));
        let x = self.norm1.forward(&x.add(&attended));
        let cross = ctx.apply(&self.cross_attn.forward(&x, memory, None));
        let x = self.norm2.forward(&x.add(&cross));
        let transformed = ctx.apply(&self.ffn.forward(&x));
        self.norm3.forward(&x.add(&transformed))
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.self_attn.collect_parameters(&format!("{prefix}.self_attn"), out);
        self.norm1.collect_parameters(&format!("{prefix}.norm1"), out);
        self.cross_attn.collect_parameters(&format!("{prefix}.cross_attn"), out);
        self.norm2.collect_parameters(&format!("{prefix}.norm2"), out);
        self.ffn.collect_parameters(&format!("{prefix}.ffn"), out);
        self.norm3.collect_parameters(&format!("{prefix}.norm3"), out);
    }
}

/// Fixed sinusoidal position encodings: even columns carry
/// sin(pos / 10000^(c/dim)), odd columns the matching cosine.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for c in (0..dim).step_by(2) {
            let freq = 1.0 / 10000f64.powf(c as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data[pos * dim + c] = angle.sin();
            if c + 1 < dim {
                data[pos * dim + c + 1] = angle.cos();
            }
        }
    }
    Tensor::constant(len, dim, data)
}

/// Additive causal mask: zero on and below the diagonal, a large negative
/// value above it, so position t attends only to positions ≤ t.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for r in 0..len {
        for c in r + 1..len {
            data[r * len + c] = MASK_NEG;
        }
    }
    Tensor::constant(len, len, data)
}

/// Batch normalization over the token (row) dimension: each feature column is
/// normalized across the positions of the sequence. Running statistics are
/// accumulated during training with momentum and substituted in eval mode,
/// which keeps the operator well-defined for single-sequence inputs.
pub struct BatchNormTokens {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RefCell<Vec<f64>>,
    running_var: RefCell<Vec<f64>>,
    momentum: f64,
}

impl BatchNormTokens {
    pub fn new(dim: usize) -> BatchNormTokens {
        BatchNormTokens {
            gamma: Tensor::param(1, dim, vec![1.0; dim]),
            beta: Tensor::param(1, dim, vec![0.0; dim]),
            running_mean: RefCell::new(vec![0.0; dim]),
            running_var: RefCell::new(vec![1.0; dim]),
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        if training {
            let (out, mean, var) = x.batch_norm_cols_train(&self.gamma, &self.beta, NORM_EPS);
            let mut rm = self.running_mean.borrow_mut();
            let mut rv = self.running_var.borrow_mut();
            for c in 0..mean.len() {
                rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c];
            }
            out
        } else {
            x.batch_norm_cols_eval(
                &self.gamma,
                &self.beta,
                &self.running_mean.borrow(),
                &self.running_var.borrow(),
                NORM_EPS,
            )
        }
    }

    pub fn running_stats(&self) -> (Vec<f64>, Vec<f64>) {
        (self.running_mean.borrow().clone(), self.running_var.borrow().clone())
    }

    pub fn set_running_stats(&self, mean: Vec<f64>, var: Vec<f64>) {
        assert_eq!(mean.len(), self.gamma.cols(), "running mean width mismatch");
        assert_eq!(var.len(), self.gamma.cols(), "running variance width mismatch");
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Projection head mapping decoder logits into the contrastive embedding
/// space: linear → token-dimension batch norm → ReLU → linear.
pub struct ProjectionHead {
    pub input: Linear,
    pub norm: BatchNormTokens,
    pub output: Linear,
}

impl ProjectionHead {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
    ) -> ProjectionHead {
        ProjectionHead {
            input: Linear::new(rng, in_dim, hidden_dim),
            norm: BatchNormTokens::new(hidden_dim),
            output: Linear::new(rng, hidden_dim, out_dim),
        }
    }

    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        let hidden = self.norm.forward(&self.input.forward(x), training).relu();
        self.output.forward(&hidden)
    }

    pub fn collect_parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.input.collect_parameters(&format!("{prefix}.input"), out);
        self.norm.collect_parameters(&format!("{prefix}.norm"), out);
        self.output.collect_parameters(&format!("{prefix}.output"), out);
    }
}
