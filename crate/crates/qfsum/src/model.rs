//! Query-conditioned segment encoder–decoder.
//!
//! Each query-prefixed segment is encoded independently by a shared-weight
//! transformer encoder; the per-segment token states are concatenated in
//! document order into a single memory the decoder cross-attends over, so
//! activation cost grows linearly with segment count. A sigmoid scorer on
//! each segment's first-token state estimates extraction probabilities, and a
//! batch-normalized projection head maps decoder logits into the embedding
//! space used by the contrastive objective.

use std::cell::{Cell, RefCell};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    causal_mask, sinusoidal_positions, DecoderLayer, DropoutCtx, Embedding, EncoderLayer, Linear,
    ProjectionHead,
};
use crate::segmenter::{BEGIN_ID, END_ID, RESERVED_TOKENS};
use crate::tensor::{no_grad, Tensor};

fn default_model_dim() -> usize {
    64
}
fn default_feedforward_dim() -> usize {
    256
}
fn default_num_heads() -> usize {
    2
}
fn default_layers() -> usize {
    2
}
fn default_max_positions() -> usize {
    1024
}
fn default_dropout_rate() -> f64 {
    0.0
}
fn default_projection_dim() -> usize {
    128
}

/// Architecture hyperparameters. All fields have desk-scale defaults except
/// `vocab_size`, which is dictated by the corpus vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of token ids, including the reserved markers.
    #[serde(default)]
    pub vocab_size: usize,
    /// Width of token states throughout encoder and decoder.
    #[serde(default = "default_model_dim")]
    pub model_dim: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    #[serde(default = "default_feedforward_dim")]
    pub feedforward_dim: usize,
    /// Attention heads per layer; must divide `model_dim`.
    #[serde(default = "default_num_heads")]
    pub num_heads: usize,
    /// Number of encoder layers.
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    /// Number of decoder layers.
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    /// Longest token sequence either stack accepts.
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Dropout probability applied inside every sublayer during training.
    #[serde(default = "default_dropout_rate")]
    pub dropout_rate: f64,
    /// Hidden width of the contrastive projection head.
    #[serde(default = "default_projection_dim")]
    pub projection_hidden_dim: usize,
    /// Output width of the contrastive projection head.
    #[serde(default = "default_projection_dim")]
    pub projection_out_dim: usize,
    /// Seed for parameter initialization and dropout masks.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            vocab_size: 0,
            model_dim: default_model_dim(),
            feedforward_dim: default_feedforward_dim(),
            num_heads: default_num_heads(),
            encoder_layers: default_layers(),
            decoder_layers: default_layers(),
            max_positions: default_max_positions(),
            dropout_rate: default_dropout_rate(),
            projection_hidden_dim: default_projection_dim(),
            projection_out_dim: default_projection_dim(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "vocab_size {} is below the {} reserved token ids",
                self.vocab_size,
                RESERVED_TOKENS.len()
            )));
        }
        if self.num_heads == 0 {
            return Err(Error::Config("num_heads must be at least 1".into()));
        }
        if self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.feedforward_dim == 0 {
            return Err(Error::Config("feedforward_dim must be at least 1".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder_layers and decoder_layers must be at least 1".into()));
        }
        if self.max_positions < 2 {
            return Err(Error::Config("max_positions must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.projection_hidden_dim == 0 || self.projection_out_dim == 0 {
            return Err(Error::Config("projection dimensions must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether forward passes use training behavior (batch statistics, dropout)
/// or frozen evaluation behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder output for a single segment.
pub struct EncodedSegment {
    /// One state per input token, shape (input length × model_dim).
    pub token_states: Tensor,
    /// The first token's state, used as the segment's classification head.
    pub head_state: Tensor,
}

/// Full encoder-side state for one instance: per-segment encodings, the
/// concatenated decoder memory, and the scorer's extraction probabilities.
pub struct SegEncState {
    pub per_segment: Vec<EncodedSegment>,
    /// Concatenation of all token states in segment order,
    /// shape (Σ input lengths × model_dim).
    pub memory: Tensor,
    /// One probability per segment, shape (segments × 1).
    pub segment_probs: Tensor,
}

impl SegEncState {
    /// Extraction probabilities as a plain vector, in segment order.
    pub fn probabilities(&self) -> Vec<f64> {
        self.segment_probs.data().clone()
    }
}

/// The end-to-end network. Construction is deterministic given the config
/// seed; all forward passes are deterministic in eval mode.
pub struct Model {
    config: ModelConfig,
    embedding: Embedding,
    positions: Tensor,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    scorer: Linear,
    output_projection: Linear,
    projection: ProjectionHead,
    mode: Cell<Mode>,
    dropout_rng: RefCell<ChaCha8Rng>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = Embedding::new(&mut rng, config.vocab_size, config.model_dim);
        let positions = sinusoidal_positions(config.max_positions, config.model_dim);
        let encoder = (0..config.encoder_layers)
            .map(|_| EncoderLayer::new(&mut rng, config.model_dim, config.feedforward_dim, config.num_heads))
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|_| DecoderLayer::new(&mut rng, config.model_dim, config.feedforward_dim, config.num_heads))
            .collect();
        let scorer = Linear::new(&mut rng, config.model_dim, 1);
        let output_projection = Linear::new(&mut rng, config.model_dim, config.vocab_size);
        let projection = ProjectionHead::new(
            &mut rng,
            config.vocab_size,
            config.projection_hidden_dim,
            config.projection_out_dim,
        );
        // Dropout draws come from a separate stream so enabling dropout never
        // shifts the parameter initialization.
        let dropout_rng = RefCell::new(ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15));
        Ok(Model {
            config,
            embedding,
            positions,
            encoder,
            decoder,
            scorer,
            output_projection,
            projection,
            mode: Cell::new(Mode::Train),
            dropout_rng,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode.get()
    }

    pub fn set_mode(&self, mode: Mode) {
        self.mode.set(mode);
    }

    fn dropout_ctx(&self) -> DropoutCtx<'_> {
        DropoutCtx {
            rate: self.config.dropout_rate,
            training: self.mode.get() == Mode::Train,
            rng: &self.dropout_rng,
        }
    }

    /// Scaled token embeddings plus sinusoidal position encodings.
    fn embed(&self, ids: &[u32]) -> Tensor {
        let scaled = self.embedding.forward(ids).scale((self.config.model_dim as f64).sqrt());
        scaled.add(&self.positions.slice_rows(0, ids.len()))
    }

    /// Encodes each segment input independently with the shared-weight
    /// encoder. No attention crosses segment boundaries.
    pub fn encode_segments(&self, inputs: &[Vec<u32>]) -> Result<Vec<EncodedSegment>> {
        let ctx = self.dropout_ctx();
        inputs
            .iter()
            .enumerate()
            .map(|(index, ids)| {
                if ids.is_empty() {
                    return Err(Error::Data(format!("segment {index} is empty")));
                }
                if ids.len() > self.config.max_positions {
                    return Err(Error::Data(format!(
                        "segment {index} holds {} tokens, exceeding max_positions {}",
                        ids.len(),
                        self.config.max_positions
                    )));
                }
                let mut x = self.embed(ids);
                for layer in &self.encoder {
                    x = layer.forward(&x, &ctx);
                }
                let head_state = x.slice_rows(0, 1);
                Ok(EncodedSegment { token_states: x, head_state })
            })
            .collect()
    }

    /// Extraction probability per segment: sigmoid of a linear readout of
    /// each segment's head state. Shape (segments × 1).
    pub fn score_segments(&self, per_segment: &[EncodedSegment]) -> Tensor {
        let heads: Vec<Tensor> = per_segment.iter().map(|s| s.head_state.clone()).collect();
        self.scorer.forward(&Tensor::concat_rows(&heads)).sigmoid()
    }

    /// Encodes all segments, concatenates their token states into the decoder
    /// memory, and scores them.
    pub fn encode_instance(&self, inputs: &[Vec<u32>]) -> Result<SegEncState> {
        let per_segment = self.encode_segments(inputs)?;
        let states: Vec<Tensor> = per_segment.iter().map(|s| s.token_states.clone()).collect();
        let memory = Tensor::concat_rows(&states);
        let segment_probs = self.score_segments(&per_segment);
        Ok(SegEncState { per_segment, memory, segment_probs })
    }

    /// Runs the decoder over `target` with causal self-attention and full
    /// cross-attention over `memory`, returning one vocab-sized logit row per
    /// target position. Row t is the distribution over the token following
    /// target position t.
    pub fn decode_teacher_forced(&self, memory: &Tensor, target: &[u32]) -> Result<Tensor> {
        if target.first() != Some(&BEGIN_ID) {
            return Err(Error::Data("decoder target must start with the begin token".into()));
        }
        if target.len() > self.config.max_positions {
            return Err(Error::Data(format!(
                "decoder target holds {} tokens, exceeding max_positions {}",
                target.len(),
                self.config.max_positions
            )));
        }
        let ctx = self.dropout_ctx();
        let causal = causal_mask(target.len());
        let mut x = self.embed(target);
        for layer in &self.decoder {
            x = layer.forward(&x, memory, &causal, &ctx);
        }
        Ok(self.output_projection.forward(&x))
    }

    /// Greedy decoding from the begin token: at each step the highest-logit
    /// token (lowest id on ties) is appended, until the end token is emitted
    /// or `max_length` tokens have been produced. Runs gradient-free in eval
    /// behavior and is deterministic.
    pub fn generate(&self, memory: &Tensor, max_length: usize) -> Vec<u32> {
        let _guard = no_grad();
        let saved = self.mode.get();
        self.mode.set(Mode::Eval);
        let mut sequence = vec![BEGIN_ID];
        let mut generated = Vec::new();
        while generated.len() < max_length && sequence.len() < self.config.max_positions {
            let logits = self
                .decode_teacher_forced(memory, &sequence)
                .expect("greedy target stays within max_positions");
            let last = logits.row(logits.rows() - 1);
            let mut best = 0;
            for (i, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = i;
                }
            }
            let id = best as u32;
            generated.push(id);
            sequence.push(id);
            if id == END_ID {
                break;
            }
        }
        self.mode.set(saved);
        generated
    }

    /// Maps decoder logits into the contrastive embedding space, one
    /// projected vector per token position. Training mode normalizes with
    /// batch statistics over the token dimension; eval mode uses the running
    /// statistics.
    pub fn project(&self, decoder_outputs: &Tensor) -> Tensor {
        self.projection.forward(decoder_outputs, self.mode.get() == Mode::Train)
    }

    /// All trainable tensors with hierarchical names, in a fixed order that
    /// defines optimizer slots and checkpoint layout.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.embedding.collect_parameters("embedding", &mut out);
        for (i, layer) in self.encoder.iter().enumerate() {
            layer.collect_parameters(&format!("encoder.{i}"), &mut out);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            layer.collect_parameters(&format!("decoder.{i}"), &mut out);
        }
        self.scorer.collect_parameters("scorer", &mut out);
        self.output_projection.collect_parameters("output_projection", &mut out);
        self.projection.collect_parameters("projection", &mut out);
        out
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    /// Running statistics of the projection head's batch norm, needed to
    /// checkpoint eval-mode behavior.
    pub fn projection_norm_stats(&self) -> (Vec<f64>, Vec<f64>) {
        self.projection.norm.running_stats()
    }

    pub fn set_projection_norm_stats(&self, mean: Vec<f64>, var: Vec<f64>) {
        self.projection.norm.set_running_stats(mean, var);
    }
}
