//! Contrastive supervision: choose positive and negative segments for each
//! training instance, embed them through the shared decoder and projection
//! head, and score the InfoNCE objective against the query embedding.
//!
//! Positives are all gold-labeled segments. Negatives are chosen dynamically
//! each step: the non-gold segments the scorer currently rates highest, never
//! more of them than there are positives. Embeddings are token sequences, so
//! similarity is the mean per-position cosine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeler::SegmentLabels;
use crate::model::{Model, SegEncState};
use crate::segmenter::{BEGIN_ID, END_ID};
use crate::tensor::Tensor;

/// Which decoder input the embedding passes run over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Teacher-forced pass over the gold summary (differentiable and
    /// deterministic; the default).
    #[default]
    TeacherForced,
    /// Pass over a summary greedily generated from the full memory, shared by
    /// the query and all instance embeddings. Exposed for ablation.
    Generated,
}

fn default_temperature() -> f64 {
    0.6
}
fn default_generation_cap() -> usize {
    128
}

/// Knobs of the contrastive objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    /// InfoNCE temperature τ. 0.6 suits span-annotated labels; 0.8 suits
    /// bigram-overlap labels.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Optional floor on a negative's extraction probability. `None` keeps
    /// pure top-k selection.
    #[serde(default)]
    pub negative_min_prob: Option<f64>,
    /// Decoder input used for the embedding passes.
    #[serde(default)]
    pub embedding_source: EmbeddingSource,
    /// Generation cap when `embedding_source` is `generated`.
    #[serde(default = "default_generation_cap")]
    pub generation_cap: usize,
}

impl Default for ContrastiveOptions {
    fn default() -> ContrastiveOptions {
        ContrastiveOptions {
            temperature: default_temperature(),
            negative_min_prob: None,
            embedding_source: EmbeddingSource::TeacherForced,
            generation_cap: default_generation_cap(),
        }
    }
}

/// One instance's contrastive selection and embeddings, ready for scoring.
pub struct ContrastiveBatch {
    /// Gold segment ordinals, in segment order.
    pub positive_indices: Vec<usize>,
    /// Selected non-gold ordinals, in descending extraction probability.
    pub negative_indices: Vec<usize>,
    /// Projected decoder outputs for the summary over the full memory
    /// (symbol q), shape (summary positions × projection_out_dim).
    pub query_embedding: Tensor,
    /// Projected decoder outputs with memory restricted to one selected
    /// segment each (symbol s_i): positives in `positive_indices` order
    /// followed by negatives in `negative_indices` order.
    pub instance_embeddings: Vec<Tensor>,
    /// InfoNCE temperature τ.
    pub temperature: f64,
}

/// All gold segment ordinals, in segment order.
pub fn select_positives(labels: &SegmentLabels) -> Vec<usize> {
    labels
        .flags
        .iter()
        .enumerate()
        .filter_map(|(i, &gold)| if gold { Some(i) } else { None })
        .collect()
}

/// The non-gold segments the scorer currently rates highest, in descending
/// probability (ties toward the lower index), capped at the positive count.
pub fn select_negatives(
    segment_probs: &[f64],
    labels: &SegmentLabels,
    n_pos: usize,
) -> Vec<usize> {
    select_negatives_filtered(segment_probs, labels, n_pos, None)
}

/// `select_negatives` with an optional probability floor: candidates below
/// `min_prob` are excluded before the top-k cut.
pub fn select_negatives_filtered(
    segment_probs: &[f64],
    labels: &SegmentLabels,
    n_pos: usize,
    min_prob: Option<f64>,
) -> Vec<usize> {
    assert_eq!(
        segment_probs.len(),
        labels.flags.len(),
        "one probability per labeled segment required"
    );
    let mut candidates: Vec<usize> = (0..segment_probs.len())
        .filter(|&i| !labels.flags[i])
        .filter(|&i| min_prob.is_none_or(|floor| segment_probs[i] >= floor))
        .collect();
    candidates.sort_by(|&a, &b| {
        segment_probs[b]
            .partial_cmp(&segment_probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    candidates.truncate(n_pos);
    candidates
}

/// Differentiable mean per-position cosine similarity between two embedding
/// sequences, over their overlapping prefix. A zero-norm vector contributes
/// exactly 0 at its position. Returns a scalar tensor in [-1, 1].
pub fn tokenwise_cosine(q: &Tensor, s: &Tensor) -> Result<Tensor> {
    if q.cols() != s.cols() {
        return Err(Error::Data(format!(
            "embedding widths differ: query {} vs instance {}",
            q.cols(),
            s.cols()
        )));
    }
    if q.rows() == 0 || s.rows() == 0 {
        return Err(Error::Data("embedding sequences must be non-empty".into()));
    }
    let t = q.rows().min(s.rows());
    let (q, s) = (q.slice_rows(0, t), s.slice_rows(0, t));
    // The tiny shift keeps the norms differentiable and makes a zero-norm
    // position divide to exactly 0 instead of NaN.
    const NORM_SHIFT: f64 = 1e-18;
    let dots = q.hadamard(&s).row_sums();
    let q_norms = q.hadamard(&q).row_sums().sqrt_shift(NORM_SHIFT);
    let s_norms = s.hadamard(&s).row_sums().sqrt_shift(NORM_SHIFT);
    Ok(dots.div_elem(&q_norms.hadamard(&s_norms)).mean_all())
}

/// InfoNCE for one positive: −log(exp(sim⁺/τ) / Σ_{s ∈ sims_all} exp(s/τ)),
/// computed with max subtraction. `sims_all` must contain the positive, which
/// keeps the result non-negative.
pub fn info_nce(sim_positive: f64, sims_all: &[f64], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    debug_assert!(
        sims_all.contains(&sim_positive),
        "the denominator set must include the positive similarity"
    );
    let m = sims_all.iter().fold(f64::NEG_INFINITY, |acc, &s| acc.max(s / temperature));
    let sum: f64 = sims_all.iter().map(|&s| (s / temperature - m).exp()).sum();
    Ok(m + sum.ln() - sim_positive / temperature)
}

/// Differentiable InfoNCE over the batch: for each positive, the denominator
/// holds that positive plus every negative; terms are averaged over
/// positives. Returns exactly 0 (and detaches nothing) when the batch has no
/// positives or no negatives — the skip rule.
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<Tensor> {
    if batch.temperature <= 0.0 {
        return Err(Error::Config(format!(
            "temperature must be positive, got {}",
            batch.temperature
        )));
    }
    let n_pos = batch.positive_indices.len();
    let n_neg = batch.negative_indices.len();
    if n_pos == 0 || n_neg == 0 {
        return Ok(Tensor::constant(1, 1, vec![0.0]));
    }
    debug_assert_eq!(batch.instance_embeddings.len(), n_pos + n_neg);
    debug_assert!(n_neg <= n_pos, "never more negatives than positives");
    let inv_t = 1.0 / batch.temperature;
    let negative_sims: Vec<Tensor> = batch.instance_embeddings[n_pos..]
        .iter()
        .map(|s| tokenwise_cosine(&batch.query_embedding, s))
        .collect::<Result<_>>()?;
    let mut terms = Vec::with_capacity(n_pos);
    for positive in &batch.instance_embeddings[..n_pos] {
        let positive_sim = tokenwise_cosine(&batch.query_embedding, positive)?;
        let mut sims = Vec::with_capacity(1 + n_neg);
        sims.push(positive_sim.clone());
        sims.extend(negative_sims.iter().cloned());
        let log_denominator = Tensor::concat_rows(&sims).scale(inv_t).log_sum_exp();
        terms.push(log_denominator.sub(&positive_sim.scale(inv_t)));
    }
    Ok(Tensor::concat_rows(&terms).mean_all())
}

/// Selects positives and negatives for one instance and embeds them. Returns
/// `None` when the contrastive term is skipped (no positives or no negatives
/// survive selection), so callers avoid the embedding passes entirely.
///
/// `gold_target` is the decoder input of the generation objective
/// (begin token followed by the gold summary ids), and `full_memory_logits`
/// its teacher-forced logits over the full memory — reused here as the query
/// embedding's input so the generation pass is shared.
pub fn build_contrastive_batch(
    model: &Model,
    state: &SegEncState,
    labels: &SegmentLabels,
    gold_target: &[u32],
    full_memory_logits: &Tensor,
    options: &ContrastiveOptions,
) -> Result<Option<ContrastiveBatch>> {
    let positive_indices = select_positives(labels);
    let negative_indices = select_negatives_filtered(
        &state.probabilities(),
        labels,
        positive_indices.len(),
        options.negative_min_prob,
    );
    if positive_indices.is_empty() || negative_indices.is_empty() {
        return Ok(None);
    }

    let generated_input;
    let (decoder_input, query_logits) = match options.embedding_source {
        EmbeddingSource::TeacherForced => (gold_target, full_memory_logits.clone()),
        EmbeddingSource::Generated => {
            let mut tokens = model.generate(&state.memory, options.generation_cap);
            if tokens.last() == Some(&END_ID) {
                tokens.pop();
            }
            let mut input = Vec::with_capacity(tokens.len() + 1);
            input.push(BEGIN_ID);
            input.extend(tokens);
            generated_input = input;
            let logits = model.decode_teacher_forced(&state.memory, &generated_input)?;
            (generated_input.as_slice(), logits)
        }
    };

    let query_embedding = model.project(&query_logits);
    let mut instance_embeddings = Vec::with_capacity(positive_indices.len() + negative_indices.len());
    for &index in positive_indices.iter().chain(&negative_indices) {
        let segment_memory = &state.per_segment[index].token_states;
        let logits = model.decode_teacher_forced(segment_memory, decoder_input)?;
        instance_embeddings.push(model.project(&logits));
    }

    Ok(Some(ContrastiveBatch {
        positive_indices,
        negative_indices,
        query_embedding,
        instance_embeddings,
        temperature: options.temperature,
    }))
}
