//! Joint training: generation + segment classification + contrastive
//! InfoNCE, combined with λ weights and optimized by adaptive-moment
//! gradient descent with decoupled weight decay.
//!
//! One query-document instance forms one step (long inputs make larger
//! batches impractical at desk scale); `batch_size` > 1 accumulates
//! gradients over that many steps before updating. Each epoch shuffles the
//! training split deterministically, logs a structured event per step,
//! runs greedy-generation ROUGE validation, and saves a checkpoint. The
//! checkpoint with the highest validation mean ROUGE wins selection, with
//! ties resolved toward the earlier epoch.
//!
//! Everything is reproducible from the seed: two runs with identical
//! configuration produce bit-identical epoch reports and checkpoints.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::contrastive::{
    build_contrastive_batch, contrastive_loss, select_positives, tokenwise_cosine,
    ContrastiveBatch, ContrastiveOptions,
};
use crate::corpus::{DatasetSplit, TrainingInstance};
use crate::error::{Error, Result};
use crate::evaluation::evaluate_split;
use crate::labeler::SegmentLabels;
use crate::model::{Mode, Model, ModelConfig};
use crate::segmenter::{
    build_model_input, segment_document, Segment, SegmenterConfig, Vocabulary, BEGIN_ID,
    END_ID, PAD_ID, RESERVED_TOKENS,
};
use crate::tensor::{no_grad, Tensor};

fn default_learning_rate() -> f64 {
    5e-5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_epochs() -> usize {
    10
}
fn default_lambda_gen() -> f64 {
    0.6
}
fn default_lambda_cls() -> f64 {
    0.2
}
fn default_lambda_cont() -> f64 {
    0.2
}
fn default_temperature() -> f64 {
    0.6
}
fn default_batch_size() -> usize {
    1
}
fn default_gradient_clip_norm() -> f64 {
    1.0
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Constant step size (no warmup or schedule).
    pub learning_rate: f64,
    /// Decoupled weight-decay coefficient, applied to every parameter.
    pub weight_decay: f64,
    /// Full passes over the training split.
    pub epochs: usize,
    /// Weight of the generation loss; the three λ must sum to 1.
    pub lambda_gen: f64,
    /// Weight of the segment-classification loss.
    pub lambda_cls: f64,
    /// Weight of the contrastive loss.
    pub lambda_cont: f64,
    /// InfoNCE temperature τ.
    pub temperature: f64,
    /// Instances per optimizer update (gradient accumulation).
    pub batch_size: usize,
    /// Global gradient-norm ceiling applied before each update.
    pub gradient_clip_norm: f64,
    /// Seed for epoch shuffling; also a natural choice for the model seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            lambda_gen: default_lambda_gen(),
            lambda_cls: default_lambda_cls(),
            lambda_cont: default_lambda_cont(),
            temperature: default_temperature(),
            batch_size: default_batch_size(),
            gradient_clip_norm: default_gradient_clip_norm(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("lambda_gen", self.lambda_gen),
            ("lambda_cls", self.lambda_cls),
            ("lambda_cont", self.lambda_cont),
        ] {
            if !(value >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {value}"
                )));
            }
        }
        let sum = self.lambda_gen + self.lambda_cls + self.lambda_cont;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda_gen + lambda_cls + lambda_cont must sum to 1, got {sum} \
                 (lambda_gen={}, lambda_cls={}, lambda_cont={})",
                self.lambda_gen, self.lambda_cls, self.lambda_cont
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.gradient_clip_norm > 0.0) {
            return Err(Error::Config(format!(
                "gradient_clip_norm must be positive, got {}",
                self.gradient_clip_norm
            )));
        }
        Ok(())
    }
}

/// The three loss components and their λ-weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub generation: f64,
    pub classification: f64,
    pub contrastive: f64,
    /// Always equals λ₀·generation + λ₁·classification + λ₂·contrastive.
    pub joint: f64,
}

/// Combine the three loss values under the configured λ weights.
pub fn joint_loss(gen: f64, cls: f64, cont: f64, config: &TrainConfig) -> LossBreakdown {
    LossBreakdown {
        generation: gen,
        classification: cls,
        contrastive: cont,
        joint: config.lambda_gen * gen + config.lambda_cls * cls + config.lambda_cont * cont,
    }
}

/// One epoch's summary: mean training losses, validation ROUGE, and where
/// the epoch's checkpoint lives (relative to the run's output directory, so
/// reports are byte-identical across runs regardless of where they landed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-step losses over this epoch.
    pub train_loss: LossBreakdown,
    /// Validation ROUGE-1 F-measure (corpus mean).
    pub rouge1: f64,
    /// Validation ROUGE-2 F-measure (corpus mean).
    pub rouge2: f64,
    /// Validation ROUGE-L F-measure (corpus mean).
    pub rouge_l: f64,
    /// (rouge1 + rouge2 + rouge_l) / 3 — the checkpoint-selection metric.
    pub mean_rouge: f64,
    /// Checkpoint location relative to the run's output directory.
    pub checkpoint_path: String,
}

/// One line of the training event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainEvent {
    /// Global 1-based step counter.
    pub step: usize,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub instance_id: String,
    pub loss: LossBreakdown,
    /// Positive segments in the contrastive batch (gold count when the
    /// contrastive term was skipped).
    pub n_pos: usize,
    /// Sampled negatives; never exceeds `n_pos`.
    pub n_neg: usize,
    /// Whether every positive similarity beat every negative similarity;
    /// absent when the contrastive term was skipped.
    pub ranking_correct: Option<bool>,
}

/// Negative log-likelihood of the gold continuation under shifted teacher
/// forcing: the logit row at position t scores target token t+1, and the
/// final row scores the end-of-sequence marker. Positions whose gold label
/// is the pad token are excluded.
pub fn generation_loss(logits: &Tensor, target: &[u32]) -> Tensor {
    assert_eq!(
        logits.rows(),
        target.len(),
        "one logit row per target position required"
    );
    let mut labels: Vec<u32> = target[1..].to_vec();
    labels.push(END_ID);
    logits.nll_sum(&labels, Some(PAD_ID))
}

/// Binary cross-entropy between segment relevance probabilities and gold
/// flags, summed over segments. Probabilities are clamped to
/// [1e-7, 1 − 1e-7] before taking logs.
pub fn classification_loss(probs: &Tensor, labels: &[bool]) -> Tensor {
    assert_eq!(
        probs.len(),
        labels.len(),
        "one probability per segment label required"
    );
    let targets: Vec<f64> = labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect();
    probs.bce_sum(&targets, 1e-7)
}

/// First-moment decay rate of the optimizer.
pub const ADAM_BETA1: f64 = 0.9;
/// Second-moment decay rate of the optimizer.
pub const ADAM_BETA2: f64 = 0.999;
/// Denominator stabilizer of the optimizer.
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment gradient descent with decoupled weight decay and bias
/// correction. Decay applies uniformly to every parameter tensor. A step
/// with `learning_rate` 0 leaves parameters bit-identical (moments still
/// advance).
pub struct AdamW {
    params: Vec<Tensor>,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
    step_count: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, learning_rate: f64, weight_decay: f64) -> AdamW {
        let first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        let second_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
        AdamW {
            params,
            first_moment,
            second_moment,
            step_count: 0,
            learning_rate,
            weight_decay,
        }
    }

    /// Updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step_count
    }

    /// Clear accumulated gradients on every managed parameter.
    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update from the currently accumulated gradients:
    /// θ ← θ − lr·(m̂/(√v̂ + ε) + weight_decay·θ).
    pub fn step(&mut self) {
        self.step_count += 1;
        let bias1 = 1.0 - ADAM_BETA1.powi(self.step_count as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(self.step_count as i32);
        for (i, p) in self.params.iter().enumerate() {
            let grad = p.grad();
            let mut data = p.data_mut();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                data[j] -= self.learning_rate
                    * (m_hat / (v_hat.sqrt() + ADAM_EPS) + self.weight_decay * data[j]);
            }
        }
    }
}

/// Scale gradients so their global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_gradient_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let mut total = 0.0;
    for p in params {
        for g in p.grad().iter() {
            total += g * g;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for p in params {
            p.scale_grad(factor);
        }
    }
    norm
}

/// Tokenized, segmented view of one instance, ready for the encoder.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub id: String,
    /// Query-prefixed encoder input per segment.
    pub inputs: Vec<Vec<u32>>,
    /// The underlying segmentation, aligned with `inputs`.
    pub segments: Vec<Segment>,
    /// Teacher-forcing target: begin marker + first-reference token ids,
    /// truncated to the decoder's position budget.
    pub target: Vec<u32>,
}

/// Encode, segment, and build the teacher-forcing target for one instance.
/// Training always targets the first reference; extra references only
/// participate in evaluation.
pub fn prepare_instance(
    instance: &TrainingInstance,
    vocabulary: &Vocabulary,
    segmenter: &SegmenterConfig,
    max_positions: usize,
) -> Result<PreparedInstance> {
    let query_ids = vocabulary.encode(&instance.query);
    let doc_ids = vocabulary.encode(&instance.document);
    let segments = segment_document(&doc_ids, segmenter.segment_length, segmenter.overlap_fraction)?;
    let inputs = segments
        .iter()
        .map(|s| build_model_input(&query_ids, s, segmenter.max_query_length))
        .collect();
    let reference = instance.references.first().ok_or_else(|| Error::Invariant {
        id: instance.id.clone(),
        message: "instance has no references".into(),
    })?;
    let mut reference_ids = vocabulary.encode(reference);
    reference_ids.truncate(max_positions - 1);
    let mut target = Vec::with_capacity(reference_ids.len() + 1);
    target.push(BEGIN_ID);
    target.extend_from_slice(&reference_ids);
    Ok(PreparedInstance {
        id: instance.id.clone(),
        inputs,
        segments,
        target,
    })
}

/// Greedy summary tokens for a prepared instance: encode every segment in
/// evaluation mode, generate from the concatenated memory, and decode.
/// Reserved markers (pad/begin/end/unknown/separator) are dropped from the
/// output.
pub fn generate_from_prepared(
    model: &Model,
    vocabulary: &Vocabulary,
    prepared: &PreparedInstance,
    max_length: usize,
) -> Result<Vec<String>> {
    let _guard = no_grad();
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let state = model.encode_instance(&prepared.inputs);
    model.set_mode(previous);
    let state = state?;
    let ids = model.generate(&state.memory, max_length);
    let reserved = RESERVED_TOKENS.len() as u32;
    let kept: Vec<u32> = ids.into_iter().filter(|&id| id >= reserved).collect();
    Ok(vocabulary.decode(&kept))
}

/// [`generate_from_prepared`] starting from a raw instance.
pub fn generate_summary(
    model: &Model,
    vocabulary: &Vocabulary,
    segmenter: &SegmenterConfig,
    instance: &TrainingInstance,
    max_length: usize,
) -> Result<Vec<String>> {
    let prepared = prepare_instance(instance, vocabulary, segmenter, model.config().max_positions)?;
    generate_from_prepared(model, vocabulary, &prepared, max_length)
}

/// Query-to-instance similarities of a contrastive batch, split into
/// (positives, negatives) in batch order. Runs outside the autograd graph.
pub fn batch_similarities(batch: &ContrastiveBatch) -> Result<(Vec<f64>, Vec<f64>)> {
    let _guard = no_grad();
    let n_pos = batch.positive_indices.len();
    let mut positives = Vec::with_capacity(n_pos);
    let mut negatives = Vec::with_capacity(batch.negative_indices.len());
    for (i, embedding) in batch.instance_embeddings.iter().enumerate() {
        let sim = tokenwise_cosine(&batch.query_embedding, embedding)?.item();
        if i < n_pos {
            positives.push(sim);
        } else {
            negatives.push(sim);
        }
    }
    Ok((positives, negatives))
}

/// Data, labels, and plumbing for one training run; the optimization
/// hyperparameters live in [`TrainConfig`].
#[derive(Clone)]
pub struct TrainSession<'a> {
    pub train_split: &'a DatasetSplit,
    pub validation_split: &'a DatasetSplit,
    /// Precomputed labels covering every training instance, matched by id.
    pub labels: &'a [SegmentLabels],
    pub vocabulary: &'a Vocabulary,
    pub segmenter: SegmenterConfig,
    /// Contrastive knobs; its `temperature` field is overridden by
    /// [`TrainConfig::temperature`], which is the single source of τ.
    pub contrastive: ContrastiveOptions,
    /// Greedy generation cap for per-epoch validation.
    pub validation_max_length: usize,
    /// Where checkpoints, reports, and the event log land.
    pub output_dir: PathBuf,
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome {
    pub reports: Vec<EpochReport>,
    /// Final-epoch weights, left in evaluation mode.
    pub model: Model,
    /// The report whose checkpoint won selection (highest validation mean
    /// ROUGE, ties toward the earlier epoch).
    pub best: EpochReport,
    pub output_dir: PathBuf,
    pub event_log_path: PathBuf,
    pub reports_path: PathBuf,
}

/// Losses and contrastive diagnostics for one instance; gradients of the
/// λ-weighted joint loss (scaled by 1/batch_size) are accumulated into the
/// model as a side effect.
fn train_step(
    model: &Model,
    config: &TrainConfig,
    options: &ContrastiveOptions,
    prepared: &PreparedInstance,
    labels: &SegmentLabels,
) -> Result<(LossBreakdown, usize, usize, Option<bool>)> {
    let state = model.encode_instance(&prepared.inputs)?;
    let logits = model.decode_teacher_forced(&state.memory, &prepared.target)?;
    let gen = generation_loss(&logits, &prepared.target);
    let cls = classification_loss(&state.segment_probs, &labels.flags);
    let batch = build_contrastive_batch(model, &state, labels, &prepared.target, &logits, options)?;
    let (cont, n_pos, n_neg, ranking_correct) = match &batch {
        Some(batch) => {
            let loss = contrastive_loss(batch)?;
            let (pos_sims, neg_sims) = batch_similarities(batch)?;
            let worst_pos = pos_sims.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let best_neg = neg_sims.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let correct = worst_pos > best_neg;
            (
                loss,
                batch.positive_indices.len(),
                batch.negative_indices.len(),
                Some(correct),
            )
        }
        None => (
            Tensor::constant(1, 1, vec![0.0]),
            select_positives(labels).len(),
            0,
            None,
        ),
    };
    let joint = gen
        .scale(config.lambda_gen)
        .add(&cls.scale(config.lambda_cls))
        .add(&cont.scale(config.lambda_cont));
    let breakdown = LossBreakdown {
        generation: gen.item(),
        classification: cls.item(),
        contrastive: cont.item(),
        joint: joint.item(),
    };
    if !(breakdown.generation.is_finite()
        && breakdown.classification.is_finite()
        && breakdown.contrastive.is_finite()
        && breakdown.joint.is_finite())
    {
        return Err(Error::NonFiniteLoss {
            instance_id: prepared.id.clone(),
            generation: breakdown.generation,
            classification: breakdown.classification,
            contrastive: breakdown.contrastive,
            joint: breakdown.joint,
        });
    }
    let scaled = if config.batch_size > 1 {
        joint.scale(1.0 / config.batch_size as f64)
    } else {
        joint
    };
    scaled.backward();
    Ok((breakdown, n_pos, n_neg, ranking_correct))
}

/// Run the full optimization loop and return the per-epoch reports together
/// with the trained model and artifact paths. See the module docs for the
/// epoch structure; the model is built from `model_config` (including its
/// seed), while `config.seed` drives epoch shuffling.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    session: &TrainSession,
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    session.segmenter.validate()?;
    if let Some(min_prob) = session.contrastive.negative_min_prob {
        if !(0.0..=1.0).contains(&min_prob) {
            return Err(Error::Config(format!(
                "negative_min_prob must lie in [0, 1], got {min_prob}"
            )));
        }
    }
    if session.contrastive.generation_cap == 0 {
        return Err(Error::Config("generation_cap must be at least 1".into()));
    }
    if session.validation_max_length == 0 {
        return Err(Error::Config(
            "validation_max_length must be at least 1".into(),
        ));
    }
    let longest_input = session.segmenter.max_input_length();
    if longest_input > model_config.max_positions {
        return Err(Error::Config(format!(
            "segment_length {} + max_query_length {} + 3 markers = {longest_input} tokens \
             exceeds max_positions {}",
            session.segmenter.segment_length,
            session.segmenter.max_query_length,
            model_config.max_positions
        )));
    }
    if model_config.vocab_size != session.vocabulary.size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match the vocabulary's {} entries",
            model_config.vocab_size,
            session.vocabulary.size()
        )));
    }
    if session.train_split.instances.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if session.validation_split.instances.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let mut label_map: HashMap<&str, &SegmentLabels> = HashMap::new();
    for labels in session.labels {
        if label_map.insert(&labels.instance_id, labels).is_some() {
            return Err(Error::Data(format!(
                "duplicate labels for instance `{}`",
                labels.instance_id
            )));
        }
    }

    // Tokenize and segment once; epochs only reshuffle indices.
    let mut prepared_train = Vec::with_capacity(session.train_split.instances.len());
    for instance in &session.train_split.instances {
        let prepared = prepare_instance(
            instance,
            session.vocabulary,
            &session.segmenter,
            model_config.max_positions,
        )?;
        let labels = *label_map.get(instance.id.as_str()).ok_or_else(|| {
            Error::Data(format!(
                "no segment labels for training instance `{}`",
                instance.id
            ))
        })?;
        if labels.flags.len() != prepared.segments.len() {
            return Err(Error::Data(format!(
                "labels for `{}` cover {} segments but segmentation produced {}",
                instance.id,
                labels.flags.len(),
                prepared.segments.len()
            )));
        }
        prepared_train.push((prepared, labels));
    }
    let mut prepared_validation: HashMap<&str, PreparedInstance> = HashMap::new();
    for instance in &session.validation_split.instances {
        let prepared = prepare_instance(
            instance,
            session.vocabulary,
            &session.segmenter,
            model_config.max_positions,
        )?;
        prepared_validation.insert(instance.id.as_str(), prepared);
    }

    fs::create_dir_all(&session.output_dir)
        .map_err(|e| Error::io(&session.output_dir, e))?;
    let checkpoint_dir = session.output_dir.join("checkpoints");
    fs::create_dir_all(&checkpoint_dir).map_err(|e| Error::io(&checkpoint_dir, e))?;

    let mut contrastive_options = session.contrastive.clone();
    contrastive_options.temperature = config.temperature;

    let model = Model::new(model_config.clone())?;
    let params = model.parameters();
    let mut optimizer = AdamW::new(params.clone(), config.learning_rate, config.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);

    let event_log_path = session.output_dir.join("events.jsonl");
    let mut events = BufWriter::new(
        fs::File::create(&event_log_path).map_err(|e| Error::io(&event_log_path, e))?,
    );
    let reports_path = session.output_dir.join("epoch_reports.jsonl");
    let mut reports_file = BufWriter::new(
        fs::File::create(&reports_path).map_err(|e| Error::io(&reports_path, e))?,
    );

    let mut reports: Vec<EpochReport> = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        model.set_mode(Mode::Train);
        let mut order: Vec<usize> = (0..prepared_train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown {
            generation: 0.0,
            classification: 0.0,
            contrastive: 0.0,
            joint: 0.0,
        };
        let mut pending = 0usize;
        for &idx in &order {
            step += 1;
            let (prepared, labels) = &prepared_train[idx];
            let (breakdown, n_pos, n_neg, ranking_correct) =
                train_step(&model, config, &contrastive_options, prepared, labels)?;
            sums.generation += breakdown.generation;
            sums.classification += breakdown.classification;
            sums.contrastive += breakdown.contrastive;
            sums.joint += breakdown.joint;
            let event = TrainEvent {
                step,
                epoch,
                instance_id: prepared.id.clone(),
                loss: breakdown,
                n_pos,
                n_neg,
                ranking_correct,
            };
            let line = serde_json::to_string(&event)
                .map_err(|e| Error::Data(format!("serializing train event: {e}")))?;
            writeln!(events, "{line}").map_err(|e| Error::io(&event_log_path, e))?;
            pending += 1;
            if pending == config.batch_size {
                clip_gradient_norm(&params, config.gradient_clip_norm);
                optimizer.step();
                optimizer.zero_grad();
                pending = 0;
            }
        }
        // Partial accumulation windows flush at the epoch boundary.
        if pending > 0 {
            clip_gradient_norm(&params, config.gradient_clip_norm);
            optimizer.step();
            optimizer.zero_grad();
        }
        events.flush().map_err(|e| Error::io(&event_log_path, e))?;

        let n = order.len() as f64;
        let train_loss = joint_loss(
            sums.generation / n,
            sums.classification / n,
            sums.contrastive / n,
            config,
        );

        model.set_mode(Mode::Eval);
        let eval = evaluate_split(session.validation_split, |instance| {
            let prepared = prepared_validation
                .get(instance.id.as_str())
                .expect("every validation instance was prepared above");
            generate_from_prepared(&model, session.vocabulary, prepared, session.validation_max_length)
        })?;

        let relative = format!("checkpoints/epoch-{epoch:03}.ckpt");
        checkpoint::capture_model(&model, session.vocabulary, epoch)
            .save(&session.output_dir.join(&relative))?;

        let report = EpochReport {
            epoch,
            train_loss,
            rouge1: eval.rouge1,
            rouge2: eval.rouge2,
            rouge_l: eval.rouge_l,
            mean_rouge: eval.mean_rouge,
            checkpoint_path: relative,
        };
        let line = serde_json::to_string(&report)
            .map_err(|e| Error::Data(format!("serializing epoch report: {e}")))?;
        writeln!(reports_file, "{line}").map_err(|e| Error::io(&reports_path, e))?;
        log::info!(
            "epoch {epoch}: joint {:.4} (gen {:.4}, cls {:.4}, cont {:.4}), mean rouge {:.4}",
            report.train_loss.joint,
            report.train_loss.generation,
            report.train_loss.classification,
            report.train_loss.contrastive,
            report.mean_rouge
        );
        reports.push(report);
    }
    reports_file.flush().map_err(|e| Error::io(&reports_path, e))?;

    let best = select_checkpoint(&reports).clone();
    let best_path = session.output_dir.join("best_checkpoint.json");
    let best_json = serde_json::json!({
        "epoch": best.epoch,
        "checkpoint_path": best.checkpoint_path,
        "mean_rouge": best.mean_rouge,
    });
    fs::write(
        &best_path,
        format!("{}\n", serde_json::to_string_pretty(&best_json).expect("static shape")),
    )
    .map_err(|e| Error::io(&best_path, e))?;

    model.set_mode(Mode::Eval);
    Ok(TrainOutcome {
        reports,
        model,
        best,
        output_dir: session.output_dir.clone(),
        event_log_path,
        reports_path,
    })
}

/// The report whose checkpoint has the highest validation mean ROUGE; ties
/// resolve toward the earliest epoch. `reports` must be non-empty.
pub fn select_checkpoint(reports: &[EpochReport]) -> &EpochReport {
    assert!(!reports.is_empty(), "checkpoint selection needs at least one report");
    let mut best = &reports[0];
    for report in &reports[1..] {
        if report.mean_rouge > best.mean_rouge {
            best = report;
        }
    }
    best
}

/// One grid point of a temperature sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub temperature: f64,
    /// Best-checkpoint validation mean ROUGE; absent when the cell failed.
    pub mean_rouge: Option<f64>,
    /// Epoch that produced the best checkpoint.
    pub best_epoch: Option<usize>,
    /// Failure description when the cell's run errored.
    pub error: Option<String>,
}

/// One full train+validate run per grid temperature, everything else fixed
/// (including seeds). Each cell trains into `output_dir/tau-<τ>/`. A failed
/// cell is recorded with its error and the sweep continues; rows come back
/// ordered by τ ascending.
pub fn sweep_temperature(
    config: &TrainConfig,
    model_config: &ModelConfig,
    session: &TrainSession,
    grid: &[f64],
) -> Result<Vec<SweepCell>> {
    if grid.is_empty() {
        return Err(Error::Config("temperature grid is empty".into()));
    }
    for &tau in grid {
        if !(tau > 0.0) {
            return Err(Error::Config(format!(
                "temperature grid values must be positive, got {tau}"
            )));
        }
    }
    let mut taus = grid.to_vec();
    taus.sort_by(|a, b| a.partial_cmp(b).expect("grid checked finite and positive"));
    let mut cells = Vec::with_capacity(taus.len());
    for &tau in &taus {
        let mut cell_config = config.clone();
        cell_config.temperature = tau;
        let mut cell_session = session.clone();
        cell_session.output_dir = session.output_dir.join(format!("tau-{tau}"));
        match train(&cell_config, model_config, &cell_session) {
            Ok(outcome) => cells.push(SweepCell {
                temperature: tau,
                mean_rouge: Some(outcome.best.mean_rouge),
                best_epoch: Some(outcome.best.epoch),
                error: None,
            }),
            Err(e) => {
                log::warn!("sweep cell tau={tau} failed: {e}");
                cells.push(SweepCell {
                    temperature: tau,
                    mean_rouge: None,
                    best_epoch: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    Ok(cells)
}

/// Plain-text sweep table, one row per cell in the given order.
pub fn sweep_table(cells: &[SweepCell]) -> String {
    let mut out = String::from("temperature  mean_rouge  best_epoch\n");
    for cell in cells {
        match (cell.mean_rouge, cell.best_epoch) {
            (Some(rouge), Some(epoch)) => {
                out.push_str(&format!("{:<11}  {rouge:<10.4}  {epoch}\n", cell.temperature));
            }
            _ => {
                let message = cell.error.as_deref().unwrap_or("failed");
                out.push_str(&format!("{:<11}  failed: {message}\n", cell.temperature));
            }
        }
    }
    out
}
