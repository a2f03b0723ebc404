//! Self-contained ROUGE scoring: R-1 and R-2 as n-gram multiset overlap, R-L
//! as whole-sequence longest common subsequence, all reported as
//! precision/recall/F1. Multiple references aggregate by maximum F1.
//!
//! Scoring preprocessing is deliberately minimal and documented: inputs are
//! the pipeline's token streams (lowercased at ingestion) — no stemming, no
//! stopword removal. Implementations that stem report different absolute
//! values.

use std::collections::HashMap;
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplit, TrainingInstance};
use crate::error::{Error, Result};

/// Precision, recall, and their harmonic mean for one candidate/reference
/// pair under one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl RougeScore {
    pub fn zero() -> RougeScore {
        RougeScore { precision: 0.0, recall: 0.0, f1: 0.0 }
    }

    fn from_precision_recall(precision: f64, recall: f64) -> RougeScore {
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        RougeScore { precision, recall, f1 }
    }
}

/// Which ROUGE variant to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeMetric {
    Rouge1,
    Rouge2,
    RougeL,
}

/// N-gram multiset overlap: recall counts matches against the reference's
/// n-grams, precision against the candidate's. Either side having no n-grams
/// zeroes all components.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> RougeScore {
    assert!(n >= 1, "n-gram order must be at least 1");
    let candidate_grams = candidate.len().saturating_sub(n - 1);
    let reference_grams = reference.len().saturating_sub(n - 1);
    if candidate_grams == 0 || reference_grams == 0 {
        return RougeScore::zero();
    }
    let mut budget: HashMap<&[T], usize> = HashMap::new();
    for gram in reference.windows(n) {
        *budget.entry(gram).or_insert(0) += 1;
    }
    let mut matches = 0usize;
    for gram in candidate.windows(n) {
        if let Some(count) = budget.get_mut(gram) {
            if *count > 0 {
                *count -= 1;
                matches += 1;
            }
        }
    }
    RougeScore::from_precision_recall(
        matches as f64 / candidate_grams as f64,
        matches as f64 / reference_grams as f64,
    )
}

/// Length of the longest common subsequence, by dynamic programming.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut previous = vec![0usize; b.len() + 1];
    let mut current = vec![0usize; b.len() + 1];
    for item_a in a {
        for (j, item_b) in b.iter().enumerate() {
            current[j + 1] = if item_a == item_b {
                previous[j] + 1
            } else {
                previous[j + 1].max(current[j])
            };
        }
        std::mem::swap(&mut previous, &mut current);
    }
    previous[b.len()]
}

/// Whole-sequence LCS F-measure: recall is LCS/|reference|, precision
/// LCS/|candidate|.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::zero();
    }
    let lcs = lcs_length(candidate, reference) as f64;
    RougeScore::from_precision_recall(lcs / candidate.len() as f64, lcs / reference.len() as f64)
}

/// One candidate against one reference under the chosen metric.
pub fn score_metric<T: Eq + Hash>(candidate: &[T], reference: &[T], metric: RougeMetric) -> RougeScore {
    match metric {
        RougeMetric::Rouge1 => rouge_n(candidate, reference, 1),
        RougeMetric::Rouge2 => rouge_n(candidate, reference, 2),
        RougeMetric::RougeL => rouge_l(candidate, reference),
    }
}

/// Maximum-F1 aggregation over references: returns the full score triple of
/// the reference with the highest F1 (earliest wins ties).
pub fn score_multi_reference<T: Eq + Hash, R: AsRef<[T]>>(
    candidate: &[T],
    references: &[R],
    metric: RougeMetric,
) -> RougeScore {
    assert!(!references.is_empty(), "at least one reference required");
    let mut best = score_metric(candidate, references[0].as_ref(), metric);
    for reference in &references[1..] {
        let score = score_metric(candidate, reference.as_ref(), metric);
        if score.f1 > best.f1 {
            best = score;
        }
    }
    best
}

/// Scores for a single evaluated instance, with the generation kept for
/// inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceScore {
    pub instance_id: String,
    pub generated: String,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

/// Corpus-level evaluation: per-instance scores plus arithmetic means of the
/// per-instance F1 values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_instance: Vec<InstanceScore>,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rouge_l: f64,
    pub mean_rouge: f64,
}

impl EvalReport {
    pub fn from_instances(per_instance: Vec<InstanceScore>) -> EvalReport {
        let count = per_instance.len().max(1) as f64;
        let rouge1 = per_instance.iter().map(|s| s.rouge1.f1).sum::<f64>() / count;
        let rouge2 = per_instance.iter().map(|s| s.rouge2.f1).sum::<f64>() / count;
        let rouge_l = per_instance.iter().map(|s| s.rouge_l.f1).sum::<f64>() / count;
        let mean_rouge = (rouge1 + rouge2 + rouge_l) / 3.0;
        EvalReport { per_instance, rouge1, rouge2, rouge_l, mean_rouge }
    }

    /// Plain-text summary table, one row per instance plus the corpus means.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>8} {:>8} {:>8}\n",
            "instance", "rouge1", "rouge2", "rougeL"
        ));
        for score in &self.per_instance {
            out.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>8.4}\n",
                score.instance_id, score.rouge1.f1, score.rouge2.f1, score.rouge_l.f1
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4}   mean_rouge {:.4}\n",
            "corpus-mean", self.rouge1, self.rouge2, self.rouge_l, self.mean_rouge
        ));
        out
    }

    /// Writes the structured report, the text table, and the per-instance
    /// generations next to `base` (extensions .json, .txt, .generations.txt).
    pub fn save(&self, base: &Path) -> Result<()> {
        let json_path = base.with_extension("json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("serializing evaluation report: {e}")))?;
        std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
        let table_path = base.with_extension("txt");
        std::fs::write(&table_path, self.text_table()).map_err(|e| Error::io(&table_path, e))?;
        let gen_path = base.with_extension("generations.txt");
        let mut file = std::fs::File::create(&gen_path).map_err(|e| Error::io(&gen_path, e))?;
        for score in &self.per_instance {
            writeln!(file, "{}\t{}", score.instance_id, score.generated)
                .map_err(|e| Error::io(&gen_path, e))?;
        }
        Ok(())
    }
}

/// Evaluates a split by calling `generate` for each instance's candidate
/// token stream and scoring it against the instance's reference token
/// sequences with max-over-references aggregation.
pub fn evaluate_split<F>(split: &DatasetSplit, mut generate: F) -> Result<EvalReport>
where
    F: FnMut(&TrainingInstance) -> Result<Vec<String>>,
{
    if split.instances.is_empty() {
        return Err(Error::Config(format!("split '{}' has no instances to evaluate", split.name)));
    }
    let mut per_instance = Vec::with_capacity(split.instances.len());
    for instance in &split.instances {
        let candidate = generate(instance)?;
        per_instance.push(InstanceScore {
            instance_id: instance.id.clone(),
            generated: candidate.join(" "),
            rouge1: score_multi_reference(&candidate, &instance.references, RougeMetric::Rouge1),
            rouge2: score_multi_reference(&candidate, &instance.references, RougeMetric::Rouge2),
            rouge_l: score_multi_reference(&candidate, &instance.references, RougeMetric::RougeL),
        });
    }
    Ok(EvalReport::from_instances(per_instance))
}
