//! Segment relevance labeling.
//!
//! Two paths produce the per-segment gold flags consumed by the
//! classification and contrastive objectives: annotated gold spans (flag a
//! segment iff its token interval intersects any span) and a bigram-overlap
//! heuristic for corpora without span annotations (flag a segment iff it
//! shares at least `threshold` distinct word bigrams with a reference
//! summary; six is the default boundary). Labels are persisted as
//! line-delimited records so labeling stays a one-time preprocessing step.

use std::collections::HashSet;
use std::hash::Hash;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::Segment;

/// How a set of flags was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Annotated,
    Bigram,
}

/// Gold/non-gold flags for one instance, aligned with its segments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub instance_id: String,
    pub flags: Vec<bool>,
    pub source: LabelSource,
}

impl SegmentLabels {
    pub fn positive_count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

/// Flag each segment whose half-open `[doc_start, doc_end)` interval
/// intersects any gold span by at least one token.
pub fn label_by_gold_spans(
    instance_id: &str,
    segments: &[Segment],
    gold_spans: &[(usize, usize)],
) -> SegmentLabels {
    let flags = segments
        .iter()
        .map(|seg| {
            gold_spans
                .iter()
                .any(|&(start, end)| seg.doc_start < end && start < seg.doc_end)
        })
        .collect();
    SegmentLabels {
        instance_id: instance_id.to_string(),
        flags,
        source: LabelSource::Annotated,
    }
}

/// Number of distinct bigrams occurring in both sequences (type overlap:
/// repeated occurrences count once).
pub fn bigram_overlap_count<T: Eq + Hash>(a: &[T], b: &[T]) -> usize {
    if a.len() < 2 || b.len() < 2 {
        return 0;
    }
    let left: HashSet<(&T, &T)> = a.windows(2).map(|w| (&w[0], &w[1])).collect();
    b.windows(2)
        .map(|w| (&w[0], &w[1]))
        .collect::<HashSet<_>>()
        .intersection(&left)
        .count()
}

/// Flag each segment sharing at least `threshold` distinct bigrams with the
/// summary.
pub fn label_by_bigram_overlap(
    instance_id: &str,
    segments: &[Segment],
    summary: &[u32],
    threshold: usize,
) -> Result<SegmentLabels> {
    if threshold < 1 {
        return Err(Error::Config(
            "bigram threshold must be at least 1".into(),
        ));
    }
    let flags = segments
        .iter()
        .map(|seg| bigram_overlap_count(&seg.token_ids, summary) >= threshold)
        .collect();
    Ok(SegmentLabels {
        instance_id: instance_id.to_string(),
        flags,
        source: LabelSource::Bigram,
    })
}

/// Multi-reference variant: a segment is positive if it clears the threshold
/// for ANY reference.
pub fn label_by_bigram_overlap_multi(
    instance_id: &str,
    segments: &[Segment],
    references: &[Vec<u32>],
    threshold: usize,
) -> Result<SegmentLabels> {
    let mut flags = vec![false; segments.len()];
    for reference in references {
        let labels = label_by_bigram_overlap(instance_id, segments, reference, threshold)?;
        for (f, l) in flags.iter_mut().zip(labels.flags) {
            *f |= l;
        }
    }
    Ok(SegmentLabels {
        instance_id: instance_id.to_string(),
        flags,
        source: LabelSource::Bigram,
    })
}

/// Copy flags onto the segments' `is_gold` field.
pub fn apply_labels(segments: &mut [Segment], labels: &SegmentLabels) -> Result<()> {
    if segments.len() != labels.flags.len() {
        return Err(Error::Data(format!(
            "labels for `{}` cover {} segments but the instance has {}",
            labels.instance_id,
            labels.flags.len(),
            segments.len()
        )));
    }
    for (seg, &flag) in segments.iter_mut().zip(labels.flags.iter()) {
        seg.is_gold = flag;
    }
    Ok(())
}

/// Write labels as line-delimited records `{instance_id, flags, source}`.
pub fn save_labels(path: &Path, labels: &[SegmentLabels]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for label in labels {
        let line = serde_json::to_string(label)
            .map_err(|e| Error::Data(format!("serializing labels for `{}`: {e}", label.instance_id)))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Inverse of [`save_labels`].
pub fn load_labels(path: &Path) -> Result<Vec<SegmentLabels>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentLabels = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        labels.push(record);
    }
    Ok(labels)
}
