//! Shared fixtures for the integration suites: a deterministic synthetic
//! copy-task corpus plus temp-dir plumbing.
//!
//! The corpus: 20 instances over a 50-word vocabulary. Each instance is a
//! 200-token document of filler words with an 8-token summary planted as a
//! contiguous span; the planted span is the reference summary and the query
//! is the summary's first two words. Segmenting at length 32 with overlap
//! 0.5 yields 11 segments per document, and a segment is flagged gold
//! exactly when it contains the whole planted span. A model therefore only
//! has to learn to find the flagged segments and copy them out.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use qfsum::corpus::{save_split, DatasetSplit, SplitName, TrainingInstance};
use qfsum::labeler::{save_labels, LabelSource, SegmentLabels};
use qfsum::segmenter::{segment_document, Vocabulary};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub const CORPUS_SEED: u64 = 2024;
pub const CORPUS_INSTANCES: usize = 20;
pub const CORPUS_WORDS: usize = 50;
pub const DOC_TOKENS: usize = 200;
pub const SUMMARY_TOKENS: usize = 8;
pub const SEGMENT_LENGTH: usize = 32;
pub const OVERLAP_FRACTION: f64 = 0.5;

/// The corpus plus everything training needs alongside it.
pub struct SyntheticCorpus {
    pub split: DatasetSplit,
    pub labels: Vec<SegmentLabels>,
    pub vocabulary: Vocabulary,
}

/// Build the synthetic copy-task corpus. Fully deterministic: every call
/// returns identical data.
pub fn copy_corpus() -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
    let words: Vec<String> = (0..CORPUS_WORDS).map(|i| format!("w{i:02}")).collect();
    // Geometry is length-only, so a dummy document fixes the segment grid.
    let segments = segment_document(&vec![0u32; DOC_TOKENS], SEGMENT_LENGTH, OVERLAP_FRACTION)
        .expect("the corpus geometry is valid");

    let mut instances = Vec::with_capacity(CORPUS_INSTANCES);
    let mut labels = Vec::with_capacity(CORPUS_INSTANCES);
    let mut used_queries: Vec<(usize, usize)> = Vec::new();
    // The vocabulary is split into a summary pool and a filler pool, so
    // summary words occur in a document exactly once: inside the planted
    // span. Gold windows therefore contain all the evidence and non-gold
    // windows none of it.
    const SUMMARY_POOL: usize = 30;
    for n in 0..CORPUS_INSTANCES {
        // Distinct summary words per instance; the first two double as the
        // query, kept unique across instances so queries are unambiguous.
        let summary_words: Vec<usize> = loop {
            let mut pool: Vec<usize> = (0..SUMMARY_POOL).collect();
            pool.shuffle(&mut rng);
            let candidate: Vec<usize> = pool[..SUMMARY_TOKENS].to_vec();
            let query_key = (candidate[0], candidate[1]);
            if !used_queries.contains(&query_key) {
                used_queries.push(query_key);
                break candidate;
            }
        };
        let filler: Vec<usize> = (SUMMARY_POOL..CORPUS_WORDS).collect();

        // Stride-aligned plant: window starts are multiples of the stride
        // (16), so an aligned span is either wholly inside a window or
        // disjoint from it — no partially-overlapping windows that would be
        // labeled negative while containing most of the summary.
        let stride = SEGMENT_LENGTH / 2;
        let offset = stride * rng.gen_range(0..=(DOC_TOKENS - SUMMARY_TOKENS - 32) / stride);
        let mut doc: Vec<usize> = (0..DOC_TOKENS)
            .map(|_| filler[rng.gen_range(0..filler.len())])
            .collect();
        doc[offset..offset + SUMMARY_TOKENS].copy_from_slice(&summary_words);

        let id = format!("inst-{n:02}");
        let flags: Vec<bool> = segments
            .iter()
            .map(|seg| seg.doc_start <= offset && offset + SUMMARY_TOKENS <= seg.doc_end)
            .collect();
        assert!(
            flags.iter().any(|&f| f),
            "planting at offset {offset} must land inside at least one segment"
        );

        instances.push(TrainingInstance {
            id: id.clone(),
            query: vec![
                words[summary_words[0]].clone(),
                words[summary_words[1]].clone(),
            ],
            document: doc.iter().map(|&w| words[w].clone()).collect(),
            references: vec![summary_words.iter().map(|&w| words[w].clone()).collect()],
            gold_spans: vec![(offset, offset + SUMMARY_TOKENS)],
        });
        labels.push(SegmentLabels {
            instance_id: id,
            flags,
            source: LabelSource::Annotated,
        });
    }

    let vocabulary =
        Vocabulary::from_ordered_tokens(words).expect("50 fresh words form a vocabulary");
    SyntheticCorpus {
        split: DatasetSplit {
            name: SplitName::Train,
            instances,
        },
        labels,
        vocabulary,
    }
}

/// On-disk copy of the corpus for CLI-driven runs.
pub struct CorpusFiles {
    pub dataset: PathBuf,
    pub labels: PathBuf,
    pub vocabulary: PathBuf,
}

pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> CorpusFiles {
    std::fs::create_dir_all(dir).expect("create corpus dir");
    let files = CorpusFiles {
        dataset: dir.join("copy.jsonl"),
        labels: dir.join("labels.jsonl"),
        vocabulary: dir.join("vocabulary.txt"),
    };
    save_split(&files.dataset, &corpus.split).expect("write dataset");
    save_labels(&files.labels, &corpus.labels).expect("write labels");
    corpus.vocabulary.save(&files.vocabulary).expect("write vocabulary");
    files
}

/// Fresh temp directory, cleared of any previous run's leftovers.
pub fn temp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qfsum-acceptance-{name}"));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create temp dir");
    dir
}
