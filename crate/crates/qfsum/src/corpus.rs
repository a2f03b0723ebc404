//! Dataset ingestion and the normalized instance format.
//!
//! Upstream corpora arrive in two native shapes: meeting transcripts with
//! per-query answers and annotated relevant turn spans, and long stories with
//! questions that each carry several reference summaries. Adapters flatten
//! both into [`TrainingInstance`] records; downstream stages only ever see
//! the normalized form (line-delimited JSON, token-string arrays), keeping
//! the pipeline independent of upstream schemas.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segmenter::Tokenizer;

/// One query over one document, with its reference summaries and (possibly
/// empty) gold token spans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingInstance {
    pub id: String,
    /// Query tokens.
    pub query: Vec<String>,
    /// Flattened document tokens; dialogue turns keep inline "speaker :"
    /// prefixes rather than a side channel.
    pub document: Vec<String>,
    /// One or more reference summaries, each a token sequence.
    pub references: Vec<Vec<String>>,
    /// Half-open `(start, end)` token intervals into `document`, sorted and
    /// non-overlapping after normalization.
    pub gold_spans: Vec<(usize, usize)>,
}

impl TrainingInstance {
    /// Validate invariants and normalize the gold spans (sort by start,
    /// merge overlaps). Consumes and returns the instance so loaders can
    /// chain it.
    pub fn normalized(mut self) -> Result<TrainingInstance> {
        let fail = |id: &str, message: String| Error::Invariant {
            id: id.to_string(),
            message,
        };
        if self.query.is_empty() {
            return Err(fail(&self.id, "query is empty".into()));
        }
        if self.document.is_empty() {
            return Err(fail(&self.id, "document is empty".into()));
        }
        if self.references.is_empty() {
            return Err(fail(&self.id, "references list is empty".into()));
        }
        for (i, reference) in self.references.iter().enumerate() {
            if reference.is_empty() {
                return Err(fail(&self.id, format!("reference {i} is empty")));
            }
        }
        for (field, tokens) in [("query", &self.query), ("document", &self.document)]
            .into_iter()
            .chain(self.references.iter().map(|r| ("reference", r)))
        {
            if let Some(bad) = tokens
                .iter()
                .find(|t| t.is_empty() || t.chars().any(char::is_whitespace))
            {
                return Err(fail(
                    &self.id,
                    format!("{field} contains an empty or whitespace-bearing token {bad:?}"),
                ));
            }
        }
        for &(start, end) in &self.gold_spans {
            if start >= end || end > self.document.len() {
                return Err(fail(
                    &self.id,
                    format!(
                        "gold span ({start}, {end}) out of bounds for document of {} tokens",
                        self.document.len()
                    ),
                ));
            }
        }
        self.gold_spans.sort_unstable();
        let mut merged: Vec<(usize, usize)> = Vec::with_capacity(self.gold_spans.len());
        for &(start, end) in &self.gold_spans {
            match merged.last_mut() {
                Some(last) if start < last.1 => last.1 = last.1.max(end),
                _ => merged.push((start, end)),
            }
        }
        self.gold_spans = merged;
        Ok(self)
    }
}

/// Which portion of the corpus a file holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = Error;
    fn from_str(s: &str) -> Result<SplitName> {
        match s {
            "train" => Ok(SplitName::Train),
            "validation" => Ok(SplitName::Validation),
            "test" => Ok(SplitName::Test),
            other => Err(Error::Config(format!(
                "unknown split name `{other}` (expected train, validation, or test)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitName::Train => write!(f, "train"),
            SplitName::Validation => write!(f, "validation"),
            SplitName::Test => write!(f, "test"),
        }
    }
}

/// A named collection of validated instances with unique ids.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub instances: Vec<TrainingInstance>,
}

/// Source format accepted by [`load_split`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    QmSum,
    Squality,
    Normalized,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<DataFormat> {
        match s {
            "qmsum" => Ok(DataFormat::QmSum),
            "squality" => Ok(DataFormat::Squality),
            "normalized" => Ok(DataFormat::Normalized),
            other => Err(Error::Config(format!(
                "unknown data format `{other}` (expected qmsum, squality, or normalized)"
            ))),
        }
    }
}

fn missing(record: &str, field: &str) -> Error {
    Error::Ingestion {
        record: record.to_string(),
        message: format!("missing or mistyped field `{field}`"),
    }
}

fn span_bound(value: &serde_json::Value) -> Option<usize> {
    match value {
        serde_json::Value::Number(n) => n.as_u64().map(|v| v as usize),
        serde_json::Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

/// Adapt one meeting record: an ordered transcript of (speaker, utterance)
/// turns plus query lists whose entries carry an answer and, optionally,
/// relevant turn spans (inclusive turn-index pairs). Produces one instance
/// per query; turn spans become token intervals over the flattened
/// transcript. Sub-turn span granularity is not supported: spans always
/// cover whole turns.
pub fn adapt_qmsum(
    raw_record: &serde_json::Value,
    record_id: &str,
    tokenizer: &Tokenizer,
) -> Result<Vec<TrainingInstance>> {
    let turns = raw_record
        .get("meeting_transcripts")
        .and_then(|v| v.as_array())
        .ok_or_else(|| missing(record_id, "meeting_transcripts"))?;
    // Flatten turn-by-turn, recording the token offset where each turn
    // starts; offsets[i]..offsets[i+1] is turn i's token interval.
    let mut document: Vec<String> = Vec::new();
    let mut offsets: Vec<usize> = Vec::with_capacity(turns.len() + 1);
    for (i, turn) in turns.iter().enumerate() {
        let speaker = turn
            .get("speaker")
            .and_then(|v| v.as_str())
            .ok_or_else(|| missing(record_id, &format!("meeting_transcripts[{i}].speaker")))?;
        let content = turn
            .get("content")
            .and_then(|v| v.as_str())
            .ok_or_else(|| missing(record_id, &format!("meeting_transcripts[{i}].content")))?;
        offsets.push(document.len());
        document.extend(tokenizer.tokenize(&format!("{speaker}: {content}")));
    }
    offsets.push(document.len());

    let mut instances = Vec::new();
    let mut query_ordinal = 0usize;
    for list_name in ["general_query_list", "specific_query_list"] {
        let Some(list) = raw_record.get(list_name) else {
            continue;
        };
        let list = list
            .as_array()
            .ok_or_else(|| missing(record_id, list_name))?;
        for (qi, entry) in list.iter().enumerate() {
            let query = entry
                .get("query")
                .and_then(|v| v.as_str())
                .ok_or_else(|| missing(record_id, &format!("{list_name}[{qi}].query")))?;
            let answer = entry
                .get("answer")
                .and_then(|v| v.as_str())
                .ok_or_else(|| missing(record_id, &format!("{list_name}[{qi}].answer")))?;
            let mut gold_spans = Vec::new();
            if let Some(spans) = entry.get("relevant_text_span") {
                let spans = spans
                    .as_array()
                    .ok_or_else(|| missing(record_id, &format!("{list_name}[{qi}].relevant_text_span")))?;
                for pair in spans {
                    let bounds = pair.as_array().filter(|p| p.len() == 2);
                    let (first, last) = match bounds {
                        Some(p) => match (span_bound(&p[0]), span_bound(&p[1])) {
                            (Some(a), Some(b)) => (a, b),
                            _ => {
                                return Err(Error::Ingestion {
                                    record: record_id.to_string(),
                                    message: format!(
                                        "{list_name}[{qi}] has a non-integer turn span {pair}"
                                    ),
                                })
                            }
                        },
                        None => {
                            return Err(Error::Ingestion {
                                record: record_id.to_string(),
                                message: format!(
                                    "{list_name}[{qi}] has a malformed turn span {pair}"
                                ),
                            })
                        }
                    };
                    if first > last || last >= turns.len() {
                        return Err(Error::Ingestion {
                            record: record_id.to_string(),
                            message: format!(
                                "{list_name}[{qi}] turn span ({first}, {last}) outside \
                                 transcript of {} turns",
                                turns.len()
                            ),
                        });
                    }
                    // Inclusive turn range -> half-open token interval.
                    gold_spans.push((offsets[first], offsets[last + 1]));
                }
            }
            let instance = TrainingInstance {
                id: format!("{record_id}-q{query_ordinal}"),
                query: tokenizer.tokenize(query),
                document: document.clone(),
                references: vec![tokenizer.tokenize(answer)],
                gold_spans,
            }
            .normalized()?;
            instances.push(instance);
            query_ordinal += 1;
        }
    }
    Ok(instances)
}

/// Adapt one story record: a document plus questions, each with one or more
/// reference responses. Produces one instance per question with empty gold
/// spans (the bigram labeler fills relevance flags later).
pub fn adapt_squality(
    raw_record: &serde_json::Value,
    record_id: &str,
    tokenizer: &Tokenizer,
) -> Result<Vec<TrainingInstance>> {
    let story = raw_record
        .get("document")
        .and_then(|v| v.as_str())
        .ok_or_else(|| missing(record_id, "document"))?;
    let document = tokenizer.tokenize(story);
    let questions = raw_record
        .get("questions")
        .and_then(|v| v.as_array())
        .ok_or_else(|| missing(record_id, "questions"))?;
    let base_id = raw_record
        .get("metadata")
        .and_then(|m| m.get("passage_id"))
        .map(|v| match v {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        })
        .unwrap_or_else(|| record_id.to_string());

    let mut instances = Vec::new();
    for (qi, question) in questions.iter().enumerate() {
        let text = question
            .get("question_text")
            .and_then(|v| v.as_str())
            .ok_or_else(|| missing(record_id, &format!("questions[{qi}].question_text")))?;
        let responses = question
            .get("responses")
            .and_then(|v| v.as_array())
            .ok_or_else(|| missing(record_id, &format!("questions[{qi}].responses")))?;
        let mut references = Vec::with_capacity(responses.len());
        for (ri, response) in responses.iter().enumerate() {
            let text = response
                .get("response_text")
                .and_then(|v| v.as_str())
                .ok_or_else(|| {
                    missing(record_id, &format!("questions[{qi}].responses[{ri}].response_text"))
                })?;
            references.push(tokenizer.tokenize(text));
        }
        if references.is_empty() {
            return Err(Error::Ingestion {
                record: record_id.to_string(),
                message: format!("questions[{qi}] has no responses"),
            });
        }
        let instance = TrainingInstance {
            id: format!("{base_id}-q{qi}"),
            query: tokenizer.tokenize(text),
            document: document.clone(),
            references,
            gold_spans: Vec::new(),
        }
        .normalized()?;
        instances.push(instance);
    }
    Ok(instances)
}

/// Load a dataset split.
///
/// `normalized` reads one line-delimited JSON record per instance from a
/// single file. The upstream formats read either a single structured file or
/// a directory of them (files visited in name order): `.jsonl` files are
/// parsed line by line, anything else as one JSON document (a top-level
/// array counts as multiple records).
pub fn load_split(path: &Path, format: DataFormat, name: SplitName) -> Result<DatasetSplit> {
    let instances = match format {
        DataFormat::Normalized => load_normalized(path)?,
        DataFormat::QmSum | DataFormat::Squality => load_upstream(path, format)?,
    };
    let mut seen = std::collections::HashSet::new();
    for instance in &instances {
        if !seen.insert(instance.id.clone()) {
            return Err(Error::Data(format!(
                "duplicate instance id `{}` in split {name}",
                instance.id
            )));
        }
    }
    if instances.is_empty() {
        log::warn!("split {name} loaded from {} is empty", path.display());
    }
    Ok(DatasetSplit { name, instances })
}

fn load_normalized(path: &Path) -> Result<Vec<TrainingInstance>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut instances = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingInstance =
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        instances.push(record.normalized()?);
    }
    Ok(instances)
}

fn load_upstream(path: &Path, format: DataFormat) -> Result<Vec<TrainingInstance>> {
    let mut files: Vec<std::path::PathBuf> = Vec::new();
    if path.is_dir() {
        let entries = std::fs::read_dir(path).map_err(|e| Error::io(path, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(path, e))?;
            let p = entry.path();
            if p.is_file() {
                files.push(p);
            }
        }
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    let tokenizer = Tokenizer::new(true);
    let mut instances = Vec::new();
    for file in &files {
        let stem = file
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "record".into());
        let is_jsonl = file.extension().is_some_and(|e| e == "jsonl");
        if is_jsonl {
            let handle = std::fs::File::open(file).map_err(|e| Error::io(file, e))?;
            for (lineno, line) in BufReader::new(handle).lines().enumerate() {
                let line = line.map_err(|e| Error::io(file, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value =
                    serde_json::from_str(&line).map_err(|e| Error::Malformed {
                        path: file.clone(),
                        line: lineno + 1,
                        message: e.to_string(),
                    })?;
                let record_id = format!("{stem}-{}", lineno + 1);
                instances.extend(adapt_record(&value, &record_id, format, &tokenizer)?);
            }
        } else {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            if text.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Malformed {
                    path: file.clone(),
                    line: 1,
                    message: e.to_string(),
                })?;
            match value {
                serde_json::Value::Array(records) => {
                    for (i, record) in records.iter().enumerate() {
                        let record_id = format!("{stem}-{i}");
                        instances.extend(adapt_record(record, &record_id, format, &tokenizer)?);
                    }
                }
                record => instances.extend(adapt_record(&record, &stem, format, &tokenizer)?),
            }
        }
    }
    Ok(instances)
}

fn adapt_record(
    value: &serde_json::Value,
    record_id: &str,
    format: DataFormat,
    tokenizer: &Tokenizer,
) -> Result<Vec<TrainingInstance>> {
    match format {
        DataFormat::QmSum => adapt_qmsum(value, record_id, tokenizer),
        DataFormat::Squality => adapt_squality(value, record_id, tokenizer),
        DataFormat::Normalized => unreachable!("normalized records bypass adapters"),
    }
}

/// Write a split in the normalized line-delimited format.
pub fn save_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for instance in &split.instances {
        let line = serde_json::to_string(instance)
            .map_err(|e| Error::Data(format!("serializing instance `{}`: {e}", instance.id)))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
