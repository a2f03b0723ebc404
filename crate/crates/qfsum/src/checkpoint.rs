//! Binary checkpoint container: named f64 matrices plus run metadata.
//!
//! File layout (integers little-endian):
//!
//! ```text
//! bytes 0..8      magic "QFSCKPT\0"
//! bytes 8..12     format version (u32, currently 1)
//! bytes 12..20    header length H (u64)
//! bytes 20..20+H  UTF-8 JSON header: model config, epoch, and an ordered
//!                 manifest of named blocks with their shapes
//! remainder       block payloads: f64 little-endian, row-major, laid out
//!                 in manifest order with no padding
//! ```
//!
//! Blocks hold the model parameters (named exactly as in
//! `Model::named_parameters`) plus the projection head's running
//! normalization statistics. The header also embeds the vocabulary, so a
//! checkpoint alone suffices to generate summaries. The container itself is
//! deliberately dumb — it stores named matrices and leaves interpretation
//! to [`capture_model`] and [`restore_model`] — so the format does not
//! change when training internals do. Checkpoints capture inference state
//! only; optimizer moments are not persisted because no operation resumes
//! training from disk.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::segmenter::{Vocabulary, RESERVED_TOKENS};

/// File signature; also catches byte-order or truncation accidents early.
pub const MAGIC: [u8; 8] = *b"QFSCKPT\0";

/// Bumped whenever the layout changes incompatibly.
pub const FORMAT_VERSION: u32 = 1;

/// Name under which the projection head's running mean is stored.
pub const RUNNING_MEAN_BLOCK: &str = "projection.norm.running_mean";
/// Name under which the projection head's running variance is stored.
pub const RUNNING_VAR_BLOCK: &str = "projection.norm.running_var";

/// Shape entry in the header manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BlockSpec {
    name: String,
    rows: usize,
    cols: usize,
}

/// JSON header written between the fixed prefix and the payloads.
#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    epoch: usize,
    /// Non-reserved vocabulary tokens in id order.
    vocabulary: Vec<String>,
    blocks: Vec<BlockSpec>,
}

/// One named matrix stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values, `rows * cols` of them.
    pub data: Vec<f64>,
}

/// In-memory checkpoint: metadata plus an ordered list of named matrices.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub epoch: usize,
    /// Non-reserved vocabulary tokens in id order.
    pub vocabulary: Vec<String>,
    blocks: Vec<Block>,
}

impl Checkpoint {
    /// Empty checkpoint for the given configuration, vocabulary, and epoch.
    pub fn new(model_config: ModelConfig, vocabulary: Vec<String>, epoch: usize) -> Checkpoint {
        Checkpoint {
            model_config,
            epoch,
            vocabulary,
            blocks: Vec::new(),
        }
    }

    /// Append a named matrix. Names must be unique and data must match the
    /// declared shape; both are programming errors, not file errors.
    pub fn push_block(&mut self, name: &str, rows: usize, cols: usize, data: Vec<f64>) {
        assert_eq!(
            data.len(),
            rows * cols,
            "block `{name}` declares {rows}x{cols} but holds {} values",
            data.len()
        );
        assert!(
            self.block(name).is_none(),
            "duplicate checkpoint block `{name}`"
        );
        self.blocks.push(Block {
            name: name.to_string(),
            rows,
            cols,
            data,
        });
    }

    /// Look up a block by name.
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    /// All blocks in storage order.
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Serialize to `path` in the documented binary layout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            model_config: self.model_config.clone(),
            epoch: self.epoch,
            vocabulary: self.vocabulary.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockSpec {
                    name: b.name.clone(),
                    rows: b.rows,
                    cols: b.cols,
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("serializing header: {e}")))?;
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        out.write_all(&MAGIC).map_err(io)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(header_json.len() as u64).to_le_bytes())
            .map_err(io)?;
        out.write_all(&header_json).map_err(io)?;
        for block in &self.blocks {
            for &v in &block.data {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }

    /// Read a checkpoint written by [`Checkpoint::save`], validating the
    /// magic, version, and declared sizes against the actual file length.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |message: String| {
            Error::Checkpoint(format!("{}: {message}", path.display()))
        };
        if bytes.len() < 20 {
            return Err(corrupt(format!(
                "file holds {} bytes, shorter than the fixed 20-byte prefix",
                bytes.len()
            )));
        }
        if bytes[..8] != MAGIC {
            return Err(corrupt("bad magic; not a checkpoint file".to_string()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| corrupt(format!("declared header length {header_len} overruns file")))?;
        let header: Header = serde_json::from_slice(&bytes[20..payload_start])
            .map_err(|e| corrupt(format!("malformed header: {e}")))?;
        let declared_vocab = RESERVED_TOKENS.len() + header.vocabulary.len();
        if declared_vocab != header.model_config.vocab_size {
            return Err(corrupt(format!(
                "header stores {declared_vocab} token ids but the configuration expects {}",
                header.model_config.vocab_size
            )));
        }
        let expected: usize = header.blocks.iter().map(|b| b.rows * b.cols * 8).sum();
        let actual = bytes.len() - payload_start;
        if expected != actual {
            return Err(corrupt(format!(
                "payload holds {actual} bytes but the manifest declares {expected}"
            )));
        }
        let mut offset = payload_start;
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for spec in header.blocks {
            let n = spec.rows * spec.cols;
            let data: Vec<f64> = bytes[offset..offset + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += n * 8;
            blocks.push(Block {
                name: spec.name,
                rows: spec.rows,
                cols: spec.cols,
                data,
            });
        }
        Ok(Checkpoint {
            model_config: header.model_config,
            epoch: header.epoch,
            vocabulary: header.vocabulary,
            blocks,
        })
    }
}

/// Snapshot a model — every registered parameter plus the projection head's
/// running normalization statistics — into a checkpoint, together with the
/// vocabulary that gives its token ids meaning.
pub fn capture_model(model: &Model, vocabulary: &Vocabulary, epoch: usize) -> Checkpoint {
    let mut ckpt = Checkpoint::new(
        model.config().clone(),
        vocabulary.non_reserved_tokens(),
        epoch,
    );
    for (name, tensor) in model.named_parameters() {
        ckpt.push_block(&name, tensor.rows(), tensor.cols(), tensor.data().clone());
    }
    let (mean, var) = model.projection_norm_stats();
    let dim = mean.len();
    ckpt.push_block(RUNNING_MEAN_BLOCK, 1, dim, mean);
    ckpt.push_block(RUNNING_VAR_BLOCK, 1, dim, var);
    ckpt
}

/// Rebuild a model from a checkpoint, failing if any parameter is missing
/// or has the wrong shape for the stored configuration.
pub fn restore_model(ckpt: &Checkpoint) -> Result<Model> {
    let model = Model::new(ckpt.model_config.clone())?;
    for (name, tensor) in model.named_parameters() {
        let block = ckpt
            .block(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter block `{name}`")))?;
        if block.rows != tensor.rows() || block.cols != tensor.cols() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` is stored as {}x{} but the configuration needs {}x{}",
                block.rows,
                block.cols,
                tensor.rows(),
                tensor.cols()
            )));
        }
        tensor.data_mut().copy_from_slice(&block.data);
    }
    let mean = ckpt
        .block(RUNNING_MEAN_BLOCK)
        .ok_or_else(|| Error::Checkpoint(format!("missing block `{RUNNING_MEAN_BLOCK}`")))?;
    let var = ckpt
        .block(RUNNING_VAR_BLOCK)
        .ok_or_else(|| Error::Checkpoint(format!("missing block `{RUNNING_VAR_BLOCK}`")))?;
    model.set_projection_norm_stats(mean.data.clone(), var.data.clone());
    Ok(model)
}

/// Rebuild the vocabulary stored alongside the model.
pub fn restore_vocabulary(ckpt: &Checkpoint) -> Result<Vocabulary> {
    Vocabulary::from_ordered_tokens(ckpt.vocabulary.iter().cloned())
}
