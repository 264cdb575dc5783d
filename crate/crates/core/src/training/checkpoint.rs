//! Binary checkpoint format.
//!
//! ```text
//! "KURO" | u32 version | u32 header length | JSON header
//! then per tensor: u32 name length | name | u32 rank | u64 dims… | f32 data…
//! ```
//! All integers and floats are little-endian. Tensors are the model
//! parameters followed by the Adam moments, named `adam.m/<param>` and
//! `adam.v/<param>`.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TrainConfig;
use crate::corpus::CharacterVocabulary;
use crate::model::{KuroNet, ModelConfig, ModelError};
use crate::tensor::AdamState;
use crate::Tensor;

pub const MAGIC: &[u8; 4] = b"KURO";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: magic bytes {found:?}, expected \"KURO\"")]
    BadMagic { found: Vec<u8> },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("tensor {name}: shape {found:?} does not match the configured {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0} missing from checkpoint")]
    MissingTensor(String),
    #[error("unexpected tensor {0} in checkpoint")]
    UnknownTensor(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed as hex.
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn parse(&self) -> Option<ChaCha8Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }

    /// The generator at the captured position. Only valid on states that
    /// came through [`load_checkpoint`] or [`RngState::capture`].
    pub fn restore(&self) -> ChaCha8Rng {
        self.parse().expect("rng state validated on load")
    }
}

/// Trained weights plus everything needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: KuroNet<f32>,
    pub vocab: CharacterVocabulary,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub adam: AdamState<f32>,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model.config() == other.model.config()
            && self.model.params().names() == other.model.params().names()
            && self.model.params().values() == other.model.params().values()
            && self.vocab == other.vocab
            && self.train == other.train
            && self.epoch == other.epoch
            && self.step == other.step
            && self.rng == other.rng
            && self.adam == other.adam
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    vocab: CharacterVocabulary,
    train: TrainConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    adam_t: u64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_checkpoint(ckpt: &Checkpoint, w: &mut impl Write) -> std::io::Result<()> {
    let header = Header {
        model: ckpt.model.config().clone(),
        vocab: ckpt.vocab.clone(),
        train: ckpt.train.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng: ckpt.rng.clone(),
        adam_t: ckpt.adam.t,
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let params = ckpt.model.params();
    for (name, t) in params.names().iter().zip(params.values()) {
        write_tensor(w, name, t)?;
    }
    for (prefix, moments) in [("adam.m/", &ckpt.adam.m), ("adam.v/", &ckpt.adam.v)] {
        for (name, t) in params.names().iter().zip(moments) {
            write_tensor(w, &format!("{prefix}{name}"), t)?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io(path))?;
    let mut w = BufWriter::new(file);
    encode_checkpoint(ckpt, &mut w).map_err(io(path))?;
    w.flush().map_err(io(path))
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: impl FnOnce() -> String) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated { what: what() });
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: impl FnOnce() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: impl FnOnce() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes };
    let magic = r
        .take(4, || "magic".into())
        .map_err(|_| CheckpointError::BadMagic { found: bytes.to_vec() })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32(|| "version".into())?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32(|| "header length".into())? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, || "header".into())?).map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.rng.parse().is_none() {
        return Err(CheckpointError::Header(format!("invalid rng state {:?}", header.rng)));
    }
    if header.vocab.len() != header.model.num_classes {
        return Err(CheckpointError::Header(format!(
            "vocabulary has {} tokens but the model predicts {} classes",
            header.vocab.len(),
            header.model.num_classes
        )));
    }

    let mut model = KuroNet::<f32>::new(header.model.clone(), 0)?;
    let index: HashMap<String, usize> = model
        .params()
        .names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut adam = AdamState::zeros_like(model.params().values());
    adam.t = header.adam_t;
    let n = index.len();
    let mut seen = vec![false; 3 * n];

    while !r.buf.is_empty() {
        let name_len = r.u32(|| "tensor name length".into())? as usize;
        let name = std::str::from_utf8(r.take(name_len, || "tensor name".into())?)
            .map_err(|e| CheckpointError::Header(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32(|| format!("rank of {name}"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(|| format!("shape of {name}"))? as usize);
        }
        let (slot, base) = if let Some(p) = name.strip_prefix("adam.m/") {
            (1, p)
        } else if let Some(p) = name.strip_prefix("adam.v/") {
            (2, p)
        } else {
            (0, name.as_str())
        };
        let Some(&i) = index.get(base) else {
            return Err(CheckpointError::UnknownTensor(name));
        };
        let target = match slot {
            0 => &mut model.params_mut().values_mut()[i],
            1 => &mut adam.m[i],
            _ => &mut adam.v[i],
        };
        if shape != target.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: target.shape().to_vec(),
                found: shape,
            });
        }
        let raw = r.take(target.len() * 4, || format!("data of {name}"))?;
        for (dst, chunk) in target.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        seen[slot * n + i] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        let prefix = ["", "adam.m/", "adam.v/"][missing / n];
        return Err(CheckpointError::MissingTensor(format!(
            "{prefix}{}",
            model.params().names()[missing % n]
        )));
    }
    Ok(Checkpoint {
        model,
        vocab: header.vocab,
        train: header.train,
        epoch: header.epoch,
        step: header.step,
        rng: header.rng,
        adam,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path).map_err(io(path))?)
}
