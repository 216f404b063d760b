//! Versioned binary checkpoints: magic, format version, a JSON header with
//! the encoder config, vocabulary and tensor layout, then raw little-endian
//! `f64` weights.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Parameter, Tensor};

const MAGIC: &[u8; 8] = b"SSCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// An encoder together with the vocabulary its embedding table indexes.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub vocab: Vocabulary,
}

impl TrainedModel {
    pub fn new(encoder: Encoder, vocab: Vocabulary) -> Result<Self> {
        if encoder.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocabulary size {} differs from vocabulary length {}",
                encoder.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { encoder, vocab })
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// SHA-256 over every weight's little-endian bytes, in storage order.
pub fn weights_digest(encoder: &Encoder) -> String {
    let mut h = Sha256::new();
    for p in encoder.params() {
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    }
    super::config::hex(&h.finalize())
}

pub fn write_checkpoint<W: Write>(mut w: W, model: &TrainedModel) -> Result<()> {
    let header = Header {
        config: model.encoder.config().clone(),
        vocab: model.vocab.tokens().to_vec(),
        tensors: model
            .encoder
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in model.encoder.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), model)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated while reading {what}")));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut bytes = buf.as_slice();
    if take(&mut bytes, MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(
        take(&mut bytes, 8, "header length")?
            .try_into()
            .expect("8 bytes"),
    );
    let len =
        usize::try_from(len).map_err(|_| Error::Checkpoint("header length overflows".into()))?;
    let header: Header = serde_json::from_slice(take(&mut bytes, len, "header")?)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(Error::Checkpoint(format!(
            "header holds {} vocabulary entries for vocab_size {}",
            header.vocab.len(),
            header.config.vocab_size
        )));
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = take(&mut bytes, n * 8, &t.name)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Tensor::new(t.shape, data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", t.name)))?;
        params.push(Parameter::new(t.name, value));
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len())));
    }
    let encoder = Encoder::from_parameters(header.config, params)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab =
        Vocabulary::from_tokens(header.vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
    TrainedModel::new(encoder, vocab)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Loads a checkpoint for use with `vocab`; a size mismatch is a config error.
pub fn load_checkpoint_for(path: &Path, vocab: &Vocabulary) -> Result<TrainedModel> {
    let model = load_checkpoint(path)?;
    if model.vocab.len() != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary has {} entries, data vocabulary has {}",
            model.vocab.len(),
            vocab.len()
        )));
    }
    Ok(model)
}
