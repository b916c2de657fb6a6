//! Binary checkpoint files.
//!
//! Layout: the 8 magic bytes `MCCWSCKP`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header (model config,
//! vocabulary, training step, dev F1, tensor directory), then every tensor's
//! values as little-endian `f64` in directory order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::model::{Model, ModelConfig};
use crate::numeric::{ParamStore, Tensor};
use crate::Error;

pub const MAGIC: &[u8; 8] = b"MCCWSCKP";
pub const FORMAT_VERSION: u32 = 1;

/// A model plus the training state it was selected at.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// Dev F1 per criterion when this checkpoint was taken.
    pub dev_f1: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    sparse: bool,
    /// Offset into the payload, in values.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    step: u64,
    dev_f1: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), Error> {
        let mut offset = 0u64;
        let tensors = self
            .model
            .params
            .iter()
            .map(|(_, p)| {
                let entry = TensorEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    sparse: p.sparse,
                    offset,
                };
                offset += p.value.len() as u64;
                entry
            })
            .collect();
        let header = Header {
            config: self.model.config,
            vocab: self.model.vocab.clone(),
            step: self.step,
            dev_f1: self.dev_f1.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
        let io = |e: std::io::Error| bad(e.to_string());
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        let mut buf = Vec::new();
        for (_, p) in self.model.params.iter() {
            buf.clear();
            buf.extend(p.value.data().iter().flat_map(|v| v.to_le_bytes()));
            out.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self, Error> {
        let io = |e: std::io::Error| bad(format!("truncated file: {e}"));
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(io)?;
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;

        let mut params = ParamStore::new();
        let mut expected_offset = 0u64;
        for entry in header.tensors {
            if entry.offset != expected_offset {
                return Err(bad(format!("tensor {} at unexpected offset", entry.name)));
            }
            let n: usize = entry.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            input.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(entry.name, Tensor::new(entry.shape, data)?, entry.sparse)?;
            expected_offset += n as u64;
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(io)? != 0 {
            return Err(bad("trailing bytes after tensor payload"));
        }
        Ok(Self {
            model: Model::from_parts(header.config, header.vocab, params)?,
            step: header.step,
            dev_f1: header.dev_f1,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::corpus::{build_vocab, prepare_lines, VocabSource};

    fn checkpoint() -> Checkpoint {
        let sents = prepare_lines(&["天 气", "好 2020 年"], false);
        let vocab = build_vocab(&[VocabSource { criterion: "a", sentences: &sents }], 1, 1).unwrap();
        let mut config = ModelConfig::default();
        config.embedding.dim = 3;
        config.encoder.d_model = 4;
        config.encoder.num_heads = 2;
        config.encoder.num_layers = 1;
        config.encoder.d_ff = 6;
        let model = Model::new(config, vocab, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        Checkpoint {
            model,
            step: 17,
            dev_f1: [("a".to_string(), 0.1 + 0.2)].into_iter().collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = checkpoint();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.dev_f1["a"].to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.model.vocab, ckpt.model.vocab);
        assert_eq!(back.model.config, ckpt.model.config);
        assert_eq!(back.model.params, ckpt.model.params);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = Vec::new();
        checkpoint().write_to(&mut bytes).unwrap();
        assert!(Checkpoint::read_from(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(extra.as_slice()).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(Checkpoint::read_from(wrong.as_slice()).is_err());
        let mut version = bytes;
        version[8] = 9;
        assert!(Checkpoint::read_from(version.as_slice()).is_err());
    }
}
