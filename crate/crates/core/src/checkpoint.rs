//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "CWLMCKPT"
//! version      u32
//! meta_len     u64, then meta_len bytes of UTF-8 `key=value` lines
//! n_tensors    u32, then per tensor:
//!     name_len u16, name bytes, dtype u8 (0 = f32, 1 = f64), rank u8,
//!     rank × u64 dims, u64 byte offset into the data section
//! data_len     u64, then the data section: row-major tensor contents
//! ```
//!
//! Metadata values escape `\`, newline and tab as `\\`, `\n`, `\t`.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::char_encoding::CharEncoder;
use crate::config::RunConfig;
use crate::corpus::{CharVocab, Vocabulary};
use crate::network::{ModelParams, ModelShape};
use crate::real::Real;
use crate::trainer::{derive_seed, SEED_CHARS};

pub const MAGIC: &[u8; 8] = b"CWLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {found} (this build reads {expected})")]
    Version { found: u32, expected: u32 },
    #[error("tensor `{name}` has element type {found}, expected {expected}")]
    ElementType { name: String, found: u8, expected: u8 },
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

/// A trained model with everything needed to rebuild and score it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<F> {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub char_vocab: CharVocab,
    pub params: ModelParams<F>,
}

impl<F: Real> Checkpoint<F> {
    /// The shape implied by the config and vocabularies.
    pub fn expected_shape(config: &RunConfig, vocab: &Vocabulary, char_vocab: &CharVocab) -> ModelShape {
        ModelShape::with_chars(
            vocab.len(),
            char_vocab.len(),
            config.train.hidden,
            config.train.layers,
            &config.cw,
        )
    }

    /// The character encoder the model was trained with.
    pub fn encoder(&self) -> CharEncoder {
        char_encoder(&self.config, &self.char_vocab)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta = self.config.to_text();
        meta.push_str(&format!("vocab = {}\n", escape(&self.vocab.to_text())));
        let chars: String = self.char_vocab.chars().iter().collect();
        meta.push_str(&format!("char_vocab = {}\n", escape(&chars)));

        let tensors = self.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, dims, data) in &tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(F::DTYPE);
            out.push(dims.len() as u8);
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += (data.len() * F::BYTES) as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for (_, _, data) in &tensors {
            for &v in *data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| corrupt("metadata is not UTF-8"))?;
        let (config, vocab, char_vocab) = parse_meta(meta)?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            entries.push((name, dtype, dims, offset));
        }
        let data_len = r.u64()? as usize;
        let data = r.take(data_len)?;
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after data section"));
        }

        let shape = Self::expected_shape(&config, &vocab, &char_vocab);
        if shape.n_chars * shape.char_emb >= shape.hidden {
            return Err(corrupt("metadata describes an impossible architecture"));
        }
        let mut params = ModelParams::<F>::zeros(&shape);
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
        if expected.len() != entries.len() {
            return Err(corrupt(format!("expected {} tensors, found {}", expected.len(), entries.len())));
        }
        for (slot, ((name, dims), entry)) in params.tensors_mut().into_iter().zip(expected.iter().zip(&entries)) {
            let (ename, dtype, edims, offset) = entry;
            if ename != name || edims != dims {
                return Err(corrupt(format!("tensor `{ename}` {edims:?} where `{name}` {dims:?} was expected")));
            }
            if *dtype != F::DTYPE {
                return Err(CheckpointError::ElementType {
                    name: name.clone(),
                    found: *dtype,
                    expected: F::DTYPE,
                });
            }
            let len = slot.len() * F::BYTES;
            let raw = offset
                .checked_add(len)
                .and_then(|end| data.get(*offset..end))
                .ok_or_else(|| corrupt(format!("tensor `{name}` runs past the data section")))?;
            for (v, chunk) in slot.iter_mut().zip(raw.chunks_exact(F::BYTES)) {
                *v = F::read_le(chunk);
            }
        }
        Ok(Self {
            config,
            vocab,
            char_vocab,
            params,
        })
    }
}

/// Encoder for a config; the random-control seed derives from the run seed.
pub fn char_encoder(config: &RunConfig, char_vocab: &CharVocab) -> CharEncoder {
    CharEncoder::new(
        config.cw.clone(),
        char_vocab.clone(),
        derive_seed(config.train.seed, SEED_CHARS, 0),
    )
}

pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn parse_meta(meta: &str) -> Result<(RunConfig, Vocabulary, CharVocab), CheckpointError> {
    let mut config = RunConfig::default();
    let mut vocab = None;
    let mut chars = None;
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("metadata line `{line}`")))?;
        let (k, v) = (k.trim(), unescape(v.trim()));
        match k {
            "vocab" => {
                vocab = Some(Vocabulary::from_text(&v).map_err(|e| corrupt(e.to_string()))?);
            }
            "char_vocab" => chars = Some(CharVocab::from_chars(v.chars().collect())),
            _ => config.set(k, &v).map_err(|e| corrupt(format!("metadata `{k}`: {e}")))?,
        }
    }
    let vocab = vocab.ok_or_else(|| corrupt("metadata lacks the vocabulary"))?;
    let chars = chars.ok_or_else(|| corrupt("metadata lacks the character vocabulary"))?;
    Ok((config, vocab, chars))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
