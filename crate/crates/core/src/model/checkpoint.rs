//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  b"CMED"
//! version    u32      format version, currently 1
//! cfg_len    u32      length of the config JSON that follows
//! config     cfg_len  ModelConfig as JSON
//! n_words    u32      vocabulary size minus the 4 reserved specials
//! words      n_words * (u32 byte-length + UTF-8 bytes), in id order
//! edit_ver   u64      ModelState edit counter
//! n_params   u32
//! params     n_params * ( u32 name-length + name bytes
//!                       + u8 kind (0 matrix, 1 vector)
//!                       + u32 rows + u32 cols        (vectors: rows=dim, cols=1)
//!                       + rows*cols f64 LE values )
//! ```
//!
//! Round-trips are bit-exact: values are written as raw f64 bit patterns.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

use super::{ModelConfig, ModelState, ParamMap, Tensor, Tokenizer};

const MAGIC: &[u8; 4] = b"CMED";
const FORMAT_VERSION: u32 = 1;

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());

    let cfg_json = serde_json::to_vec(state.config())
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    buf.extend_from_slice(&(cfg_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg_json);

    let words = state.tokenizer().words();
    buf.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        let bytes = w.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
    }

    buf.extend_from_slice(&state.version().to_le_bytes());
    buf.extend_from_slice(&(state.params().len() as u32).to_le_bytes());
    for (name, tensor) in state.params() {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        match tensor {
            Tensor::Mat(m) => {
                buf.push(0);
                buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Tensor::Vec(v) => {
                buf.push(1);
                buf.extend_from_slice(&(v.dim() as u32).to_le_bytes());
                buf.extend_from_slice(&1u32.to_le_bytes());
                for x in v.data() {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::BadCheckpoint(format!(
                "{}: truncated at byte {}",
                self.path, self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| Error::BadCheckpoint(format!("{}: bad utf-8: {e}", self.path)))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path: path.display().to_string(),
    };

    if r.take(4)? != MAGIC {
        return Err(Error::BadCheckpoint(format!(
            "{}: bad magic, not a model checkpoint",
            r.path
        )));
    }
    let fmt = r.u32()?;
    if fmt != FORMAT_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "{}: unsupported format version {fmt} (expected {FORMAT_VERSION})",
            r.path
        )));
    }

    let cfg_json = r.string()?;
    let config: ModelConfig =
        serde_json::from_str(&cfg_json).map_err(|e| Error::json(r.path.clone(), e))?;
    config.validate()?;

    let n_words = r.u32()? as usize;
    let mut words = Vec::with_capacity(n_words);
    for _ in 0..n_words {
        words.push(r.string()?);
    }
    let tokenizer = Tokenizer::from_words(words);
    if tokenizer.vocab_size() != config.vocab_size {
        return Err(Error::BadCheckpoint(format!(
            "{}: vocab {} does not match config vocab_size {}",
            r.path,
            tokenizer.vocab_size(),
            config.vocab_size
        )));
    }

    let edit_version = r.u64()?;
    let n_params = r.u32()? as usize;
    let mut params = ParamMap::new();
    for _ in 0..n_params {
        let name = r.string()?;
        let kind = r.u8()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f64s(rows * cols)?;
        let tensor = match kind {
            0 => Tensor::Mat(Matrix::from_vec(rows, cols, data)),
            1 => Tensor::Vec(Vector::from(data)),
            other => {
                return Err(Error::BadCheckpoint(format!(
                    "{}: unknown tensor kind {other} for {name}",
                    r.path
                )))
            }
        };
        if !tensor.is_finite() {
            return Err(Error::BadCheckpoint(format!(
                "{}: non-finite values in parameter {name}",
                r.path
            )));
        }
        params.insert(name, tensor);
    }
    if r.pos != buf.len() {
        return Err(Error::BadCheckpoint(format!(
            "{}: {} trailing bytes",
            r.path,
            buf.len() - r.pos
        )));
    }

    Ok(ModelState::from_parts(config, params, edit_version, tokenizer))
}
