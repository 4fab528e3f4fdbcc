//! Model checkpoints.
//!
//! ```text
//! "CSIM" | version u16 | spec text (u32 len + key=value lines)
//!        | defense text (u32 len) | tensor count u32
//!        | per tensor: name (u16 len + utf8) | rank u32 | dims u32.. | f64 data
//! ```
//!
//! Little-endian throughout. Loading rebuilds the model from the spec echo
//! and rejects any tensor whose name or shape disagrees.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Model, ModelSpec};
use crate::error::{CsiError, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"CSIM";
const VERSION: u16 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    /// `key=value` description of the robust-training recipe, empty for a
    /// clean model.
    pub defense: String,
}

fn put_text(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint(model: &Model, defense: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let spec: String = model
        .spec
        .to_kv()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_text(&mut buf, &spec);
    put_text(&mut buf, defense);
    let decls = model.graph.param_decls();
    buf.extend_from_slice(&(decls.len() as u32).to_le_bytes());
    for (d, t) in decls.iter().zip(&model.params.tensors) {
        buf.extend_from_slice(&(d.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(d.name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &s in t.shape() {
            buf.extend_from_slice(&(s as u32).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: impl Into<String>) -> CsiError {
        CsiError::Format {
            offset: self.pos as u64,
            detail: detail.into(),
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn text(&mut self, len: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| CsiError::Format {
            offset: at as u64,
            detail: "invalid utf-8".into(),
        })
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CsiError::Format {
            offset: 0,
            detail: "bad magic, expected \"CSIM\"".into(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()? as usize;
    let spec_text = r.text(n)?;
    let n = r.u32()? as usize;
    let defense = r.text(n)?;
    let kv: BTreeMap<String, String> = spec_text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let spec = ModelSpec::from_kv(&kv)?;
    let mut model = Model::build(&spec, None)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(r.err(format!(
            "checkpoint holds {count} tensors, spec implies {}",
            model.params.len()
        )));
    }
    for i in 0..count {
        let len = r.u16()? as usize;
        let name = r.text(len)?;
        let expected = &model.graph.param_decls()[i];
        if name != expected.name {
            return Err(r.err(format!("tensor {i} is `{name}`, expected `{}`", expected.name)));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if shape != expected.shape {
            return Err(r.err(format!(
                "tensor `{name}` has shape {shape:?}, expected {:?}",
                expected.shape
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.tensors[i] = Tensor::new(shape, data)?;
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint { model, defense })
}

pub fn save_checkpoint(model: &Model, defense: &str, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model, defense)).map_err(|e| CsiError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CsiError::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;
    use crate::models::{build_model, Family};

    #[test]
    fn round_trip_and_corruption() {
        let mut spec = ModelSpec::new("g", Family::LargeGru, Dims::new(1, 3, 5), 3).with_seed(4);
        spec.hidden = 4;
        let m = build_model(&spec).unwrap();
        let bytes = encode_checkpoint(&m, "kind=trades\nbeta=2\n");
        let c = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c.model.params, m.params);
        assert_eq!(c.defense, "kind=trades\nbeta=2\n");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(CsiError::Format { offset: 0, .. })));
    }
}
