//! CSIB binary dataset container.
//!
//! ```text
//! "CSIB" | version u16 | N u32 | A u32 | K u32 | T u32 | C u16
//! N x ( label u16 | A*K*T x f32 )
//! ```
//!
//! All integers and floats are little-endian. Adversarial batches set bit 15
//! of the version word and append `N x u32` indices of the paired clean
//! samples after the records.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{CsiSample, Dataset, Dims};
use crate::error::{CsiError, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"CSIB";
const VERSION: u16 = 1;
const ADVERSARIAL_FLAG: u16 = 0x8000;
const HEADER_LEN: usize = 4 + 2 + 4 * 4 + 2;

/// Adversarial inputs paired with the index of the clean sample each was
/// crafted from.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialBatch {
    pub samples: Dataset,
    pub clean_indices: Vec<u32>,
}

fn encode(data: &Dataset, flag: u16, trailer: Option<&[u32]>) -> Result<Vec<u8>> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| CsiError::invalid(what, format!("{v} exceeds u32")))
    };
    let n_classes = u16::try_from(data.n_classes)
        .map_err(|_| CsiError::invalid("n_classes", "exceeds u16"))?;
    let Dims {
        antennas,
        subcarriers,
        packets,
    } = data.dims;
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * (2 + 4 * data.dims.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(VERSION | flag).to_le_bytes());
    for (v, w) in [
        (data.len(), "N"),
        (antennas, "A"),
        (subcarriers, "K"),
        (packets, "T"),
    ] {
        buf.extend_from_slice(&to_u32(v, w)?.to_le_bytes());
    }
    buf.extend_from_slice(&n_classes.to_le_bytes());
    for s in &data.samples {
        buf.extend_from_slice(&(s.label as u16).to_le_bytes());
        for &v in s.amplitudes.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(idx) = trailer {
        for &i in idx {
            buf.extend_from_slice(&i.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CsiError::Format {
                offset: self.pos as u64,
                detail: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<(Dataset, Option<Vec<u32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(CsiError::Format {
            offset: 0,
            detail: "bad magic, expected \"CSIB\"".into(),
        });
    }
    let version = r.u16("version")?;
    if version & !ADVERSARIAL_FLAG != VERSION {
        return Err(CsiError::Format {
            offset: 4,
            detail: format!("unsupported version {}", version & !ADVERSARIAL_FLAG),
        });
    }
    let n = r.u32("N")? as usize;
    let a = r.u32("A")? as usize;
    let k = r.u32("K")? as usize;
    let t = r.u32("T")? as usize;
    let n_classes = r.u16("C")? as usize;
    let dims = Dims::new(a, k, t);
    if a == 0 || k == 0 || t == 0 {
        return Err(CsiError::Format {
            offset: 10,
            detail: format!("zero dimension in {dims:?}"),
        });
    }
    let per = a
        .checked_mul(k)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| CsiError::Format {
            offset: 10,
            detail: "A*K*T overflows".into(),
        })?;
    let record = per
        .checked_mul(4)
        .and_then(|v| v.checked_add(2))
        .ok_or_else(|| CsiError::Format {
            offset: 10,
            detail: "record size overflows".into(),
        })?;
    let body = n.checked_mul(record).ok_or_else(|| CsiError::Format {
        offset: 6,
        detail: "N * record size overflows".into(),
    })?;
    if body > bytes.len() - r.pos {
        return Err(CsiError::Format {
            offset: r.pos as u64,
            detail: format!(
                "header announces {body} record bytes, only {} remain",
                bytes.len() - r.pos
            ),
        });
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let at = r.pos;
        let label = r.u16("label")? as usize;
        if label >= n_classes {
            return Err(CsiError::Format {
                offset: at as u64,
                detail: format!("record {i}: label {label} >= C={n_classes}"),
            });
        }
        let raw = r.take(per * 4, "amplitudes")?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let amplitudes = Tensor::new(vec![a, k, t], data).map_err(|e| CsiError::Format {
            offset: at as u64 + 2,
            detail: format!("record {i}: {e}"),
        })?;
        samples.push(CsiSample { amplitudes, label });
    }
    let trailer = if version & ADVERSARIAL_FLAG != 0 {
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            idx.push(r.u32("clean index")?);
        }
        Some(idx)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(CsiError::Format {
            offset: r.pos as u64,
            detail: "trailing bytes".into(),
        });
    }
    Ok((Dataset { dims, n_classes, samples }, trailer))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CsiError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CsiError::io(path, e))
}

pub fn write_csib(data: &Dataset, path: &Path) -> Result<()> {
    write_bytes(path, &encode(data, 0, None)?)
}

pub fn read_csib(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| CsiError::io(path, e))?;
    match decode(&bytes)? {
        (d, None) => Ok(d),
        (_, Some(_)) => Err(CsiError::Format {
            offset: 4,
            detail: "file is an adversarial batch; use read_adversarial_batch".into(),
        }),
    }
}

pub fn write_adversarial_batch(batch: &AdversarialBatch, path: &Path) -> Result<()> {
    if batch.clean_indices.len() != batch.samples.len() {
        return Err(CsiError::invalid(
            "clean_indices",
            "must pair every adversarial sample",
        ));
    }
    write_bytes(
        path,
        &encode(&batch.samples, ADVERSARIAL_FLAG, Some(&batch.clean_indices))?,
    )
}

pub fn read_adversarial_batch(path: &Path) -> Result<AdversarialBatch> {
    let bytes = fs::read(path).map_err(|e| CsiError::io(path, e))?;
    match decode(&bytes)? {
        (samples, Some(clean_indices)) => Ok(AdversarialBatch {
            samples,
            clean_indices,
        }),
        (_, None) => Err(CsiError::Format {
            offset: 4,
            detail: "missing adversarial flag".into(),
        }),
    }
}

#[cfg(test)]
pub(crate) fn encode_for_test(data: &Dataset) -> Vec<u8> {
    encode(data, 0, None).unwrap()
}

#[cfg(test)]
pub(crate) fn decode_for_test(bytes: &[u8]) -> Result<Dataset> {
    decode(bytes).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> Dataset {
        let dims = Dims::new(2, 3, 4);
        let samples = (0..3)
            .map(|i| CsiSample {
                amplitudes: Tensor::new(
                    vec![2, 3, 4],
                    (0..24).map(|j| (i * 24 + j) as f64 * 0.25).collect(),
                )
                .unwrap(),
                label: i % 2,
            })
            .collect();
        Dataset::new(dims, 2, samples).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_for_test(&sample_set());
        assert_eq!(&bytes[..4], b"CSIB");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes([bytes[22], bytes[23]]), 2);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * (2 + 24 * 4));
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = encode_for_test(&sample_set());
        bytes[0] = b'X';
        match decode_for_test(&bytes) {
            Err(CsiError::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_overflow_are_rejected() {
        let bytes = encode_for_test(&sample_set());
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_for_test(cut), Err(CsiError::Format { offset: 24, .. })));
        let mut huge = bytes.clone();
        huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[14..18].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[18..22].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(decode_for_test(&huge), Err(CsiError::Format { .. })));
    }

    #[test]
    fn empty_dataset_is_valid() {
        let d = Dataset::new(Dims::new(1, 2, 3), 4, vec![]).unwrap();
        let bytes = encode_for_test(&d);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_for_test(&bytes).unwrap(), d);
    }

    #[test]
    fn adversarial_batches_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("adv.csib");
        let batch = AdversarialBatch {
            samples: sample_set(),
            clean_indices: vec![7, 1, 3],
        };
        write_adversarial_batch(&batch, &p).unwrap();
        assert_eq!(read_adversarial_batch(&p).unwrap(), batch);
        assert!(read_csib(&p).is_err());
    }
}
