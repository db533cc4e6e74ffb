//! Binary container for datasets and checkpoints.
//!
//! A record is `"CPTN" | version u32 LE | dtype u8 | rank u8 | dims u64 LE… |
//! payload`, dtype 0 being f32 and 1 being i64, both little-endian. A file is
//! a sequence of records followed by a metadata block: a u64 LE byte length
//! and UTF-8 `key=value` lines.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::{CnnConfig, InsertionPoint, ModelParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CPTN";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_I64: u8 = 1;
const MAX_RANK: usize = 4;

enum Payload<'a> {
    F32(&'a [f32]),
    I64(&'a [i64]),
}

fn write_record(out: &mut Vec<u8>, dims: &[usize], payload: Payload<'_>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match payload {
        Payload::F32(_) => DTYPE_F32,
        Payload::I64(_) => DTYPE_I64,
    });
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match payload {
        Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Payload::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
}

fn write_meta(out: &mut Vec<u8>, meta: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry {k:?}={v:?} cannot be encoded")));
        }
        text.push_str(k);
        text.push('=');
        text.push_str(v);
        text.push('\n');
    }
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    Ok(())
}

enum Record {
    F32(Tensor<f32>),
    I64(Vec<usize>, Vec<i64>),
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Truncated(format!("{what} needs {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn at_record(&self) -> bool {
        self.buf[self.pos..].starts_with(MAGIC)
    }

    fn record(&mut self) -> Result<Record> {
        if self.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = u32::from_le_bytes(self.take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let dtype = self.take(1, "dtype")?[0];
        let rank = self.take(1, "rank")?[0] as usize;
        if rank > MAX_RANK {
            return Err(Error::Malformed(format!("rank {rank} exceeds {MAX_RANK}")));
        }
        let raw: Vec<u64> = (0..rank).map(|_| self.u64("dims")).collect::<Result<_>>()?;
        let elem = match dtype {
            DTYPE_F32 => 4u64,
            DTYPE_I64 => 8,
            d => return Err(Error::Malformed(format!("unknown dtype code {d}"))),
        };
        let bytes = raw
            .iter()
            .try_fold(elem, |acc, &d| acc.checked_mul(d))
            .filter(|&b| b <= usize::MAX as u64)
            .ok_or_else(|| Error::DimensionOverflow(raw.clone()))?;
        let dims: Vec<usize> = raw.iter().map(|&d| d as usize).collect();
        let payload = self.take(bytes as usize, "payload")?;
        Ok(match dtype {
            DTYPE_F32 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Record::F32(Tensor::from_vec(&dims, data)?)
            }
            _ => Record::I64(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        })
    }

    fn meta(&mut self) -> Result<BTreeMap<String, String>> {
        let len = self.u64("metadata length")?;
        let len = usize::try_from(len).map_err(|_| Error::DimensionOverflow(vec![len]))?;
        let text = std::str::from_utf8(self.take(len, "metadata")?)
            .map_err(|e| Error::Malformed(format!("metadata is not UTF-8: {e}")))?;
        if self.pos != self.buf.len() {
            return Err(Error::Malformed(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        text.lines()
            .map(|line| {
                line.split_once('=')
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Malformed(format!("metadata line {line:?} lacks '='")))
            })
            .collect()
    }
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    if data.is_empty() {
        return Err(Error::invalid("refusing to save an empty dataset"));
    }
    let mut out = Vec::with_capacity(data.images.len() * 4 + data.len() * 8 + 256);
    write_record(&mut out, data.images.shape(), Payload::F32(data.images.data()));
    let labels: Vec<i64> = data.labels.iter().map(|&y| y as i64).collect();
    write_record(&mut out, &[labels.len()], Payload::I64(&labels));
    let mut meta = data.meta.clone();
    meta.insert("classes".into(), data.classes.to_string());
    write_meta(&mut out, &meta)?;
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    let Record::F32(images) = r.record()? else {
        return Err(Error::Malformed("first record must hold f32 images".into()));
    };
    let Record::I64(dims, labels) = r.record()? else {
        return Err(Error::Malformed("second record must hold i64 labels".into()));
    };
    if dims.len() != 1 {
        return Err(Error::Malformed(format!("labels must be rank 1, got {dims:?}")));
    }
    let meta = r.meta()?;
    let classes: usize = meta
        .get("classes")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Malformed("metadata lacks a valid 'classes' entry".into()))?;
    let labels = labels
        .into_iter()
        .map(|y| usize::try_from(y).map_err(|_| Error::Malformed(format!("negative label {y}"))))
        .collect::<Result<Vec<_>>>()?;
    let mut data = Dataset::new(images, labels, classes)?;
    data.meta = meta;
    Ok(data)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

/// Model parameters together with the architecture that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CnnConfig,
    pub params: ModelParams,
    pub meta: BTreeMap<String, String>,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<Vec<T>> {
    let v = meta
        .get(key)
        .ok_or_else(|| Error::Malformed(format!("checkpoint metadata lacks {key:?}")))?;
    v.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Malformed(format!("bad {key} entry {s:?}")))
        })
        .collect()
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.params.check(&ck.model)?;
    let mut out = Vec::new();
    for t in &ck.params.tensors {
        write_record(&mut out, t.shape(), Payload::F32(t.data()));
    }
    let mut meta = ck.meta.clone();
    meta.insert("model.channels".into(), join(&ck.model.channels));
    meta.insert("model.kernel".into(), ck.model.kernel.to_string());
    meta.insert("model.classes".into(), ck.model.classes.to_string());
    meta.insert("model.input".into(), join(ck.model.input));
    meta.insert("model.insertion".into(), join(&ck.model.insertion));
    meta.insert("params".into(), join(&ck.params.names));
    write_meta(&mut out, &meta)?;
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if !buf.starts_with(MAGIC) {
        return Err(Error::BadMagic);
    }
    let mut tensors = Vec::new();
    while r.at_record() {
        match r.record()? {
            Record::F32(t) => tensors.push(t),
            Record::I64(..) => return Err(Error::Malformed("checkpoint records must be f32".into())),
        }
    }
    let meta = r.meta()?;
    let input: Vec<usize> = parse_list(&meta, "model.input")?;
    let input: [usize; 3] = input
        .try_into()
        .map_err(|_| Error::Malformed("model.input needs three entries".into()))?;
    let model = CnnConfig {
        channels: parse_list(&meta, "model.channels")?,
        kernel: parse_list::<usize>(&meta, "model.kernel")?
            .first()
            .copied()
            .unwrap_or(0),
        classes: parse_list::<usize>(&meta, "model.classes")?
            .first()
            .copied()
            .unwrap_or(0),
        input,
        insertion: parse_list::<InsertionPoint>(&meta, "model.insertion")?
            .into_iter()
            .collect::<BTreeSet<_>>(),
    };
    model.validate()?;
    let params = ModelParams {
        names: parse_list(&meta, "params")?,
        tensors,
    };
    params.check(&model)?;
    let meta = meta
        .into_iter()
        .filter(|(k, _)| !k.starts_with("model.") && k != "params")
        .collect();
    Ok(Checkpoint { model, params, meta })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_domain_dataset, DomainSpec};
    use crate::model::init_params;
    use crate::rng::Rng;

    fn sample() -> Dataset {
        let spec: DomainSpec = "tinted".parse().unwrap();
        gen_domain_dataset(&spec, 3, 4, 16, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn dataset_roundtrip_is_exact() {
        let data = sample();
        let bytes = encode_dataset(&data).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        assert_eq!(back, data);
        assert_eq!(encode_dataset(&back).unwrap(), bytes);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cptn");
        save_dataset(&path, &data).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), data);
    }

    #[test]
    fn header_layout() {
        let data = sample();
        let bytes = encode_dataset(&data).unwrap();
        assert_eq!(&bytes[..4], b"CPTN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 4);
        assert_eq!(u64::from_le_bytes(bytes[10..18].try_into().unwrap()), 12);
        assert_eq!(u64::from_le_bytes(bytes[18..26].try_into().unwrap()), 3);
        let labels_at = 10 + 32 + data.images.len() * 4;
        assert_eq!(&bytes[labels_at..labels_at + 4], b"CPTN");
        assert_eq!(bytes[labels_at + 8], 1);
    }

    #[test]
    fn error_kinds() {
        let data = sample();
        let bytes = encode_dataset(&data).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_dataset(&bad).unwrap_err();
        assert!(matches!(err, Error::BadMagic));
        assert_eq!(err.to_string(), "bad magic");

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));

        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(decode_dataset(&bytes[..100]), Err(Error::Truncated(_))));

        let mut bad = bytes.clone();
        bad[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode_dataset(&bad), Err(Error::DimensionOverflow(_))));

        let empty = Dataset::new(Tensor::zeros(&[0, 3, 16, 16]), vec![], 4).unwrap();
        assert!(encode_dataset(&empty).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = CnnConfig {
            channels: vec![4, 6],
            input: [3, 16, 16],
            ..CnnConfig::new(3)
        };
        let params = init_params(&model, &mut Rng::new(2)).unwrap();
        let ck = Checkpoint {
            model,
            params,
            meta: BTreeMap::from([("seed".to_string(), "2".to_string())]),
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        let mut bad = bytes.clone();
        bad[1] = 0;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::BadMagic)));
        assert!(decode_checkpoint(&encode_dataset(&sample()).unwrap()).is_err());
    }
}
