//! Little-endian checkpoint container shared by the purifier and classifier.
//!
//! ```text
//! magic        8 bytes  "VQUNETCK"
//! version      u32
//! kind         u8       1 = purifier, 2 = classifier
//! config_len   u32      followed by that many bytes of JSON config
//! param_count  u32
//! per parameter, in declaration order:
//!   rank       u32
//!   dims       rank x u64
//!   values     prod(dims) x f64
//! ```

use std::fs;
use std::path::Path;

use crate::error::{CheckpointError, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"VQUNETCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Purifier,
    Classifier,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Purifier => 1,
            ModelKind::Classifier => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            ModelKind::Purifier => "purifier",
            ModelKind::Classifier => "classifier",
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(ModelKind::Purifier),
            2 => Some(ModelKind::Classifier),
            _ => None,
        }
    }
}

pub fn encode(kind: ModelKind, config_json: &str, store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + config_json.len() + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind.tag());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decoded checkpoint: the JSON config and the parameter tensors in order.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub config_json: String,
    pub params: Vec<Tensor>,
}

pub fn decode(bytes: &[u8], expected: ModelKind) -> Result<Decoded, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let tag = r.take(1, "kind")?[0];
    match ModelKind::from_tag(tag) {
        Some(k) if k == expected => {}
        other => {
            return Err(CheckpointError::KindMismatch {
                found: other.map_or("unknown", ModelKind::name),
                expected: expected.name(),
            })
        }
    }
    let clen = r.u32("config length")? as usize;
    let config_json = String::from_utf8(r.take(clen, "config")?.to_vec())
        .map_err(|e| CheckpointError::ConfigMismatch(format!("config is not UTF-8: {e}")))?;
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = r.u32("parameter rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("parameter shape")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(CheckpointError::Truncated("parameter values"))?;
        let raw = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated("parameter values"))?, "parameter values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(shape, data).expect("length checked"));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Decoded { config_json, params })
}

pub fn save(path: &Path, kind: ModelKind, config_json: &str, store: &ParamStore) -> Result<()> {
    fs::write(path, encode(kind, config_json, store))?;
    Ok(())
}

pub fn load(path: &Path, kind: ModelKind) -> Result<Decoded> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes, kind)?)
}

/// Copies decoded tensors into a freshly built store after checking that every
/// shape matches. The store is untouched on error.
pub fn restore(store: &mut ParamStore, params: Vec<Tensor>) -> Result<(), CheckpointError> {
    if params.len() != store.len() {
        return Err(CheckpointError::ParamCount {
            found: params.len(),
            expected: store.len(),
        });
    }
    for (index, (id, t)) in store.ids().zip(&params).enumerate() {
        let expected = store.value(id).shape();
        if expected != t.shape() {
            return Err(CheckpointError::ShapeMismatch {
                index,
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(params) {
        let p = store.get_mut(id);
        p.value = t;
        p.grad = None;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.2));
        s.add("b", Tensor::from_fn(&[4], |i| -(i as f64)));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let store = sample_store();
        let bytes = encode(ModelKind::Classifier, "{\"x\":1}", &store);
        let d = decode(&bytes, ModelKind::Classifier).unwrap();
        assert_eq!(d.config_json, "{\"x\":1}");
        for (p, t) in store.iter().zip(&d.params) {
            assert_eq!(&p.value, t);
        }
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode(ModelKind::Purifier, "{}", &sample_store());
        for cut in 0..bytes.len() {
            assert!(decode(&bytes[..cut], ModelKind::Purifier).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn header_errors_are_distinct() {
        let mut bytes = encode(ModelKind::Purifier, "{}", &sample_store());
        assert!(matches!(
            decode(&bytes, ModelKind::Classifier),
            Err(CheckpointError::KindMismatch { .. })
        ));
        bytes[8] = 9;
        assert!(matches!(
            decode(&bytes, ModelKind::Purifier),
            Err(CheckpointError::UnsupportedVersion { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, ModelKind::Purifier), Err(CheckpointError::BadMagic)));
        let mut extra = encode(ModelKind::Purifier, "{}", &sample_store());
        extra.push(0);
        assert!(matches!(decode(&extra, ModelKind::Purifier), Err(CheckpointError::TrailingBytes(1))));
    }

    #[test]
    fn restore_checks_shapes_before_writing() {
        let mut store = sample_store();
        let before = store.clone();
        let bad = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[5])];
        assert!(matches!(restore(&mut store, bad), Err(CheckpointError::ShapeMismatch { index: 1, .. })));
        assert!(store.values_equal(&before));
    }
}
