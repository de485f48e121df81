//! Model checkpoints:
//! `header length u32 | JSON {config, vocab} | count u32 | (name length u32 | name | tensor blob)×count`,
//! integers little-endian.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Vocab;
use crate::model::{Model, ModelConfig};
use crate::tensor::{read_blob, write_blob, Scalar};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
}

fn push_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit a u32 field")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn to_bytes<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab: model.vocab().tokens().to_vec(),
    })?;
    let mut buf = Vec::new();
    push_u32(&mut buf, header.len())?;
    buf.extend_from_slice(&header);
    push_u32(&mut buf, model.store.len())?;
    for (name, value) in model.store.names().iter().zip(model.store.values()) {
        push_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        write_blob(&mut buf, value)?;
    }
    Ok(buf)
}

/// Configuration and vocabulary stored in a checkpoint.
pub fn read_header(bytes: &[u8]) -> Result<(ModelConfig, Vocab)> {
    let mut r = Cursor::new(bytes);
    let h = parse_header(&mut r)?;
    Ok((h.config, Vocab::new(h.vocab)?))
}

fn parse_header(r: &mut Cursor<&[u8]>) -> Result<Header> {
    let len = read_u32(r)?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    Ok(serde_json::from_slice(&json)?)
}

/// Rebuilds the model a checkpoint describes. When `expected` is given, its
/// configuration must equal the stored one.
pub fn from_bytes<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Model<T>> {
    let mut r = Cursor::new(bytes);
    let header = parse_header(&mut r)?;
    if header.config.dtype != T::DTYPE {
        return Err(Error::ConfigMismatch(format!(
            "stored dtype {} cannot be loaded as {}",
            header.config.dtype,
            T::DTYPE
        )));
    }
    if let Some(want) = expected {
        let diff = config_diff(want, &header.config)?;
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join(", ")));
        }
    }
    let mut model = Model::<T>::new(header.config, Vocab::new(header.vocab)?)?;
    let count = read_u32(&mut r)?;
    if count != model.store.len() {
        return Err(Error::ConfigMismatch(format!(
            "{count} stored tensors for {} parameters",
            model.store.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let len = read_u32(&mut r)?;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|_| Error::Format("truncated tensor name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let want = &model.store.names()[i];
        if &name != want {
            return Err(Error::ConfigMismatch(format!("tensor {i} is `{name}`, expected `{want}`")));
        }
        let t = read_blob::<T, _>(&mut r)?;
        if t.shape() != model.store.values()[i].shape() {
            return Err(Error::ConfigMismatch(format!(
                "`{name}` has shape {:?}, expected {:?}",
                t.shape(),
                model.store.values()[i].shape()
            )));
        }
        values.push(t);
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    model.store.replace_all(values)?;
    Ok(model)
}

/// `field: expected vs stored` for every differing configuration field.
pub fn config_diff(expected: &ModelConfig, stored: &ModelConfig) -> Result<Vec<String>> {
    let (a, b) = (serde_json::to_value(expected)?, serde_json::to_value(stored)?);
    let (Some(a), Some(b)) = (a.as_object(), b.as_object()) else {
        return Err(Error::Contract("configuration is not a JSON object".into()));
    };
    Ok(a
        .iter()
        .filter(|(k, v)| b.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).cloned().unwrap_or_default()))
        .collect())
}

pub fn save<T: Scalar>(path: &Path, model: &Model<T>) -> Result<()> {
    Ok(fs::write(path, to_bytes(model)?)?)
}

pub fn load<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<Model<T>> {
    from_bytes(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            max_tokens: 4,
            plan: [4, 4, 8, 8, 8],
            decoder_width: 4,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    fn model() -> Model<f32> {
        let mut m = Model::<f32>::new(small(), Vocab::default_scene()).unwrap();
        // move parameters away from their initial values
        let vals = m.store.values().iter().map(|t| t.map(|v| v * 1.5 + 0.25)).collect();
        m.store.replace_all(vals).unwrap();
        m
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let m = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes::<f32>(&bytes, Some(&m.config)).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.vocab(), m.vocab());
        assert!(back.store.values().iter().zip(m.store.values()).all(|(a, b)| a.bit_eq(b)));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn mismatched_config_is_reported() {
        let bytes = to_bytes(&model()).unwrap();
        let other = ModelConfig {
            dilations: vec![1, 2],
            ..small()
        };
        match from_bytes::<f32>(&bytes, Some(&other)) {
            Err(Error::ConfigMismatch(msg)) => assert!(msg.contains("dilations"), "{msg}"),
            r => panic!("{:?}", r.map(|_| ())),
        }
        assert!(matches!(from_bytes::<f64>(&bytes, None), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let bytes = to_bytes(&model()).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 3], None).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(from_bytes::<f32>(&extra, None), Err(Error::Format(_))));
        assert!(from_bytes::<f32>(&bytes[..2], None).is_err());
    }

    #[test]
    fn header_is_readable_alone() {
        let m = model();
        let (cfg, vocab) = read_header(&to_bytes(&m).unwrap()).unwrap();
        assert_eq!(cfg, m.config);
        assert_eq!(&vocab, m.vocab());
    }
}
