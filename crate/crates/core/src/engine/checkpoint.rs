//! `ACKP` checkpoints: the architecture as config text, then named tensors.
//!
//! ```text
//! "ACKP" | u32 version | u32 header bytes | header (UTF-8 key = value lines)
//! u32 count | per tensor: u32 name bytes | name | TNSR record
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::binio::{self, ByteReader};
use crate::engine::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::params::Parameters;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ACKP";
const VERSION: u32 = 1;
const MAX_TEXT: u32 = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: Parameters<f32>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = RunConfig {
            model: self.model.clone(),
            ..RunConfig::default()
        }
        .model_text();
        w.write_all(MAGIC)?;
        binio::write_u32(w, VERSION)?;
        binio::write_u32(w, header.len() as u32)?;
        w.write_all(header.as_bytes())?;
        binio::write_u32(w, self.params.len() as u32)?;
        for e in self.params.entries() {
            binio::write_u32(w, e.name.len() as u32)?;
            w.write_all(e.name.as_bytes())?;
            e.value.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut ByteReader<R>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        let at = r.offset();
        let version = r.read_u32()?;
        if version != VERSION {
            return Err(Error::parse(at, format!("unsupported checkpoint version {version}")));
        }
        let header = read_text(r)?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&header)?;
        let count = r.read_u32()?;
        let mut params = Parameters::new();
        for _ in 0..count {
            let at = r.offset();
            let name = read_text(r)?;
            let value = Tensor::read_from(r)?;
            params
                .insert(&name, value)
                .map_err(|e| Error::parse(at, e.to_string()))?;
        }
        Ok(Checkpoint {
            model: cfg.model,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(BufReader::new(File::open(path)?));
        let ck = Self::read_from(&mut r)?;
        r.at_eof()?;
        Ok(ck)
    }

    /// Check the stored architecture against `expected` and that every
    /// backbone tensor is present with the declared shape.
    pub fn check_against(&self, expected: &ModelConfig) -> Result<()> {
        if !self.model.same_architecture(expected) {
            return Err(Error::config(format!(
                "checkpoint architecture differs from the configuration:\n{}",
                RunConfig {
                    model: self.model.clone(),
                    ..RunConfig::default()
                }
                .model_text()
            )));
        }
        for spec in expected.backbone_specs() {
            match self.params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(format!(
                        "checkpoint tensor {} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::config(format!("checkpoint lacks tensor {}", spec.name))),
            }
        }
        Ok(())
    }
}

fn read_text<R: Read>(r: &mut ByteReader<R>) -> Result<String> {
    let at = r.offset();
    let len = r.read_u32()?;
    if len > MAX_TEXT {
        return Err(Error::parse(at, format!("implausible text length {len}")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::parse(at, "text is not UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_model, strip_msd};

    fn tiny() -> ModelConfig {
        ModelConfig {
            segments: 2,
            num_classes: 3,
            stem_width: 8,
            widths: vec![8, 16, 32, 64],
            input_size: 32,
            reduce_ratio: 4,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = tiny();
        let ck = Checkpoint {
            params: build_model(&model, 3).unwrap(),
            model,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut ByteReader::new(bytes.as_slice())).unwrap();
        assert_eq!(back, ck);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn mismatch_detected() {
        let model = tiny();
        let ck = Checkpoint {
            params: strip_msd(&build_model(&model, 3).unwrap()),
            model: model.clone(),
        };
        assert!(ck.check_against(&model).is_ok());
        let other = ModelConfig {
            widths: vec![8, 16, 32, 128],
            ..model
        };
        assert!(ck.check_against(&other).is_err());
    }

    #[test]
    fn truncated_file() {
        let model = tiny();
        let ck = Checkpoint {
            params: build_model(&model, 3).unwrap(),
            model,
        };
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let e = Checkpoint::read_from(&mut ByteReader::new(&bytes[..bytes.len() - 3])).unwrap_err();
        assert!(matches!(e, Error::Parse { .. }));
    }
}
