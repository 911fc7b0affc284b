//! Self-describing parameter checkpoints.
//!
//! Layout: the line `MACHAN1`, one line of JSON holding the model config,
//! run metadata and the ordered tensor index (`name`, `shape`), then the
//! values of every tensor in index order as little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::autodiff::ParamTensors;
use crate::data::{Normalizer, SplitSpec};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &str = "MACHAN1";

/// Run metadata stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub normalizer: Option<Normalizer>,
    pub split: Option<SplitSpec>,
    pub seed: Option<u64>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    config: &ModelConfig,
    params: &ModelParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let named = params.named();
    let header = Header {
        config: config.clone(),
        meta: meta.clone(),
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: (*n).to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    writeln!(w, "{CHECKPOINT_MAGIC}")?;
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for (_, t) in named {
        for v in t.as_slice() {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<(ModelConfig, ModelParams<T>, CheckpointMeta)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(&line)?;
    header.config.validate()?;
    let mut params = ModelParams::<T>::zeros(&header.config);
    {
        let named = params.named_mut();
        if named.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, config needs {}",
                header.tensors.len(),
                named.len()
            )));
        }
        let mut buf = [0u8; 8];
        for ((name, t), entry) in named.into_iter().zip(&header.tensors) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {:?}, found {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            for v in t.as_mut_slice() {
                r.read_exact(&mut buf)
                    .map_err(|e| Error::Checkpoint(format!("truncated data in {name}: {e}")))?;
                let x = f64::from_le_bytes(buf);
                if !x.is_finite() {
                    return Err(Error::NonFinite("checkpoint"));
                }
                *v = T::lit(x);
            }
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok((header.config, params, header.meta))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParams<T>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let f = fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), config, params, meta)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams<T>, CheckpointMeta)> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, FusionMode};

    #[test]
    fn roundtrip_is_bit_exact() {
        for fusion in [FusionMode::Hard, FusionMode::Concat, FusionMode::AlignedConcat] {
            let config = ModelConfig::small([3, 2, 2], 4, 3, 2).with_fusion(fusion);
            let params: ModelParams<f64> = init_params(&config, 11).unwrap();
            let meta = CheckpointMeta {
                normalizer: Some(Normalizer { mean: 0.5, std: 2.0 }),
                split: Some(SplitSpec::with_seed(3)),
                seed: Some(11),
                best_epoch: Some(4),
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &config, &params, &meta).unwrap();
            assert!(buf.starts_with(b"MACHAN1\n"));
            let (c2, p2, m2) = read_checkpoint::<f64, _>(&buf[..]).unwrap();
            assert_eq!(c2, config);
            assert_eq!(p2, params);
            assert_eq!(m2, meta);
        }
    }

    #[test]
    fn metadata_floats_survive_json() {
        let config = ModelConfig::small([1, 1, 1], 1, 1, 1);
        let params: ModelParams<f64> = ModelParams::zeros(&config);
        for k in 1..500u32 {
            let x = f64::from(k).sqrt() * 1e-3 / 7.0 + std::f64::consts::PI * f64::from(k);
            let meta = CheckpointMeta {
                normalizer: Some(Normalizer { mean: x, std: 1.0 / x }),
                ..CheckpointMeta::default()
            };
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &config, &params, &meta).unwrap();
            let (_, _, m2) = read_checkpoint::<f64, _>(&buf[..]).unwrap();
            assert_eq!(m2, meta, "k = {k}");
        }
    }

    #[test]
    fn rejects_corruption() {
        let config = ModelConfig::small([3, 2, 2], 4, 3, 2);
        let params: ModelParams<f64> = init_params(&config, 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &config, &params, &CheckpointMeta::default()).unwrap();
        assert!(read_checkpoint::<f64, _>(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint::<f64, _>(&extra[..]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f64, _>(&bad[..]).is_err());
    }
}
