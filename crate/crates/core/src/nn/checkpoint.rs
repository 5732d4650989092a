//! Network checkpoints: a little-endian `u32` header length, a JSON header,
//! then every parameter as a little-endian `f64`. When the header's
//! `optimizer` field is set, the Adam first and second moments follow the
//! parameters in the same flat order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::OptimMeta;
use super::{MlpParams, MlpSpec, OptimState};
use crate::error::{Error, Result};

const FORMAT: &str = "elign-mlp";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    spec: MlpSpec,
    /// `(out, in)` per layer.
    layer_shapes: Vec<(usize, usize)>,
    optimizer: Option<OptimMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub params: MlpParams,
    pub optimizer: Option<OptimState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            spec: self.spec.clone(),
            layer_shapes: self
                .params
                .layers
                .iter()
                .map(|l| l.weights.dim())
                .collect(),
            optimizer: self.optimizer.as_ref().map(OptimState::meta),
        };
        let json = serde_json::to_vec(&header)?;
        let n_floats = self.params.param_count() * if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(4 + json.len() + 8 * n_floats);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |p: &MlpParams| {
            for v in p.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        put(&self.params);
        if let Some(opt) = &self.optimizer {
            put(&opt.first_moment);
            put(&opt.second_moment);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::MalformedCheckpoint {
            path: origin.to_path_buf(),
            reason,
        };
        if bytes.len() < 4 {
            return Err(malformed("truncated header length".into()));
        }
        let header_len = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(4..4 + header_len)
            .ok_or_else(|| malformed("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(malformed(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut params = MlpParams::zeros(&header.spec);
        let shapes: Vec<_> = params.layers.iter().map(|l| l.weights.dim()).collect();
        if shapes != header.layer_shapes {
            return Err(malformed("layer shapes disagree with spec".into()));
        }

        let mut floats = bytes[4 + header_len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let expected = params.param_count() * if header.optimizer.is_some() { 3 } else { 1 };
        if bytes.len() - 4 - header_len != expected * 8 {
            return Err(malformed(format!(
                "expected {expected} floats, found {} bytes",
                bytes.len() - 4 - header_len
            )));
        }
        let mut fill = |p: &mut MlpParams| {
            for slot in p.iter_mut() {
                *slot = floats.next().expect("length checked");
            }
        };
        fill(&mut params);
        let optimizer = header.optimizer.map(|meta| {
            let mut first_moment = params.zeros_like();
            let mut second_moment = params.zeros_like();
            fill(&mut first_moment);
            fill(&mut second_moment);
            OptimState {
                learning_rate: meta.learning_rate,
                first_moment,
                second_moment,
                step: meta.step,
            }
        });
        Ok(Self {
            spec: header.spec,
            params,
            optimizer,
        })
    }
}

pub fn write_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, step, OutputActivation};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = MlpSpec::new(vec![3, 7, 2], OutputActivation::Softmax).unwrap();
        let mut params = init_params(&spec, 4);
        params.layers[1].bias[0] = -0.0;
        params.layers[0].weights[[0, 0]] = f64::MIN_POSITIVE / 3.0;
        let mut opt = OptimState::new(&params, 1e-3).unwrap();
        let grads = init_params(&spec, 5);
        step(&mut params, &grads, &mut opt).unwrap();
        let ckpt = Checkpoint {
            spec,
            params,
            optimizer: Some(opt),
        };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let bits = |c: &Checkpoint| c.params.iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ckpt));
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn params_only_and_file_io() {
        let spec = MlpSpec::new(vec![2, 2], OutputActivation::Identity).unwrap();
        let ckpt = Checkpoint {
            params: init_params(&spec, 1),
            spec,
            optimizer: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        write_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn truncated_stream_is_rejected() {
        let spec = MlpSpec::new(vec![2, 2], OutputActivation::Identity).unwrap();
        let ckpt = Checkpoint {
            params: init_params(&spec, 1),
            spec,
            optimizer: None,
        };
        let mut bytes = ckpt.to_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
        assert!(Checkpoint::from_bytes(&[1, 0], Path::new("mem")).is_err());
    }
}
