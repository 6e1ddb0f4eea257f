//! Checkpoint files: a JSON header line with a tensor manifest, followed by
//! little-endian `f32` tensor data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use lcpred_core::features::{Normalizer, COLUMN_NAMES};
use lcpred_core::segment::Label;

use crate::tape::Float;
use crate::transformer::{ModelConfig, ModelError, ModelParams, NamedTensor};

pub const FORMAT_TAG: &str = "lcpred-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the data section.
    pub offset: usize,
}

/// Everything stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub normalizer: Option<Normalizer>,
    pub seed: u64,
    pub git_revision: Option<String>,
    /// Free-form provenance (config hash, training history summary).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: ModelConfig,
    column_names: Vec<String>,
    label_map: Vec<String>,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

pub fn write_checkpoint<F: Float>(mut w: impl Write, params: &ModelParams<F>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let mut offset = 0;
    let tensors = params
        .tensors
        .iter()
        .map(|t| {
            let e = TensorEntry { name: t.name.clone(), shape: [t.value.nrows(), t.value.ncols()], offset };
            offset += t.value.len() * 4;
            e
        })
        .collect();
    let header = Header {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        config: params.config.clone(),
        column_names: COLUMN_NAMES.iter().map(|s| s.to_string()).collect(),
        label_map: Label::ALL.iter().map(|l| l.as_str().to_string()).collect(),
        meta: meta.clone(),
        tensors,
    };
    let json = serde_json::to_string(&header).map_err(|e| ModelError::Format(e.to_string()))?;
    w.write_all(json.as_bytes())?;
    w.write_all(b"\n")?;
    for t in &params.tensors {
        let bytes: Vec<u8> = t.value.iter().flat_map(|v| (v.as_f64() as f32).to_le_bytes()).collect();
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<F: Float>(r: impl Read) -> Result<(ModelParams<F>, CheckpointMeta), ModelError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header = serde_json::from_str(line.trim_end()).map_err(|e| ModelError::Format(e.to_string()))?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(ModelError::Format(format!("unsupported {} v{}", header.format, header.version)));
    }
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    let tensors = header
        .tensors
        .iter()
        .map(|e| {
            let n = e.shape[0] * e.shape[1];
            let bytes = data
                .get(e.offset..e.offset + 4 * n)
                .ok_or_else(|| ModelError::Format(format!("tensor {} exceeds data section", e.name)))?;
            let values: Vec<F> =
                bytes.chunks_exact(4).map(|b| F::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
            let value = Array2::from_shape_vec((e.shape[0], e.shape[1]), values).map_err(|e| ModelError::Format(e.to_string()))?;
            Ok(NamedTensor { name: e.name.clone(), value })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let params = ModelParams { config: header.config, tensors };
    params.check_layout()?;
    Ok((params, header.meta))
}

pub fn save_checkpoint<F: Float>(path: impl AsRef<Path>, params: &ModelParams<F>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, meta)
}

pub fn load_checkpoint<F: Float>(path: impl AsRef<Path>) -> Result<(ModelParams<F>, CheckpointMeta), ModelError> {
    read_checkpoint(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_is_exact() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1, ..Default::default() };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let meta = CheckpointMeta {
            normalizer: Some(Normalizer { mean: vec![0.5; 36], std: vec![2.0; 36] }),
            seed: 4,
            git_revision: Some("abc".into()),
            extra: serde_json::json!({"config_hash": "00"}),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, &meta).unwrap();
        let (back, meta_back) = read_checkpoint::<f32>(&buf[..]).unwrap();
        assert_eq!(back, params);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 8, n_layers: 1, ..Default::default() };
        let params = ModelParams::<f32>::init(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &params, &CheckpointMeta::default()).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(matches!(read_checkpoint::<f32>(&buf[..]), Err(ModelError::Format(_))));
    }
}
