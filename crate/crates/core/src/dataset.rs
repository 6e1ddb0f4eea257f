//! Sample sets on disk: one compact JSON header line, then the matrices as
//! little-endian `f32` in sample order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureRow, MissingNeighborPolicy, Normalizer, Provenance, Sample, N_FEATURES, N_STEPS};
use crate::scalar::Scalar;
use crate::segment::Label;

pub const FORMAT_TAG: &str = "lcpred-samples";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported format {0:?} version {1}")]
    Format(String, u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub label: Label,
    pub dataset_tag: String,
    #[serde(flatten)]
    pub provenance: Provenance,
}

/// Provenance stored with a sample set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetInfo {
    pub split: Option<String>,
    pub normalizer: Option<Normalizer>,
    pub policy: Option<MissingNeighborPolicy>,
    pub seed: u64,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub n_steps: usize,
    pub n_features: usize,
    pub column_names: Vec<String>,
    pub label_map: Vec<String>,
    #[serde(default)]
    pub info: DatasetInfo,
    pub samples: Vec<SampleMeta>,
}

pub fn write_samples<T: Scalar>(mut w: impl Write, samples: &[Sample<T>], info: &DatasetInfo) -> Result<(), DatasetError> {
    for s in samples {
        if s.rows.len() != N_STEPS {
            return Err(DatasetError::Shape(format!("sample {} has {} rows", s.id(), s.rows.len())));
        }
    }
    let header = DatasetHeader {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        n_steps: N_STEPS,
        n_features: N_FEATURES,
        column_names: crate::features::COLUMN_NAMES.iter().map(|s| s.to_string()).collect(),
        label_map: Label::ALL.iter().map(|l| l.as_str().to_string()).collect(),
        info: info.clone(),
        samples: samples
            .iter()
            .map(|s| SampleMeta {
                label: s.label,
                dataset_tag: s.dataset_tag.clone(),
                provenance: s.provenance.clone(),
            })
            .collect(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(N_STEPS * N_FEATURES * 4);
    for s in samples {
        buf.clear();
        for r in &s.rows {
            for v in r {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples<T: Scalar>(r: impl Read) -> Result<(Vec<Sample<T>>, DatasetInfo), DatasetError> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: DatasetHeader = serde_json::from_str(line.trim_end())?;
    if header.format != FORMAT_TAG || header.version != FORMAT_VERSION {
        return Err(DatasetError::Format(header.format, header.version));
    }
    if header.n_steps != N_STEPS || header.n_features != N_FEATURES {
        return Err(DatasetError::Shape(format!("{}x{}", header.n_steps, header.n_features)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let per = N_STEPS * N_FEATURES * 4;
    if blob.len() != per * header.samples.len() {
        return Err(DatasetError::Shape(format!(
            "{} payload bytes for {} samples",
            blob.len(),
            header.samples.len()
        )));
    }
    let samples = header
        .samples
        .into_iter()
        .zip(blob.chunks_exact(per))
        .map(|(meta, bytes)| {
            let rows = bytes
                .chunks_exact(N_FEATURES * 4)
                .map(|rb| {
                    let mut row: FeatureRow<T> = [T::zero(); N_FEATURES];
                    for (v, b) in row.iter_mut().zip(rb.chunks_exact(4)) {
                        *v = T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
                    }
                    row
                })
                .collect();
            Sample {
                rows,
                label: meta.label,
                dataset_tag: meta.dataset_tag,
                provenance: meta.provenance,
            }
        })
        .collect();
    Ok((samples, header.info))
}

pub fn save_samples<T: Scalar>(path: impl AsRef<Path>, samples: &[Sample<T>], info: &DatasetInfo) -> Result<(), DatasetError> {
    write_samples(BufWriter::new(File::create(path)?), samples, info)
}

pub fn load_samples<T: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<Sample<T>>, DatasetInfo), DatasetError> {
    read_samples(File::open(path)?)
}
