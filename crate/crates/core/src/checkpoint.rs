//! Versioned binary checkpoint: an 8-byte magic, a little-endian u64 header
//! length, a JSON header, then raw little-endian f64 tensors.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecKind, LatentCodec, PcaCodec};
use crate::denoiser::{ArchConfig, ParamSpec, ResidualMlp};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleKind};

pub const MAGIC: &[u8; 8] = b"GENCLSv1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 elements from the start of the tensor section.
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchConfig,
    param_layout: Vec<ParamSpec>,
    schedule_steps: usize,
    schedule: ScheduleKind,
    step: usize,
    class_names: Vec<String>,
    codec: CodecKind,
    #[serde(default)]
    codec_image_shape: Option<[usize; 3]>,
    metadata: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchConfig,
    pub schedule_steps: usize,
    pub schedule: ScheduleKind,
    pub step: usize,
    pub class_names: Vec<String>,
    pub codec: LatentCodec,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
    /// Free-form training metadata (resolved config, final losses).
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.schedule_steps, self.schedule)
    }

    /// The denoiser with EMA weights (`use_ema`) or raw weights.
    pub fn model(&self, use_ema: bool) -> Result<ResidualMlp> {
        let p = if use_ema { &self.ema_params } else { &self.params };
        ResidualMlp::from_params(self.arch, p.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let mut blobs: Vec<&[f64]> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, shape: Vec<usize>, data: &'_ [f64], tensors: &mut Vec<TensorEntry>| {
            let e = TensorEntry {
                name: name.into(),
                shape,
                offset,
            };
            offset += e.len();
            tensors.push(e);
            data.len()
        };
        push("params", vec![self.params.len()], &self.params, &mut tensors);
        blobs.push(&self.params);
        push("ema_params", vec![self.ema_params.len()], &self.ema_params, &mut tensors);
        blobs.push(&self.ema_params);
        let mut codec_image_shape = None;
        if let LatentCodec::Pca(p) = &self.codec {
            let (c, h, w) = p.image_shape();
            codec_image_shape = Some([c, h, w]);
            let mean = p.mean().as_slice().expect("contiguous");
            push("codec.mean", vec![mean.len()], mean, &mut tensors);
            blobs.push(mean);
            let comps = p.components().as_slice().expect("contiguous");
            push("codec.components", vec![p.components().nrows(), p.components().ncols()], comps, &mut tensors);
            blobs.push(comps);
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            arch: self.arch,
            param_layout: ResidualMlp::from_params(self.arch, self.params.clone())?.specs().to_vec(),
            schedule_steps: self.schedule_steps,
            schedule: self.schedule,
            step: self.step,
            class_names: self.class_names.clone(),
            codec: self.codec.kind(),
            codec_image_shape,
            metadata: self.metadata.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(json.len() as u64).to_le_bytes())?;
            f.write_all(&json)?;
            for blob in blobs {
                for v in blob {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
            f.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format version {}",
                header.format_version
            )));
        }
        let data = &bytes[body..];
        let tensor = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let e = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            let start = e.offset * 8;
            let end = start + e.len() * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!("tensor {name} is truncated")));
            }
            let vals = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok((e.shape.clone(), vals))
        };
        let (_, params) = tensor("params")?;
        let (_, ema_params) = tensor("ema_params")?;
        let model = ResidualMlp::from_params(header.arch, params.clone())
            .map_err(|e| Error::Checkpoint(format!("parameters do not match architecture: {e}")))?;
        if model.specs() != header.param_layout.as_slice() || ema_params.len() != params.len() {
            return Err(bad("parameter layout does not match architecture"));
        }
        let codec = match header.codec {
            CodecKind::Identity => LatentCodec::Identity,
            CodecKind::LearnedAutoencoder => {
                let [c, h, w] = header.codec_image_shape.ok_or_else(|| bad("codec image shape missing"))?;
                let (_, mean) = tensor("codec.mean")?;
                let (shape, comps) = tensor("codec.components")?;
                if shape.len() != 2 {
                    return Err(bad("codec components must be a matrix"));
                }
                let comps = Array2::from_shape_vec((shape[0], shape[1]), comps).map_err(|e| bad(&e.to_string()))?;
                LatentCodec::Pca(PcaCodec::from_parts((c, h, w), mean, comps)?)
            }
        };
        Ok(Self {
            arch: header.arch,
            schedule_steps: header.schedule_steps,
            schedule: header.schedule,
            step: header.step,
            class_names: header.class_names,
            codec,
            params,
            ema_params,
            metadata: header.metadata,
        })
    }
}
