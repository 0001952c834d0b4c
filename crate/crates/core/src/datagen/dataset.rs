use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::Field;

pub const DATASET_MAGIC: &[u8; 4] = b"OODD";
pub const DATASET_VERSION: u32 = 1;
const DTYPE_F64: u32 = 1;
const DTYPE_F32: u32 = 0;

/// Per-channel affine map to zero mean, unit variance over the joint channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Statistics of a batch `[N, C, ...]`, pooled over samples and trailing axes.
    pub fn fit(batch: &Tensor<f64>) -> Self {
        let c = batch.shape().get(1).copied().unwrap_or(1);
        let plane = batch.row_len() / c;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for r in 0..batch.rows() {
            for (ch, chunk) in batch.row(r).chunks(plane).enumerate() {
                for &v in chunk {
                    sum[ch] += v;
                }
            }
        }
        let count = (batch.rows() * plane) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        for r in 0..batch.rows() {
            for (ch, chunk) in batch.row(r).chunks(plane).enumerate() {
                for &v in chunk {
                    sq[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count).sqrt();
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Restriction to channels `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            mean: self.mean[range.clone()].to_vec(),
            std: self.std[range].to_vec(),
        }
    }

    fn apply(&self, data: &mut [f64], plane: usize, forward: bool) {
        let c = self.channels();
        for (idx, chunk) in data.chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = if forward { (*v - m) / s } else { *v * s + m };
            }
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if channels != self.channels() {
            return Err(Error::shape(
                "normalization",
                format!("{} channels vs {} statistics", channels, self.channels()),
            ));
        }
        Ok(())
    }

    /// Normalizes one sample `[C, ...]`.
    pub fn normalize(&self, sample: &Field) -> Result<Field> {
        self.check(sample.rows())?;
        let mut out = sample.clone();
        let plane = sample.row_len();
        self.apply(out.data_mut(), plane, true);
        Ok(out)
    }

    pub fn denormalize(&self, sample: &Field) -> Result<Field> {
        self.check(sample.rows())?;
        let mut out = sample.clone();
        let plane = sample.row_len();
        self.apply(out.data_mut(), plane, false);
        Ok(out)
    }

    /// Normalizes a batch `[N, C, ...]`.
    pub fn normalize_batch(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check(batch.shape().get(1).copied().unwrap_or(1))?;
        let mut out = batch.clone();
        let plane = batch.row_len() / self.channels();
        self.apply(out.data_mut(), plane, true);
        Ok(out)
    }

    pub fn denormalize_batch(&self, batch: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.check(batch.shape().get(1).copied().unwrap_or(1))?;
        let mut out = batch.clone();
        let plane = batch.row_len() / self.channels();
        self.apply(out.data_mut(), plane, false);
        Ok(out)
    }
}

/// Joint samples `[N, C_in + C_out, ...]` with metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tag: String,
    pub joint: Tensor<f64>,
    pub input_channels: usize,
    pub meta: Vec<serde_json::Value>,
    pub normalization: Normalization,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    tag: String,
    input_channels: usize,
    normalization: Normalization,
    meta: Vec<serde_json::Value>,
}

impl Dataset {
    pub fn new(tag: impl Into<String>, joint: Tensor<f64>, input_channels: usize, meta: Vec<serde_json::Value>) -> Result<Self> {
        if joint.shape().len() < 2 {
            return Err(Error::shape("Dataset::new", format!("joint must be [N, C, ...], got {:?}", joint.shape())));
        }
        if meta.len() != joint.rows() {
            return Err(Error::invalid(format!("{} samples but {} metadata entries", joint.rows(), meta.len())));
        }
        if input_channels == 0 || input_channels > joint.shape()[1] {
            return Err(Error::invalid(format!("input_channels {input_channels} out of range")));
        }
        let normalization = Normalization::fit(&joint);
        Ok(Self {
            tag: tag.into(),
            joint,
            input_channels,
            meta,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.joint.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.joint.shape()[1]
    }

    /// Per-sample joint shape `[C, ...]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.joint.shape()[1..]
    }

    pub fn input_shape(&self) -> Vec<usize> {
        let mut s = self.sample_shape().to_vec();
        s[0] = self.input_channels;
        s
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut s = self.sample_shape().to_vec();
        s[0] -= self.input_channels;
        s
    }

    pub fn sample(&self, i: usize) -> Field {
        Tensor::new(self.sample_shape().to_vec(), self.joint.row(i).to_vec()).expect("row shape")
    }

    /// Raw `(x, y)` of sample `i`.
    pub fn pair(&self, i: usize) -> (Field, Field) {
        self.sample(i).split_channels(self.input_channels).expect("channel split")
    }

    fn split_batch(&self, joint: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        let plane = self.joint.row_len() / self.channels();
        let cut = self.input_channels * plane;
        for r in 0..joint.rows() {
            let row = joint.row(r);
            xs.extend_from_slice(&row[..cut]);
            ys.extend_from_slice(&row[cut..]);
        }
        let mut xshape = vec![joint.rows()];
        xshape.extend(self.input_shape());
        let mut yshape = vec![joint.rows()];
        yshape.extend(self.output_shape());
        (
            Tensor::new(xshape, xs).expect("input split"),
            Tensor::new(yshape, ys).expect("output split"),
        )
    }

    /// Inputs and outputs as separate batches, normalized with `norm`.
    pub fn normalized_pairs(&self, norm: &Normalization) -> Result<(Tensor<f64>, Tensor<f64>)> {
        Ok(self.split_batch(&norm.normalize_batch(&self.joint)?))
    }

    /// Raw inputs and outputs as separate batches.
    pub fn raw_pairs(&self) -> (Tensor<f64>, Tensor<f64>) {
        self.split_batch(&self.joint)
    }

    /// Sub-dataset of the given rows (normalization refitted on the subset).
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Dataset::new(
            self.tag.clone(),
            self.joint.select_rows(idx),
            self.input_channels,
            idx.iter().map(|&i| self.meta[i].clone()).collect(),
        )
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let shape = ds.joint.shape();
    let mut buf = Vec::with_capacity(16 + 4 * shape.len() + 8 * ds.joint.len());
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&DTYPE_F64.to_le_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in ds.joint.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

fn take_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let b = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| Error::Format("truncated dataset header".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

fn decode(bytes: &[u8]) -> Result<Tensor<f64>> {
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing OODD magic".into()));
    }
    let mut at = 4;
    let version = take_u32(bytes, &mut at)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let dtype = take_u32(bytes, &mut at)?;
    let ndim = take_u32(bytes, &mut at)? as usize;
    let dims = (0..ndim)
        .map(|_| take_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = dims.iter().product();
    let body = &bytes[at..];
    let data: Vec<f64> = match dtype {
        DTYPE_F64 if body.len() == 8 * n => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DTYPE_F32 if body.len() == 4 * n => body
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        DTYPE_F64 | DTYPE_F32 => return Err(Error::Format("dataset payload length does not match dims".into())),
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    Tensor::new(dims, data)
}

/// Writes `path` (binary samples) and `path.json` (metadata sidecar).
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let sidecar = Sidecar {
        tag: ds.tag.clone(),
        input_channels: ds.input_channels,
        normalization: ds.normalization.clone(),
        meta: ds.meta.clone(),
    };
    write_atomic(path, &encode(ds)?)?;
    let mut json = serde_json::to_vec_pretty(&sidecar)?;
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let joint = decode(&bytes)?;
    let side: Sidecar = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    let mut ds = Dataset::new(side.tag, joint, side.input_channels, side.meta)?;
    ds.normalization = side.normalization;
    Ok(ds)
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp_name = path.file_name().unwrap_or_default().to_owned();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = dir.join(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
