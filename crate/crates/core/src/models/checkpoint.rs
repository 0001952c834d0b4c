use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, Precision, TrainConfig};
use crate::datagen::Normalization;
use crate::diffcore::{read_checkpoint, write_checkpoint, CheckpointFile, DType, ParamSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Regressor,
    Denoiser,
    Classifier,
}

/// A trained model with everything needed to run it on raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: ModelKind,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    /// Statistics of the joint channels `(x, y)` the model was trained on.
    pub normalization: Normalization,
    pub input_channels: usize,
    pub params: ParamSet<f64>,
    pub ema: ParamSet<f64>,
    pub loss_curve: Vec<f64>,
    /// Kind-specific settings (e.g. the denoiser's noise schedule).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    kind: ModelKind,
    spec: ModelSpec,
    train: TrainConfig,
    normalization: Normalization,
    input_channels: usize,
    loss_curve: Vec<f64>,
    extra: serde_json::Value,
}

impl ModelCheckpoint {
    /// Parameters used for inference (the EMA shadow).
    pub fn weights(&self) -> &ParamSet<f64> {
        &self.ema
    }

    pub fn input_normalization(&self) -> Normalization {
        self.normalization.slice(0..self.input_channels)
    }

    pub fn output_normalization(&self) -> Normalization {
        self.normalization.slice(self.input_channels..self.normalization.channels())
    }

    pub fn to_file(&self) -> Result<CheckpointFile> {
        let meta = Meta {
            kind: self.kind,
            spec: self.spec.clone(),
            train: self.train.clone(),
            normalization: self.normalization.clone(),
            input_channels: self.input_channels,
            loss_curve: self.loss_curve.clone(),
            extra: self.extra.clone(),
        };
        Ok(CheckpointFile {
            dtype: match self.train.precision {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            },
            params: self.params.clone(),
            ema: Some(self.ema.clone()),
            meta: serde_json::to_value(meta)?,
        })
    }

    pub fn from_file(file: CheckpointFile) -> Result<Self> {
        let meta: Meta = serde_json::from_value(file.meta)?;
        let ema = file
            .ema
            .ok_or_else(|| Error::Format("checkpoint has no EMA table".into()))?;
        meta.spec.check_params(&file.params)?;
        meta.spec.check_params(&ema)?;
        Ok(Self {
            kind: meta.kind,
            spec: meta.spec,
            train: meta.train,
            normalization: meta.normalization,
            input_channels: meta.input_channels,
            params: file.params,
            ema,
            loss_curve: meta.loss_curve,
            extra: meta.extra,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &self.to_file()?)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::datagen::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_file(read_checkpoint(fs::File::open(path)?)?)
    }
}
