use std::fs;
use std::path::{Path, PathBuf};

use oodcert::certificates::Method;
use oodcert::datagen::{BimodalSpec, DistSpec, GaussianOracle, Scale, ToyFunction, WaveDist};
use oodcert::diffcore::AdamConfig;
use oodcert::diffusion::NoiseSchedule;
use oodcert::likelihood::{DivergenceMode, SolverConfig};
use oodcert::models::{Activation, Arch, Conditioning, LossKind, LrSchedule, ModelSpec, Precision, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Wave,
    ToyBimodal,
    ToyPiecewiseSine,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Every tunable of an experiment, as flat keys of a TOML document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub dataset: Family,
    pub scale: Scale,
    pub n_train: usize,
    pub n_test: usize,
    pub n_decision: usize,
    pub n_heldout: usize,
    pub nu: f64,
    pub n_plus: usize,
    pub toy_function: ToyFunction,
    pub gaussian_dim: usize,

    pub regressor_arch: Arch,
    pub regressor_widths: Vec<usize>,
    pub regressor_activation: Activation,
    pub regressor_loss: LossKind,
    pub regressor_epochs: usize,
    pub regressor_batch_size: usize,
    pub regressor_lr: f64,

    pub denoiser_arch: Arch,
    pub denoiser_widths: Vec<usize>,
    pub denoiser_epochs: usize,
    pub denoiser_batch_size: usize,
    pub denoiser_lr: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,

    pub precision: Precision,
    pub lr_schedule: LrSchedule,
    pub ema_decay: f64,

    pub steps: usize,
    pub probes: usize,
    pub divergence: DivergenceMode,
    pub norm_p: f64,
    pub ar_steps: usize,

    pub methods: Vec<String>,
    pub alpha: f64,
    pub beta: f64,
    /// Rows used for the error fit; the rest measure its band coverage.
    pub n_fit: usize,
    pub band_percentile: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("oodc-out"),
            dataset: Family::Wave,
            scale: Scale::Desk,
            n_train: 1000,
            n_test: 100,
            n_decision: 32,
            n_heldout: 50,
            nu: 0.1,
            n_plus: 200,
            toy_function: ToyFunction::Linear,
            gaussian_dim: 2,
            regressor_arch: Arch::Mlp,
            regressor_widths: vec![1024],
            regressor_activation: Activation::Silu,
            regressor_loss: LossKind::L1,
            regressor_epochs: 200,
            regressor_batch_size: 32,
            regressor_lr: 1e-3,
            denoiser_arch: Arch::Mlp,
            denoiser_widths: vec![1024],
            denoiser_epochs: 300,
            denoiser_batch_size: 64,
            denoiser_lr: 1e-3,
            sigma_min: 0.01,
            sigma_max: 20.0,
            precision: Precision::F32,
            lr_schedule: LrSchedule::Cosine,
            ema_decay: 0.999,
            steps: 16,
            probes: 32,
            divergence: DivergenceMode::Hutchinson,
            norm_p: 2.0,
            ar_steps: 1,
            methods: vec!["jlbc".into()],
            alpha: 1.5,
            beta: 5.0,
            n_fit: 64,
            band_percentile: 75.0,
        }
    }
}

/// Reads the optional config file and applies `overrides` (flag values keyed
/// like the file) on top. Unknown keys in either are rejected.
pub fn load(path: Option<&Path>, overrides: toml::Table) -> Result<ExperimentConfig, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    table.extend(overrides);
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.check()?;
    Ok(cfg)
}

impl ExperimentConfig {
    fn check(&self) -> Result<(), CliError> {
        self.method_tags()?;
        if self.n_decision < 2 {
            return Err(CliError::Config("n_decision must be ≥ 2".into()));
        }
        Ok(())
    }

    pub fn method_tags(&self) -> Result<Vec<Method>, CliError> {
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must not be empty".into()));
        }
        self.methods
            .iter()
            .map(|m| m.parse::<Method>().map_err(|e| CliError::Config(e.to_string())))
            .collect()
    }

    /// SHA-256 of the canonical JSON form with `out_dir` blanked, used for
    /// provenance and stage caching.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn dist(&self, split: Split) -> Result<DistSpec, CliError> {
        Ok(match self.dataset {
            Family::Wave => DistSpec::Wave(match split {
                Split::Train => WaveDist::train(self.scale),
                Split::Test => WaveDist::test(self.scale),
            }),
            Family::ToyBimodal => DistSpec::ToyBimodal(BimodalSpec::new(self.nu, self.n_plus, self.toy_function)),
            Family::ToyPiecewiseSine => DistSpec::ToyPiecewiseSine,
            Family::Gaussian => DistSpec::GaussianOracle(GaussianOracle::standard(self.gaussian_dim)),
        })
    }

    fn train_config(&self, epochs: usize, batch: usize, lr: f64, seed_label: u64) -> TrainConfig {
        let mut c = TrainConfig::new(epochs, batch, lr);
        c.schedule = self.lr_schedule;
        c.optimizer = AdamConfig { lr, ..AdamConfig::default() };
        c.ema_decay = self.ema_decay;
        c.precision = self.precision;
        c.seed = oodcert::rng::derive(self.seed, &format!("train-{seed_label}"));
        c
    }

    pub fn regressor(&self, input: &[usize], output: &[usize]) -> (ModelSpec, TrainConfig) {
        let mut spec = model_spec(self.regressor_arch, &self.regressor_widths, input, output);
        spec.activation = self.regressor_activation;
        let mut cfg = self.train_config(self.regressor_epochs, self.regressor_batch_size, self.regressor_lr, 0);
        cfg.loss = self.regressor_loss;
        (spec, cfg)
    }

    pub fn denoiser(&self, shape: &[usize]) -> (ModelSpec, TrainConfig, NoiseSchedule) {
        let spec = model_spec(self.denoiser_arch, &self.denoiser_widths, shape, shape).with_conditioning(Conditioning::NoiseLevel);
        let cfg = self.train_config(self.denoiser_epochs, self.denoiser_batch_size, self.denoiser_lr, 1);
        let sched = NoiseSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
        };
        (spec, cfg, sched)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            steps: self.steps,
            probes: self.probes,
            divergence: self.divergence,
            seed: oodcert::rng::derive(self.seed, "solver"),
            ..SolverConfig::default()
        }
    }
}

fn model_spec(arch: Arch, widths: &[usize], input: &[usize], output: &[usize]) -> ModelSpec {
    match arch {
        Arch::Mlp => {
            let mut s = ModelSpec::mlp(input.iter().product(), widths, output.iter().product());
            s.input_shape = input.to_vec();
            s.output_shape = output.to_vec();
            s
        }
        Arch::Conv => ModelSpec::conv(input, widths, output),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
