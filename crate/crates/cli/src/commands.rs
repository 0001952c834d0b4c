use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use oodcert::certificates::{CertificateRecord, Certifier, Method};
use oodcert::datagen::{generate, read_dataset, write_atomic, write_dataset, Dataset};
use oodcert::decision::{fit_error_curve, predict_error, quadrant_metrics, DecisionBoundary};
use oodcert::diffusion::{train_denoiser, NetDenoiser};
use oodcert::likelihood::certify_mixed_ar;
use oodcert::models::{train_regressor, ModelCheckpoint};
use oodcert::rng::derive;
use oodcert::Field;
use rayon::prelude::*;
use serde_json::json;

use crate::config::{sha256_hex, ExperimentConfig, Split};
use crate::report::{hash_file, metrics_csv, read_json, sibling, write_json, FitEntry, MetricsRow, Provenance, Report, Row};
use crate::CliError;

pub fn gen(cfg: &ExperimentConfig, split: Split, n: usize, seed: u64, out: &Path) -> Result<Dataset, CliError> {
    let mut ds = generate(&cfg.dist(split)?, n, seed)?;
    ds.tag = format!("{}-{}", ds.tag, split_name(split));
    write_dataset(out, &ds)?;
    info!("wrote {} samples to {}", ds.len(), out.display());
    Ok(ds)
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Test => "test",
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("missing dataset {}", path.display())));
    }
    Ok(read_dataset(path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Config(format!("missing checkpoint {}", path.display())));
    }
    Ok(ModelCheckpoint::load(path)?)
}

pub fn train_regressor_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<ModelCheckpoint, CliError> {
    let ds = load_dataset(data)?;
    let (spec, tc) = cfg.regressor(&ds.input_shape(), &ds.output_shape());
    let ck = train_regressor(&spec, &ds, &tc)?;
    ck.save(out)?;
    info!("regressor trained, final loss {:?}", ck.loss_curve.last());
    Ok(ck)
}

pub fn train_denoiser_cmd(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<ModelCheckpoint, CliError> {
    let ds = load_dataset(data)?;
    let (spec, tc, sched) = cfg.denoiser(ds.sample_shape());
    let ck = train_denoiser(&spec, &ds, &ds.normalization, sched, &tc)?;
    ck.save(out)?;
    info!("denoiser trained, final loss {:?}", ck.loss_curve.last());
    Ok(ck)
}

/// Mean absolute error and `‖ŷ − y‖₁ / ‖y‖₁`.
pub fn errors(pred: &Field, truth: &Field) -> (f64, f64) {
    let l1: f64 = pred.data().iter().zip(truth.data()).map(|(a, b)| (a - b).abs()).sum();
    let norm: f64 = truth.data().iter().map(|v| v.abs()).sum();
    let rel = if norm > 0.0 { l1 / norm } else { f64::INFINITY };
    (l1 / truth.len() as f64, rel)
}

/// Certificates of every sample of `ds`, one row per (sample, method), in
/// sample order. Sample `i` gets id `id_offset + i`.
pub fn certify_rows(
    cfg: &ExperimentConfig,
    regressor: &ModelCheckpoint,
    denoiser: &NetDenoiser,
    ds: &Dataset,
    methods: &[Method],
    tag: &str,
    id_offset: u64,
) -> Result<Vec<Row>, CliError> {
    if let Some(m) = methods.iter().find(|m| **m == Method::Oodc) {
        return Err(CliError::Config(format!("{m} is trained on labeled test samples and is not a certify method")));
    }
    let solver = cfg.solver();
    let traj: Vec<Method> = methods.iter().copied().filter(|m| *m != Method::JlbcMixedAr).collect();
    let mixed = methods.contains(&Method::JlbcMixedAr);
    let certifier = Certifier {
        regressor,
        denoiser,
        solver: solver.clone(),
        p: cfg.norm_p,
    };
    let per_sample: Vec<Vec<Row>> = (0..ds.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<Row>, CliError> {
            let id = id_offset + i as u64;
            let (x, y) = ds.pair(i);
            let (pred, mut recs) = if traj.is_empty() {
                let cond = oodcert::models::predict(regressor, &x, lead_time(regressor))?;
                (cond, Vec::new())
            } else {
                certifier.certify(&x, &traj, id)?
            };
            if mixed {
                recs.push(certify_mixed_ar(regressor, denoiser, &x, cfg.ar_steps, &solver, id)?);
            }
            let (err, rel) = errors(&pred, &y);
            let by_method: BTreeMap<Method, CertificateRecord> = recs.into_iter().map(|r| (r.method, r)).collect();
            Ok(methods
                .iter()
                .map(|m| {
                    let r = by_method[m].clone().with_dataset(tag).with_error(err, rel);
                    Row::from_record(&r)
                })
                .collect())
        })
        .collect::<Result<_, _>>()?;
    Ok(per_sample.into_iter().flatten().collect())
}

fn lead_time(ck: &ModelCheckpoint) -> Option<f64> {
    ck.extra.get("lead_time").and_then(|v| v.as_f64())
}

pub struct CertifyInputs<'a> {
    pub regressor: &'a Path,
    pub denoiser: &'a Path,
    pub data: &'a Path,
    pub tag: Option<String>,
    pub id_offset: u64,
}

pub fn certify_cmd(cfg: &ExperimentConfig, inp: &CertifyInputs, out: &Path) -> Result<Report, CliError> {
    let reg = load_checkpoint(inp.regressor)?;
    let den = NetDenoiser::from_checkpoint(load_checkpoint(inp.denoiser)?)?;
    let ds = load_dataset(inp.data)?;
    let tag = inp.tag.clone().unwrap_or_else(|| ds.tag.clone());
    let methods = cfg.method_tags()?;
    let rows = certify_rows(cfg, &reg, &den, &ds, &methods, &tag, inp.id_offset)?;
    let mut prov = Provenance::new(cfg.hash());
    prov.add_file("regressor", inp.regressor)?;
    prov.add_file("denoiser", inp.denoiser)?;
    prov.add_file("data", inp.data)?;
    let report = Report {
        rows,
        provenance: prov,
        ..Report::default()
    };
    report.write(out)?;
    info!("{} rows written to {}", report.rows.len(), out.display());
    Ok(report)
}

/// One boundary per method present in the decision report.
pub fn boundaries(cfg: &ExperimentConfig, decision: &Report) -> Result<BTreeMap<String, DecisionBoundary>, CliError> {
    let mut out = BTreeMap::new();
    for m in decision.methods() {
        let recs = decision.records(m);
        let certs: Vec<f64> = recs.iter().map(|r| r.certificate).collect();
        let errs: Option<Vec<f64>> = recs.iter().map(|r| r.error).collect();
        let b = DecisionBoundary::fit(&certs, errs.as_deref(), cfg.alpha, cfg.beta, m.sign())?;
        out.insert(m.name().to_owned(), b);
    }
    Ok(out)
}

pub fn boundary_cmd(cfg: &ExperimentConfig, decision: &Path, out: &Path) -> Result<BTreeMap<String, DecisionBoundary>, CliError> {
    let b = boundaries(cfg, &Report::read(decision)?)?;
    write_json(out, &b)?;
    Ok(b)
}

pub fn classify_cmd(report: &Path, boundary: &Path, out: &Path) -> Result<Report, CliError> {
    let mut r = Report::read(report)?;
    r.boundary = read_json(boundary)?;
    r.apply_labels();
    r.provenance.add_file("boundary", boundary)?;
    r.write(out)?;
    Ok(r)
}

/// Metrics per (dataset, method): one pass over each dataset tag plus the
/// pooled rows under the tag `all`.
pub fn metrics(report: &Report) -> Result<Vec<MetricsRow>, CliError> {
    let mut out = Vec::new();
    for m in report.methods() {
        let Some(b) = report.boundary.get(m.name()) else {
            continue;
        };
        let recs = report.records(m);
        let mut tags: Vec<&str> = Vec::new();
        for r in &recs {
            if !tags.contains(&r.dataset.as_str()) {
                tags.push(&r.dataset);
            }
        }
        if tags.len() > 1 {
            out.push(MetricsRow::new("all", m, &quadrant_metrics(&recs, b)?));
        }
        for t in tags {
            let sub: Vec<CertificateRecord> = recs.iter().filter(|r| r.dataset == t).cloned().collect();
            out.push(MetricsRow::new(t, m, &quadrant_metrics(&sub, b)?));
        }
    }
    if out.is_empty() {
        return Err(CliError::Config("no method in the report has a boundary".into()));
    }
    Ok(out)
}

fn metrics_key(m: &MetricsRow) -> String {
    format!("{}/{}", m.dataset, m.method)
}

pub fn write_metrics(rows: &[MetricsRow], out: &Path) -> Result<(), CliError> {
    let map: BTreeMap<String, &MetricsRow> = rows.iter().map(|m| (metrics_key(m), m)).collect();
    write_json(out, &map)?;
    write_atomic(&out.with_extension("csv"), &metrics_csv(rows)?)?;
    Ok(())
}

pub fn metrics_cmd(report: &Path, boundary: Option<&Path>, out: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut r = Report::read(report)?;
    if let Some(b) = boundary {
        r.boundary = read_json(b)?;
    }
    let rows = metrics(&r)?;
    write_metrics(&rows, out)?;
    Ok(rows)
}

/// Fits each method on its first `n_fit` rows with known error and measures
/// band coverage on the remaining ones.
pub fn fit_errors(report: &Report, n_fit: usize, band_percentile: f64) -> Result<BTreeMap<String, FitEntry>, CliError> {
    let mut out = BTreeMap::new();
    for m in report.methods() {
        let recs: Vec<CertificateRecord> = report.records(m).into_iter().filter(|r| r.error.is_some()).collect();
        let (fit_set, held) = recs.split_at(n_fit.min(recs.len()));
        let certs: Vec<f64> = fit_set.iter().map(|r| r.certificate).collect();
        let errs: Vec<f64> = fit_set.iter().filter_map(|r| r.error).collect();
        let fit = fit_error_curve(&certs, &errs, band_percentile)?;
        let coverage = (!held.is_empty()).then(|| {
            let inside = held
                .iter()
                .filter(|r| {
                    let (_, lo, hi) = predict_error(&fit, r.certificate);
                    r.error.is_some_and(|e| e >= lo && e <= hi)
                })
                .count();
            inside as f64 / held.len() as f64
        });
        out.insert(
            m.name().to_owned(),
            FitEntry {
                fit,
                fit_samples: fit_set.iter().map(|r| r.sample_id).collect(),
                coverage,
            },
        );
    }
    Ok(out)
}

pub fn fit_error_cmd(cfg: &ExperimentConfig, report: &Path, out: &Path) -> Result<BTreeMap<String, FitEntry>, CliError> {
    let fits = fit_errors(&Report::read(report)?, cfg.n_fit, cfg.band_percentile)?;
    write_json(out, &fits)?;
    Ok(fits)
}

/// Stage cache: an artifact is reused when its `.key` file matches the hash
/// of the stage's settings and inputs.
struct Stage {
    artifact: PathBuf,
    key: String,
}

impl Stage {
    fn new(artifact: PathBuf, name: &str, settings: serde_json::Value, inputs: &[&Path]) -> Result<Self, CliError> {
        let mut parts = vec![name.to_owned(), settings.to_string()];
        for p in inputs {
            parts.push(hash_file(p)?);
        }
        Ok(Self {
            artifact,
            key: sha256_hex(parts.join("\n").as_bytes()),
        })
    }

    fn key_path(&self) -> PathBuf {
        sibling(&self.artifact, ".key")
    }

    fn fresh(&self) -> bool {
        self.artifact.exists() && fs::read_to_string(self.key_path()).is_ok_and(|k| k.trim() == self.key)
    }

    fn done(&self) -> Result<(), CliError> {
        write_atomic(&self.key_path(), format!("{}\n", self.key).as_bytes())?;
        Ok(())
    }
}

/// The full pipeline: data, models, certificates for the decision set and
/// the test/held-out pool, boundaries, labels, metrics and the error fit.
/// Finished stages are reused when their inputs are unchanged.
pub fn report_cmd(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| CliError::missing(dir, e))?;
    let data_settings = json!({
        "dataset": cfg.dataset, "scale": cfg.scale, "nu": cfg.nu, "n_plus": cfg.n_plus,
        "toy_function": cfg.toy_function, "gaussian_dim": cfg.gaussian_dim, "seed": cfg.seed,
    });
    let sets = [
        ("train", Split::Train, cfg.n_train),
        ("decision", Split::Train, cfg.n_decision),
        ("heldout", Split::Train, cfg.n_heldout),
        ("test", Split::Test, cfg.n_test),
    ];
    let mut paths = BTreeMap::new();
    for (name, split, n) in sets {
        let path = dir.join(format!("{name}.ds"));
        let stage = Stage::new(path.clone(), name, json!({"data": data_settings, "n": n}), &[])?;
        if !stage.fresh() {
            gen(cfg, split, n, derive(cfg.seed, &format!("gen-{name}")), &path)?;
            stage.done()?;
        }
        paths.insert(name, path);
    }

    let reg_path = dir.join("regressor.ckpt");
    let stage = Stage::new(
        reg_path.clone(),
        "regressor",
        json!([cfg.seed, cfg.regressor_arch, cfg.regressor_widths, cfg.regressor_activation, cfg.regressor_loss,
               cfg.regressor_epochs, cfg.regressor_batch_size, cfg.regressor_lr, cfg.precision, cfg.lr_schedule, cfg.ema_decay]),
        &[&paths["train"]],
    )?;
    if !stage.fresh() {
        train_regressor_cmd(cfg, &paths["train"], &reg_path)?;
        stage.done()?;
    }
    let den_path = dir.join("denoiser.ckpt");
    let stage = Stage::new(
        den_path.clone(),
        "denoiser",
        json!([cfg.seed, cfg.denoiser_arch, cfg.denoiser_widths, cfg.denoiser_epochs, cfg.denoiser_batch_size,
               cfg.denoiser_lr, cfg.sigma_min, cfg.sigma_max, cfg.precision, cfg.lr_schedule, cfg.ema_decay]),
        &[&paths["train"]],
    )?;
    if !stage.fresh() {
        train_denoiser_cmd(cfg, &paths["train"], &den_path)?;
        stage.done()?;
    }

    let reg = load_checkpoint(&reg_path)?;
    let den = NetDenoiser::from_checkpoint(load_checkpoint(&den_path)?)?;
    let methods = cfg.method_tags()?;
    let cert_settings = json!([cfg.seed, cfg.steps, cfg.probes, cfg.divergence, cfg.norm_p, cfg.ar_steps, cfg.methods]);
    let certified = |name: &str, sets: &[(&str, u64)]| -> Result<Report, CliError> {
        let out = dir.join(format!("{name}.json"));
        let mut inputs: Vec<&Path> = vec![&reg_path, &den_path];
        inputs.extend(sets.iter().map(|(s, _)| paths[s].as_path()));
        let stage = Stage::new(out.clone(), name, cert_settings.clone(), &inputs)?;
        if stage.fresh() {
            return Report::read(&out);
        }
        let mut report = Report {
            provenance: Provenance::new(cfg.hash()),
            ..Report::default()
        };
        for (set, offset) in sets {
            let ds = load_dataset(&paths[set])?;
            report.rows.extend(certify_rows(cfg, &reg, &den, &ds, &methods, set, *offset)?);
        }
        report.write(&out)?;
        stage.done()?;
        Ok(report)
    };
    info!("certifying decision samples");
    let decision = certified("certs-decision", &[("decision", 0)])?;
    info!("certifying test and held-out samples");
    let pool = certified("certs-pool", &[("test", 0), ("heldout", cfg.n_test as u64)])?;

    let mut report = pool;
    report.boundary = boundaries(cfg, &decision)?;
    report.apply_labels();
    report.fit = fit_errors(&report, cfg.n_fit, cfg.band_percentile)?;
    let metrics_rows = metrics(&report)?;
    report.metrics = metrics_rows.iter().map(|m| (metrics_key(m), m.clone())).collect();
    report.provenance = Provenance::new(cfg.hash());
    for (name, p) in [("regressor", &reg_path), ("denoiser", &den_path)] {
        report.provenance.add_file(name, p)?;
    }
    for (name, p) in &paths {
        report.provenance.add_file(name, p)?;
    }
    write_json(&dir.join("boundary.json"), &report.boundary)?;
    write_metrics(&metrics_rows, &dir.join("metrics.json"))?;
    write_json(&dir.join("fit.json"), &report.fit)?;
    report.write(&dir.join("report.json"))?;
    Ok(report)
}
