//! `oodc`: data generation, training, certification and reporting for
//! joint-likelihood OOD certificates.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oodcert::certificates::{CertificateMethod, Method};

use oodc_cli::commands::{self, CertifyInputs};
use oodc_cli::config::{self, ExperimentConfig, Family, Split};
use oodc_cli::CliError;

#[derive(Parser, Debug)]
#[command(name = "oodc", version, about = "Task-aware OOD certificates from joint diffusion likelihoods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file and `key=value` overrides shared by every subcommand.
#[derive(Args, Debug, Default)]
struct Common {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key (repeatable), e.g. `--set steps=32`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FamilyArg {
    Wave,
    ToyBimodal,
    ToyPiecewiseSine,
    Gaussian,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Regressor,
    Denoiser,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset.
    Gen {
        family: FamilyArg,
        #[arg(long, default_value = "train")]
        dist: SplitArg,
        #[arg(long)]
        n: Option<usize>,
        /// Desk-scale parameter ranges (default).
        #[arg(long, conflicts_with = "paper")]
        desk: bool,
        /// Full-scale parameter ranges.
        #[arg(long)]
        paper: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a regressor or a denoiser on a dataset.
    Train {
        #[arg(long)]
        kind: KindArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Certificates for every sample of a dataset.
    Certify {
        #[arg(long)]
        regressor: PathBuf,
        #[arg(long)]
        denoiser: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated method tags.
        #[arg(long, value_delimiter = ',')]
        method: Vec<String>,
        /// Dataset tag stored in each row (defaults to the dataset's own tag).
        #[arg(long)]
        tag: Option<String>,
        #[arg(long, default_value_t = 0)]
        id_offset: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decision boundaries from a report of decision samples.
    Boundary {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Attach ID/CD/OOD labels to a report.
    Classify {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        boundary: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Quadrant metrics of a report against boundaries.
    Metrics {
        #[arg(long)]
        report: PathBuf,
        /// Boundary file; defaults to the boundaries stored in the report.
        #[arg(long)]
        boundary: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Exponential error-vs-certificate fit with a percentile band.
    FitError {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        band_percentile: Option<f64>,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole pipeline from a config into `out_dir`, reusing
    /// finished stages.
    Report {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the certificate presets and their (α, β, γ) toggles.
    Methods,
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

struct Overrides(toml::Table);

impl Overrides {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut t = toml::Table::new();
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            t.insert(k.trim().to_owned(), parse_value(v.trim()));
        }
        Ok(Self(t))
    }

    fn put<V: Into<toml::Value>>(&mut self, key: &str, v: Option<V>) {
        if let Some(v) = v {
            self.0.insert(key.to_owned(), v.into());
        }
    }

    fn load(self, common: &Common) -> Result<ExperimentConfig, CliError> {
        config::load(common.config.as_deref(), self.0)
    }
}

fn int(v: Option<impl Into<u64>>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x.into() as i64))
}

fn usize_val(v: Option<usize>) -> Option<toml::Value> {
    int(v.map(|x| x as u64))
}

fn methods_table() {
    println!("{:<8} {:>5} {:>5} {:>5} {:>5}", "method", "alpha", "beta", "gamma", "sign");
    println!("{:<8} {:>5} {:>5} {:>5} {:>5}", Method::Jlbc.name(), "-", "-", "-", Method::Jlbc.sign());
    for p in CertificateMethod::presets(2.0) {
        let b = |x: bool| u8::from(x);
        println!("{:<8} {:>5} {:>5} {:>5} {:>5}", p.tag.name(), b(p.alpha), b(p.beta), b(p.gamma), p.tag.sign());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen {
            family,
            dist,
            n,
            desk: _,
            paper,
            seed,
            out,
            common,
        } => {
            let mut o = Overrides::new(&common)?;
            let fam = match family {
                FamilyArg::Wave => Family::Wave,
                FamilyArg::ToyBimodal => Family::ToyBimodal,
                FamilyArg::ToyPiecewiseSine => Family::ToyPiecewiseSine,
                FamilyArg::Gaussian => Family::Gaussian,
            };
            o.put("dataset", Some(toml::Value::try_from(fam).map_err(|e| CliError::Other(e.to_string()))?));
            if paper {
                o.put("scale", Some("paper"));
            }
            o.put("seed", int(seed));
            let cfg = o.load(&common)?;
            let split = match dist {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let n = n.unwrap_or(match split {
                Split::Train => cfg.n_train,
                Split::Test => cfg.n_test,
            });
            commands::gen(&cfg, split, n, cfg.seed, &out)?;
        }
        Command::Train {
            kind,
            data,
            out,
            epochs,
            seed,
            common,
        } => {
            let mut o = Overrides::new(&common)?;
            let key = match kind {
                KindArg::Regressor => "regressor_epochs",
                KindArg::Denoiser => "denoiser_epochs",
            };
            o.put(key, usize_val(epochs));
            o.put("seed", int(seed));
            let cfg = o.load(&common)?;
            match kind {
                KindArg::Regressor => commands::train_regressor_cmd(&cfg, &data, &out)?,
                KindArg::Denoiser => commands::train_denoiser_cmd(&cfg, &data, &out)?,
            };
        }
        Command::Certify {
            regressor,
            denoiser,
            data,
            method,
            tag,
            id_offset,
            steps,
            probes,
            seed,
            out,
            common,
        } => {
            let mut o = Overrides::new(&common)?;
            if !method.is_empty() {
                o.put("methods", Some(toml::Value::Array(method.into_iter().map(toml::Value::String).collect())));
            }
            o.put("steps", usize_val(steps));
            o.put("probes", usize_val(probes));
            o.put("seed", int(seed));
            let cfg = o.load(&common)?;
            let inp = CertifyInputs {
                regressor: &regressor,
                denoiser: &denoiser,
                data: &data,
                tag,
                id_offset,
            };
            commands::certify_cmd(&cfg, &inp, &out)?;
        }
        Command::Boundary {
            report,
            alpha,
            beta,
            out,
            common,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("alpha", alpha);
            o.put("beta", beta);
            let cfg = o.load(&common)?;
            commands::boundary_cmd(&cfg, &report, &out)?;
        }
        Command::Classify { report, boundary, out } => {
            commands::classify_cmd(&report, &boundary, &out)?;
        }
        Command::Metrics { report, boundary, out } => {
            for m in commands::metrics_cmd(&report, boundary.as_deref(), &out)? {
                println!(
                    "{} {}: ACC {:.3} FPR {:.3} FNR {:.3} FDR {:.3}",
                    m.dataset, m.method, m.acc, m.fpr, m.fnr, m.fdr
                );
            }
        }
        Command::FitError {
            report,
            band_percentile,
            out,
            common,
        } => {
            let mut o = Overrides::new(&common)?;
            o.put("band_percentile", band_percentile);
            let cfg = o.load(&common)?;
            commands::fit_error_cmd(&cfg, &report, &out)?;
        }
        Command::Report { out_dir, seed, common } => {
            let mut o = Overrides::new(&common)?;
            o.put("out_dir", out_dir.map(|p| p.display().to_string()));
            o.put("seed", int(seed));
            let cfg = o.load(&common)?;
            let r = commands::report_cmd(&cfg)?;
            for m in r.metrics.values() {
                println!(
                    "{} {}: ACC {:.3} FPR {:.3} FNR {:.3} FDR {:.3}",
                    m.dataset, m.method, m.acc, m.fpr, m.fnr, m.fdr
                );
            }
        }
        Command::Methods => methods_table(),
    }
    Ok(())
}

fn init_workers() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("OODC_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Config(format!("OODC_WORKERS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match init_workers().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
