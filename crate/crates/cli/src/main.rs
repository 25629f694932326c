use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use nvnoise::bath::{synthesize_dataset, MeasurementPlan, SyntheticEnvSpec};
use nvnoise::config::AnalysisConfig;
use nvnoise::dataset::{ingest_dataset, write_dataset, NvDataset};
use nvnoise::decomposition::{fit_decay_with, SpectrumEstimate};
use nvnoise::depth::{depth_from_brms, detect_nmr_feature, NmrOptions};
use nvnoise::fitting::{
    confidence_band, confidence_band_bootstrap, fit_depth_scaling, fit_spectrum_model, global_fit,
    DepthPoint, SpectralFitOptions, SpectralModelKind,
};
use nvnoise::pipeline::{dataset_nmr_spectrum, dataset_spectrum, run_pipeline};
use nvnoise::plots::emit_plots;

/// Noise spectroscopy of shallow spin sensors.
#[derive(Debug, Parser)]
#[command(name = "nvnoise", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Analysis configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for synthesis and bootstrap resampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Use Monte-Carlo bath trajectories instead of quadrature in `synth`.
    #[arg(long, global = true)]
    mc_oracle: bool,
    /// Bootstrap confidence bands instead of linearised ones.
    #[arg(long, global = true)]
    bootstrap: bool,
    /// Embed a generation timestamp in SVG plots.
    #[arg(long, global = true)]
    stamp: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    Synth {
        /// Ensemble description (JSON); defaults to the reference ensemble.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Measurement plan (JSON).
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Stretched-exponential fits of every decay curve (XY8 scans are skipped).
    FitDecay { datasets: Vec<PathBuf> },
    /// Reconstruct the noise spectrum of a dataset.
    Spectrum {
        dataset: PathBuf,
        /// Reconstruct from the XY8 scans instead of the decay curves.
        #[arg(long)]
        nmr: bool,
    },
    /// Fit spectral models to a spectrum estimate.
    FitSpectrum {
        spectrum: PathBuf,
        /// single_lorentzian, power_law, double_lorentzian or all.
        #[arg(long, default_value = "all")]
        model: String,
    },
    /// Joint fit with shared correlation times; arguments are `id=path` or
    /// paths whose file stem is used as id.
    GlobalFit { spectra: Vec<String> },
    /// Sensor depth from the proton NMR feature of a spectrum estimate.
    Depth {
        spectrum: PathBuf,
        #[arg(long, default_value_t = 454.0)]
        field: f64,
        /// Proton density, m^-3; defaults to the configured value.
        #[arg(long)]
        density: Option<f64>,
    },
    /// Fit a / d^n to a JSON list of depth points.
    DepthScaling { points: PathBuf },
    /// Run the full pipeline and write report.json plus plots.
    Report { datasets: Vec<PathBuf> },
}

struct Outcome {
    /// `Null` when the command already wrote its files.
    json: Value,
    out: Option<PathBuf>,
    name: String,
    partial: bool,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_datasets(paths: &[PathBuf], cfg: &AnalysisConfig) -> Result<Vec<NvDataset>> {
    if paths.is_empty() {
        bail!("no datasets given");
    }
    paths
        .iter()
        .map(|p| ingest_dataset(p, cfg.default_sigma).with_context(|| format!("ingesting {}", p.display())))
        .collect()
}

fn write_out(out: &Option<PathBuf>, name: &str, json: &Value) -> Result<()> {
    if json.is_null() {
        return Ok(());
    }
    let text = serde_json::to_string_pretty(json)? + "\n";
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(format!("{name}.json"));
            std::fs::write(&path, text)?;
            log::info!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<Outcome> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => AnalysisConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => AnalysisConfig::default(),
    };
    if g.bootstrap {
        cfg.bootstrap.enabled = true;
    }
    if let Some(s) = g.seed {
        cfg.bootstrap.seed = s;
    }
    let out = g.out.clone().or_else(|| cfg.output_dir.clone().map(PathBuf::from));
    let outcome = |json: Value, name: &str, partial: bool| Outcome {
        json,
        out: out.clone(),
        name: name.to_string(),
        partial,
    };
    match cli.command {
        Command::Synth { spec, plan } => {
            let spec: SyntheticEnvSpec = match spec {
                Some(p) => read_json(&p)?,
                None => SyntheticEnvSpec::reference(),
            };
            let mut plan: MeasurementPlan = match plan {
                Some(p) => read_json(&p)?,
                None => MeasurementPlan::default(),
            };
            if let Some(s) = g.seed {
                plan.seed = s;
            }
            if g.mc_oracle {
                plan.monte_carlo = true;
                plan.n_traj = cfg.monte_carlo.n_traj;
            }
            let datasets = synthesize_dataset(&spec, &plan)?;
            match &out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    for d in &datasets {
                        write_dataset(d, &dir.join(format!("{}.json", d.id)))?;
                    }
                    Ok(outcome(Value::Null, "datasets", false))
                }
                None => Ok(outcome(serde_json::to_value(&datasets)?, "datasets", false)),
            }
        }
        Command::FitDecay { datasets } => {
            let datasets = load_datasets(&datasets, &cfg)?;
            let mut partial = false;
            let mut rows = Vec::new();
            for d in &datasets {
                for c in d.decay_curves() {
                    let entry = match fit_decay_with(c, &cfg.decay_bounds) {
                        Ok(f) => serde_json::json!({"dataset": d.id, "status": "ok", "fit": f}),
                        Err(e) => {
                            partial = true;
                            serde_json::json!({
                                "dataset": d.id, "n_pulses": c.n_pulses, "sequence": c.sequence,
                                "status": "failed", "error": e.tag(), "message": e.to_string()
                            })
                        }
                    };
                    rows.push(entry);
                }
            }
            Ok(outcome(Value::Array(rows), "decay_fits", partial))
        }
        Command::Spectrum { dataset, nmr } => {
            let d = ingest_dataset(&dataset, cfg.default_sigma)?;
            let est = if nmr {
                dataset_nmr_spectrum(&d, &cfg)?
            } else {
                dataset_spectrum(&d, &cfg)?
            };
            let prefix = if nmr { "nmr_spectrum" } else { "spectrum" };
            Ok(outcome(serde_json::to_value(&est)?, &format!("{prefix}_{}", d.id), false))
        }
        Command::FitSpectrum { spectrum, model } => {
            let est: SpectrumEstimate = read_json(&spectrum)?;
            let kinds = if model == "all" {
                SpectralModelKind::ALL.to_vec()
            } else {
                vec![SpectralModelKind::from_label(&model)?]
            };
            let omegas = est.omegas();
            let mut partial = false;
            let mut rows = Vec::new();
            for k in kinds {
                match fit_spectrum_model(&est, k, &SpectralFitOptions::default()) {
                    Ok(f) => {
                        let band = if cfg.bootstrap.enabled {
                            confidence_band_bootstrap(&f, &est, &omegas, cfg.bootstrap.replicas, cfg.bootstrap.seed)
                        } else {
                            confidence_band(&f, &omegas)
                        };
                        let band: Vec<Value> = match band {
                            Ok(b) => b
                                .iter()
                                .map(|p| {
                                    serde_json::json!({
                                        "frequency_mhz": p.omega / (2.0 * std::f64::consts::PI),
                                        "psd_mhz": nvnoise::units::psd_to_mhz(p.value),
                                        "lower_mhz": nvnoise::units::psd_to_mhz(p.lower),
                                        "upper_mhz": nvnoise::units::psd_to_mhz(p.upper),
                                    })
                                })
                                .collect(),
                            Err(e) => {
                                log::warn!("{}: {e}", k.label());
                                Vec::new()
                            }
                        };
                        rows.push(serde_json::json!({"status": "ok", "fit": f, "band": band}));
                    }
                    Err(e) => {
                        partial = true;
                        rows.push(serde_json::json!({
                            "status": "failed", "model": k.label(), "error": e.tag(), "message": e.to_string()
                        }));
                    }
                }
            }
            Ok(outcome(Value::Array(rows), "spectral_fits", partial))
        }
        Command::GlobalFit { spectra } => {
            let mut estimates = Vec::new();
            for arg in &spectra {
                let (id, path) = match arg.split_once('=') {
                    Some((id, p)) => (id.to_string(), PathBuf::from(p)),
                    None => {
                        let p = PathBuf::from(arg);
                        let id = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| arg.clone());
                        (id, p)
                    }
                };
                estimates.push((id, read_json::<SpectrumEstimate>(&path)?));
            }
            let g = global_fit(&estimates)?;
            Ok(outcome(serde_json::to_value(&g)?, "global_fit", false))
        }
        Command::Depth {
            spectrum,
            field,
            density,
        } => {
            let est: SpectrumEstimate = read_json(&spectrum)?;
            let opts = NmrOptions {
                window: cfg.nmr_window,
                min_significance: cfg.nmr_min_significance,
            };
            let feature = detect_nmr_feature(&est, field, &opts)?;
            let depth = depth_from_brms(&feature, density.unwrap_or(cfg.proton_density_m3))?;
            Ok(outcome(serde_json::json!({"nmr": feature, "depth": depth}), "depth", false))
        }
        Command::DepthScaling { points } => {
            let pts: Vec<DepthPoint> = read_json(&points)?;
            let fit = fit_depth_scaling(&pts)?;
            Ok(outcome(serde_json::to_value(&fit)?, "depth_scaling", false))
        }
        Command::Report { datasets } => {
            let datasets = load_datasets(&datasets, &cfg)?;
            let report = run_pipeline(&datasets, &cfg)?;
            if let Some(dir) = &out {
                let stamp = g.stamp.then(|| {
                    let secs = std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    format!("unix-time {secs}")
                });
                emit_plots(&report, &datasets, &dir.join("plots"), stamp.as_deref())?;
            }
            Ok(outcome(serde_json::to_value(&report)?, "report", report.partial_failure))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).and_then(|o| write_out(&o.out, &o.name, &o.json).map(|_| o.partial)) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("warning: some stages failed; see the output for details");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
