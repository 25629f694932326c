//! End-to-end analysis of one or more datasets into a [`Report`].
//!
//! Stages run in order and record their own status; a failing stage never
//! aborts the rest of the pipeline.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AmplitudeNormalization, AnalysisConfig, CorrectionMode};
use crate::dataset::NvDataset;
use crate::decomposition::{
    extract_scaling, fit_decay_with, fit_t1, reconstruct_spectrum, saturation_diagnostics,
    Correction, DecayFit, NormalizedCurve, ReconstructOptions, SaturationDiagnostics, ScalingFit,
    SpectrumEstimate, T1Fit,
};
use crate::depth::{depth_from_brms, detect_nmr_feature, proton_larmor, DepthEstimate, NmrFeature, NmrOptions};
use crate::error::{Error, Result};
use crate::fitting::{
    fit_coherence_domain, fit_depth_scaling, fit_spectrum_model, global_fit, DepthPoint,
    DepthScalingFit, GlobalFitResult, SpectralFitOptions, SpectralFitResult, SpectralModelKind,
};
use crate::noise_model::NoiseSpectrumModel;

pub const REPORT_SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    /// "ok", "failed" or "skipped".
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl StageStatus {
    pub fn ok() -> Self {
        Self {
            status: "ok".into(),
            error: None,
            message: None,
        }
    }

    pub fn failed(e: &Error) -> Self {
        Self {
            status: "failed".into(),
            error: Some(e.tag().into()),
            message: Some(e.to_string()),
        }
    }

    pub fn skipped(why: &str) -> Self {
        Self {
            status: "skipped".into(),
            error: None,
            message: Some(why.into()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.status == "failed"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveFailure {
    pub n_pulses: u32,
    pub sequence: String,
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2_lower_bound_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub id: String,
    pub nominal_depth_nm: f64,
    pub field_gauss: f64,
    pub stages: BTreeMap<String, StageStatus>,
    pub decay_fits: Vec<DecayFit>,
    pub decay_failures: Vec<CurveFailure>,
    pub scaling: Option<ScalingFit>,
    pub spectrum: Option<SpectrumEstimate>,
    /// Frequency band left out of spectral fits, MHz.
    pub fit_excluded_mhz: Option<(f64, f64)>,
    pub spectral_fits: Vec<SpectralFitResult>,
    /// Model kinds ordered by reduced chi^2, best first.
    pub model_ranking: Vec<SpectralModelKind>,
    pub coherence_cross_check: Option<SpectralFitResult>,
    pub t1: Option<T1Fit>,
    pub saturation: Option<SaturationDiagnostics>,
    pub nmr_spectrum: Option<SpectrumEstimate>,
    pub nmr: Option<NmrFeature>,
    pub depth: Option<DepthEstimate>,
    /// Depth entering the depth-scaling fits and where it came from
    /// ("measured", "nmr" or "nominal").
    pub depth_used_nm: f64,
    pub depth_used_err_nm: f64,
    pub depth_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReport {
    pub stages: BTreeMap<String, StageStatus>,
    pub notes: Vec<String>,
    pub global_fit: Option<GlobalFitResult>,
    pub depth_scaling_slow: Option<DepthScalingFit>,
    pub depth_scaling_fast: Option<DepthScalingFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: String,
    pub units: BTreeMap<String, String>,
    pub config: AnalysisConfig,
    pub datasets: Vec<DatasetReport>,
    pub ensemble: EnsembleReport,
    pub partial_failure: bool,
}

fn units() -> BTreeMap<String, String> {
    [
        ("frequency", "MHz"),
        ("psd", "MHz^2/MHz (two-sided)"),
        ("time", "us"),
        ("depth", "nm"),
        ("field", "gauss"),
        ("b_rms", "T"),
        ("proton_density", "m^-3"),
        ("delta", "MHz"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

fn record<T>(stages: &mut BTreeMap<String, StageStatus>, name: &str, r: Result<T>) -> Option<T> {
    match r {
        Ok(v) => {
            stages.insert(name.into(), StageStatus::ok());
            Some(v)
        }
        Err(e) => {
            stages.insert(name.into(), StageStatus::failed(&e));
            None
        }
    }
}

fn stage_key(kind: SpectralModelKind) -> String {
    format!("fit_{}", kind.label())
}

fn larmor_band(field_gauss: f64, frac: f64) -> Option<(f64, f64)> {
    let f = proton_larmor(field_gauss).ok()?;
    (f > 0.0).then(|| (f * (1.0 - frac), f * (1.0 + frac)))
}

fn fit_input(est: &SpectrumEstimate, band: Option<(f64, f64)>) -> SpectrumEstimate {
    match band {
        Some((lo, hi)) => est.excluding(2.0 * PI * lo, 2.0 * PI * hi),
        None => est.clone(),
    }
}

fn reconstruct_options(cfg: &AnalysisConfig, model: Option<&NoiseSpectrumModel>) -> ReconstructOptions {
    let correction = match (cfg.correction, model) {
        (CorrectionMode::Harmonics, Some(m)) => Correction::Harmonics(m.clone()),
        (CorrectionMode::Filter, Some(m)) => Correction::Filter(m.clone()),
        _ => Correction::None,
    };
    ReconstructOptions {
        c_min: cfg.coherence_window.0,
        c_max: cfg.coherence_window.1,
        correction,
        max_harmonic: cfg.max_harmonic,
        chi: cfg.quadrature,
        ..Default::default()
    }
}

fn fit_all(est: &SpectrumEstimate) -> Vec<(SpectralModelKind, Result<SpectralFitResult>)> {
    SpectralModelKind::ALL
        .into_iter()
        .map(|k| (k, fit_spectrum_model(est, k, &SpectralFitOptions::default())))
        .collect()
}

fn best_model(fits: &[(SpectralModelKind, Result<SpectralFitResult>)]) -> Option<NoiseSpectrumModel> {
    fits.iter()
        .filter_map(|(_, r)| r.as_ref().ok())
        .min_by(|a, b| a.reduced_chi2.total_cmp(&b.reduced_chi2))
        .map(|f| f.model.clone())
}

/// Inputs shared by the per-dataset and ensemble stages.
struct SpectralInputs<'a> {
    curves: Vec<NormalizedCurve<'a>>,
    band: Option<(f64, f64)>,
}

fn spectral_inputs<'a>(ds: &'a NvDataset, fits: &[DecayFit], cfg: &AnalysisConfig) -> SpectralInputs<'a> {
    let curves = ds
        .decay_curves()
        .filter(|c| c.n_pulses > 0)
        .map(|c| {
            let amplitude = match cfg.amplitude_normalization {
                AmplitudeNormalization::Unity => 1.0,
                AmplitudeNormalization::Fitted => fits
                    .iter()
                    .find(|f| f.n_pulses == c.n_pulses)
                    .map(|f| f.amplitude)
                    .unwrap_or(1.0),
            };
            NormalizedCurve { curve: c, amplitude }
        })
        .collect();
    SpectralInputs {
        curves,
        band: larmor_band(ds.field_gauss, cfg.larmor_exclusion),
    }
}

/// Reconstruct, then refine with the best-fitting model as the correction
/// iterate. Returns the final estimate and the fits to it.
fn spectrum_stage(
    inputs: &SpectralInputs<'_>,
    cfg: &AnalysisConfig,
) -> Result<(SpectrumEstimate, Vec<(SpectralModelKind, Result<SpectralFitResult>)>)> {
    let mut est = reconstruct_spectrum(&inputs.curves, &reconstruct_options(cfg, None))?;
    let mut fits = fit_all(&fit_input(&est, inputs.band));
    if cfg.correction != CorrectionMode::None {
        for _ in 0..cfg.correction_passes {
            let Some(model) = best_model(&fits) else { break };
            est = reconstruct_spectrum(&inputs.curves, &reconstruct_options(cfg, Some(&model)))?;
            fits = fit_all(&fit_input(&est, inputs.band));
        }
    }
    Ok((est, fits))
}

/// Broadband spectrum of one dataset as the pipeline reconstructs it:
/// decay fits, inversion and the configured correction passes.
pub fn dataset_spectrum(ds: &NvDataset, cfg: &AnalysisConfig) -> Result<SpectrumEstimate> {
    cfg.validate()?;
    let fits: Vec<DecayFit> = ds
        .decay_curves()
        .filter_map(|c| fit_decay_with(c, &cfg.decay_bounds).ok())
        .collect();
    spectrum_stage(&spectral_inputs(ds, &fits, cfg), cfg).map(|(est, _)| est)
}

/// Spectrum sampled by the dataset's XY8 scans.
pub fn dataset_nmr_spectrum(ds: &NvDataset, cfg: &AnalysisConfig) -> Result<SpectrumEstimate> {
    cfg.validate()?;
    if ds.nmr_curves().next().is_none() {
        return Err(Error::EmptySpectrum);
    }
    nmr_stage(ds, cfg).map(|(est, _)| est)
}

fn nmr_stage(ds: &NvDataset, cfg: &AnalysisConfig) -> Result<(SpectrumEstimate, Result<NmrFeature>)> {
    let curves: Vec<NormalizedCurve> = ds
        .nmr_curves()
        .map(|c| NormalizedCurve {
            curve: c,
            amplitude: 1.0,
        })
        .collect();
    let opts = ReconstructOptions {
        c_min: cfg.coherence_window.0,
        c_max: cfg.coherence_window.1,
        min_pulse_counts: 1,
        ..Default::default()
    };
    let est = reconstruct_spectrum(&curves, &opts)?;
    let feature = detect_nmr_feature(
        &est,
        ds.field_gauss,
        &NmrOptions {
            window: cfg.nmr_window,
            min_significance: cfg.nmr_min_significance,
        },
    );
    Ok((est, feature))
}

struct DatasetOutcome<'a> {
    report: DatasetReport,
    inputs: SpectralInputs<'a>,
    spectrum_for_fit: Option<SpectrumEstimate>,
}

fn analyze_dataset<'a>(ds: &'a NvDataset, cfg: &AnalysisConfig) -> DatasetOutcome<'a> {
    let mut stages = BTreeMap::new();

    let mut decay_fits = Vec::new();
    let mut decay_failures = Vec::new();
    for c in ds.decay_curves() {
        match fit_decay_with(c, &cfg.decay_bounds) {
            Ok(f) => decay_fits.push(f),
            Err(e) => decay_failures.push(CurveFailure {
                n_pulses: c.n_pulses,
                sequence: c.sequence.clone(),
                error: e.tag().into(),
                message: e.to_string(),
                t2_lower_bound_us: match e {
                    Error::Undecayed { t2_lower_bound } => Some(t2_lower_bound),
                    _ => None,
                },
            }),
        }
    }
    let decay_status = if decay_fits.is_empty() {
        let first = decay_failures.first();
        StageStatus {
            status: "failed".into(),
            error: Some(first.map_or("decay-fit-failed".into(), |f| f.error.clone())),
            message: Some(format!("no curve could be fitted ({} failures)", decay_failures.len())),
        }
    } else {
        StageStatus::ok()
    };
    stages.insert("decay".into(), decay_status);

    let pairs: Vec<(u32, DecayFit)> = decay_fits
        .iter()
        .filter(|f| f.n_pulses > 0)
        .map(|f| (f.n_pulses, f.clone()))
        .collect();
    let scaling = record(&mut stages, "scaling", extract_scaling(&pairs));

    let inputs = spectral_inputs(ds, &decay_fits, cfg);
    let fit_excluded_mhz = inputs.band;
    let mut spectral_fits = Vec::new();
    let mut spectrum = None;
    let mut spectrum_for_fit = None;
    match spectrum_stage(&inputs, cfg) {
        Ok((est, fits)) => {
            stages.insert("spectrum".into(), StageStatus::ok());
            for (k, r) in fits {
                if let Some(f) = record(&mut stages, &stage_key(k), r) {
                    spectral_fits.push(f);
                }
            }
            spectrum_for_fit = Some(fit_input(&est, inputs.band));
            spectrum = Some(est);
        }
        Err(e) => {
            stages.insert("spectrum".into(), StageStatus::failed(&e));
            for k in SpectralModelKind::ALL {
                stages.insert(stage_key(k), StageStatus::skipped("no spectrum"));
            }
        }
    }
    let mut ranked: Vec<&SpectralFitResult> = spectral_fits.iter().collect();
    ranked.sort_by(|a, b| a.reduced_chi2.total_cmp(&b.reduced_chi2).then(a.kind.cmp(&b.kind)));
    let model_ranking = ranked.iter().map(|f| f.kind).collect();

    let coherence_cross_check = if cfg.coherence_cross_check {
        let start = spectral_fits
            .iter()
            .find(|f| f.kind == SpectralModelKind::DoubleLorentzian);
        match start {
            Some(s) => record(
                &mut stages,
                "coherence_cross_check",
                fit_coherence_domain(&inputs.curves, s, cfg.coherence_window),
            ),
            None => {
                stages.insert(
                    "coherence_cross_check".into(),
                    StageStatus::skipped("no double-Lorentzian fit"),
                );
                None
            }
        }
    } else {
        None
    };

    let t1 = match &ds.t1 {
        Some(c) => record(&mut stages, "t1", fit_t1(c)),
        None => {
            stages.insert("t1".into(), StageStatus::skipped("no T1 curve"));
            None
        }
    };
    let saturation = match (&scaling, &t1) {
        (Some(s), Some(t)) => record(
            &mut stages,
            "saturation",
            saturation_diagnostics(s, t.t1_us, t.t1_err_us),
        ),
        _ => {
            stages.insert("saturation".into(), StageStatus::skipped("needs scaling and T1"));
            None
        }
    };

    let (mut nmr_spectrum, mut nmr, mut depth) = (None, None, None);
    if ds.nmr_curves().next().is_none() {
        stages.insert("nmr".into(), StageStatus::skipped("no XY8 curves"));
        stages.insert("depth".into(), StageStatus::skipped("no NMR feature"));
    } else {
        match nmr_stage(ds, cfg) {
            Ok((est, feature)) => {
                nmr_spectrum = Some(est);
                nmr = record(&mut stages, "nmr", feature);
            }
            Err(e) => {
                stages.insert("nmr".into(), StageStatus::failed(&e));
            }
        }
        match &nmr {
            Some(f) => depth = record(&mut stages, "depth", depth_from_brms(f, cfg.proton_density_m3)),
            None => {
                stages.insert("depth".into(), StageStatus::skipped("no NMR feature"));
            }
        }
    }

    let (depth_used_nm, depth_used_err_nm, depth_source) = match (ds.measured_depth_nm, &depth) {
        (Some(d), _) => (d, ds.measured_depth_err_nm.unwrap_or(0.0), "measured"),
        (None, Some(e)) => (e.depth_nm, e.depth_err_nm, "nmr"),
        (None, None) => (ds.nominal_depth_nm, 0.0, "nominal"),
    };

    DatasetOutcome {
        report: DatasetReport {
            id: ds.id.clone(),
            nominal_depth_nm: ds.nominal_depth_nm,
            field_gauss: ds.field_gauss,
            stages,
            decay_fits,
            decay_failures,
            scaling,
            spectrum,
            fit_excluded_mhz,
            spectral_fits,
            model_ranking,
            coherence_cross_check,
            t1,
            saturation,
            nmr_spectrum,
            nmr,
            depth,
            depth_used_nm,
            depth_used_err_nm,
            depth_source: depth_source.into(),
        },
        inputs,
        spectrum_for_fit,
    }
}

/// Global fit, refined by re-reconstructing each dataset with its own
/// global-fit model as the correction iterate.
fn global_stage(outcomes: &[DatasetOutcome<'_>], cfg: &AnalysisConfig) -> Result<GlobalFitResult> {
    let usable: Vec<(&DatasetOutcome, SpectrumEstimate)> = outcomes
        .iter()
        .filter_map(|o| o.spectrum_for_fit.clone().map(|e| (o, e)))
        .collect();
    if usable.len() < 2 {
        return Err(Error::NotGlobal(usable.len()));
    }
    let mut estimates: Vec<(String, SpectrumEstimate)> = usable
        .iter()
        .map(|(o, e)| (o.report.id.clone(), e.clone()))
        .collect();
    let mut g = global_fit(&estimates)?;
    if cfg.correction != CorrectionMode::None {
        for _ in 0..cfg.global_passes {
            let refreshed: Result<Vec<(String, SpectrumEstimate)>> = usable
                .par_iter()
                .enumerate()
                .map(|(i, (o, _))| {
                    let inputs = &o.inputs;
                    let model = g.model(i)?;
                    let est = reconstruct_spectrum(&inputs.curves, &reconstruct_options(cfg, Some(&model)))?;
                    Ok((o.report.id.clone(), fit_input(&est, inputs.band)))
                })
                .collect();
            estimates = refreshed?;
            g = global_fit(&estimates)?;
        }
    }
    Ok(g)
}

fn depth_points(reports: &[DatasetReport], g: &GlobalFitResult, slow: bool) -> Vec<DepthPoint> {
    g.datasets
        .iter()
        .filter_map(|d| {
            let r = reports.iter().find(|r| r.id == d.id)?;
            let (delta, err) = if slow {
                (d.delta1_mhz, d.delta1_err_mhz)
            } else {
                (d.delta2_mhz, d.delta2_err_mhz)
            };
            Some(DepthPoint {
                depth_nm: r.depth_used_nm,
                depth_err_nm: r.depth_used_err_nm,
                delta_mhz: delta,
                delta_err_mhz: err,
            })
        })
        .collect()
}

/// Run every stage on `datasets`. Fails only on an invalid configuration or
/// an empty input list.
pub fn run_pipeline(datasets: &[NvDataset], cfg: &AnalysisConfig) -> Result<Report> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::InvalidParameter("no datasets to analyse".into()));
    }
    let outcomes: Vec<DatasetOutcome> = datasets.par_iter().map(|d| analyze_dataset(d, cfg)).collect();

    let mut stages = BTreeMap::new();
    let mut notes = Vec::new();
    let global = match global_stage(&outcomes, cfg) {
        Ok(g) => {
            stages.insert("global_fit".into(), StageStatus::ok());
            Some(g)
        }
        Err(Error::NotGlobal(n)) => {
            let e = Error::NotGlobal(n);
            notes.push(e.to_string());
            stages.insert("global_fit".into(), StageStatus::skipped(&e.to_string()));
            None
        }
        Err(e) => {
            stages.insert("global_fit".into(), StageStatus::failed(&e));
            None
        }
    };
    let reports: Vec<DatasetReport> = outcomes.into_iter().map(|o| o.report).collect();
    let (mut slow, mut fast) = (None, None);
    match &global {
        Some(g) => {
            slow = record(
                &mut stages,
                "depth_scaling_slow",
                fit_depth_scaling(&depth_points(&reports, g, true)),
            );
            fast = record(
                &mut stages,
                "depth_scaling_fast",
                fit_depth_scaling(&depth_points(&reports, g, false)),
            );
        }
        None => {
            for k in ["depth_scaling_slow", "depth_scaling_fast"] {
                stages.insert(k.into(), StageStatus::skipped("needs a global fit"));
            }
            notes.push("not-global: depth scaling needs a global fit over >= 2 datasets".into());
        }
    }
    let partial_failure = stages.values().any(StageStatus::is_failed)
        || reports.iter().any(|r| r.stages.values().any(StageStatus::is_failed));
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION.into(),
        units: units(),
        config: cfg.clone(),
        datasets: reports,
        ensemble: EnsembleReport {
            stages,
            notes,
            global_fit: global,
            depth_scaling_slow: slow,
            depth_scaling_fast: fast,
        },
        partial_failure,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}
