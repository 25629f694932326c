//! Analysis configuration, read from JSON. Every field has a default, so
//! `{}` is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decomposition::DecayBounds;
use crate::error::{Error, Result};
use crate::filter::ChiOptions;
use crate::units::OIL_PROTON_DENSITY;

/// How each curve is normalised before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeNormalization {
    /// Divide by the amplitude of the stretched-exponential fit.
    Fitted,
    /// Use the coherence as measured.
    #[default]
    Unity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMode {
    None,
    Harmonics,
    #[default]
    Filter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_traj: usize,
    pub seeds: Vec<u64>,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_traj: 10_000,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub enabled: bool,
    pub replicas: usize,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            replicas: 200,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Usable coherence range `[c_min, c_max]` for inversion.
    pub coherence_window: (f64, f64),
    pub decay_bounds: DecayBounds,
    pub amplitude_normalization: AmplitudeNormalization,
    pub correction: CorrectionMode,
    /// Refinement passes with the correction enabled.
    pub correction_passes: usize,
    pub max_harmonic: u32,
    /// Passes that re-reconstruct every dataset with its global-fit model.
    pub global_passes: usize,
    pub quadrature: ChiOptions,
    pub monte_carlo: MonteCarloConfig,
    pub bootstrap: BootstrapConfig,
    /// Broadband fits skip points within this fraction of the proton Larmor
    /// frequency.
    pub larmor_exclusion: f64,
    /// NMR search half-width, relative to the Larmor frequency.
    pub nmr_window: f64,
    pub nmr_min_significance: f64,
    pub proton_density_m3: f64,
    /// Default per-point sigma for CSV curves without one.
    pub default_sigma: f64,
    /// Points in model curves and confidence bands.
    pub band_points: usize,
    /// Also fit the double Lorentzian directly to coherence.
    pub coherence_cross_check: bool,
    /// Fixed to "MHz"; present so configs state their unit explicitly.
    pub frequency_unit: String,
    pub output_dir: Option<String>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            coherence_window: (0.05, 0.95),
            decay_bounds: DecayBounds::default(),
            amplitude_normalization: AmplitudeNormalization::Unity,
            correction: CorrectionMode::Filter,
            correction_passes: 3,
            max_harmonic: 199,
            global_passes: 2,
            quadrature: ChiOptions::default(),
            monte_carlo: MonteCarloConfig::default(),
            bootstrap: BootstrapConfig::default(),
            larmor_exclusion: 0.15,
            nmr_window: 0.15,
            nmr_min_significance: 2.0,
            proton_density_m3: OIL_PROTON_DENSITY,
            default_sigma: 0.02,
            band_points: 120,
            coherence_cross_check: false,
            frequency_unit: "MHz".into(),
            output_dir: None,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let (lo, hi) = self.coherence_window;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad(format!("coherence window must lie inside (0, 1), got ({lo}, {hi})"));
        }
        if !(self.quadrature.rel_tol > 0.0) || self.quadrature.max_subdivisions == 0 {
            return bad("quadrature tolerances must be > 0".into());
        }
        if self.monte_carlo.n_traj == 0 || self.monte_carlo.seeds.is_empty() {
            return bad("monte_carlo needs n_traj > 0 and at least one seed".into());
        }
        if self.bootstrap.replicas < 2 {
            return bad("bootstrap needs at least 2 replicas".into());
        }
        for (name, v) in [
            ("larmor_exclusion", self.larmor_exclusion),
            ("nmr_window", self.nmr_window),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        if !(self.nmr_min_significance > 0.0) {
            return bad("nmr_min_significance must be > 0".into());
        }
        if !(self.proton_density_m3 > 0.0) {
            return bad("proton_density_m3 must be > 0".into());
        }
        if !(self.default_sigma > 0.0) {
            return bad("default_sigma must be > 0".into());
        }
        if self.band_points < 2 {
            return bad("band_points must be >= 2".into());
        }
        if self.frequency_unit != "MHz" {
            return bad(format!(
                "frequency_unit is fixed to MHz, got `{}`",
                self.frequency_unit
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(crate::dataset::schema_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
