//! Parametric noise spectral densities.
//!
//! Convention: `S(omega)` is the two-sided power spectral density of the
//! classical field `b(t)` (rad/us) coupling to the sensor, normalised so that
//!
//! ```text
//! <b(0) b(t)> = integral_{-inf}^{inf} S(omega) exp(i omega t) d omega
//! ```
//!
//! and a Lorentzian component carries total variance `<b^2> = delta^2`.
//! Every inversion constant elsewhere in the crate is derived under this
//! convention.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::{mhz_to_rad_per_us, rad_per_us_to_mhz};

/// One Lorentzian bath: coupling `delta` (rad/us) and correlation time
/// `tau_c` (us).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorentzianComponent {
    pub delta: f64,
    pub tau_c: f64,
}

impl LorentzianComponent {
    pub fn new(delta: f64, tau_c: f64) -> Result<Self> {
        let c = Self { delta, tau_c };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta.is_finite() && self.delta >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "coupling must be finite and >= 0, got {}",
                self.delta
            )));
        }
        if !(self.tau_c.is_finite() && self.tau_c > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "correlation time must be finite and > 0, got {}",
                self.tau_c
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn spectral_density(&self, omega: f64) -> f64 {
        let x = omega * self.tau_c;
        self.delta * self.delta * self.tau_c / PI / (1.0 + x * x)
    }

    /// Knee (half-power) angular frequency `1/tau_c`.
    pub fn knee(&self) -> f64 {
        1.0 / self.tau_c
    }

    /// `integral_{omega}^{inf} S(w) / w^2 dw`, evaluated without cancellation.
    fn inverse_square_moment_above(&self, omega: f64) -> f64 {
        // 1/omega - tau * arctan(1/(omega tau)) = tau * (y - arctan y), y = 1/(omega tau)
        let y = 1.0 / (omega * self.tau_c);
        let y_minus_atan = if y < 1e-2 {
            let y2 = y * y;
            y * y2 * (1.0 / 3.0 - y2 * (1.0 / 5.0 - y2 * (1.0 / 7.0 - y2 / 9.0)))
        } else {
            y - y.atan()
        };
        self.delta * self.delta * self.tau_c / PI * self.tau_c * y_minus_atan
    }
}

/// Parametric spectral density families.
///
/// `GaussianLine` models a narrow resonance (the proton NMR feature) and is
/// used by the synthetic generator; it is not one of the fitted families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ModelRecord", try_from = "ModelRecord")]
pub enum NoiseSpectrumModel {
    SingleLorentzian {
        c: LorentzianComponent,
    },
    DoubleLorentzian {
        c1: LorentzianComponent,
        c2: LorentzianComponent,
    },
    /// `amplitude / omega^exponent`; amplitude in rad^2/us * (rad/us)^exponent.
    PowerLaw { amplitude: f64, exponent: f64 },
    /// Symmetric pair of Gaussians at `+-center` (rad/us) with standard
    /// deviation `width`, carrying total two-sided variance `variance`.
    GaussianLine {
        center: f64,
        width: f64,
        variance: f64,
    },
    Sum(Vec<NoiseSpectrumModel>),
}

impl NoiseSpectrumModel {
    pub fn single(delta: f64, tau_c: f64) -> Result<Self> {
        Ok(Self::SingleLorentzian {
            c: LorentzianComponent::new(delta, tau_c)?,
        })
    }

    pub fn double(delta1: f64, tau_c1: f64, delta2: f64, tau_c2: f64) -> Result<Self> {
        Ok(Self::DoubleLorentzian {
            c1: LorentzianComponent::new(delta1, tau_c1)?,
            c2: LorentzianComponent::new(delta2, tau_c2)?,
        })
    }

    /// `1/omega` model (exponent 1).
    pub fn inverse_frequency(amplitude: f64) -> Result<Self> {
        Self::power_law(amplitude, 1.0)
    }

    pub fn power_law(amplitude: f64, exponent: f64) -> Result<Self> {
        let m = Self::PowerLaw {
            amplitude,
            exponent,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::SingleLorentzian { c } => c.validate(),
            Self::DoubleLorentzian { c1, c2 } => {
                c1.validate()?;
                c2.validate()
            }
            Self::PowerLaw {
                amplitude,
                exponent,
            } => {
                if !(amplitude.is_finite() && *amplitude >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "power-law amplitude must be >= 0, got {amplitude}"
                    )));
                }
                if !(*exponent > 0.0 && *exponent < 3.0) {
                    return Err(Error::InvalidParameter(format!(
                        "power-law exponent must lie in (0, 3), got {exponent}"
                    )));
                }
                Ok(())
            }
            Self::GaussianLine {
                center,
                width,
                variance,
            } => {
                if !(center.is_finite() && *center >= 0.0 && *width > 0.0 && *variance >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "gaussian line needs center >= 0, width > 0, variance >= 0 \
                         (got {center}, {width}, {variance})"
                    )));
                }
                Ok(())
            }
            Self::Sum(terms) => terms.iter().try_for_each(|t| t.validate()),
        }
    }

    /// Lorentzian components in declaration order (empty for other families).
    pub fn lorentzians(&self) -> Vec<LorentzianComponent> {
        match self {
            Self::SingleLorentzian { c } => vec![*c],
            Self::DoubleLorentzian { c1, c2 } => vec![*c1, *c2],
            Self::Sum(terms) => terms.iter().flat_map(|t| t.lorentzians()).collect(),
            _ => Vec::new(),
        }
    }

    /// True when the density diverges at `omega -> 0`.
    pub fn is_singular_at_zero(&self) -> bool {
        match self {
            Self::PowerLaw { amplitude, .. } => *amplitude > 0.0,
            Self::Sum(terms) => terms.iter().any(|t| t.is_singular_at_zero()),
            _ => false,
        }
    }

    /// Spectral density at `omega` without argument checks.
    pub fn density(&self, omega: f64) -> f64 {
        match self {
            Self::SingleLorentzian { c } => c.spectral_density(omega),
            Self::DoubleLorentzian { c1, c2 } => {
                c1.spectral_density(omega) + c2.spectral_density(omega)
            }
            Self::PowerLaw {
                amplitude,
                exponent,
            } => amplitude / omega.powf(*exponent),
            Self::GaussianLine {
                center,
                width,
                variance,
            } => {
                let norm = 0.5 * variance / (width * (2.0 * PI).sqrt());
                let a = (omega - center) / width;
                let b = (omega + center) / width;
                norm * ((-0.5 * a * a).exp() + (-0.5 * b * b).exp())
            }
            Self::Sum(terms) => terms.iter().map(|t| t.density(omega)).sum(),
        }
    }

    /// `integral_{omega}^{inf} S(w)/w^2 dw` for `omega > 0`.
    pub(crate) fn inverse_square_moment_above(&self, omega: f64) -> f64 {
        match self {
            Self::SingleLorentzian { c } => c.inverse_square_moment_above(omega),
            Self::DoubleLorentzian { c1, c2 } => {
                c1.inverse_square_moment_above(omega) + c2.inverse_square_moment_above(omega)
            }
            Self::PowerLaw {
                amplitude,
                exponent,
            } => amplitude / ((exponent + 1.0) * omega.powf(exponent + 1.0)),
            Self::GaussianLine {
                center,
                width,
                variance,
            } => {
                // Only reached when the line sits far below `omega`; the
                // remaining mass is bounded by the Gaussian tail.
                let z = (omega - center) / width;
                if z > 12.0 {
                    0.0
                } else {
                    // Crude but conservative: all mass above omega at 1/omega^2.
                    0.5 * variance * 0.5 * erfc_approx(z / 2f64.sqrt()) / (omega * omega)
                }
            }
            Self::Sum(terms) => terms
                .iter()
                .map(|t| t.inverse_square_moment_above(omega))
                .sum(),
        }
    }

    /// Characteristic frequencies (knees, line centres) used as quadrature
    /// breakpoints, each paired with a length scale.
    pub(crate) fn features(&self) -> Vec<(f64, f64)> {
        match self {
            Self::SingleLorentzian { c } => vec![(c.knee(), c.knee())],
            Self::DoubleLorentzian { c1, c2 } => {
                vec![(c1.knee(), c1.knee()), (c2.knee(), c2.knee())]
            }
            Self::PowerLaw { .. } => Vec::new(),
            Self::GaussianLine { center, width, .. } => vec![(*center, *width)],
            Self::Sum(terms) => terms.iter().flat_map(|t| t.features()).collect(),
        }
    }

    /// Upper edge of any narrow line in the model (rad/us).
    pub(crate) fn line_upper_edge(&self) -> f64 {
        match self {
            Self::GaussianLine { center, width, .. } => center + 12.0 * width,
            Self::Sum(terms) => terms
                .iter()
                .map(|t| t.line_upper_edge())
                .fold(0.0, f64::max),
            _ => 0.0,
        }
    }
}

fn erfc_approx(x: f64) -> f64 {
    // Abramowitz-Stegun 7.1.26, adequate for a tail bound.
    if x < 0.0 {
        return 2.0 - erfc_approx(-x);
    }
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let poly = t
        * (0.254_829_592
            + t * (-0.284_496_736 + t * (1.421_413_741 + t * (-1.453_152_027 + t * 1.061_405_429))));
    poly * (-x * x).exp()
}

/// Spectral density `S(omega)` in rad^2/us.
pub fn evaluate_spectrum(model: &NoiseSpectrumModel, omega: f64) -> Result<f64> {
    if !(omega >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "omega must be >= 0, got {omega}"
        )));
    }
    if omega == 0.0 && model.is_singular_at_zero() {
        return Err(Error::SingularFrequency);
    }
    Ok(model.density(omega))
}

/// Bath autocorrelation `delta^2 exp(-|lag|/tau_c)` in rad^2/us^2.
pub fn autocorrelation(component: &LorentzianComponent, lag: f64) -> f64 {
    component.delta * component.delta * (-lag.abs() / component.tau_c).exp()
}

/// Mean spacing (nm) of g = 2 electron spins whose pairwise dipolar flip-flop
/// rate equals `1/tau_c`, i.e. `r = (C_dip tau_c)^(1/3)`.
///
/// This is the single-pair estimate; it gives about 8 nm for an 11 us
/// correlation time.
pub fn spin_spacing_from_tau(tau_c: f64) -> Result<f64> {
    if !(tau_c > 0.0 && tau_c.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "correlation time must be > 0, got {tau_c}"
        )));
    }
    Ok((crate::units::DIPOLAR_CONSTANT_MHZ_NM3 * tau_c).cbrt())
}

/// On-disk form: `{"variant": ..., "params": {...}}` with frequencies and
/// couplings in MHz and times in us.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params")]
pub enum ModelRecord {
    SingleLorentzian {
        delta_mhz: f64,
        tau_c_us: f64,
    },
    DoubleLorentzian {
        delta1_mhz: f64,
        tau_c1_us: f64,
        delta2_mhz: f64,
        tau_c2_us: f64,
    },
    /// `psd_mhz(f) = amplitude_mhz / f^exponent` with f in MHz.
    PowerLaw { amplitude_mhz: f64, exponent: f64 },
    GaussianLine {
        center_mhz: f64,
        width_mhz: f64,
        variance_mhz2: f64,
    },
    Sum { terms: Vec<ModelRecord> },
}

impl From<NoiseSpectrumModel> for ModelRecord {
    fn from(m: NoiseSpectrumModel) -> Self {
        let two_pi = 2.0 * PI;
        match m {
            NoiseSpectrumModel::SingleLorentzian { c } => ModelRecord::SingleLorentzian {
                delta_mhz: rad_per_us_to_mhz(c.delta),
                tau_c_us: c.tau_c,
            },
            NoiseSpectrumModel::DoubleLorentzian { c1, c2 } => ModelRecord::DoubleLorentzian {
                delta1_mhz: rad_per_us_to_mhz(c1.delta),
                tau_c1_us: c1.tau_c,
                delta2_mhz: rad_per_us_to_mhz(c2.delta),
                tau_c2_us: c2.tau_c,
            },
            NoiseSpectrumModel::PowerLaw {
                amplitude,
                exponent,
            } => ModelRecord::PowerLaw {
                amplitude_mhz: amplitude / two_pi.powf(exponent + 1.0),
                exponent,
            },
            NoiseSpectrumModel::GaussianLine {
                center,
                width,
                variance,
            } => ModelRecord::GaussianLine {
                center_mhz: rad_per_us_to_mhz(center),
                width_mhz: rad_per_us_to_mhz(width),
                variance_mhz2: variance / (two_pi * two_pi),
            },
            NoiseSpectrumModel::Sum(terms) => ModelRecord::Sum {
                terms: terms.into_iter().map(Into::into).collect(),
            },
        }
    }
}

impl TryFrom<ModelRecord> for NoiseSpectrumModel {
    type Error = Error;

    fn try_from(r: ModelRecord) -> Result<Self> {
        let two_pi = 2.0 * PI;
        let m = match r {
            ModelRecord::SingleLorentzian {
                delta_mhz,
                tau_c_us,
            } => NoiseSpectrumModel::single(mhz_to_rad_per_us(delta_mhz), tau_c_us)?,
            ModelRecord::DoubleLorentzian {
                delta1_mhz,
                tau_c1_us,
                delta2_mhz,
                tau_c2_us,
            } => NoiseSpectrumModel::double(
                mhz_to_rad_per_us(delta1_mhz),
                tau_c1_us,
                mhz_to_rad_per_us(delta2_mhz),
                tau_c2_us,
            )?,
            ModelRecord::PowerLaw {
                amplitude_mhz,
                exponent,
            } => NoiseSpectrumModel::power_law(amplitude_mhz * two_pi.powf(exponent + 1.0), exponent)?,
            ModelRecord::GaussianLine {
                center_mhz,
                width_mhz,
                variance_mhz2,
            } => {
                let m = NoiseSpectrumModel::GaussianLine {
                    center: mhz_to_rad_per_us(center_mhz),
                    width: mhz_to_rad_per_us(width_mhz),
                    variance: variance_mhz2 * two_pi * two_pi,
                };
                m.validate()?;
                m
            }
            ModelRecord::Sum { terms } => NoiseSpectrumModel::Sum(
                terms
                    .into_iter()
                    .map(NoiseSpectrumModel::try_from)
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(m)
    }
}
