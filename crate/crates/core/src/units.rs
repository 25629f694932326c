//! Physical constants and unit conversions.
//!
//! Internally every frequency is angular (rad/us) and every time is in
//! microseconds. Files exchange ordinary frequency in MHz.

use std::f64::consts::PI;

/// Vacuum permeability over 4 pi, T m / A.
pub const MU0_OVER_4PI: f64 = 1.0e-7;
/// Reduced Planck constant, J s.
pub const HBAR: f64 = 1.0546e-34;
/// Proton gyromagnetic ratio, rad s^-1 T^-1.
pub const GAMMA_PROTON: f64 = 2.675e8;
/// Proton gyromagnetic ratio over 2 pi, MHz per gauss.
pub const GAMMA_PROTON_MHZ_PER_GAUSS: f64 = 4.25774e-3;
/// Electron (g = 2) gyromagnetic ratio, rad us^-1 T^-1.
pub const GAMMA_ELECTRON_RAD_PER_US_T: f64 = 1.760_859e5;
/// g = 2 electron-electron dipolar coupling constant, MHz nm^3.
pub const DIPOLAR_CONSTANT_MHZ_NM3: f64 = 52.04;
/// Magic angle (sensor axis relative to surface normal) in degrees.
pub const MAGIC_ANGLE_DEG: f64 = 54.7;
/// Proton density of typical immersion oil, m^-3.
pub const OIL_PROTON_DENSITY: f64 = 6.0e28;

/// MHz (ordinary) to rad/us (angular).
#[inline]
pub fn mhz_to_rad_per_us(f: f64) -> f64 {
    2.0 * PI * f
}

/// rad/us (angular) to MHz (ordinary).
#[inline]
pub fn rad_per_us_to_mhz(w: f64) -> f64 {
    w / (2.0 * PI)
}

/// Two-sided PSD in rad^2/us (per rad/us) to MHz^2/MHz (per MHz).
///
/// With this scaling the integral over ordinary frequency of the converted
/// density equals the coupling variance expressed in MHz^2.
#[inline]
pub fn psd_to_mhz(s: f64) -> f64 {
    s / (2.0 * PI)
}

#[inline]
pub fn psd_from_mhz(s: f64) -> f64 {
    s * 2.0 * PI
}
