//! Pulse-sequence timing, dynamical-decoupling filter functions and the
//! forward decay exponent `chi(t)`.
//!
//! With toggling function `s(t')` the filter is
//! `F(omega t) = omega^2 |integral_0^t s(t') exp(i omega t') dt'|^2`, and
//! under the two-sided spectral convention of [`crate::noise_model`]
//!
//! ```text
//! chi(t) = integral_0^inf S(omega) F(omega t) / omega^2 d omega,   C = exp(-chi)
//! ```
//!
//! Pulses are ideal and instantaneous.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise_model::NoiseSpectrumModel;
use crate::quadrature::{integrate_breakpoints, QuadOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SequenceKind {
    Ramsey,
    /// Carr-Purcell-Meiboom-Gill; Hahn echo is `Cpmg { n_pulses: 1 }`.
    Cpmg { n_pulses: u32 },
    /// Eight-pulse phase-alternating blocks; timing identical to CPMG(8m).
    Xy8 { repeats: u32 },
}

impl SequenceKind {
    pub fn n_pulses(&self) -> u32 {
        match *self {
            SequenceKind::Ramsey => 0,
            SequenceKind::Cpmg { n_pulses } => n_pulses,
            SequenceKind::Xy8 { repeats } => 8 * repeats,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SequenceKind::Ramsey => "Ramsey",
            SequenceKind::Cpmg { .. } => "CPMG",
            SequenceKind::Xy8 { .. } => "XY8",
        }
    }

    /// Rebuild a kind from a file label and pulse count.
    pub fn from_label(label: &str, n_pulses: u32) -> Result<Self> {
        match label.to_ascii_uppercase().as_str() {
            "RAMSEY" | "FID" if n_pulses == 0 => Ok(SequenceKind::Ramsey),
            "CPMG" | "HAHN" if n_pulses >= 1 => Ok(SequenceKind::Cpmg { n_pulses }),
            "XY8" if n_pulses >= 8 && n_pulses % 8 == 0 => Ok(SequenceKind::Xy8 {
                repeats: n_pulses / 8,
            }),
            _ => Err(Error::InvalidParameter(format!(
                "unknown sequence `{label}` with {n_pulses} pulses"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    /// Total free-evolution time, us.
    pub total_time: f64,
}

impl PulseSequence {
    pub fn new(kind: SequenceKind, total_time: f64) -> Result<Self> {
        if !(total_time.is_finite() && total_time > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "total time must be > 0, got {total_time}"
            )));
        }
        match kind {
            SequenceKind::Cpmg { n_pulses: 0 } | SequenceKind::Xy8 { repeats: 0 } => {
                return Err(Error::InvalidParameter(
                    "CPMG needs >= 1 pulse and XY8 >= 1 repeat".into(),
                ))
            }
            _ => {}
        }
        Ok(Self { kind, total_time })
    }

    pub fn ramsey(t: f64) -> Result<Self> {
        Self::new(SequenceKind::Ramsey, t)
    }

    pub fn hahn(t: f64) -> Result<Self> {
        Self::cpmg(1, t)
    }

    pub fn cpmg(n_pulses: u32, t: f64) -> Result<Self> {
        Self::new(SequenceKind::Cpmg { n_pulses }, t)
    }

    pub fn xy8(repeats: u32, t: f64) -> Result<Self> {
        Self::new(SequenceKind::Xy8 { repeats }, t)
    }

    pub fn n_pulses(&self) -> u32 {
        self.kind.n_pulses()
    }

    /// Pi-pulse times `t (2j - 1) / (2N)`, j = 1..N.
    pub fn pulse_times(&self) -> Vec<f64> {
        let n = self.n_pulses();
        let t = self.total_time;
        (1..=n)
            .map(|j| t * (2 * j - 1) as f64 / (2 * n) as f64)
            .collect()
    }

    /// Centre of the first filter passband, `pi N / t` (None for Ramsey).
    pub fn probe_frequency(&self) -> Option<f64> {
        match self.n_pulses() {
            0 => None,
            n => Some(PI * n as f64 / self.total_time),
        }
    }

    /// Smallest spacing between consecutive pulse or window edges.
    pub fn min_interval(&self) -> f64 {
        match self.n_pulses() {
            0 => self.total_time,
            n => self.total_time / (2 * n) as f64,
        }
    }

    /// `(start, end, sign)` for each constant-sign toggling interval.
    pub fn intervals(&self) -> Vec<(f64, f64, f64)> {
        let mut edges = Vec::with_capacity(self.n_pulses() as usize + 2);
        edges.push(0.0);
        edges.extend(self.pulse_times());
        edges.push(self.total_time);
        edges
            .windows(2)
            .enumerate()
            .map(|(k, w)| (w[0], w[1], if k % 2 == 0 { 1.0 } else { -1.0 }))
            .collect()
    }

    /// Jump amplitudes `c_j` at times `t_j` such that
    /// `F(omega t) = |sum_j c_j exp(i omega t_j)|^2`.
    pub(crate) fn jumps(&self) -> Vec<(f64, f64)> {
        let ivs = self.intervals();
        let mut out = Vec::with_capacity(ivs.len() + 1);
        out.push((0.0, -ivs[0].2));
        for w in ivs.windows(2) {
            out.push((w[0].1, w[0].2 - w[1].2));
        }
        let last = ivs[ivs.len() - 1];
        out.push((last.1, last.2));
        out
    }
}

/// Filter value at one frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterEvaluation {
    pub omega: f64,
    pub value: f64,
}

/// Sign of the accumulated phase at `time`: `(-1)^(pulses strictly before time)`.
pub fn toggling_function(seq: &PulseSequence, time: f64) -> Result<f64> {
    if !(time >= 0.0 && time <= seq.total_time) {
        return Err(Error::TimeOutOfWindow {
            time,
            total: seq.total_time,
        });
    }
    let passed = seq.pulse_times().iter().filter(|&&p| p < time).count();
    Ok(if passed % 2 == 0 { 1.0 } else { -1.0 })
}

/// `F(omega t)` by exact integration over each toggling interval.
///
/// Each interval contributes `2 i s_k sin(omega L_k / 2) exp(i omega m_k)`
/// (length `L_k`, midpoint `m_k`), so no quadrature is involved.
pub fn filter_numeric(seq: &PulseSequence, omega: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (a, b, s) in seq.intervals() {
        let amp = s * (0.5 * omega * (b - a)).sin();
        let phase = 0.5 * omega * (a + b);
        re += amp * phase.cos();
        im += amp * phase.sin();
    }
    4.0 * (re * re + im * im)
}

/// Closed-form CPMG / XY8 filter.
///
/// ```text
/// N even: F = 16 sin^4(wt/4N) sin^2(wt/2) / cos^2(wt/2N)
/// N odd:  F = 16 sin^4(wt/4N) cos^2(wt/2) / cos^2(wt/2N)
/// ```
///
/// At the removable singularities `wt = (2m+1) N pi` both ratios reduce to
/// `sin^2(N u) / sin^2(u)` with `u = wt/2N - pi/2`, which is evaluated by
/// its series there.
pub fn filter_closed_form(seq: &PulseSequence, omega: f64) -> Result<f64> {
    let n = seq.n_pulses();
    if n == 0 {
        return Err(Error::InvalidParameter(
            "closed-form filter is defined for CPMG and XY8 only".into(),
        ));
    }
    Ok(cpmg_filter(n, omega * seq.total_time))
}

#[inline]
pub(crate) fn cpmg_filter(n: u32, x: f64) -> f64 {
    let nf = n as f64;
    let q = (x / (4.0 * nf)).sin();
    let envelope = 16.0 * q * q * q * q;
    // distance of x/2N from the nearest pole pi/2 + m pi
    let u = x / (2.0 * nf) - 0.5 * PI;
    let u_red = u - PI * (u / PI).round();
    let ratio_sq = if (nf * u_red).abs() < 1e-4 {
        // sin(N u)/sin(u) = +-N (1 - (N^2 - 1) u^2 / 6 + O(u^4))
        let r = nf * (1.0 - (nf * nf - 1.0) * u_red * u_red / 6.0);
        r * r
    } else {
        let den = (x / (2.0 * nf)).cos();
        let num = if n % 2 == 0 {
            (0.5 * x).sin()
        } else {
            (0.5 * x).cos()
        };
        (num * num) / (den * den)
    };
    envelope * ratio_sq
}

#[inline]
fn filter_fast(seq: &PulseSequence, omega: f64) -> f64 {
    match seq.n_pulses() {
        0 => {
            let s = (0.5 * omega * seq.total_time).sin();
            4.0 * s * s
        }
        n => cpmg_filter(n, omega * seq.total_time),
    }
}

/// Quantities a spectral density must supply for [`filter_integral`].
pub trait SpectralWeight {
    fn density(&self, omega: f64) -> f64;
    /// `integral_{omega}^{inf} density(w) / w^2 dw`.
    fn inverse_square_moment_above(&self, omega: f64) -> f64;
    /// `(frequency, scale)` pairs where the density changes character.
    fn features(&self) -> Vec<(f64, f64)> {
        Vec::new()
    }
    /// Frequency above which the density is smooth on the scale of the
    /// filter oscillations.
    fn smooth_above(&self) -> f64 {
        0.0
    }
    /// True when the integral diverges for a sequence with net area (Ramsey).
    fn singular_at_zero(&self) -> bool {
        false
    }
}

impl SpectralWeight for NoiseSpectrumModel {
    fn density(&self, omega: f64) -> f64 {
        NoiseSpectrumModel::density(self, omega)
    }
    fn inverse_square_moment_above(&self, omega: f64) -> f64 {
        NoiseSpectrumModel::inverse_square_moment_above(self, omega)
    }
    fn features(&self) -> Vec<(f64, f64)> {
        NoiseSpectrumModel::features(self)
    }
    fn smooth_above(&self) -> f64 {
        self.line_upper_edge()
    }
    fn singular_at_zero(&self) -> bool {
        ramsey_divergent(self)
    }
}

/// Power laws with exponent >= 1 are not integrable against the Ramsey
/// filter, which tends to `t^2 omega^2` at low frequency.
fn ramsey_divergent(model: &NoiseSpectrumModel) -> bool {
    match model {
        NoiseSpectrumModel::PowerLaw {
            amplitude,
            exponent,
        } => *amplitude > 0.0 && *exponent >= 1.0,
        NoiseSpectrumModel::Sum(terms) => terms.iter().any(ramsey_divergent),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChiOptions {
    pub rel_tol: f64,
    pub max_subdivisions: usize,
    /// Oscillatory region extends over this many fundamental periods of the
    /// pulse grid before the asymptotic tail takes over.
    pub tail_periods: u32,
}

impl Default for ChiOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-5,
            max_subdivisions: 50_000,
            tail_periods: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiEstimate {
    pub value: f64,
    pub abs_error: f64,
    pub evaluations: usize,
}

/// `integral_0^inf W(omega) F(omega t) / omega^2 d omega`.
///
/// The range `[0, Omega]` is split at every half-period `pi/t` of the
/// filter's fastest oscillation (so each panel contains at most one comb
/// lobe edge) plus the weight's own features, and integrated adaptively.
/// `Omega` is a multiple of the pulse-grid fundamental `2 pi / u`, with `u`
/// the half inter-pulse spacing, so every cross term `cos(omega d_jk)` of
/// `F = sum_jk c_j c_k cos(omega d_jk)` equals 1 there. Integrating by parts
/// then gives the tail
///
/// ```text
/// sum_j c_j^2 G(Omega) - g'(Omega) sum_{j != k} c_j c_k / d_jk^2 + O(g''' / d^4)
/// ```
///
/// with `g = W/omega^2` and `G(Omega) = integral_Omega^inf g`.
pub fn filter_integral<W: SpectralWeight + ?Sized>(
    weight: &W,
    seq: &PulseSequence,
    opts: &ChiOptions,
) -> Result<ChiEstimate> {
    let t = seq.total_time;
    let n = seq.n_pulses();
    if n == 0 && weight.singular_at_zero() {
        // Ramsey has F/w^2 -> t^2 at w -> 0; a 1/w^e density with e >= 1 diverges.
        return Err(Error::QuadratureFailure {
            value: f64::INFINITY,
            achieved: f64::INFINITY,
        });
    }
    let u = seq.min_interval();
    let fundamental = 2.0 * PI / u;
    let half_period = PI / t;

    let mut m = opts.tail_periods.max(1) as f64;
    let edge = weight.smooth_above();
    if edge > m * fundamental {
        m = (edge / fundamental).ceil();
    }
    let omega_max = m * fundamental;
    let n_panels = (omega_max / half_period).round() as usize;

    let mut points: Vec<f64> = (0..=n_panels).map(|k| k as f64 * half_period).collect();
    for (f0, scale) in weight.features() {
        for mult in [-8.0, -4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0, 8.0] {
            let p = f0 + mult * scale;
            if p > 0.0 && p < omega_max {
                points.push(p);
            }
        }
        for frac in [0.1, 0.3, 3.0] {
            let p = f0 * frac;
            if p > 0.0 && p < omega_max {
                points.push(p);
            }
        }
    }
    points.sort_by(f64::total_cmp);
    points.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1e-300));

    let integrand = |w: f64| {
        if w <= 0.0 {
            return 0.0;
        }
        weight.density(w) * filter_fast(seq, w) / (w * w)
    };

    // Tail.
    let jumps = seq.jumps();
    let mean_filter: f64 = jumps.iter().map(|(_, c)| c * c).sum();
    let mut cross = 0.0;
    for (i, &(ti, ci)) in jumps.iter().enumerate() {
        for &(tj, cj) in &jumps[i + 1..] {
            let d = tj - ti;
            cross += 2.0 * ci * cj / (d * d);
        }
    }
    let g = |w: f64| weight.density(w) / (w * w);
    let h = 1e-4 * omega_max;
    let g_prime = (g(omega_max + h) - g(omega_max - h)) / (2.0 * h);
    let tail_main = mean_filter * weight.inverse_square_moment_above(omega_max);
    let tail_corr = -g_prime * cross;
    let tail = tail_main + tail_corr;
    let tail_err = tail_corr.abs() * (2.0 / (omega_max * u)).powi(2) + 1e-12 * tail_main.abs();

    let quad_opts = QuadOptions {
        abs_tol: 0.0,
        rel_tol: 0.25 * opts.rel_tol,
        max_subdivisions: opts.max_subdivisions,
    };
    let body = integrate_breakpoints(&integrand, &points, &quad_opts);
    let value = body.value + tail;
    let abs_error = body.abs_error + tail_err;
    if !value.is_finite() || abs_error > opts.rel_tol * value.abs().max(f64::MIN_POSITIVE) {
        if !(value == 0.0 && abs_error == 0.0) {
            return Err(Error::QuadratureFailure {
                value,
                achieved: abs_error,
            });
        }
    }
    Ok(ChiEstimate {
        value,
        abs_error,
        evaluations: body.evaluations,
    })
}

/// Decay exponent `chi(t)` for `model` under `seq`.
pub fn chi_exact(model: &NoiseSpectrumModel, seq: &PulseSequence) -> Result<f64> {
    chi_exact_with(model, seq, &ChiOptions::default()).map(|c| c.value)
}

pub fn chi_exact_with(
    model: &NoiseSpectrumModel,
    seq: &PulseSequence,
    opts: &ChiOptions,
) -> Result<ChiEstimate> {
    model.validate()?;
    filter_integral(model, seq, opts)
}

/// Coherence `exp(-chi)`.
pub fn coherence_analytic(model: &NoiseSpectrumModel, seq: &PulseSequence) -> Result<f64> {
    chi_exact(model, seq).map(|chi| (-chi).exp())
}
