//! Ornstein-Uhlenbeck bath trajectories, Monte-Carlo coherence, proton NMR
//! amplitude and the synthetic experiment generator.
//!
//! Each Lorentzian component of a spectrum is realised as a stationary OU
//! process with variance `delta^2` and correlation time `tau_c`, which has
//! exactly the autocorrelation `delta^2 exp(-|s|/tau_c)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CoherenceCurve, NvDataset, T1Curve};
use crate::error::{Error, Result};
use crate::filter::{chi_exact, PulseSequence};
use crate::noise_model::NoiseSpectrumModel;
use crate::units::{
    GAMMA_ELECTRON_RAD_PER_US_T, GAMMA_PROTON, GAMMA_PROTON_MHZ_PER_GAUSS, HBAR, MU0_OVER_4PI,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    /// rad/us
    pub delta: f64,
    /// us
    pub tau_c: f64,
    /// Integration step, us.
    pub dt: f64,
    pub seed: u64,
}

impl OuParams {
    pub fn new(delta: f64, tau_c: f64, dt: f64, seed: u64) -> Result<Self> {
        let p = Self {
            delta,
            tau_c,
            dt,
            seed,
        };
        p.validate()?;
        Ok(p)
    }

    /// Step set to `min(tau_c / 20, interval / 40)` for `seq`.
    pub fn for_sequence(delta: f64, tau_c: f64, seq: &PulseSequence, seed: u64) -> Result<Self> {
        Self::new(delta, tau_c, default_dt(tau_c, seq), seed)
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if !(self.tau_c > 0.0 && self.tau_c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tau_c must be > 0, got {}",
                self.tau_c
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("dt must be > 0".into()));
        }
        if self.dt > self.tau_c / 10.0 * (1.0 + 1e-12) {
            return Err(Error::UndersampledBath(format!(
                "dt = {} exceeds tau_c/10 = {}",
                self.dt,
                self.tau_c / 10.0
            )));
        }
        Ok(())
    }

    fn check_sequence(&self, seq: &PulseSequence) -> Result<()> {
        let limit = seq.min_interval() / 20.0;
        if self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::UndersampledBath(format!(
                "dt = {} exceeds interval/20 = {limit}",
                self.dt
            )));
        }
        Ok(())
    }
}

pub fn default_dt(tau_c: f64, seq: &PulseSequence) -> f64 {
    (tau_c / 20.0).min(seq.min_interval() / 40.0)
}

/// One OU step of length `h`: `b e^{-h/tau} + delta sqrt(1 - e^{-2h/tau}) xi`.
struct OuStep {
    decay: f64,
    kick: f64,
}

impl OuStep {
    fn new(delta: f64, tau_c: f64, h: f64) -> Self {
        let decay = (-h / tau_c).exp();
        Self {
            decay,
            kick: delta * (-(-2.0 * h / tau_c).exp_m1()).sqrt(),
        }
    }

    #[inline]
    fn advance<R: Rng>(&self, b: f64, rng: &mut R) -> f64 {
        let xi: f64 = rng.sample(StandardNormal);
        b * self.decay + self.kick * xi
    }
}

/// Sample path `b(k dt)`, k = 0..=ceil(duration/dt), from the stationary
/// distribution.
pub fn ou_path(params: &OuParams, duration: f64) -> Result<Vec<f64>> {
    params.validate()?;
    if !(duration >= 0.0) {
        return Err(Error::InvalidParameter("duration must be >= 0".into()));
    }
    let steps = (duration / params.dt).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let step = OuStep::new(params.delta, params.tau_c, params.dt);
    let mut path = Vec::with_capacity(steps + 1);
    let z: f64 = rng.sample(StandardNormal);
    let mut b = params.delta * z;
    path.push(b);
    for _ in 0..steps {
        b = step.advance(b, &mut rng);
        path.push(b);
    }
    Ok(path)
}

/// Accumulated phases `phi = integral s(t) sum_i b_i(t) dt` for `n_traj`
/// trajectories.
///
/// Every toggling interval is split into equal steps no longer than each
/// component's `dt`, so pulse times lie on the grid. Trajectory `k` draws
/// from ChaCha stream `k` under `seed`, making the result independent of
/// scheduling.
pub fn mc_phases(
    components: &[OuParams],
    seq: &PulseSequence,
    n_traj: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    for c in components {
        c.validate()?;
        c.check_sequence(seq)?;
    }
    if components.is_empty() {
        return Ok(vec![0.0; n_traj]);
    }
    let dt = components
        .iter()
        .map(|c| c.dt)
        .fold(f64::INFINITY, f64::min);
    // (length of step, number of steps, sign) per interval
    let plan: Vec<(f64, usize, f64)> = seq
        .intervals()
        .into_iter()
        .map(|(a, b, s)| {
            let m = ((b - a) / dt).ceil().max(1.0) as usize;
            ((b - a) / m as f64, m, s)
        })
        .collect();
    let steps: Vec<Vec<OuStep>> = plan
        .iter()
        .map(|&(h, _, _)| {
            components
                .iter()
                .map(|c| OuStep::new(c.delta, c.tau_c, h))
                .collect()
        })
        .collect();

    let phases = (0..n_traj)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut b: Vec<f64> = components
                .iter()
                .map(|c| {
                    let z: f64 = rng.sample(StandardNormal);
                    c.delta * z
                })
                .collect();
            let mut phi = 0.0;
            for ((h, m, s), interval_steps) in plan.iter().zip(&steps) {
                let mut acc = 0.0;
                let mut prev: f64 = b.iter().sum();
                for _ in 0..*m {
                    for (bi, st) in b.iter_mut().zip(interval_steps) {
                        *bi = st.advance(*bi, &mut rng);
                    }
                    let next: f64 = b.iter().sum();
                    acc += prev + next;
                    prev = next;
                }
                phi += s * 0.5 * h * acc;
            }
            phi
        })
        .collect();
    Ok(phases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McCoherence {
    pub coherence: f64,
    pub sigma: f64,
    pub n_traj: usize,
}

/// `C = <cos phi>` with standard error `std(cos phi) / sqrt(n_traj)`.
pub fn mc_coherence(
    components: &[OuParams],
    seq: &PulseSequence,
    n_traj: usize,
    seed: u64,
) -> Result<McCoherence> {
    if n_traj < 100 {
        return Err(Error::InvalidParameter(format!(
            "n_traj must be >= 100, got {n_traj}"
        )));
    }
    let phases = mc_phases(components, seq, n_traj, seed)?;
    let n = phases.len() as f64;
    let mean = phases.iter().map(|p| p.cos()).sum::<f64>() / n;
    let var = phases
        .iter()
        .map(|p| (p.cos() - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    Ok(McCoherence {
        coherence: mean,
        sigma: (var / n).sqrt(),
        n_traj,
    })
}

/// Sample excess kurtosis plus 3 (equals 3 for a Gaussian).
pub fn kurtosis(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = samples.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

/// RMS proton field (tesla) at a sensor `depth_nm` below a semi-infinite
/// proton layer, sensor axis and bias field at 54.7 deg to the normal:
/// `B^2 = rho (mu0 hbar gamma_H / 4 pi)^2 (5 pi / 96) / d^3`.
pub fn nmr_signal_amplitude(depth_nm: f64, proton_density: f64) -> Result<f64> {
    if !(depth_nm > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "depth must be > 0, got {depth_nm}"
        )));
    }
    if !(proton_density >= 0.0) {
        return Err(Error::InvalidParameter("proton density must be >= 0".into()));
    }
    let d = depth_nm * 1e-9;
    let k = MU0_OVER_4PI * HBAR * GAMMA_PROTON;
    Ok((proton_density * k * k * (5.0 * PI / 96.0) / (d * d * d)).sqrt())
}

/// `a / d^n` with `a` given in MHz at d = 1 nm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingLaw {
    pub amplitude_mhz: f64,
    pub exponent: f64,
}

impl CouplingLaw {
    /// Coupling at `depth_nm`, rad/us.
    pub fn delta_at(&self, depth_nm: f64) -> f64 {
        2.0 * PI * self.amplitude_mhz / depth_nm.powf(self.exponent)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtonLayer {
    pub enabled: bool,
    /// m^-3
    pub density_m3: f64,
    /// Gaussian standard deviation of the line, MHz.
    pub linewidth_mhz: f64,
}

impl Default for ProtonLayer {
    fn default() -> Self {
        Self {
            enabled: true,
            density_m3: crate::units::OIL_PROTON_DENSITY,
            linewidth_mhz: 0.02,
        }
    }
}

/// Description of a synthetic sensor ensemble. Missing JSON fields take
/// their [`SyntheticEnvSpec::reference`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticEnvSpec {
    pub depths_nm: Vec<f64>,
    /// Low-frequency (slow) component.
    pub slow: CouplingLaw,
    /// High-frequency (fast) component.
    pub fast: CouplingLaw,
    pub tau_c1_us: f64,
    pub tau_c2_us: f64,
    pub proton_layer: ProtonLayer,
    pub sigma_c: f64,
    pub sigma_t1: f64,
    /// One per depth.
    pub t1_us: Vec<f64>,
    pub field_gauss: f64,
    pub temperature_k: f64,
    pub coating: String,
}

impl Default for SyntheticEnvSpec {
    fn default() -> Self {
        Self::reference()
    }
}

impl SyntheticEnvSpec {
    /// Four-sensor ensemble at 2, 3, 4 and 20 nm with correlation times
    /// 11 us and 146 ns and coupling exponents 1.75 and 0.9.
    pub fn reference() -> Self {
        Self {
            depths_nm: vec![2.0, 3.0, 4.0, 20.0],
            slow: CouplingLaw {
                amplitude_mhz: 0.8166,
                exponent: 1.75,
            },
            fast: CouplingLaw {
                amplitude_mhz: 0.2995,
                exponent: 0.9,
            },
            tau_c1_us: 11.0,
            tau_c2_us: 0.146,
            proton_layer: ProtonLayer::default(),
            sigma_c: 0.02,
            sigma_t1: 0.03,
            t1_us: vec![430.0, 860.0, 960.0, 3000.0],
            field_gauss: 454.0,
            temperature_k: 295.0,
            coating: "none".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths_nm.is_empty() || self.depths_nm.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidParameter("depths must be > 0".into()));
        }
        if self.t1_us.len() != self.depths_nm.len() || self.t1_us.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::InvalidParameter(
                "need one positive T1 per depth".into(),
            ));
        }
        if !(self.sigma_c >= 0.0 && self.sigma_t1 >= 0.0) {
            return Err(Error::InvalidParameter("noise levels must be >= 0".into()));
        }
        for law in [self.slow, self.fast] {
            if !(0.0..=3.0).contains(&law.exponent) || !(law.amplitude_mhz >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "coupling law {law:?}: amplitude >= 0 and exponent in [0, 3] required"
                )));
            }
        }
        if !(self.tau_c1_us > 0.0 && self.tau_c2_us > 0.0) {
            return Err(Error::InvalidParameter("tau_c must be > 0".into()));
        }
        Ok(())
    }

    /// Broadband double-Lorentzian spectrum at `depth_nm`.
    pub fn broadband_model(&self, depth_nm: f64) -> Result<NoiseSpectrumModel> {
        NoiseSpectrumModel::double(
            self.slow.delta_at(depth_nm),
            self.tau_c1_us,
            self.fast.delta_at(depth_nm),
            self.tau_c2_us,
        )
    }

    /// Proton Larmor frequency, rad/us.
    pub fn larmor(&self) -> f64 {
        2.0 * PI * GAMMA_PROTON_MHZ_PER_GAUSS * self.field_gauss
    }

    /// Proton line at `depth_nm`; its two-sided variance is
    /// `(gamma_e B_rms)^2` in (rad/us)^2.
    pub fn proton_line(&self, depth_nm: f64) -> Result<Option<NoiseSpectrumModel>> {
        if !self.proton_layer.enabled || self.field_gauss <= 0.0 {
            return Ok(None);
        }
        let b = GAMMA_ELECTRON_RAD_PER_US_T
            * nmr_signal_amplitude(depth_nm, self.proton_layer.density_m3)?;
        Ok(Some(NoiseSpectrumModel::GaussianLine {
            center: self.larmor(),
            width: 2.0 * PI * self.proton_layer.linewidth_mhz,
            variance: b * b,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TimeGrid {
    /// Per curve, `points` log-spaced times between the decay exponents
    /// `chi_min` and `chi_max` of the true model, capped at `t_max_us`.
    Adaptive {
        points: usize,
        chi_min: f64,
        chi_max: f64,
        t_max_us: f64,
    },
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasurementPlan {
    /// CPMG pulse counts; 0 adds a Ramsey curve.
    pub n_values: Vec<u32>,
    pub time_grid: TimeGrid,
    /// Use Monte-Carlo trajectories instead of quadrature.
    pub monte_carlo: bool,
    pub n_traj: usize,
    /// Add an XY8 scan across the proton Larmor frequency.
    pub nmr_scan: bool,
    pub nmr_points: usize,
    /// Target peak decay exponent used to pick the XY8 repeat count.
    pub nmr_chi_target: f64,
    pub t1_points: usize,
    pub seed: u64,
}

impl Default for MeasurementPlan {
    fn default() -> Self {
        Self {
            n_values: vec![1, 2, 4, 8, 16, 32, 64],
            time_grid: TimeGrid::Adaptive {
                points: 20,
                chi_min: 0.03,
                chi_max: 3.0,
                t_max_us: 5000.0,
            },
            monte_carlo: false,
            n_traj: 2000,
            nmr_scan: true,
            nmr_points: 41,
            nmr_chi_target: 0.5,
            t1_points: 20,
            seed: 1,
        }
    }
}

impl MeasurementPlan {
    pub fn validate(&self) -> Result<()> {
        let mut ns: Vec<u32> = self.n_values.iter().copied().filter(|&n| n > 0).collect();
        ns.sort_unstable();
        ns.dedup();
        if !ns.contains(&1) || ns.len() < 4 {
            return Err(Error::InvalidParameter(
                "plan needs N = 1 and at least four distinct pulse counts".into(),
            ));
        }
        if let TimeGrid::Adaptive {
            points,
            chi_min,
            chi_max,
            t_max_us,
        } = &self.time_grid
        {
            if *points < 4 || !(*chi_min > 0.0 && chi_max > chi_min && *t_max_us > 0.0) {
                return Err(Error::InvalidParameter("bad adaptive time grid".into()));
            }
        }
        if self.monte_carlo && self.n_traj < 100 {
            return Err(Error::InvalidParameter("n_traj must be >= 100".into()));
        }
        Ok(())
    }
}

fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let (la, lb) = (a.ln(), b.ln());
    (0..n)
        .map(|i| (la + (lb - la) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Smallest time in `[lo, hi]` where `chi` reaches `target` (log bisection).
fn time_for_chi<F: Fn(f64) -> Result<f64>>(chi: &F, target: f64, lo: f64, hi: f64) -> Result<f64> {
    let (mut a, mut b) = (lo, hi);
    for _ in 0..60 {
        let m = (a * b).sqrt();
        if chi(m)? < target {
            a = m;
        } else {
            b = m;
        }
        if b / a < 1.0 + 1e-6 {
            break;
        }
    }
    Ok((a * b).sqrt())
}

fn curve_times(
    model: &NoiseSpectrumModel,
    kind: crate::filter::SequenceKind,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    match grid {
        TimeGrid::Explicit(t) => Ok(t.clone()),
        &TimeGrid::Adaptive {
            points,
            chi_min,
            chi_max,
            t_max_us,
        } => {
            let chi = |t: f64| chi_exact(model, &PulseSequence::new(kind, t)?);
            let floor = t_max_us * 1e-6;
            if chi(t_max_us)? <= chi_min {
                return Ok(log_space(t_max_us / 100.0, t_max_us, points));
            }
            let lo = time_for_chi(&chi, chi_min, floor, t_max_us)?;
            let hi = if chi(t_max_us)? <= chi_max {
                t_max_us
            } else {
                time_for_chi(&chi, chi_max, lo, t_max_us)?
            };
            Ok(log_space(lo, hi, points))
        }
    }
}

/// Noise generator for curve `curve` of sensor `sensor`: independent
/// ChaCha streams keyed by position.
fn noise_rng(seed: u64, sensor: usize, curve: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((sensor as u64) << 32) | curve as u64);
    rng
}

fn coherence_point(
    spec: &SyntheticEnvSpec,
    plan: &MeasurementPlan,
    model: &NoiseSpectrumModel,
    depth: f64,
    seq: &PulseSequence,
    stream: u64,
) -> Result<(f64, f64)> {
    // (noiseless coherence, its Monte-Carlo standard error)
    if !plan.monte_carlo {
        return Ok(((-chi_exact(model, seq)?).exp(), 0.0));
    }
    // Lorentzian parts by trajectories; any narrow line factorises exactly.
    let comps = [
        (spec.slow.delta_at(depth), spec.tau_c1_us),
        (spec.fast.delta_at(depth), spec.tau_c2_us),
    ];
    let ou: Vec<OuParams> = comps
        .iter()
        .map(|&(d, tau)| OuParams::for_sequence(d, tau, seq, plan.seed))
        .collect::<Result<_>>()?;
    let mc = mc_coherence(&ou, seq, plan.n_traj, plan.seed ^ stream)?;
    let line_chi = match model {
        NoiseSpectrumModel::Sum(terms) => terms
            .iter()
            .filter(|t| matches!(t, NoiseSpectrumModel::GaussianLine { .. }))
            .map(|t| chi_exact(t, seq))
            .sum::<Result<f64>>()?,
        _ => 0.0,
    };
    let damp = (-line_chi).exp();
    Ok((mc.coherence * damp, mc.sigma * damp))
}

fn noisy_curve(
    spec: &SyntheticEnvSpec,
    plan: &MeasurementPlan,
    model: &NoiseSpectrumModel,
    depth: f64,
    kind: crate::filter::SequenceKind,
    times: Vec<f64>,
    rng: &mut ChaCha8Rng,
    stream: u64,
) -> Result<CoherenceCurve> {
    let mut coherence = Vec::with_capacity(times.len());
    let mut sigma = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let seq = PulseSequence::new(kind, t)?;
        let (clean, mc_sigma) =
            coherence_point(spec, plan, model, depth, &seq, stream << 16 | i as u64)?;
        let xi: f64 = rng.sample(StandardNormal);
        let c = clean + spec.sigma_c * xi;
        coherence.push(c.clamp(crate::dataset::COHERENCE_MIN, crate::dataset::COHERENCE_MAX));
        sigma.push((spec.sigma_c.powi(2) + mc_sigma.powi(2)).sqrt().max(1e-6));
    }
    Ok(CoherenceCurve {
        n_pulses: kind.n_pulses(),
        sequence: kind.label().to_string(),
        times_us: times,
        coherence,
        sigma,
    })
}

/// XY8 repeat count whose on-resonance decay from the line alone first
/// reaches `target`.
fn nmr_repeats(line: &NoiseSpectrumModel, larmor: f64, target: f64) -> Result<u32> {
    let mut m = 1u32;
    loop {
        let n = 8 * m;
        let t = PI * n as f64 / larmor;
        let chi = chi_exact(line, &PulseSequence::xy8(m, t)?)?;
        if chi >= target || m >= 512 {
            return Ok(m);
        }
        m = (m + 1).max((m as f64 * 1.25) as u32);
    }
}

fn synthesize_one(
    spec: &SyntheticEnvSpec,
    plan: &MeasurementPlan,
    index: usize,
) -> Result<NvDataset> {
    use crate::filter::SequenceKind;
    let depth = spec.depths_nm[index];
    let broadband = spec.broadband_model(depth)?;
    let mut curves = Vec::new();
    let mut kinds: Vec<SequenceKind> = Vec::new();
    for &n in &plan.n_values {
        kinds.push(if n == 0 {
            SequenceKind::Ramsey
        } else {
            SequenceKind::Cpmg { n_pulses: n }
        });
    }
    for (ci, kind) in kinds.into_iter().enumerate() {
        let times = curve_times(&broadband, kind, &plan.time_grid)?;
        let mut rng = noise_rng(plan.seed, index, ci);
        let stream = ((index as u64) << 24) | ci as u64;
        curves.push(noisy_curve(
            spec, plan, &broadband, depth, kind, times, &mut rng, stream,
        )?);
    }
    if plan.nmr_scan {
        if let Some(line) = spec.proton_line(depth)? {
            let larmor = spec.larmor();
            let m = nmr_repeats(&line, larmor, plan.nmr_chi_target)?;
            let n = 8 * m;
            // Probe frequencies pi N / t spanning +-20% around the Larmor line.
            let mut times: Vec<f64> = (0..plan.nmr_points)
                .map(|i| {
                    let f = 1.2 - 0.4 * i as f64 / (plan.nmr_points.max(2) - 1) as f64;
                    PI * n as f64 / (larmor * f)
                })
                .collect();
            times.sort_by(f64::total_cmp);
            let full = NoiseSpectrumModel::Sum(vec![broadband.clone(), line]);
            let ci = plan.n_values.len();
            let mut rng = noise_rng(plan.seed, index, ci);
            let stream = ((index as u64) << 24) | ci as u64;
            curves.push(noisy_curve(
                spec,
                plan,
                &full,
                depth,
                SequenceKind::Xy8 { repeats: m },
                times,
                &mut rng,
                stream,
            )?);
        }
    }
    let t1 = spec.t1_us[index];
    let mut rng = noise_rng(plan.seed, index, 0xFFFF);
    let times_us = log_space(t1 / 50.0, 4.0 * t1, plan.t1_points.max(4));
    let population = times_us
        .iter()
        .map(|&t| {
            let xi: f64 = rng.sample(StandardNormal);
            (-t / t1).exp() + spec.sigma_t1 * xi
        })
        .collect();
    let sigma = vec![spec.sigma_t1.max(1e-6); times_us.len()];
    Ok(NvDataset {
        id: format!("nv{}", fmt_depth(depth)),
        nominal_depth_nm: depth,
        measured_depth_nm: None,
        measured_depth_err_nm: None,
        field_gauss: spec.field_gauss,
        temperature_k: spec.temperature_k,
        coating: spec.coating.clone(),
        curves,
        t1: Some(T1Curve {
            times_us,
            population,
            sigma,
        }),
    })
}

fn fmt_depth(d: f64) -> String {
    if d.fract() == 0.0 {
        format!("{}", d as i64)
    } else {
        format!("{d}").replace('.', "p")
    }
}

/// One dataset per depth of `spec`, generated in parallel; output depends
/// only on `(spec, plan)`.
pub fn synthesize_dataset(spec: &SyntheticEnvSpec, plan: &MeasurementPlan) -> Result<Vec<NvDataset>> {
    spec.validate()?;
    plan.validate()?;
    (0..spec.depths_nm.len())
        .into_par_iter()
        .map(|i| synthesize_one(spec, plan, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_delta_path_is_zero() {
        let p = OuParams::new(0.0, 1.0, 0.05, 3).unwrap();
        assert!(ou_path(&p, 10.0).unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn coarse_step_is_rejected() {
        assert_eq!(
            OuParams::new(1.0, 1.0, 0.2, 0).unwrap_err().tag(),
            "undersampled-bath"
        );
        let p = OuParams::new(1.0, 10.0, 0.5, 0).unwrap();
        let seq = PulseSequence::cpmg(8, 20.0).unwrap();
        assert_eq!(
            mc_coherence(&[p], &seq, 200, 1).unwrap_err().tag(),
            "undersampled-bath"
        );
    }

    #[test]
    fn no_components_gives_unit_coherence() {
        let seq = PulseSequence::hahn(5.0).unwrap();
        let r = mc_coherence(&[], &seq, 100, 9).unwrap();
        assert_eq!(r.coherence, 1.0);
        assert_eq!(r.sigma, 0.0);
    }

    #[test]
    fn nmr_amplitude_reference_value() {
        let b = nmr_signal_amplitude(3.0, 6.0e28).unwrap();
        assert_relative_eq!(b, 1.70e-6, max_relative = 0.01);
        let b2 = nmr_signal_amplitude(6.0, 6.0e28).unwrap();
        assert_relative_eq!(b * b / (b2 * b2), 8.0, max_relative = 1e-12);
    }

    #[test]
    fn zero_coupling_noiseless_curves_are_flat() {
        let mut spec = SyntheticEnvSpec::reference();
        spec.depths_nm = vec![3.0];
        spec.t1_us = vec![800.0];
        spec.slow.amplitude_mhz = 0.0;
        spec.fast.amplitude_mhz = 0.0;
        spec.sigma_c = 0.0;
        spec.proton_layer.enabled = false;
        let plan = MeasurementPlan {
            n_values: vec![1, 2, 4, 8],
            ..Default::default()
        };
        let ds = synthesize_dataset(&spec, &plan).unwrap();
        for c in &ds[0].curves {
            assert!(c.coherence.iter().all(|&v| v == 1.0));
        }
    }
}
