#![allow(dead_code)]

use nvnoise::dataset::CoherenceCurve;
use nvnoise::filter::{chi_exact, PulseSequence, SequenceKind};
use nvnoise::noise_model::NoiseSpectrumModel;
use std::f64::consts::PI;

use nvnoise::units::{GAMMA_PROTON, HBAR, MU0_OVER_4PI};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn log_space(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (a.ln() + (b.ln() - a.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Time at which the decay exponent reaches `target` (bisection in log t).
pub fn time_for_chi(model: &NoiseSpectrumModel, kind: SequenceKind, target: f64) -> f64 {
    let chi = |t: f64| chi_exact(model, &PulseSequence::new(kind, t).unwrap()).unwrap();
    let (mut a, mut b) = (1e-4f64, 1e5f64);
    for _ in 0..80 {
        let m = (a * b).sqrt();
        if chi(m) < target {
            a = m;
        } else {
            b = m;
        }
    }
    (a * b).sqrt()
}

/// CPMG curve whose decay exponent spans [0.03, 3], with Gaussian noise of
/// standard deviation `sigma` (noiseless when 0).
pub fn cpmg_curve(
    model: &NoiseSpectrumModel,
    n: u32,
    points: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> CoherenceCurve {
    let kind = SequenceKind::Cpmg { n_pulses: n };
    let times = log_space(time_for_chi(model, kind, 0.03), time_for_chi(model, kind, 3.0), points);
    let coherence = times
        .iter()
        .map(|&t| {
            let c = (-chi_exact(model, &PulseSequence::new(kind, t).unwrap()).unwrap()).exp();
            let xi: f64 = rng.sample(StandardNormal);
            c + sigma * xi
        })
        .collect();
    CoherenceCurve {
        n_pulses: n,
        sequence: "CPMG".into(),
        times_us: times.clone(),
        coherence,
        sigma: vec![sigma.max(1e-4); times.len()],
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mean-square proton field along the sensor axis, by Monte-Carlo summation
/// over `n` explicit protons in the half-space `z > d` above the sensor.
///
/// Protons are drawn at distance `r >= d` with density `3 d^3 / r^4` in a
/// uniformly random direction; those below the surface are discarded. Each
/// carries a random transverse moment of size `hbar gamma / sqrt 2` (spin 1/2,
/// so `<m_x^2> = (hbar gamma)^2 / 4`) precessing about the axis, which makes
/// 54.7 deg with the surface normal.
pub fn brute_force_b_rms(depth_nm: f64, rho: f64, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = depth_nm * 1e-9;
    let alpha = 54.7f64.to_radians();
    let axis = [alpha.sin(), 0.0, alpha.cos()];
    // Two unit vectors perpendicular to the axis.
    let e1 = [alpha.cos(), 0.0, -alpha.sin()];
    let e2 = [0.0, 1.0, 0.0];
    let m = HBAR * GAMMA_PROTON / 2f64.sqrt();
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let mut sum = 0.0;
    for _ in 0..n {
        let u: f64 = rng.random();
        let r = d / (1.0 - u).cbrt();
        let cos_t: f64 = rng.random_range(-1.0..1.0);
        let phi: f64 = rng.random_range(0.0..2.0 * PI);
        let sin_t = (1.0 - cos_t * cos_t).sqrt();
        let rhat = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
        if r * cos_t < d {
            continue;
        }
        let psi: f64 = rng.random_range(0.0..2.0 * PI);
        let mvec = [
            m * (psi.cos() * e1[0] + psi.sin() * e2[0]),
            m * (psi.cos() * e1[1] + psi.sin() * e2[1]),
            m * (psi.cos() * e1[2] + psi.sin() * e2[2]),
        ];
        let mr = dot(&mvec, &rhat);
        let b_axis = MU0_OVER_4PI * (3.0 * mr * dot(&rhat, &axis) - dot(&mvec, &axis)) / r.powi(3);
        // Importance weight rho / p(x) with p(x) = 3 d^3 / (4 pi r^6).
        let weight = rho * 4.0 * PI * r.powi(6) / (3.0 * d * d * d);
        sum += b_axis * b_axis * weight;
    }
    (sum / n as f64).sqrt()
}
