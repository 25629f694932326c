mod common;

use common::brute_force_b_rms;
use nvnoise::bath::{kurtosis, mc_coherence, mc_phases, nmr_signal_amplitude, ou_path, synthesize_dataset, MeasurementPlan, OuParams, SyntheticEnvSpec};
use nvnoise::filter::{chi_exact, PulseSequence};
use nvnoise::noise_model::NoiseSpectrumModel;

const SEEDS: [u64; 3] = [11, 22, 33];

fn ou_ramsey(delta: f64, tau: f64, t: f64) -> f64 {
    let x = t / tau;
    delta * delta * tau * tau * ((-x).exp() + x - 1.0)
}

fn ou_hahn(delta: f64, tau: f64, t: f64) -> f64 {
    let x = t / tau;
    delta * delta * tau * tau * (x - 3.0 + 4.0 * (-x / 2.0).exp() - (-x).exp())
}

/// `|C_MC - C_ref| < 3 sigma` on at least two of the three seeds.
fn agrees_on_two_seeds(delta: f64, tau: f64, seq: &PulseSequence, reference: f64) -> bool {
    let passes = SEEDS
        .iter()
        .filter(|&&seed| {
            let p = OuParams::for_sequence(delta, tau, seq, seed).unwrap();
            let mc = mc_coherence(&[p], seq, 10_000, seed).unwrap();
            (mc.coherence - reference).abs() < 3.0 * mc.sigma
        })
        .count();
    passes >= 2
}

#[test]
fn monte_carlo_matches_ou_closed_forms() {
    for &(delta, tau, t) in &[(1.0, 1.0, 0.8), (0.5, 5.0, 3.0), (2.0, 0.2, 1.0)] {
        let ramsey = PulseSequence::ramsey(t).unwrap();
        let c = (-ou_ramsey(delta, tau, t)).exp();
        assert!(agrees_on_two_seeds(delta, tau, &ramsey, c), "Ramsey {delta} {tau} {t}");
        let hahn = PulseSequence::hahn(2.0 * t).unwrap();
        let c = (-ou_hahn(delta, tau, 2.0 * t)).exp();
        assert!(agrees_on_two_seeds(delta, tau, &hahn, c), "Hahn {delta} {tau} {t}");
    }
}

#[test]
fn monte_carlo_matches_quadrature() {
    for &(delta, tau, n, t) in &[(1.0, 2.0, 4, 3.0), (0.3, 10.0, 16, 20.0), (1.5, 0.5, 8, 2.0)] {
        let seq = PulseSequence::cpmg(n, t).unwrap();
        let model = NoiseSpectrumModel::single(delta, tau).unwrap();
        let c = (-chi_exact(&model, &seq).unwrap()).exp();
        assert!(agrees_on_two_seeds(delta, tau, &seq, c), "CPMG-{n} {delta} {tau} {t}");
    }
}

#[test]
fn phase_is_gaussian() {
    for &(delta, tau, n, t) in &[(1.0, 1.0, 0, 1.5), (0.5, 3.0, 8, 6.0)] {
        let seq = if n == 0 {
            PulseSequence::ramsey(t).unwrap()
        } else {
            PulseSequence::cpmg(n, t).unwrap()
        };
        let p = OuParams::for_sequence(delta, tau, &seq, 5).unwrap();
        let phases = mc_phases(&[p], &seq, 10_000, 5).unwrap();
        let k = kurtosis(&phases);
        assert!((2.8..=3.2).contains(&k), "kurtosis {k}");
    }
}

#[test]
fn path_autocorrelation_at_tau() {
    let (delta, tau) = (1.3, 2.0);
    let dt = tau / 20.0;
    let products: Vec<f64> = (0..4000u64)
        .map(|k| {
            let path = ou_path(&OuParams::new(delta, tau, dt, 1000 + k).unwrap(), tau).unwrap();
            path[0] * path[20]
        })
        .collect();
    let n = products.len() as f64;
    let mean = products.iter().sum::<f64>() / n;
    let sd = (products.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let expect = delta * delta * (-1.0f64).exp();
    assert!((mean - expect).abs() < 3.0 * sd / n.sqrt(), "{mean} vs {expect}");
}

#[test]
fn synthesis_is_independent_of_thread_count() {
    let mut spec = SyntheticEnvSpec::reference();
    spec.depths_nm = vec![3.0, 20.0];
    spec.t1_us = vec![800.0, 3000.0];
    let plan = MeasurementPlan {
        n_values: vec![1, 2, 4, 8],
        monte_carlo: true,
        n_traj: 300,
        nmr_scan: false,
        seed: 9,
        ..Default::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| synthesize_dataset(&spec, &plan).unwrap())
    };
    let a = serde_json::to_string(&run(1)).unwrap();
    let b = serde_json::to_string(&run(4)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dipolar_sum_matches_closed_form() {
    for &depth in &[2.0, 5.0, 20.0] {
        let closed = nmr_signal_amplitude(depth, 6e28).unwrap();
        for seed in 1..=5 {
            let b = brute_force_b_rms(depth, 6e28, 1_000_000, seed);
            assert!((b - closed).abs() / closed < 0.02, "d={depth} seed={seed}: {b:e} vs {closed:e}");
        }
    }
}
