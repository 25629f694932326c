//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines are always shown.

mod common;

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use common::{brute_force_b_rms, cpmg_curve, rng};
use nvnoise::bath::{
    mc_coherence, nmr_signal_amplitude, synthesize_dataset, CouplingLaw, MeasurementPlan, OuParams,
    SyntheticEnvSpec,
};
use nvnoise::config::AnalysisConfig;
use nvnoise::dataset::NvDataset;
use nvnoise::decomposition::{
    reconstruct_spectrum, Correction, NormalizedCurve, ReconstructOptions, SpectrumEstimate,
};
use nvnoise::depth::proton_larmor;
use nvnoise::filter::{
    chi_exact, filter_closed_form, filter_integral, filter_numeric, ChiOptions, PulseSequence, SpectralWeight,
};
use nvnoise::fitting::{SpectralFitResult, SpectralModelKind};
use nvnoise::noise_model::{evaluate_spectrum, NoiseSpectrumModel};
use nvnoise::pipeline::{run_pipeline, DatasetReport, Report};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(value: f64, truth: f64, rel: f64) -> bool {
    ((value - truth) / truth).abs() <= rel
}

fn reference_ensemble(seed: u64) -> (Vec<NvDataset>, Report) {
    let plan = MeasurementPlan {
        seed,
        ..Default::default()
    };
    let ds = synthesize_dataset(&SyntheticEnvSpec::reference(), &plan).unwrap();
    let report = run_pipeline(&ds, &AnalysisConfig::default()).unwrap();
    (ds, report)
}

fn fit_of(d: &DatasetReport, kind: SpectralModelKind) -> Option<&SpectralFitResult> {
    d.spectral_fits.iter().find(|f| f.kind == kind)
}

fn param(f: &SpectralFitResult, name: &str) -> f64 {
    f.get(name).unwrap().value
}

struct Flat;

impl SpectralWeight for Flat {
    fn density(&self, _omega: f64) -> f64 {
        1.0
    }
    fn inverse_square_moment_above(&self, omega: f64) -> f64 {
        1.0 / omega
    }
}

fn criterion_1() -> Outcome {
    let mut worst: f64 = 0.0;
    for n in [1u32, 2, 4, 8, 16, 32, 64] {
        let seq = PulseSequence::cpmg(n, 1.0).unwrap();
        for i in 0..60 {
            let wt = 0.1 * 2000f64.powf(i as f64 / 59.0);
            let num = filter_numeric(&seq, wt);
            let cf = filter_closed_form(&seq, wt).unwrap();
            worst = worst.max((cf - num).abs() / num.max(1e-12));
        }
    }
    let mut parseval: f64 = 0.0;
    for &t in &[0.5, 3.0, 40.0] {
        let mut seqs = vec![PulseSequence::ramsey(t).unwrap(), PulseSequence::hahn(t).unwrap(), PulseSequence::xy8(2, t).unwrap()];
        seqs.extend([1u32, 2, 4, 8, 16, 32, 64].map(|n| PulseSequence::cpmg(n, t).unwrap()));
        for seq in seqs {
            let full = 2.0 * filter_integral(&Flat, &seq, &ChiOptions::default()).unwrap().value;
            parseval = parseval.max((full / (2.0 * PI * t) - 1.0).abs());
        }
    }
    outcome(
        worst < 1e-6 && parseval < 1e-4,
        format!("closed form vs numeric max rel {worst:.1e}; Parseval max rel {parseval:.1e}"),
    )
}

fn criterion_2() -> Outcome {
    let ramsey = |d: f64, tau: f64, t: f64| d * d * tau * tau * ((-t / tau).exp() + t / tau - 1.0);
    let hahn = |d: f64, tau: f64, t: f64| {
        let x = t / tau;
        d * d * tau * tau * (x - 3.0 + 4.0 * (-x / 2.0).exp() - (-x).exp())
    };
    let cases: Vec<(f64, f64, PulseSequence, f64)> = [(1.0, 1.0, 0.8), (0.5, 5.0, 3.0), (2.0, 0.2, 1.0)]
        .iter()
        .flat_map(|&(d, tau, t)| {
            [
                (d, tau, PulseSequence::ramsey(t).unwrap(), ramsey(d, tau, t)),
                (d, tau, PulseSequence::hahn(2.0 * t).unwrap(), hahn(d, tau, 2.0 * t)),
            ]
        })
        .collect();
    let mut all = true;
    let mut worst_quad: f64 = 0.0;
    let mut detail = Vec::new();
    for (d, tau, seq, chi_closed) in &cases {
        let model = NoiseSpectrumModel::single(*d, *tau).unwrap();
        let chi_quad = chi_exact(&model, seq).unwrap();
        worst_quad = worst_quad.max((chi_quad / chi_closed - 1.0).abs());
        let mut ok_closed = 0;
        let mut ok_quad = 0;
        for seed in [11u64, 22, 33] {
            let p = OuParams::for_sequence(*d, *tau, seq, seed).unwrap();
            let mc = mc_coherence(&[p], seq, 10_000, seed).unwrap();
            if (mc.coherence - (-chi_closed).exp()).abs() < 3.0 * mc.sigma {
                ok_closed += 1;
            }
            if (mc.coherence - (-chi_quad).exp()).abs() < 3.0 * mc.sigma {
                ok_quad += 1;
            }
        }
        all &= ok_closed >= 2 && ok_quad >= 2;
        detail.push(format!("{}/{}", ok_closed.min(ok_quad), 3));
    }
    outcome(
        all,
        format!(
            "seeds within 3 sigma per case [{}]; quadrature vs closed form max rel {worst_quad:.1e}",
            detail.join(" ")
        ),
    )
}

fn criterion_3(reference: &Report) -> Outcome {
    // Slow bath: one Lorentzian with tau far beyond every T2.
    let spec = SyntheticEnvSpec {
        depths_nm: vec![10.0],
        slow: CouplingLaw {
            amplitude_mhz: 0.9,
            exponent: 1.0,
        },
        fast: CouplingLaw {
            amplitude_mhz: 0.0,
            exponent: 1.0,
        },
        tau_c1_us: 1000.0,
        t1_us: vec![5000.0],
        ..SyntheticEnvSpec::reference()
    };
    let ds = synthesize_dataset(&spec, &MeasurementPlan::default()).unwrap();
    let report = run_pipeline(&ds, &AnalysisConfig::default()).unwrap();
    let k_slow = report.datasets[0].scaling.as_ref().map(|s| s.k).unwrap_or(f64::NAN);
    let shallow: Vec<(String, f64)> = reference
        .datasets
        .iter()
        .filter(|d| d.nominal_depth_nm <= 3.0)
        .map(|d| (d.id.clone(), d.scaling.as_ref().map(|s| s.k).unwrap_or(f64::NAN)))
        .collect();
    let ok = (0.60..=0.73).contains(&k_slow) && shallow.iter().all(|(_, k)| (0.3..=0.5).contains(k));
    outcome(
        ok,
        format!(
            "slow-bath k = {k_slow:.3}; shallow double-Lorentzian {}",
            shallow
                .iter()
                .map(|(id, k)| format!("{id} k = {k:.3}"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn criterion_4(reference: &Report) -> Outcome {
    // Reference correlation times and coupling laws at 10 nm, where the
    // measurable band spans both knees.
    let spec = SyntheticEnvSpec {
        depths_nm: vec![10.0],
        t1_us: vec![2000.0],
        ..SyntheticEnvSpec::reference()
    };
    let ds = synthesize_dataset(&spec, &MeasurementPlan::default()).unwrap();
    let report = run_pipeline(&ds, &AnalysisConfig::default()).unwrap();
    let Some(f) = fit_of(&report.datasets[0], SpectralModelKind::DoubleLorentzian) else {
        return outcome(false, "double-Lorentzian fit failed".into());
    };
    let truth = [
        ("delta1_mhz", spec.slow.delta_at(10.0) / (2.0 * PI)),
        ("tau_c1_us", spec.tau_c1_us),
        ("delta2_mhz", spec.fast.delta_at(10.0) / (2.0 * PI)),
        ("tau_c2_us", spec.tau_c2_us),
    ];
    let errs: Vec<(&str, f64)> = truth
        .iter()
        .map(|&(name, v)| (name, param(f, name) / v - 1.0))
        .collect();
    // The reference depths alone, for information only.
    let at_depths: Vec<String> = reference
        .datasets
        .iter()
        .filter_map(|d| {
            let f = fit_of(d, SpectralModelKind::DoubleLorentzian)?;
            Some(format!(
                "{} {:+.0}%/{:+.0}%",
                d.id,
                100.0 * (param(f, "tau_c1_us") / spec.tau_c1_us - 1.0),
                100.0 * (param(f, "tau_c2_us") / spec.tau_c2_us - 1.0)
            ))
        })
        .collect();
    outcome(
        errs.iter().all(|e| e.1.abs() <= 0.15),
        format!(
            "{}; per-depth tau_c1/tau_c2 (info) {}",
            errs.iter()
                .map(|(n, e)| format!("{n} {:+.1}%", 100.0 * e))
                .collect::<Vec<_>>()
                .join(", "),
            at_depths.join(", ")
        ),
    )
}

fn criterion_5() -> Outcome {
    let spec = SyntheticEnvSpec {
        depths_nm: vec![3.0],
        t1_us: vec![860.0],
        ..SyntheticEnvSpec::reference()
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 1..=10u64 {
        let plan = MeasurementPlan {
            seed,
            ..Default::default()
        };
        let ds = synthesize_dataset(&spec, &plan).unwrap();
        let report = run_pipeline(&ds, &AnalysisConfig::default()).unwrap();
        let d = &report.datasets[0];
        let r = |k| fit_of(d, k).map(|f| f.reduced_chi2).unwrap_or(f64::INFINITY);
        let (dl, sl, pl) = (
            r(SpectralModelKind::DoubleLorentzian),
            r(SpectralModelKind::SingleLorentzian),
            r(SpectralModelKind::PowerLaw),
        );
        if dl < sl && dl < pl {
            wins += 1;
        }
        if seed <= 3 {
            lines.push(format!("seed {seed}: {dl:.2}/{sl:.2}/{pl:.2}"));
        }
    }
    outcome(
        wins >= 9,
        format!(
            "double Lorentzian best on {wins}/10 seeds (reduced chi2 double/single/1-over-f: {})",
            lines.join("; ")
        ),
    )
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn criterion_6(reports: &[Report]) -> Outcome {
    let spec = SyntheticEnvSpec::reference();
    let global: Vec<(f64, f64)> = reports
        .iter()
        .filter_map(|r| r.ensemble.global_fit.as_ref().map(|g| (g.tau_c1_us, g.tau_c2_us)))
        .collect();
    if global.len() != reports.len() {
        return outcome(false, "global fit failed on some seeds".into());
    }
    let (t1, t2) = global[0];
    let accurate = within(t1, spec.tau_c1_us, 0.15) && within(t2, spec.tau_c2_us, 0.15);

    // Seed-to-seed variance of each independent per-dataset fit.
    let ids: Vec<String> = reports[0].datasets.iter().map(|d| d.id.clone()).collect();
    let mut indep = Vec::new();
    for id in &ids {
        let taus: Vec<(f64, f64)> = reports
            .iter()
            .filter_map(|r| {
                let d = r.datasets.iter().find(|d| &d.id == id)?;
                let f = fit_of(d, SpectralModelKind::DoubleLorentzian)?;
                Some((param(f, "tau_c1_us"), param(f, "tau_c2_us")))
            })
            .collect();
        let v1 = variance(&taus.iter().map(|t| t.0).collect::<Vec<_>>());
        let v2 = variance(&taus.iter().map(|t| t.1).collect::<Vec<_>>());
        indep.push((id.clone(), v1, v2));
    }
    let g1 = variance(&global.iter().map(|t| t.0).collect::<Vec<_>>());
    let g2 = variance(&global.iter().map(|t| t.1).collect::<Vec<_>>());
    let min1 = indep.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let min2 = indep.iter().map(|x| x.2).fold(f64::INFINITY, f64::min);
    let tighter = g1 <= min1 && g2 <= min2;
    outcome(
        accurate && tighter,
        format!(
            "seed 1: tau_c1 = {t1:.2} us, tau_c2 = {:.1} ns; var over {} seeds: global ({g1:.2e}, {g2:.2e}) vs \
             smallest independent ({min1:.2e}, {min2:.2e})",
            1e3 * t2,
            reports.len()
        ),
    )
}

fn criterion_7(reference: &Report) -> Outcome {
    let (Some(slow), Some(fast)) = (&reference.ensemble.depth_scaling_slow, &reference.ensemble.depth_scaling_fast)
    else {
        return outcome(false, "depth-scaling fits missing".into());
    };
    outcome(
        (1.55..=1.95).contains(&slow.n) && (0.6..=1.2).contains(&fast.n),
        format!(
            "n1 = {:.3} +- {:.3}, n2 = {:.3} +- {:.3}",
            slow.n, slow.n_err, fast.n, fast.n_err
        ),
    )
}

fn criterion_8(reference: &Report) -> Outcome {
    let larmor = proton_larmor(454.0).unwrap();
    let larmor_ok = (larmor - 1.9330).abs() <= 1e-4;
    let mut worst_mc: f64 = 0.0;
    for &depth in &[2.0, 5.0, 20.0] {
        let closed = nmr_signal_amplitude(depth, 6e28).unwrap();
        for seed in 1..=5 {
            let b = brute_force_b_rms(depth, 6e28, 1_000_000, seed);
            worst_mc = worst_mc.max((b / closed - 1.0).abs());
        }
    }
    let mut depth_ok = true;
    let mut parts = Vec::new();
    for d in &reference.datasets {
        let Some(e) = &d.depth else {
            depth_ok = false;
            parts.push(format!("{}: none", d.id));
            continue;
        };
        let truth = d.nominal_depth_nm;
        let err = (e.depth_nm - truth).abs();
        depth_ok &= err <= 0.10 * truth && (truth > 4.0 || err < 1.0);
        parts.push(format!("{truth} -> {:.2}", e.depth_nm));
    }
    outcome(
        larmor_ok && worst_mc < 0.02 && depth_ok,
        format!(
            "Larmor(454 G) = {larmor:.4} MHz; dipolar MC max rel {:.2}%; depths (nm) {}",
            100.0 * worst_mc,
            parts.join(", ")
        ),
    )
}

fn criterion_9() -> Outcome {
    // tau_c small enough that S is flat across every probed frequency.
    let (delta, tau) = (30.0, 1e-4);
    let truth = NoiseSpectrumModel::single(delta, tau).unwrap();
    let mut r = rng(9);
    let curves: Vec<_> = [1u32, 2, 4, 8, 16, 32, 64]
        .into_iter()
        .map(|n| cpmg_curve(&truth, n, 12, 0.0, &mut r))
        .collect();
    let nc: Vec<NormalizedCurve> = curves
        .iter()
        .map(|curve| NormalizedCurve { curve, amplitude: 1.0 })
        .collect();
    let ratio = |est: &SpectrumEstimate| -> Vec<f64> {
        est.points
            .iter()
            .map(|p| p.s / evaluate_spectrum(&truth, p.omega).unwrap())
            .collect()
    };
    let plain = reconstruct_spectrum(&nc, &ReconstructOptions::default()).unwrap();
    let plain_mean = ratio(&plain).iter().sum::<f64>() / plain.points.len() as f64;

    // Harmonic refinement with a white iterate fitted to the current estimate.
    let mut est = plain;
    for _ in 0..4 {
        let level = est.points.iter().map(|p| p.s).sum::<f64>() / est.points.len() as f64;
        let tau0 = 1e-6;
        let iterate = NoiseSpectrumModel::single((PI * level / tau0).sqrt(), tau0).unwrap();
        let opts = ReconstructOptions {
            correction: Correction::Harmonics(iterate),
            ..Default::default()
        };
        est = reconstruct_spectrum(&nc, &opts).unwrap();
    }
    let worst = ratio(&est).iter().map(|q| (q - 1.0).abs()).fold(0.0, f64::max);
    outcome(
        worst < 0.05,
        format!(
            "harmonic-corrected max deviation {:.2}% over {} points; first-harmonic ratio {plain_mean:.4} \
             (pi^2/8 = {:.4})",
            100.0 * worst,
            est.points.len(),
            PI * PI / 8.0
        ),
    )
}

fn criterion_10() -> Outcome {
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let (ds, report) = reference_ensemble(1);
                (serde_json::to_string(&ds).unwrap(), report.to_json().unwrap())
            })
    };
    let a = run(1);
    let b = run(1);
    let c = run(4);
    let ok = a == b && a == c;
    outcome(
        ok,
        format!("report JSON {} bytes; identical across repeated and 1/4-thread runs: {ok}", a.1.len()),
    )
}

fn main() {
    let t0 = Instant::now();
    let mut results: Vec<(usize, &str, Outcome, Duration)> = Vec::new();
    let budget = |n: usize| match n {
        1 => Some(10.0),
        2 => Some(120.0),
        3 | 4 | 6 => Some(300.0),
        _ => None,
    };
    let mut timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut o = f();
        let dt = start.elapsed();
        if let Some(limit) = budget(n) {
            if dt.as_secs_f64() >= limit {
                o.pass = false;
                o.detail += &format!("; over the {limit:.0} s budget");
            }
        }
        println!(
            "{} criterion {n:>2} ({name}): {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            dt.as_secs_f64()
        );
        results.push((n, name, o, dt));
    };
    timed(1, "filter-function oracle", &mut criterion_1);
    timed(2, "OU analytics", &mut criterion_2);
    let reference = &reference_ensemble(1).1;
    timed(3, "Lorentzian scaling limit", &mut || criterion_3(reference));
    timed(4, "spectral round trip", &mut || criterion_4(reference));
    timed(5, "model selection", &mut criterion_5);
    timed(6, "global fit", &mut || {
        let seeds: Vec<Report> = (1..=20u64).map(|s| reference_ensemble(s).1).collect();
        criterion_6(&seeds)
    });
    timed(7, "depth scaling", &mut || criterion_7(reference));
    timed(8, "depth calibration", &mut || criterion_8(reference));
    timed(9, "inverse-problem constant", &mut criterion_9);
    timed(10, "determinism", &mut criterion_10);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed in {:.1} s",
        results.len() - failed.len(),
        results.len(),
        t0.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
