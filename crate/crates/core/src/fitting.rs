//! Spectral model fits, global fits with shared correlation times,
//! depth-scaling fits and confidence bands.
//!
//! Reported parameters use file units: couplings in MHz (`delta / 2 pi`),
//! correlation times in us. Fits run in rad/us internally.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{NormalizedCurve, SpectrumEstimate};
use crate::error::{Error, Result};
use crate::filter::{chi_exact_with, ChiOptions};
use crate::nls::{nls_fit, NlsOptions, NlsProblem, NlsResult};
use crate::noise_model::NoiseSpectrumModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralModelKind {
    SingleLorentzian,
    PowerLaw,
    DoubleLorentzian,
}

impl SpectralModelKind {
    pub const ALL: [SpectralModelKind; 3] = [
        SpectralModelKind::SingleLorentzian,
        SpectralModelKind::PowerLaw,
        SpectralModelKind::DoubleLorentzian,
    ];

    pub fn n_params(&self) -> usize {
        match self {
            SpectralModelKind::SingleLorentzian => 2,
            SpectralModelKind::PowerLaw => 1,
            SpectralModelKind::DoubleLorentzian => 4,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            SpectralModelKind::SingleLorentzian => "single_lorentzian",
            SpectralModelKind::PowerLaw => "power_law",
            SpectralModelKind::DoubleLorentzian => "double_lorentzian",
        }
    }

    pub fn from_label(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s || k.label().replace('_', "-") == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown model kind `{s}`")))
    }
}

/// Free coordinate used for couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    #[default]
    Delta,
    DeltaSquared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    pub error: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFitResult {
    pub kind: SpectralModelKind,
    pub parametrization: Parametrization,
    /// Power-law exponent held fixed during the fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_exponent: Option<f64>,
    pub params: Vec<FitParam>,
    /// Covariance in the units of `params`.
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
    pub at_bound: Vec<String>,
    pub model: NoiseSpectrumModel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralFitOptions {
    pub parametrization: Parametrization,
    pub power_law_exponent: f64,
}

impl Default for SpectralFitOptions {
    fn default() -> Self {
        Self {
            parametrization: Parametrization::Delta,
            power_law_exponent: 1.0,
        }
    }
}

/// Internal (rad/us) parameter layout for one model family.
#[derive(Debug, Clone, Copy)]
struct Layout {
    kind: SpectralModelKind,
    par: Parametrization,
    exponent: f64,
}

impl Layout {
    fn names(&self) -> Vec<String> {
        let d = |i: &str| match self.par {
            Parametrization::Delta => format!("delta{i}_mhz"),
            Parametrization::DeltaSquared => format!("delta{i}_sq_mhz2"),
        };
        match self.kind {
            SpectralModelKind::SingleLorentzian => vec![d(""), "tau_c_us".into()],
            SpectralModelKind::PowerLaw => vec!["amplitude_mhz".into()],
            SpectralModelKind::DoubleLorentzian => {
                vec![d("1"), "tau_c1_us".into(), d("2"), "tau_c2_us".into()]
            }
        }
    }

    fn units(&self) -> Vec<String> {
        let d = match self.par {
            Parametrization::Delta => "MHz",
            Parametrization::DeltaSquared => "MHz^2",
        };
        match self.kind {
            SpectralModelKind::SingleLorentzian => vec![d.into(), "us".into()],
            SpectralModelKind::PowerLaw => vec![format!("MHz^2/MHz*MHz^{}", self.exponent)],
            SpectralModelKind::DoubleLorentzian => {
                vec![d.into(), "us".into(), d.into(), "us".into()]
            }
        }
    }

    /// Multiply internal values by these to get file units.
    fn scales(&self) -> Vec<f64> {
        let d = match self.par {
            Parametrization::Delta => 1.0 / (2.0 * PI),
            Parametrization::DeltaSquared => 1.0 / (4.0 * PI * PI),
        };
        match self.kind {
            SpectralModelKind::SingleLorentzian => vec![d, 1.0],
            SpectralModelKind::PowerLaw => vec![(2.0 * PI).powf(-(self.exponent + 1.0))],
            SpectralModelKind::DoubleLorentzian => vec![d, 1.0, d, 1.0],
        }
    }

    fn delta(&self, v: f64) -> f64 {
        match self.par {
            Parametrization::Delta => v.abs(),
            Parametrization::DeltaSquared => v.max(0.0).sqrt(),
        }
    }

    fn delta_sq(&self, v: f64) -> f64 {
        match self.par {
            Parametrization::Delta => v * v,
            Parametrization::DeltaSquared => v,
        }
    }

    fn from_delta_sq(&self, d2: f64) -> f64 {
        match self.par {
            Parametrization::Delta => d2.max(0.0).sqrt(),
            Parametrization::DeltaSquared => d2.max(0.0),
        }
    }

    fn eval(&self, p: &[f64], omega: f64) -> f64 {
        match self.kind {
            SpectralModelKind::SingleLorentzian => self.delta_sq(p[0]) * shape(omega, p[1]),
            SpectralModelKind::PowerLaw => p[0] / omega.powf(self.exponent),
            SpectralModelKind::DoubleLorentzian => {
                self.delta_sq(p[0]) * shape(omega, p[1]) + self.delta_sq(p[2]) * shape(omega, p[3])
            }
        }
    }

    fn model(&self, p: &[f64]) -> Result<NoiseSpectrumModel> {
        match self.kind {
            SpectralModelKind::SingleLorentzian => NoiseSpectrumModel::single(self.delta(p[0]), p[1]),
            SpectralModelKind::PowerLaw => NoiseSpectrumModel::power_law(p[0], self.exponent),
            SpectralModelKind::DoubleLorentzian => NoiseSpectrumModel::double(
                self.delta(p[0]),
                p[1],
                self.delta(p[2]),
                p[3],
            ),
        }
    }
}

/// Unit-coupling Lorentzian `tau / pi / (1 + (omega tau)^2)`.
#[inline]
fn shape(omega: f64, tau: f64) -> f64 {
    tau / PI / (1.0 + (omega * tau).powi(2))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi / lo).ln() * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Non-negative weighted least squares for `y ~ sum_j a_j cols[j]`
/// with one or two columns; returns (coefficients, chi^2).
fn nnls(cols: &[Vec<f64>], y: &[f64], w: &[f64]) -> (Vec<f64>, f64) {
    let chi2 = |a: &[f64]| -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, yi)| {
                let f: f64 = cols.iter().zip(a).map(|(c, aj)| aj * c[i]).sum();
                w[i] * (yi - f).powi(2)
            })
            .sum()
    };
    let dot = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).zip(w).map(|((x, y), wi)| wi * x * y).sum() };
    let single = |j: usize| -> Vec<f64> {
        let mut a = vec![0.0; cols.len()];
        let den = dot(&cols[j], &cols[j]);
        if den > 0.0 {
            a[j] = (dot(&cols[j], y) / den).max(0.0);
        }
        a
    };
    let mut candidates: Vec<Vec<f64>> = (0..cols.len()).map(single).collect();
    if cols.len() == 2 {
        let (a11, a12, a22) = (
            dot(&cols[0], &cols[0]),
            dot(&cols[0], &cols[1]),
            dot(&cols[1], &cols[1]),
        );
        let (b1, b2) = (dot(&cols[0], y), dot(&cols[1], y));
        let det = a11 * a22 - a12 * a12;
        if det.abs() > 1e-300 {
            let x1 = (b1 * a22 - b2 * a12) / det;
            let x2 = (a11 * b2 - a12 * b1) / det;
            if x1 >= 0.0 && x2 >= 0.0 {
                candidates.push(vec![x1, x2]);
            }
        }
    }
    candidates
        .into_iter()
        .map(|a| {
            let c = chi2(&a);
            (a, c)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((vec![0.0; cols.len()], f64::INFINITY))
}

struct Data {
    omega: Vec<f64>,
    y: Vec<f64>,
    sigma: Vec<f64>,
}

impl Data {
    fn from(est: &SpectrumEstimate) -> Self {
        Self {
            omega: est.omegas(),
            y: est.values(),
            sigma: est.sigmas(),
        }
    }

    fn weights(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| 1.0 / (s * s)).collect()
    }

    fn omega_range(&self) -> (f64, f64) {
        let lo = self.omega.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.omega.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

fn tau_bounds(data: &Data) -> (f64, f64) {
    let (lo, hi) = data.omega_range();
    (0.01 / hi, 100.0 / lo)
}

/// Starting points: correlation-time lattice with couplings from NNLS,
/// best `keep` by chi^2.
fn lorentzian_starts(layout: &Layout, data: &Data, keep: usize) -> Vec<Vec<f64>> {
    let (lo, hi) = data.omega_range();
    let taus = log_grid(0.1 / hi, 10.0 / lo, 25);
    let w = data.weights();
    let col = |tau: f64| -> Vec<f64> { data.omega.iter().map(|&o| shape(o, tau)).collect() };
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    match layout.kind {
        SpectralModelKind::SingleLorentzian => {
            for &t in &taus {
                let (a, c) = nnls(&[col(t)], &data.y, &w);
                scored.push((c, vec![layout.from_delta_sq(a[0].max(1e-12)), t]));
            }
        }
        SpectralModelKind::DoubleLorentzian => {
            for (i, &t1) in taus.iter().enumerate() {
                for &t2 in &taus[..i] {
                    if t1 < 3.0 * t2 {
                        continue;
                    }
                    let (a, c) = nnls(&[col(t1), col(t2)], &data.y, &w);
                    scored.push((
                        c,
                        vec![
                            layout.from_delta_sq(a[0].max(1e-12)),
                            t1,
                            layout.from_delta_sq(a[1].max(1e-12)),
                            t2,
                        ],
                    ));
                }
            }
        }
        SpectralModelKind::PowerLaw => {
            let c: Vec<f64> = data.omega.iter().map(|o| o.powf(-layout.exponent)).collect();
            let (a, _) = nnls(&[c], &data.y, &w);
            return vec![vec![a[0].max(1e-12)]];
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1[1].total_cmp(&b.1[1])));
    scored.into_iter().take(keep).map(|s| s.1).collect()
}

fn bounds(layout: &Layout, data: &Data) -> (Vec<f64>, Vec<f64>) {
    let (tlo, thi) = tau_bounds(data);
    let dmax = match layout.par {
        Parametrization::Delta => 1e3,
        Parametrization::DeltaSquared => 1e6,
    };
    match layout.kind {
        SpectralModelKind::SingleLorentzian => (vec![0.0, tlo], vec![dmax, thi]),
        SpectralModelKind::PowerLaw => (vec![0.0], vec![1e6]),
        SpectralModelKind::DoubleLorentzian => (vec![0.0, tlo, 0.0, tlo], vec![dmax, thi, dmax, thi]),
    }
}

fn package(layout: &Layout, r: NlsResult) -> Result<SpectralFitResult> {
    let mut p = r.params.clone();
    let mut cov = r.covariance.clone();
    let mut at_bound = r.at_bound.clone();
    if layout.kind == SpectralModelKind::DoubleLorentzian && p[1] < p[3] {
        // Label the slow component 1.
        let perm = [2usize, 3, 0, 1];
        p = perm.iter().map(|&i| r.params[i]).collect();
        cov = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| r.covariance[i][j]).collect())
            .collect();
        let names = layout.names();
        at_bound = r
            .at_bound
            .iter()
            .map(|n| {
                let i = names.iter().position(|m| m == n).unwrap_or(0);
                names[perm.iter().position(|&k| k == i).unwrap_or(i)].clone()
            })
            .collect();
    }
    let scales = layout.scales();
    let names = layout.names();
    let units = layout.units();
    let params = (0..p.len())
        .map(|i| FitParam {
            name: names[i].clone(),
            value: p[i] * scales[i],
            error: cov[i][i].max(0.0).sqrt() * scales[i],
            unit: units[i].clone(),
        })
        .collect();
    let covariance = (0..p.len())
        .map(|i| (0..p.len()).map(|j| cov[i][j] * scales[i] * scales[j]).collect())
        .collect();
    Ok(SpectralFitResult {
        kind: layout.kind,
        parametrization: layout.par,
        fixed_exponent: (layout.kind == SpectralModelKind::PowerLaw).then_some(layout.exponent),
        params,
        covariance,
        chi2: r.chi2,
        reduced_chi2: r.reduced_chi2,
        dof: r.dof,
        at_bound,
        model: layout.model(&p)?,
    })
}

impl SpectralFitResult {
    fn layout(&self) -> Layout {
        Layout {
            kind: self.kind,
            par: self.parametrization,
            exponent: self.fixed_exponent.unwrap_or(1.0),
        }
    }

    /// Parameters in rad/us units.
    fn internal_params(&self) -> Vec<f64> {
        self.layout()
            .scales()
            .iter()
            .zip(&self.params)
            .map(|(s, p)| p.value / s)
            .collect()
    }

    fn internal_covariance(&self) -> DMatrix<f64> {
        let s = self.layout().scales();
        let n = s.len();
        DMatrix::from_fn(n, n, |i, j| self.covariance[i][j] / (s[i] * s[j]))
    }

    pub fn get(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Fitted spectral density at `omega` (rad/us), rad^2/us.
    pub fn evaluate(&self, omega: f64) -> f64 {
        self.layout().eval(&self.internal_params(), omega)
    }
}

/// Weighted fit of one model family to spectrum samples.
pub fn fit_spectrum_model(
    est: &SpectrumEstimate,
    kind: SpectralModelKind,
    opts: &SpectralFitOptions,
) -> Result<SpectralFitResult> {
    if est.points.len() < kind.n_params() + 2 {
        return Err(Error::SpectrumUnderdetermined(format!(
            "{} points for a {}-parameter model",
            est.points.len(),
            kind.n_params()
        )));
    }
    let layout = Layout {
        kind,
        par: opts.parametrization,
        exponent: opts.power_law_exponent,
    };
    let data = Data::from(est);
    let starts = lorentzian_starts(&layout, &data, 6);
    let (lower, upper) = bounds(&layout, &data);
    let omegas = data.omega.clone();
    let problem = NlsProblem {
        names: layout.names(),
        y: &data.y,
        sigma: &data.sigma,
        lower,
        upper,
        model: move |p: &[f64]| omegas.iter().map(|&o| layout.eval(p, o)).collect::<Vec<_>>(),
    };
    let r = nls_fit(&problem, &starts, &NlsOptions::default())?;
    package(&layout, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalDatasetParams {
    pub id: String,
    pub delta1_mhz: f64,
    pub delta1_err_mhz: f64,
    pub delta2_mhz: f64,
    pub delta2_err_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalFitResult {
    pub tau_c1_us: f64,
    pub tau_c1_err_us: f64,
    pub tau_c2_us: f64,
    pub tau_c2_err_us: f64,
    pub datasets: Vec<GlobalDatasetParams>,
    pub chi2: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
    pub at_bound: Vec<String>,
}

impl GlobalFitResult {
    /// Double-Lorentzian model of dataset `i` (rad/us).
    pub fn model(&self, i: usize) -> Result<NoiseSpectrumModel> {
        let d = &self.datasets[i];
        NoiseSpectrumModel::double(
            2.0 * PI * d.delta1_mhz,
            self.tau_c1_us,
            2.0 * PI * d.delta2_mhz,
            self.tau_c2_us,
        )
    }
}

/// Joint double-Lorentzian fit with shared `(tau_c1, tau_c2)` and per-dataset
/// couplings. Parameter layout: `(tau_c1, tau_c2, delta1_0, delta2_0, ...)`.
pub fn global_fit(estimates: &[(String, SpectrumEstimate)]) -> Result<GlobalFitResult> {
    if estimates.len() < 2 {
        return Err(Error::NotGlobal(estimates.len()));
    }
    let data: Vec<Data> = estimates.iter().map(|(_, e)| Data::from(e)).collect();
    let m = data.len();
    let lo = data.iter().map(|d| d.omega_range().0).fold(f64::INFINITY, f64::min);
    let hi = data.iter().map(|d| d.omega_range().1).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<Vec<f64>> = data.iter().map(|d| d.weights()).collect();

    // Seed: medians of independent fits plus a shared-tau lattice.
    let single = SpectralFitOptions::default();
    let mut taus1 = Vec::new();
    let mut taus2 = Vec::new();
    for (_, e) in estimates {
        if let Ok(f) = fit_spectrum_model(e, SpectralModelKind::DoubleLorentzian, &single) {
            taus1.push(f.params[1].value);
            taus2.push(f.params[3].value);
        }
    }
    let median = |v: &mut Vec<f64>| -> Option<f64> {
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        Some(v[v.len() / 2])
    };
    let couplings = |t1: f64, t2: f64| -> (Vec<f64>, f64) {
        let mut p = Vec::with_capacity(2 * m);
        let mut total = 0.0;
        for (d, w) in data.iter().zip(&weights) {
            let c1: Vec<f64> = d.omega.iter().map(|&o| shape(o, t1)).collect();
            let c2: Vec<f64> = d.omega.iter().map(|&o| shape(o, t2)).collect();
            let (a, c) = nnls(&[c1, c2], &d.y, w);
            p.push(a[0].max(1e-12).sqrt());
            p.push(a[1].max(1e-12).sqrt());
            total += c;
        }
        (p, total)
    };
    let grid = log_grid(0.1 / hi, 10.0 / lo, 25);
    let mut scored: Vec<(f64, Vec<f64>)> = Vec::new();
    for (i, &t1) in grid.iter().enumerate() {
        for &t2 in &grid[..i] {
            if t1 < 3.0 * t2 {
                continue;
            }
            let (p, c) = couplings(t1, t2);
            let mut start = vec![t1, t2];
            start.extend(p);
            scored.push((c, start));
        }
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1[0].total_cmp(&b.1[0])));
    let mut starts: Vec<Vec<f64>> = scored.into_iter().take(4).map(|s| s.1).collect();
    if let (Some(t1), Some(t2)) = (median(&mut taus1), median(&mut taus2)) {
        let (p, _) = couplings(t1, t2);
        let mut s = vec![t1, t2];
        s.extend(p);
        starts.insert(0, s);
    }

    let mut y = Vec::new();
    let mut sigma = Vec::new();
    let mut index = Vec::new();
    for (k, d) in data.iter().enumerate() {
        y.extend_from_slice(&d.y);
        sigma.extend_from_slice(&d.sigma);
        index.extend(d.omega.iter().map(|&o| (k, o)));
    }
    let mut names = vec!["tau_c1_us".to_string(), "tau_c2_us".to_string()];
    for (id, _) in estimates {
        names.push(format!("{id}.delta1_mhz"));
        names.push(format!("{id}.delta2_mhz"));
    }
    let (tlo, thi) = (0.01 / hi, 100.0 / lo);
    let mut lower = vec![tlo, tlo];
    let mut upper = vec![thi, thi];
    lower.extend(std::iter::repeat(0.0).take(2 * m));
    upper.extend(std::iter::repeat(1e3).take(2 * m));
    let problem = NlsProblem {
        names: names.clone(),
        y: &y,
        sigma: &sigma,
        lower,
        upper,
        model: move |p: &[f64]| {
            index
                .iter()
                .map(|&(k, o)| {
                    let (d1, d2) = (p[2 + 2 * k], p[3 + 2 * k]);
                    d1 * d1 * shape(o, p[0]) + d2 * d2 * shape(o, p[1])
                })
                .collect::<Vec<_>>()
        },
    };
    let r = nls_fit(&problem, &starts, &NlsOptions::default())?;
    let swap = r.params[0] < r.params[1];
    let (i1, i2) = if swap { (1, 0) } else { (0, 1) };
    let s = 1.0 / (2.0 * PI);
    let datasets = estimates
        .iter()
        .enumerate()
        .map(|(k, (id, _))| {
            let (j1, j2) = if swap { (3 + 2 * k, 2 + 2 * k) } else { (2 + 2 * k, 3 + 2 * k) };
            GlobalDatasetParams {
                id: id.clone(),
                delta1_mhz: r.params[j1].abs() * s,
                delta1_err_mhz: r.errors[j1] * s,
                delta2_mhz: r.params[j2].abs() * s,
                delta2_err_mhz: r.errors[j2] * s,
            }
        })
        .collect();
    Ok(GlobalFitResult {
        tau_c1_us: r.params[i1],
        tau_c1_err_us: r.errors[i1],
        tau_c2_us: r.params[i2],
        tau_c2_err_us: r.errors[i2],
        datasets,
        chi2: r.chi2,
        reduced_chi2: r.reduced_chi2,
        dof: r.dof,
        at_bound: r.at_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthPoint {
    pub depth_nm: f64,
    pub depth_err_nm: f64,
    /// Coupling in MHz.
    pub delta_mhz: f64,
    pub delta_err_mhz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScalingFit {
    /// Coupling at 1 nm, MHz nm^n.
    pub a_mhz: f64,
    pub a_err_mhz: f64,
    pub n: f64,
    pub n_err: f64,
    pub reduced_chi2: f64,
    pub dof: usize,
}

impl DepthScalingFit {
    pub fn delta_at(&self, depth_nm: f64) -> f64 {
        self.a_mhz / depth_nm.powf(self.n)
    }
}

/// Weighted fit of `delta = a / d^n` in log-log space. Depth errors enter
/// through the effective variance `(s_delta/delta)^2 + (n s_d / d)^2`,
/// refined over a few passes.
pub fn fit_depth_scaling(points: &[DepthPoint]) -> Result<DepthScalingFit> {
    let pts: Vec<&DepthPoint> = points
        .iter()
        .filter(|p| p.depth_nm > 0.0 && p.delta_mhz > 0.0)
        .collect();
    if pts.len() < 3 {
        return Err(Error::ScalingUnderdetermined(format!(
            "{} usable depths, need at least 3",
            pts.len()
        )));
    }
    let x: Vec<f64> = pts.iter().map(|p| p.depth_nm.ln()).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.delta_mhz.ln()).collect();
    let mut n_est = 1.0;
    let mut result = None;
    for _ in 0..4 {
        let sigma: Vec<f64> = pts
            .iter()
            .map(|p| {
                let rel_delta = (p.delta_err_mhz / p.delta_mhz).max(1e-6);
                let rel_depth = p.depth_err_nm / p.depth_nm;
                (rel_delta.powi(2) + (n_est * rel_depth).powi(2)).sqrt()
            })
            .collect();
        let xs = x.clone();
        let problem = NlsProblem {
            names: vec!["ln_a".into(), "n".into()],
            y: &y,
            sigma: &sigma,
            lower: vec![-50.0, 0.0],
            upper: vec![50.0, 3.0],
            model: move |p: &[f64]| xs.iter().map(|xi| p[0] - p[1] * xi).collect::<Vec<_>>(),
        };
        let starts = vec![vec![y[0] + x[0], 1.0], vec![y[0] + 2.0 * x[0], 2.0]];
        // Errors come from the propagated input uncertainties.
        let opts = NlsOptions {
            scale_covariance: false,
            ..Default::default()
        };
        let r = nls_fit(&problem, &starts, &opts)?;
        n_est = r.params[1];
        result = Some(r);
    }
    let r = result.expect("at least one pass");
    let a = r.params[0].exp();
    Ok(DepthScalingFit {
        a_mhz: a,
        a_err_mhz: a * r.errors[0],
        n: r.params[1],
        n_err: r.errors[1],
        reduced_chi2: r.reduced_chi2,
        dof: r.dof,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    /// rad/us
    pub omega: f64,
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Linearised 1-sigma band `sqrt(g^T Sigma g)` with `g = dS/dtheta`.
pub fn confidence_band(result: &SpectralFitResult, omegas: &[f64]) -> Result<Vec<BandPoint>> {
    let cov = result.internal_covariance();
    let n = cov.nrows();
    if n > 0 {
        let eig = SymmetricEigen::new(cov.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        if eig.eigenvalues.iter().any(|&v| !v.is_finite() || v < -1e-9 * max.max(1e-300)) {
            return Err(Error::CovarianceInvalid(
                "covariance is not positive semi-definite".into(),
            ));
        }
    }
    let layout = result.layout();
    let p = result.internal_params();
    Ok(omegas
        .iter()
        .map(|&o| {
            let value = layout.eval(&p, o);
            let g: Vec<f64> = (0..n)
                .map(|j| {
                    let h = 1e-6 * p[j].abs().max(1e-9);
                    let mut q = p.clone();
                    q[j] = p[j] + h;
                    let up = layout.eval(&q, o);
                    q[j] = p[j] - h;
                    let dn = layout.eval(&q, o);
                    (up - dn) / (2.0 * h)
                })
                .collect();
            let var: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| g[i] * cov[(i, j)] * g[j])
                .sum();
            let s = var.max(0.0).sqrt();
            BandPoint {
                omega: o,
                value,
                lower: value - s,
                upper: value + s,
            }
        })
        .collect())
}

/// Percentile (16-84%) band from `replicas` residual-bootstrap refits.
pub fn confidence_band_bootstrap(
    result: &SpectralFitResult,
    est: &SpectrumEstimate,
    omegas: &[f64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<BandPoint>> {
    let layout = result.layout();
    let p0 = result.internal_params();
    let data = Data::from(est);
    let fitted: Vec<f64> = data.omega.iter().map(|&o| layout.eval(&p0, o)).collect();
    let resid: Vec<f64> = data
        .y
        .iter()
        .zip(&fitted)
        .zip(&data.sigma)
        .map(|((y, f), s)| (y - f) / s)
        .collect();
    let (lower, upper) = bounds(&layout, &data);
    let curves: Vec<Option<Vec<f64>>> = (0..replicas)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let y: Vec<f64> = fitted
                .iter()
                .zip(&data.sigma)
                .map(|(f, s)| f + s * resid[rng.random_range(0..resid.len())])
                .collect();
            let omegas_d = data.omega.clone();
            let problem = NlsProblem {
                names: layout.names(),
                y: &y,
                sigma: &data.sigma,
                lower: lower.clone(),
                upper: upper.clone(),
                model: move |p: &[f64]| omegas_d.iter().map(|&o| layout.eval(p, o)).collect::<Vec<_>>(),
            };
            let opts = NlsOptions {
                cond_limit: f64::INFINITY,
                ..Default::default()
            };
            nls_fit(&problem, &[p0.clone()], &opts)
                .ok()
                .map(|r| omegas.iter().map(|&o| layout.eval(&r.params, o)).collect())
        })
        .collect();
    let good: Vec<Vec<f64>> = curves.into_iter().flatten().collect();
    if good.len() < replicas / 2 {
        return Err(Error::CovarianceInvalid(format!(
            "only {} of {replicas} bootstrap refits succeeded",
            good.len()
        )));
    }
    Ok(omegas
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let mut v: Vec<f64> = good.iter().map(|c| c[i]).collect();
            v.sort_by(f64::total_cmp);
            let q = |f: f64| v[((v.len() - 1) as f64 * f).round() as usize];
            BandPoint {
                omega: o,
                value: layout.eval(&p0, o),
                lower: q(0.1587),
                upper: q(0.8413),
            }
        })
        .collect())
}

/// Cross-check: fit the model directly to coherence, `C = A_N exp(-chi)`,
/// starting from a spectral fit.
pub fn fit_coherence_domain(
    curves: &[NormalizedCurve<'_>],
    start: &SpectralFitResult,
    c_window: (f64, f64),
) -> Result<SpectralFitResult> {
    let layout = start.layout();
    if layout.kind == SpectralModelKind::PowerLaw {
        return Err(Error::InvalidParameter(
            "coherence-domain fit supports Lorentzian models".into(),
        ));
    }
    let mut pts = Vec::new();
    for nc in curves {
        for ((&t, &c), &s) in nc
            .curve
            .times_us
            .iter()
            .zip(&nc.curve.coherence)
            .zip(&nc.curve.sigma)
        {
            if c >= c_window.0 && c <= c_window.1 {
                pts.push((nc.curve.pulse_sequence(t)?, nc.amplitude, c, s));
            }
        }
    }
    let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
    let sigma: Vec<f64> = pts.iter().map(|p| p.3).collect();
    let p0 = start.internal_params();
    let (lower, upper) = {
        let mut lo = vec![0.0; p0.len()];
        let mut hi = vec![1e3; p0.len()];
        for (i, v) in p0.iter().enumerate() {
            if layout.names()[i].starts_with("tau") {
                lo[i] = v * 1e-2;
                hi[i] = v * 1e2;
            }
        }
        (lo, hi)
    };
    let chi_opts = ChiOptions {
        rel_tol: 1e-4,
        ..Default::default()
    };
    let problem = NlsProblem {
        names: layout.names(),
        y: &y,
        sigma: &sigma,
        lower,
        upper,
        model: move |p: &[f64]| {
            let model = layout.model(p);
            pts.iter()
                .map(|(seq, a, _, _)| match &model {
                    Ok(m) => chi_exact_with(m, seq, &chi_opts)
                        .map(|c| a * (-c.value).exp())
                        .unwrap_or(f64::NAN),
                    Err(_) => f64::NAN,
                })
                .collect::<Vec<_>>()
        },
    };
    let r = nls_fit(&problem, &[p0], &NlsOptions::default())?;
    package(&layout, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomposition::SpectrumPoint;
    use approx::assert_relative_eq;

    fn sampled(model: &NoiseSpectrumModel, lo: f64, hi: f64, n: usize) -> SpectrumEstimate {
        SpectrumEstimate {
            points: log_grid(lo, hi, n)
                .into_iter()
                .map(|o| {
                    let s = crate::noise_model::evaluate_spectrum(model, o).unwrap();
                    SpectrumPoint {
                        omega: o,
                        s,
                        sigma: 0.02 * s,
                        provenance: vec![],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn double_lorentzian_exact_recovery() {
        let truth = NoiseSpectrumModel::double(0.5, 11.0, 0.34, 0.146).unwrap();
        let est = sampled(&truth, 0.005, 60.0, 50);
        let r = fit_spectrum_model(&est, SpectralModelKind::DoubleLorentzian, &Default::default())
            .unwrap();
        assert!(r.reduced_chi2 < 1e-10);
        assert_relative_eq!(r.params[0].value * 2.0 * PI, 0.5, max_relative = 1e-3);
        assert_relative_eq!(r.params[1].value, 11.0, max_relative = 1e-3);
        assert_relative_eq!(r.params[2].value * 2.0 * PI, 0.34, max_relative = 1e-3);
        assert_relative_eq!(r.params[3].value, 0.146, max_relative = 1e-3);
    }

    #[test]
    fn single_lorentzian_self_consistent() {
        let truth = NoiseSpectrumModel::single(0.7, 3.0).unwrap();
        let est = sampled(&truth, 0.01, 30.0, 30);
        let r = fit_spectrum_model(&est, SpectralModelKind::SingleLorentzian, &Default::default())
            .unwrap();
        assert_relative_eq!(r.params[0].value * 2.0 * PI, 0.7, max_relative = 1e-4);
        assert_relative_eq!(r.params[1].value, 3.0, max_relative = 1e-4);
    }

    #[test]
    fn global_needs_two_datasets() {
        let truth = NoiseSpectrumModel::single(0.7, 3.0).unwrap();
        let est = sampled(&truth, 0.01, 30.0, 30);
        assert_eq!(
            global_fit(&[("a".into(), est)]).unwrap_err().tag(),
            "not-global"
        );
    }

    #[test]
    fn depth_scaling_exact() {
        let pts: Vec<DepthPoint> = [2.0, 3.0, 5.0]
            .iter()
            .map(|&d| DepthPoint {
                depth_nm: d,
                depth_err_nm: 0.0,
                delta_mhz: 4.0 / (d * d),
                delta_err_mhz: 0.01 * 4.0 / (d * d),
            })
            .collect();
        let f = fit_depth_scaling(&pts).unwrap();
        assert_relative_eq!(f.n, 2.0, epsilon = 1e-6);
        assert_relative_eq!(f.a_mhz, 4.0, max_relative = 1e-6);
        assert!(fit_depth_scaling(&pts[..2]).is_err());
    }

    #[test]
    fn zero_covariance_zero_band() {
        let truth = NoiseSpectrumModel::single(0.7, 3.0).unwrap();
        let est = sampled(&truth, 0.01, 30.0, 30);
        let mut r = fit_spectrum_model(&est, SpectralModelKind::SingleLorentzian, &Default::default())
            .unwrap();
        for row in r.covariance.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        for b in confidence_band(&r, &[0.1, 1.0, 10.0]).unwrap() {
            assert_eq!(b.lower, b.value);
            assert_eq!(b.upper, b.value);
        }
        r.covariance[0][0] = -1.0;
        assert_eq!(
            confidence_band(&r, &[1.0]).unwrap_err().tag(),
            "covariance-invalid"
        );
    }
}
