use std::path::Path;
use std::sync::OnceLock;

use nvnoise::bath::{synthesize_dataset, MeasurementPlan, SyntheticEnvSpec};
use nvnoise::config::AnalysisConfig;
use nvnoise::dataset::{ingest_dataset, write_dataset, CoherenceCurve, NvDataset};
use nvnoise::pipeline::{run_pipeline, Report};
use nvnoise::plots::emit_plots;
use serde_json::Value;

fn reference() -> &'static (Vec<NvDataset>, Report) {
    static CELL: OnceLock<(Vec<NvDataset>, Report)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = synthesize_dataset(&SyntheticEnvSpec::reference(), &MeasurementPlan::default()).unwrap();
        let report = run_pipeline(&ds, &AnalysisConfig::default()).unwrap();
        (ds, report)
    })
}

fn schema_errors(report: &Report) -> Vec<String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let instance: Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    validator.iter_errors(&instance).map(|e| format!("{} at {}", e, e.instance_path())).collect()
}

#[test]
fn reference_report_is_complete_and_schema_valid() {
    let (_, report) = reference();
    assert!(!report.partial_failure);
    assert_eq!(report.datasets.len(), 4);
    for d in &report.datasets {
        for (name, s) in &d.stages {
            assert_eq!(s.status, "ok", "{} {name}: {:?}", d.id, s.message);
        }
        assert_eq!(d.spectral_fits.len(), 3);
        assert!(d.scaling.is_some() && d.t1.is_some() && d.depth.is_some());
    }
    assert!(report.ensemble.global_fit.is_some());
    assert!(report.ensemble.depth_scaling_slow.is_some() && report.ensemble.depth_scaling_fast.is_some());
    let errors = schema_errors(report);
    assert!(errors.is_empty(), "{errors:#?}");
}

#[test]
fn report_is_deterministic() {
    let (ds, report) = reference();
    let again = run_pipeline(ds, &AnalysisConfig::default()).unwrap();
    assert_eq!(report.to_json().unwrap(), again.to_json().unwrap());
}

#[test]
fn single_dataset_has_no_ensemble_sections() {
    let (ds, _) = reference();
    let report = run_pipeline(&ds[1..2], &AnalysisConfig::default()).unwrap();
    assert!(report.ensemble.global_fit.is_none());
    assert!(report.ensemble.depth_scaling_slow.is_none());
    assert!(report.ensemble.notes.iter().any(|n| n.starts_with("not-global")));
    assert_eq!(report.ensemble.stages["global_fit"].status, "skipped");
    assert!(!report.partial_failure);
    assert!(schema_errors(&report).is_empty());
}

#[test]
fn single_pulse_count_degrades_gracefully() {
    let (ds, _) = reference();
    let mut d = ds[1].clone();
    d.curves.retain(|c: &CoherenceCurve| c.n_pulses == 1);
    let report = run_pipeline(&[d], &AnalysisConfig::default()).unwrap();
    let r = &report.datasets[0];
    assert_eq!(r.decay_fits.len(), 1);
    assert_eq!(r.stages["decay"].status, "ok");
    assert_eq!(r.stages["scaling"].error.as_deref(), Some("scaling-underdetermined"));
    assert_eq!(r.stages["spectrum"].error.as_deref(), Some("spectrum-underdetermined"));
    assert!(r.scaling.is_none() && r.spectrum.is_none());
    assert!(report.partial_failure);
    assert!(schema_errors(&report).is_empty());
}

#[test]
fn dataset_file_round_trip() {
    let (ds, _) = reference();
    let dir = tempfile::tempdir().unwrap();
    for d in ds {
        let path = dir.path().join(format!("{}.json", d.id));
        write_dataset(d, &path).unwrap();
        assert_eq!(&ingest_dataset(&path, 0.02).unwrap(), d);
    }
}

#[test]
fn csv_directory_without_sigma_uses_default() {
    let dir = tempfile::tempdir().unwrap();
    let meta = serde_json::json!({
        "id": "lab1", "nominal_depth_nm": 5.0, "field_gauss": 454.0, "temperature_k": 295.0,
        "coating": "none",
        "curves": [{"file": "n1.csv", "n_pulses": 1, "sequence": "CPMG"}]
    });
    std::fs::write(dir.path().join("metadata.json"), meta.to_string()).unwrap();
    std::fs::write(
        dir.path().join("n1.csv"),
        "times_us,coherence\n1,0.99\n2,0.95\n4,0.8\n8,0.4\n16,0.05\n",
    )
    .unwrap();
    let d = ingest_dataset(dir.path(), 0.03).unwrap();
    assert_eq!(d.curves[0].sigma, vec![0.03; 5]);
    assert_eq!(d.curves[0].coherence[3], 0.4);
}

fn read_csv(path: &Path) -> Vec<(String, String, f64, f64, Option<f64>)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        ["series", "style", "x", "y", "y_upper"]
    );
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            let num = |i: usize| rec[i].parse::<f64>().unwrap();
            let upper = (!rec[4].is_empty()).then(|| num(4));
            (rec[0].to_string(), rec[1].to_string(), num(2), num(3), upper)
        })
        .collect()
}

#[test]
fn plots_match_report_numbers() {
    let (ds, report) = reference();
    let dir = tempfile::tempdir().unwrap();
    let files = emit_plots(report, ds, dir.path(), None).unwrap();
    for stem in ["t2_vs_n", "delta_vs_depth", "coherence_nv3", "spectrum_nv3"] {
        assert!(files.contains(&dir.path().join(format!("{stem}.csv"))), "{stem}");
        assert!(files.contains(&dir.path().join(format!("{stem}.svg"))), "{stem}");
    }
    for f in files.iter().filter(|f| f.extension().is_some_and(|e| e == "svg")) {
        let svg = std::fs::read_to_string(f).unwrap();
        assert!(svg.starts_with("<svg"), "{}", f.display());
        assert!(!svg.contains("generated"), "unexpected stamp in {}", f.display());
        // Axis labels carry units; the legend names every series.
        assert!(svg.contains("(us)") || svg.contains("(MHz") || svg.contains("(nm)") || svg.contains("coherence C"));
        let csv = read_csv(&f.with_extension("csv"));
        for (series, ..) in &csv {
            assert!(svg.contains(series.as_str()), "{} lacks legend entry {series}", f.display());
        }
    }

    // Spectrum points re-parse to exactly the reported numbers.
    let rows = read_csv(&dir.path().join("spectrum_nv3.csv"));
    let rep = report.datasets.iter().find(|d| d.id == "nv3").unwrap();
    let expected: Value = serde_json::to_value(rep.spectrum.as_ref().unwrap()).unwrap();
    let points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.0 == "reconstructed")
        .map(|r| (r.2, r.3))
        .collect();
    let want: Vec<(f64, f64)> = expected["points"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| (p["frequency_mhz"].as_f64().unwrap(), p["psd_mhz"].as_f64().unwrap()))
        .collect();
    assert_eq!(points, want);

    let vline: Vec<_> = rows.iter().filter(|r| r.1 == "vline").collect();
    assert_eq!(vline.len(), 1);
    assert!((vline[0].2 - 1.9330).abs() < 1e-4);
    assert_eq!(vline[0].0, "1H Larmor 1.9330 MHz");

    // Decay fit T2 values appear verbatim in the T2 panel.
    let t2 = read_csv(&dir.path().join("t2_vs_n.csv"));
    for f in &rep.decay_fits {
        assert!(t2.iter().any(|r| r.0 == "nv3 T2" && r.2 == f.n_pulses as f64 && r.3 == f.t2_us));
    }
}

#[test]
fn stamp_is_opt_in() {
    let (ds, report) = reference();
    let dir = tempfile::tempdir().unwrap();
    emit_plots(report, ds, dir.path(), Some("unix-time 0")).unwrap();
    let svg = std::fs::read_to_string(dir.path().join("t2_vs_n.svg")).unwrap();
    assert!(svg.contains("<!-- generated unix-time 0 -->"));
}
