use std::fs;

use mcforge::microdose::{
    self, Bin, GainTable, LinearSpectrum, LogSpectrum, MicroError, QualityKernel, SiteGeometry, SumConvention,
};
use mcforge::plotsvg::{self, Axis, PlotError, PlotFlags, PlotSpec, Series};
use mcforge::postproc::TabRow;

fn icru40(y: f64) -> f64 {
    5510.0 / y * (1.0 - (-5e-5 * y * y - 2e-7 * y.powi(3)).exp())
}

fn energy_spectrum() -> LinearSpectrum {
    let rows: Vec<TabRow> = (0..200)
        .map(|i| {
            let lo = 1e-7 * (i + 1) as f64;
            let x = (i as f64 - 80.0) / 25.0;
            TabRow::new(lo, lo + 1e-7, 1e3 * (-0.5 * x * x).exp() + 1.0, 4.0)
        })
        .collect();
    LinearSpectrum::from_rows(&rows).unwrap()
}

#[test]
fn quality_kernel_matches_closed_form() {
    for y in [0.1, 1.0, 10.0, 100.0, 137.0, 1000.0] {
        let q = QualityKernel::Icru40.eval(y);
        assert!(((q - icru40(y)) / icru40(y)).abs() < 1e-9, "y = {y}");
    }
    assert!((microdose::quality_kernel(100.0, "icru40").unwrap() - 27.7380).abs() < 1e-3);
    assert!(matches!(microdose::quality_kernel(1.0, "nope"), Err(MicroError::UnknownKernel(_))));
}

#[test]
fn lineal_conversion_scales_edges_only() {
    let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 0).unwrap();
    let spec = energy_spectrum();
    let lineal = microdose::to_lineal(&spec, &geom);
    // 1 GeV over a 1/30 um chord.
    let k = 1e6 / (50.0e-3 * 2.0 / 3.0);
    for (a, b) in spec.bins.iter().zip(&lineal.bins) {
        assert!(((b.low - a.low * k) / b.low).abs() < 1e-12);
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.sigma, b.sigma);
    }
}

#[test]
fn log_rebin_uses_decade_aligned_edges_and_conserves_counts() {
    let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 0).unwrap();
    let spec = energy_spectrum();
    let log = microdose::rebin_energy_spectrum(&spec, &geom, None, 20).unwrap();
    assert_eq!(log.bins_per_decade, 20);
    for b in &log.bins {
        let r = (b.high / b.low).log10();
        assert!((r - 0.05).abs() < 1e-9, "{r}");
    }
    let before = spec.total_counts();
    assert!(((log.total_counts() - before) / before).abs() < 1e-12);
    let e = log.mean_energy_gev.unwrap();
    let oracle = spec.bins.iter().map(|b| b.mid() * b.counts).sum::<f64>() / before;
    assert!(((e - oracle) / oracle).abs() < 1e-12);
}

#[test]
fn gain_flag_needs_a_table_and_table_needs_points() {
    let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 1).unwrap();
    assert!(matches!(
        microdose::rebin_energy_spectrum(&energy_spectrum(), &geom, None, 20),
        Err(MicroError::MissingGainTable)
    ));
    assert!(GainTable::new(vec![]).is_err());
    assert!(SiteGeometry::new(50.0, 1.5, 0).is_err());
    assert!(SiteGeometry::new(-1.0, 0.5, 0).is_err());
}

#[test]
fn conventions_differ_only_in_the_quality_average() {
    let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 0).unwrap();
    let log = microdose::rebin_energy_spectrum(&energy_spectrum(), &geom, None, 30).unwrap();
    let w = microdose::compute_spectra(&log, QualityKernel::Icru40, SumConvention::Weighted).unwrap();
    let l = microdose::compute_spectra(&log, QualityKernel::Icru40, SumConvention::AppendixLiteralSums).unwrap();
    assert_eq!(w.y_f, l.y_f);
    assert_eq!(w.y_d, l.y_d);
    let oracle_literal = l.bins.iter().map(|b| b.q * b.d).sum::<f64>() / l.bins.iter().map(|b| b.d).sum::<f64>();
    assert!(((l.q_avg - oracle_literal) / oracle_literal).abs() < 1e-12);
    assert!(w.q_avg > 0.0 && w.sigma_q > 0.0);
}

#[test]
fn empty_spectrum_is_an_error() {
    let log = LogSpectrum {
        bins: vec![Bin::new(1.0, 2.0, 0.0, 0.0)],
        bins_per_decade: 10,
        mean_energy_gev: None,
    };
    assert!(microdose::compute_spectra(&log, QualityKernel::Icru40, SumConvention::Weighted).is_err());
}

#[test]
fn results_are_written_as_svg_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 0).unwrap();
    let log = microdose::rebin_energy_spectrum(&energy_spectrum(), &geom, None, 30).unwrap();
    let s = microdose::compute_spectra(&log, QualityKernel::Icru40, SumConvention::Weighted).unwrap();
    let files = microdose::emit_results(&s, dir.path()).unwrap();
    assert!(files.iter().all(|f| f.is_file()));
    let svg = fs::read_to_string(dir.path().join(microdose::SPECTRUM_SVG)).unwrap();
    roxmltree::Document::parse(&svg).unwrap();
    let mut csv = csv::Reader::from_path(dir.path().join(microdose::DISTRIBUTIONS_CSV)).unwrap();
    assert_eq!(csv.records().count(), s.bins.len());
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(microdose::SUMMARY_JSON)).unwrap()).unwrap();
    assert_eq!(summary["q_avg"].as_f64().unwrap(), s.q_avg);
}

fn spec(x: Vec<f64>, y: Vec<f64>, flags: PlotFlags) -> PlotSpec {
    PlotSpec {
        series: vec![Series {
            yerr: Some(y.iter().map(|v| 0.1 * v).collect()),
            x,
            y,
            label: "a <b> & \"c\"".into(),
        }],
        flags,
        title: "t".into(),
        x_label: "x".into(),
        y_label: "y".into(),
    }
}

#[test]
fn svg_is_well_formed_and_escapes_labels() {
    let flags = PlotFlags {
        plot_error_bars: true,
        semilogx: true,
        ..PlotFlags::default()
    };
    let svg = plotsvg::render_svg(&spec(vec![1.0, 10.0, 100.0], vec![3.0, 1.0, 2.0], flags)).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(texts.iter().any(|t| t.contains("a <b> & \"c\"")));
}

#[test]
fn log_axes_reject_non_positive_data() {
    let flags = PlotFlags {
        semilogy: true,
        ..PlotFlags::default()
    };
    let err = plotsvg::render_svg(&spec(vec![1.0, 2.0], vec![1.0, 0.0], flags)).unwrap_err();
    assert!(matches!(err, PlotError::NonPositiveLogData(Axis::Y)));
    let err = plotsvg::render_svg(&spec(vec![1.0], vec![1.0], PlotFlags::default())).unwrap_err();
    assert!(matches!(err, PlotError::EmptySeries));
}
