//! Microdosimetric spectra from a deposited-energy histogram.
//!
//! Energies are in GeV, lineal energies in keV/um and site diameters in nm.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plotsvg::{self, PlotError, PlotFlags, PlotSpec, Series};
use crate::postproc::TabRow;
use crate::stats;

pub const DEFAULT_BINS_PER_DECADE: usize = 60;
pub const SPECTRUM_SVG: &str = "ydy_spectrum.svg";
pub const DISTRIBUTIONS_CSV: &str = "lineal_distributions.csv";
pub const SUMMARY_JSON: &str = "micro_summary.json";
pub const LOG_DATA_JSON: &str = "tepc_log_data.json";

#[derive(Debug, Error)]
pub enum MicroError {
    #[error("gain table has no points")]
    EmptyGainTable,
    #[error("gain table needs positive energies and gains")]
    InvalidGain,
    #[error("gain weighting requested (flag = 1) but no gain table given")]
    MissingGainTable,
    #[error("invalid site geometry: {0}")]
    InvalidGeometry(String),
    #[error("spectrum lower edge must be positive for log rebinning, got {0}")]
    NonPositiveEdge(f64),
    #[error("invalid spectrum: {0}")]
    InvalidSpectrum(String),
    #[error("spectrum has no counts")]
    ZeroCounts,
    #[error("unknown quality kernel `{0}`")]
    UnknownKernel(String),
    #[error(transparent)]
    Plot(#[from] PlotError),
    #[error("cannot write csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MicroError + '_ {
    move |source| MicroError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// `(low, high, counts, sigma)`; serialized as a 4-array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub counts: f64,
    pub sigma: f64,
}

impl Bin {
    pub fn new(low: f64, high: f64, counts: f64, sigma: f64) -> Self {
        Bin { low, high, counts, sigma }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.low + self.high)
    }
}

impl From<[f64; 4]> for Bin {
    fn from(v: [f64; 4]) -> Self {
        Bin::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Bin> for [f64; 4] {
    fn from(b: Bin) -> Self {
        [b.low, b.high, b.counts, b.sigma]
    }
}

fn check_bins(bins: &[Bin]) -> Result<(), MicroError> {
    if bins.is_empty() {
        return Err(MicroError::InvalidSpectrum("no bins".into()));
    }
    for (i, b) in bins.iter().enumerate() {
        if !(b.high > b.low) {
            return Err(MicroError::InvalidSpectrum(format!("bin {i} has high <= low")));
        }
        if !(b.counts >= 0.0) || !(b.sigma >= 0.0) {
            return Err(MicroError::InvalidSpectrum(format!("bin {i} has negative counts or sigma")));
        }
    }
    for (i, w) in bins.windows(2).enumerate() {
        let tol = 1e-9 * w[0].high.abs().max(f64::MIN_POSITIVE);
        if (w[1].low - w[0].high).abs() > tol {
            return Err(MicroError::InvalidSpectrum(format!(
                "bins {i} and {} are not contiguous",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Contiguous ascending histogram with absolute count uncertainties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSpectrum {
    pub bins: Vec<Bin>,
}

impl LinearSpectrum {
    pub fn new(bins: Vec<Bin>) -> Result<Self, MicroError> {
        check_bins(&bins)?;
        Ok(LinearSpectrum { bins })
    }

    /// Tabulated rows, with the error column (percent) made absolute.
    pub fn from_rows(rows: &[TabRow]) -> Result<Self, MicroError> {
        Self::new(
            rows.iter()
                .map(|r| Bin::new(r.elow, r.ehigh, r.value, r.value.abs() * r.err_pct / 100.0))
                .collect(),
        )
    }

    pub fn total_counts(&self) -> f64 {
        self.bins.iter().map(|b| b.counts).sum()
    }
}

/// Gas gain as a function of deposited energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainTable {
    points: Vec<(f64, f64)>,
}

impl GainTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self, MicroError> {
        if points.is_empty() {
            return Err(MicroError::EmptyGainTable);
        }
        if points.iter().any(|&(e, g)| !(e > 0.0) || !(g > 0.0)) {
            return Err(MicroError::InvalidGain);
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(GainTable { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear in ln(E) between points, flat beyond the ends.
    pub fn gain_at(&self, energy: f64) -> f64 {
        let pts = &self.points;
        let first = pts[0];
        let last = pts[pts.len() - 1];
        if !(energy > first.0) {
            return first.1;
        }
        if energy >= last.0 {
            return last.1;
        }
        let k = pts.partition_point(|p| p.0 <= energy);
        let (e0, g0) = pts[k - 1];
        let (e1, g1) = pts[k];
        let t = (energy.ln() - e0.ln()) / (e1.ln() - e0.ln());
        g0 + t * (g1 - g0)
    }
}

pub fn weight_with_gains(spec: &LinearSpectrum, gains: &GainTable) -> LinearSpectrum {
    LinearSpectrum {
        bins: spec
            .bins
            .iter()
            .map(|b| {
                let g = gains.gain_at(b.mid());
                Bin::new(b.low, b.high, b.counts * g, b.sigma * g)
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteGeometry {
    /// Simulated site diameter, nm.
    pub dt_nm: f64,
    /// Mean chord length as a fraction of the diameter.
    pub clf: f64,
    /// 1 applies gas-gain weighting, 0 does not.
    pub flag: i32,
}

impl SiteGeometry {
    pub fn new(dt_nm: f64, clf: f64, flag: i32) -> Result<Self, MicroError> {
        let g = SiteGeometry { dt_nm, clf, flag };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), MicroError> {
        if !(self.dt_nm > 0.0) || !self.dt_nm.is_finite() {
            return Err(MicroError::InvalidGeometry(format!("dt must be positive, got {}", self.dt_nm)));
        }
        if !(self.clf > 0.0 && self.clf <= 1.0) {
            return Err(MicroError::InvalidGeometry(format!("clf must be in (0, 1], got {}", self.clf)));
        }
        if !matches!(self.flag, 0 | 1) {
            return Err(MicroError::InvalidGeometry(format!("flag must be 0 or 1, got {}", self.flag)));
        }
        Ok(())
    }

    pub fn mean_chord_um(&self) -> f64 {
        self.clf * self.dt_nm * 1e-3
    }

    /// keV/um per GeV.
    pub fn lineal_factor(&self) -> f64 {
        1e6 / self.mean_chord_um()
    }
}

/// Energy bins (GeV) to lineal-energy bins (keV/um). Counts and their
/// uncertainties are unchanged.
pub fn to_lineal(spec: &LinearSpectrum, geom: &SiteGeometry) -> LinearSpectrum {
    let k = geom.lineal_factor();
    LinearSpectrum {
        bins: spec
            .bins
            .iter()
            .map(|b| Bin::new(b.low * k, b.high * k, b.counts, b.sigma))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSpectrum {
    pub bins: Vec<Bin>,
    pub bins_per_decade: usize,
    /// Count-weighted mean deposited energy of the source spectrum, GeV.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_energy_gev: Option<f64>,
}

impl LogSpectrum {
    pub fn total_counts(&self) -> f64 {
        self.bins.iter().map(|b| b.counts).sum()
    }

    pub fn load(path: &Path) -> Result<Self, MicroError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: LogSpectrum = serde_json::from_str(&text)
            .map_err(|e| MicroError::InvalidSpectrum(format!("{}: {e}", path.display())))?;
        check_bins(&spec.bins)?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<(), MicroError> {
        let mut text = serde_json::to_string_pretty(self).expect("spectrum serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Redistribute counts onto edges `y_min * 10^(k/B)` by overlap fraction.
/// Uncertainties of the fractional shares add in quadrature.
pub fn log_rebin(spec: &LinearSpectrum, bins_per_decade: usize) -> Result<LogSpectrum, MicroError> {
    check_bins(&spec.bins)?;
    if bins_per_decade == 0 {
        return Err(MicroError::InvalidSpectrum("bins_per_decade must be at least 1".into()));
    }
    let y_min = spec.bins[0].low;
    if !(y_min > 0.0) {
        return Err(MicroError::NonPositiveEdge(y_min));
    }
    let y_max = spec.bins[spec.bins.len() - 1].high;
    let b = bins_per_decade as f64;
    let n = ((b * (y_max / y_min).log10()) - 1e-9).ceil().max(1.0) as usize;

    // Snap target edges onto nearby source edges so aligned grids map 1:1.
    let source_edges: Vec<f64> = std::iter::once(y_min).chain(spec.bins.iter().map(|b| b.high)).collect();
    let edges: Vec<f64> = (0..=n)
        .map(|k| {
            let e = y_min * 10f64.powf(k as f64 / b);
            let j = source_edges.partition_point(|s| *s < e);
            [j.checked_sub(1), Some(j)]
                .into_iter()
                .flatten()
                .filter_map(|j| source_edges.get(j))
                .find(|s| ((*s - e) / e).abs() < 1e-9)
                .copied()
                .unwrap_or(e)
        })
        .collect();

    let mut counts = vec![0.0; n];
    let mut var = vec![0.0; n];
    let mut k = 0;
    for src in &spec.bins {
        let width = src.width();
        while k < n && edges[k + 1] <= src.low {
            k += 1;
        }
        let mut t = k;
        while t < n && edges[t] < src.high {
            let overlap = src.high.min(edges[t + 1]) - src.low.max(edges[t]);
            if overlap > 0.0 {
                let frac = overlap / width;
                counts[t] += frac * src.counts;
                var[t] += (frac * src.sigma).powi(2);
            }
            t += 1;
        }
    }
    Ok(LogSpectrum {
        bins: (0..n)
            .map(|t| Bin::new(edges[t], edges[t + 1], counts[t], var[t].sqrt()))
            .collect(),
        bins_per_decade,
        mean_energy_gev: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityKernel {
    /// `Q(y) = (5510/y)(1 - exp(-5e-5 y^2 - 2e-7 y^3))`
    #[serde(rename = "icru40")]
    Icru40,
    /// `Q(y) = 5.60e-5 y^2 (1 - exp(-0.5e-4 y) - 2e-6 y)`
    #[serde(rename = "appendix-literal")]
    AppendixLiteral,
}

impl QualityKernel {
    pub fn from_id(id: &str) -> Result<Self, MicroError> {
        match id {
            "icru40" => Ok(QualityKernel::Icru40),
            "appendix-literal" => Ok(QualityKernel::AppendixLiteral),
            other => Err(MicroError::UnknownKernel(other.to_string())),
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            QualityKernel::Icru40 => "icru40",
            QualityKernel::AppendixLiteral => "appendix-literal",
        }
    }

    pub fn eval(self, y: f64) -> f64 {
        match self {
            QualityKernel::Icru40 => {
                // -expm1 keeps precision as y -> 0.
                let x = -5e-5 * y * y - 2e-7 * y * y * y;
                -5510.0 / y * x.exp_m1()
            }
            QualityKernel::AppendixLiteral => 5.60e-5 * y * y * (-(-0.5e-4 * y).exp_m1() - 2e-6 * y),
        }
    }
}

pub fn quality_kernel(y: f64, id: &str) -> Result<f64, MicroError> {
    Ok(QualityKernel::from_id(id)?.eval(y))
}

/// How the mean quality factor sums over bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumConvention {
    /// `sum(Q d dy) / sum(d dy)`
    #[default]
    Weighted,
    /// `sum(Q d) / sum(d)`
    AppendixLiteralSums,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroBin {
    pub y_low: f64,
    pub y_high: f64,
    pub y_mid: f64,
    pub counts: f64,
    pub f: f64,
    pub sigma_f: f64,
    pub d: f64,
    pub sigma_d: f64,
    pub q: f64,
}

impl MicroBin {
    pub fn dy(&self) -> f64 {
        self.y_high - self.y_low
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroSpectra {
    pub bins: Vec<MicroBin>,
    pub y_f: f64,
    pub sigma_y_f: f64,
    pub y_d: f64,
    /// Mean deposited energy, GeV, when the source spectrum was known.
    pub e_mean_gev: Option<f64>,
    pub q_avg: f64,
    pub sigma_q: f64,
    pub kernel: QualityKernel,
    pub convention: SumConvention,
}

fn q_weights(bins: &[MicroBin], convention: SumConvention) -> Vec<f64> {
    bins.iter()
        .map(|b| match convention {
            SumConvention::Weighted => b.dy(),
            SumConvention::AppendixLiteralSums => 1.0,
        })
        .collect()
}

/// f, d, their means and the mean quality factor, with uncertainties from
/// [`propagate_uncertainty`] using the default `sigma_yF`.
pub fn compute_spectra(
    spec: &LogSpectrum,
    kernel: QualityKernel,
    convention: SumConvention,
) -> Result<MicroSpectra, MicroError> {
    check_bins(&spec.bins)?;
    let total = spec.total_counts();
    if !(total > 0.0) {
        return Err(MicroError::ZeroCounts);
    }
    let mut bins: Vec<MicroBin> = spec
        .bins
        .iter()
        .map(|b| MicroBin {
            y_low: b.low,
            y_high: b.high,
            y_mid: b.mid(),
            counts: b.counts,
            f: b.counts / (b.width() * total),
            sigma_f: 0.0,
            d: 0.0,
            sigma_d: 0.0,
            q: kernel.eval(b.mid()),
        })
        .collect();
    let y_f: f64 = bins.iter().map(|b| b.y_mid * b.f * b.dy()).sum();
    for b in &mut bins {
        b.d = b.y_mid * b.f / y_f;
    }
    let y_d: f64 = bins.iter().map(|b| b.y_mid * b.d * b.dy()).sum();
    let w = q_weights(&bins, convention);
    let s: f64 = bins.iter().zip(&w).map(|(b, w)| w * b.d).sum();
    let sq: f64 = bins.iter().zip(&w).map(|(b, w)| w * b.q * b.d).sum();
    let mut spectra = MicroSpectra {
        bins,
        y_f,
        sigma_y_f: 0.0,
        y_d,
        e_mean_gev: spec.mean_energy_gev,
        q_avg: sq / s,
        sigma_q: 0.0,
        kernel,
        convention,
    };
    propagate_uncertainty(spec, &mut spectra, None);
    Ok(spectra)
}

/// Fill `sigma_f`, `sigma_d`, `sigma_y_f` and `sigma_q`. Without an explicit
/// `sigma_y_f`, it is `sqrt(sum((y dy sigma_f)^2))`.
pub fn propagate_uncertainty(spec: &LogSpectrum, spectra: &mut MicroSpectra, sigma_y_f: Option<f64>) {
    let total = spec.total_counts();
    let sigma_total = spec.bins.iter().map(|b| b.sigma * b.sigma).sum::<f64>().sqrt();
    let rel_total = sigma_total / total;
    for (mb, b) in spectra.bins.iter_mut().zip(&spec.bins) {
        mb.sigma_f = if b.counts > 0.0 {
            mb.f * ((b.sigma / b.counts).powi(2) + rel_total.powi(2)).sqrt()
        } else {
            0.0
        };
    }
    spectra.sigma_y_f = sigma_y_f.unwrap_or_else(|| {
        spectra
            .bins
            .iter()
            .map(|b| (b.y_mid * b.dy() * b.sigma_f).powi(2))
            .sum::<f64>()
            .sqrt()
    });
    let rel_yf = spectra.sigma_y_f / spectra.y_f;
    for mb in &mut spectra.bins {
        mb.sigma_d = if mb.f > 0.0 {
            mb.d * ((mb.sigma_f / mb.f).powi(2) + rel_yf.powi(2)).sqrt()
        } else {
            0.0
        };
    }
    let w = q_weights(&spectra.bins, spectra.convention);
    let s: f64 = spectra.bins.iter().zip(&w).map(|(b, w)| w * b.d).sum();
    let sq: f64 = spectra.bins.iter().zip(&w).map(|(b, w)| w * b.q * b.d).sum();
    spectra.sigma_q = spectra
        .bins
        .iter()
        .zip(&w)
        .map(|(b, w)| (w * (b.q * s - sq) / (s * s) * b.sigma_d).powi(2))
        .sum::<f64>()
        .sqrt();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MicroOptions {
    pub bins_per_decade: usize,
    pub kernel: QualityKernel,
    pub convention: SumConvention,
}

impl Default for MicroOptions {
    fn default() -> Self {
        MicroOptions {
            bins_per_decade: DEFAULT_BINS_PER_DECADE,
            kernel: QualityKernel::Icru40,
            convention: SumConvention::Weighted,
        }
    }
}

/// Gain weighting (when `geom.flag == 1`), conversion to lineal energy and
/// log rebinning. The mean deposited energy is taken before conversion.
pub fn rebin_energy_spectrum(
    energy: &LinearSpectrum,
    geom: &SiteGeometry,
    gains: Option<&GainTable>,
    bins_per_decade: usize,
) -> Result<LogSpectrum, MicroError> {
    geom.validate()?;
    let weighted = match (geom.flag, gains) {
        (1, Some(g)) => weight_with_gains(energy, g),
        (1, None) => return Err(MicroError::MissingGainTable),
        _ => energy.clone(),
    };
    let triples: Vec<(f64, f64, f64)> = weighted.bins.iter().map(|b| (b.low, b.high, b.counts)).collect();
    let mean = stats::average_energy(&triples).map_err(|_| MicroError::ZeroCounts)?;
    let mut log = log_rebin(&to_lineal(&weighted, geom), bins_per_decade)?;
    log.mean_energy_gev = Some(mean);
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MicroSummary {
    pub e_mean_gev: Option<f64>,
    pub e_mean_kev: Option<f64>,
    pub y_f: f64,
    pub sigma_y_f: f64,
    pub y_d: f64,
    pub q_avg: f64,
    pub sigma_q: f64,
    pub kernel: QualityKernel,
    pub convention: SumConvention,
    pub n_bins: usize,
}

impl MicroSpectra {
    pub fn summary(&self) -> MicroSummary {
        MicroSummary {
            e_mean_gev: self.e_mean_gev,
            e_mean_kev: self.e_mean_gev.map(|e| e * 1e6),
            y_f: self.y_f,
            sigma_y_f: self.sigma_y_f,
            y_d: self.y_d,
            q_avg: self.q_avg,
            sigma_q: self.sigma_q,
            kernel: self.kernel,
            convention: self.convention,
            n_bins: self.bins.len(),
        }
    }
}

/// Write the y d(y) plot, the per-bin distributions and the summary.
pub fn emit_results(spectra: &MicroSpectra, out_dir: &Path) -> Result<Vec<PathBuf>, MicroError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let svg_path = out_dir.join(SPECTRUM_SVG);
    let mut title = format!(
        "yF = {:.4} keV/um, yD = {:.4} keV/um, Q = {:.4} +/- {:.4}",
        spectra.y_f, spectra.y_d, spectra.q_avg, spectra.sigma_q
    );
    if let Some(e) = spectra.e_mean_gev {
        title = format!("E = {:.4} keV, {title}", e * 1e6);
    }
    let plot = PlotSpec {
        series: vec![Series {
            x: spectra.bins.iter().map(|b| b.y_mid).collect(),
            y: spectra.bins.iter().map(|b| b.y_mid * b.d).collect(),
            yerr: Some(spectra.bins.iter().map(|b| b.y_mid * b.sigma_d).collect()),
            label: "y d(y)".into(),
        }],
        flags: PlotFlags {
            semilogx: true,
            ..PlotFlags::default()
        },
        title,
        x_label: "y (keV/um)".into(),
        y_label: "y d(y)".into(),
    };
    plotsvg::render_plot(&plot, &svg_path)?;

    let csv_path = out_dir.join(DISTRIBUTIONS_CSV);
    let csv_err = |source| MicroError::Csv {
        path: csv_path.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&csv_path).map_err(csv_err)?;
    w.write_record(["y_mid", "f", "sigma_f", "d", "sigma_d"]).map_err(csv_err)?;
    for b in &spectra.bins {
        w.write_record(
            [b.y_mid, b.f, b.sigma_f, b.d, b.sigma_d].map(|v| format!("{v:e}")),
        )
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(&csv_path))?;

    let json_path = out_dir.join(SUMMARY_JSON);
    let mut json = serde_json::to_string_pretty(&spectra.summary()).expect("summary serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(io_err(&json_path))?;

    Ok(vec![svg_path, csv_path, json_path])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lin(bins: &[(f64, f64, f64)]) -> LinearSpectrum {
        LinearSpectrum::new(bins.iter().map(|&(l, h, c)| Bin::new(l, h, c, c.sqrt())).collect()).unwrap()
    }

    fn log_grid(y0: f64, bpd: usize, counts: &[f64]) -> LogSpectrum {
        let edge = |k: usize| y0 * 10f64.powf(k as f64 / bpd as f64);
        LogSpectrum {
            bins: counts
                .iter()
                .enumerate()
                .map(|(k, &c)| Bin::new(edge(k), edge(k + 1), c, c.sqrt()))
                .collect(),
            bins_per_decade: bpd,
            mean_energy_gev: None,
        }
    }

    #[test]
    fn gains_identity_and_constant() {
        let s = lin(&[(1.0, 2.0, 5.0), (2.0, 3.0, 7.0)]);
        assert_eq!(weight_with_gains(&s, &GainTable::new(vec![(1.0, 1.0), (3.0, 1.0)]).unwrap()), s);
        let doubled = weight_with_gains(&s, &GainTable::new(vec![(2.0, 2.0)]).unwrap());
        assert_eq!(doubled.bins[1].counts, 14.0);
        assert_eq!(doubled.bins[0].sigma, 2.0 * 5f64.sqrt());
        assert!(matches!(GainTable::new(vec![]), Err(MicroError::EmptyGainTable)));
    }

    #[test]
    fn gain_log_interpolation() {
        let g = GainTable::new(vec![(1.0, 2.0), (100.0, 4.0)]).unwrap();
        assert!((g.gain_at(10.0) - 3.0).abs() < 1e-12);
        assert_eq!(g.gain_at(0.5), 2.0);
        assert_eq!(g.gain_at(500.0), 4.0);
    }

    #[test]
    fn lineal_conversion() {
        let geom = SiteGeometry::new(50.0, 2.0 / 3.0, 0).unwrap();
        let y = to_lineal(&lin(&[(1e-9, 2e-9, 4.0)]), &geom);
        assert!((y.bins[0].low - 0.03).abs() < 1e-12);
        assert!((y.bins[0].high - 0.06).abs() < 1e-12);
        assert_eq!(y.bins[0].counts, 4.0);
        let geom2 = SiteGeometry::new(100.0, 2.0 / 3.0, 0).unwrap();
        let y2 = to_lineal(&lin(&[(1e-9, 2e-9, 4.0)]), &geom2);
        assert!((y2.bins[0].low - 0.015).abs() < 1e-12);
        assert!(SiteGeometry::new(50.0, 1.5, 0).is_err());
    }

    #[test]
    fn aligned_grid_is_identity() {
        let src = log_grid(0.01, 60, &(0..120).map(|k| (k % 7) as f64 + 1.0).collect::<Vec<_>>());
        let out = log_rebin(&LinearSpectrum::new(src.bins.clone()).unwrap(), 60).unwrap();
        assert_eq!(out.bins.len(), src.bins.len());
        for (a, b) in out.bins.iter().zip(&src.bins) {
            assert!((a.counts - b.counts).abs() < 1e-9 * b.counts);
            assert!((a.sigma - b.sigma).abs() < 1e-9 * b.sigma);
        }
    }

    #[test]
    fn split_by_overlap() {
        // One decade per bin; the source bin [1, 31) puts 9/30 below 10.
        let src = lin(&[(1.0, 31.0, 100.0)]);
        let out = log_rebin(&src, 1).unwrap();
        assert_eq!(out.bins.len(), 2);
        assert!((out.bins[0].counts - 30.0).abs() < 1e-9);
        assert!((out.bins[1].counts - 70.0).abs() < 1e-9);
        assert!((out.bins[0].sigma - 3.0).abs() < 1e-9);
        assert!(matches!(log_rebin(&lin(&[(0.0, 1.0, 1.0)]), 60), Err(MicroError::NonPositiveEdge(_))));
    }

    #[test]
    fn delta_spectrum() {
        let mut counts = vec![0.0; 30];
        counts[12] = 500.0;
        let spec = log_grid(0.1, 10, &counts);
        let m = compute_spectra(&spec, QualityKernel::Icru40, SumConvention::Weighted).unwrap();
        let y0 = spec.bins[12].mid();
        assert!((m.y_f - y0).abs() < 1e-12 * y0);
        assert!((m.y_d - y0).abs() < 1e-12 * y0);
        assert!((m.q_avg - QualityKernel::Icru40.eval(y0)).abs() < 1e-12);
        assert!(m.sigma_q.abs() < 1e-12);
    }

    #[test]
    fn two_bin_closed_form() {
        // bins [1,2] with 3 counts and [2,4] with 1 count.
        let spec = LogSpectrum {
            bins: vec![Bin::new(1.0, 2.0, 3.0, 0.0), Bin::new(2.0, 4.0, 1.0, 0.0)],
            bins_per_decade: 3,
            mean_energy_gev: None,
        };
        let m = compute_spectra(&spec, QualityKernel::Icru40, SumConvention::Weighted).unwrap();
        assert!((m.bins[0].f - 0.75).abs() < 1e-15);
        assert!((m.bins[1].f - 0.125).abs() < 1e-15);
        let yf = 1.5 * 0.75 + 3.0 * 0.125 * 2.0;
        assert!((m.y_f - yf).abs() < 1e-14);
        assert!((m.bins[0].d - 1.5 * 0.75 / yf).abs() < 1e-14);
        let yd = (1.5 * 1.5 * 0.75 + 3.0 * 3.0 * 0.125 * 2.0) / yf;
        assert!((m.y_d - yd).abs() < 1e-14);
        assert_eq!(m.sigma_q, 0.0);
        assert!(m.bins.iter().all(|b| b.sigma_f == 0.0 && b.sigma_d == 0.0));
    }

    #[test]
    fn kernel_limits() {
        let k = QualityKernel::Icru40;
        let y = 1e-5;
        assert!((k.eval(y) / y - 0.2755).abs() < 1e-6);
        assert!(k.eval(2e-3) > k.eval(1e-3));
        let big = 1e4;
        assert!((k.eval(big) - 5510.0 / big).abs() < 1e-9);
        assert!(matches!(QualityKernel::from_id("nope"), Err(MicroError::UnknownKernel(_))));
        let lit = QualityKernel::from_id("appendix-literal").unwrap();
        let y = 100.0;
        let expect = 5.60e-5 * y * y * (1.0 - (-0.5 * y * 1e-4f64).exp() - 2e-6 * y);
        assert!((lit.eval(y) - expect).abs() < 1e-15);
    }

    #[test]
    fn literal_sums_reduce_to_plain_formula() {
        let counts: Vec<f64> = (0..20).map(|k| 50.0 + 10.0 * k as f64).collect();
        let spec = log_grid(0.5, 10, &counts);
        let m = compute_spectra(&spec, QualityKernel::Icru40, SumConvention::AppendixLiteralSums).unwrap();
        let sd: f64 = m.bins.iter().map(|b| b.d).sum();
        let sqd: f64 = m.bins.iter().map(|b| b.q * b.d).sum();
        assert!((m.q_avg - sqd / sd).abs() < 1e-12 * m.q_avg);
        let plain = m
            .bins
            .iter()
            .map(|b| ((b.q * sd - sqd) / (sd * sd) * b.sigma_d).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((m.sigma_q - plain).abs() < 1e-12 * plain);
    }

    proptest! {
        #[test]
        fn normalization_and_ordering(counts in prop::collection::vec(0.0f64..1e4, 2..80), k in 1e-3f64..1e3) {
            prop_assume!(counts.iter().sum::<f64>() > 0.0);
            let spec = log_grid(0.05, 20, &counts);
            let m = compute_spectra(&spec, QualityKernel::Icru40, SumConvention::Weighted).unwrap();
            let fsum: f64 = m.bins.iter().map(|b| b.f * b.dy()).sum();
            let dsum: f64 = m.bins.iter().map(|b| b.d * b.dy()).sum();
            prop_assert!((fsum - 1.0).abs() < 1e-9);
            prop_assert!((dsum - 1.0).abs() < 1e-9);
            prop_assert!(m.y_f <= m.y_d * (1.0 + 1e-12));
            let scaled: Vec<f64> = counts.iter().map(|c| c * k).collect();
            let ms = compute_spectra(&log_grid(0.05, 20, &scaled), QualityKernel::Icru40, SumConvention::Weighted).unwrap();
            prop_assert!((ms.q_avg - m.q_avg).abs() <= 1e-9 * m.q_avg.abs().max(1e-12));
            prop_assert!((ms.y_d - m.y_d).abs() <= 1e-9 * m.y_d);
        }

        #[test]
        fn rebin_conserves_counts(counts in prop::collection::vec(0.0f64..1e3, 1..200), lo in 1e-3f64..1.0, w in 1e-3f64..0.5) {
            let bins: Vec<(f64, f64, f64)> = counts.iter().enumerate()
                .map(|(i, &c)| (lo + w * i as f64, lo + w * (i + 1) as f64, c)).collect();
            let src = lin(&bins);
            let out = log_rebin(&src, 60).unwrap();
            let a = src.total_counts();
            let b = out.total_counts();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-300));
            let r = out.bins[0].high / out.bins[0].low;
            for b in &out.bins {
                prop_assert!((b.high / b.low - r).abs() < 1e-8);
            }
        }
    }
}
