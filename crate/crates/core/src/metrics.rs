//! Voltage error metrics and the estimator benchmark.
//!
//! Magnitude errors are percentages of the true magnitude. Angle errors are
//! wrapped to (−180°, 180°]. The SD columns are standard deviations of the
//! signed errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::grid_model::RadialNetwork;
use crate::layering::{run_multilayer, run_single_layer, EstimationRun, EstimatorConfig, Partition, PartitionFile};
use crate::measurement::{MeterSample, MeteringPlan};
use crate::scalar::Scalar;
use crate::synthetic::Scenario;
use crate::wls::run_wls;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    AckfSingle,
    AckfMultilayer,
    Wls,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::AckfSingle => "ackf-single",
            EstimatorKind::AckfMultilayer => "ackf-multilayer",
            EstimatorKind::Wls => "wls",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AreaErrors {
    pub area: u32,
    pub buses: usize,
    pub amve_pct: f64,
    pub mmve_pct: f64,
    pub aave_deg: f64,
    pub mave_deg: f64,
    pub sd_pu: f64,
    pub sd_deg: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub estimator: String,
    pub areas: Vec<AreaErrors>,
    /// All buses together.
    pub overall: AreaErrors,
    /// Real-time loop only.
    pub wall_time_s: f64,
    pub offline_time_s: f64,
    /// Solver iterations per sample.
    pub iterations: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ErrorReport {
    pub fn area(&self, id: u32) -> Option<&AreaErrors> {
        self.areas.iter().find(|a| a.area == id)
    }
}

/// Angle difference in degrees wrapped to (−180, 180].
pub fn wrapped_angle_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).to_degrees().rem_euclid(360.0);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

#[derive(Default)]
struct Acc {
    buses: usize,
    n: usize,
    sum_abs_pct: f64,
    max_abs_pct: f64,
    sum_abs_deg: f64,
    max_abs_deg: f64,
    sum_pu: f64,
    sum_pu2: f64,
    sum_deg: f64,
    sum_deg2: f64,
}

impl Acc {
    fn push(&mut self, est: Complex<f64>, truth: Complex<f64>) {
        let m_err = est.norm() - truth.norm();
        let pct = 100.0 * m_err.abs() / truth.norm();
        let deg = wrapped_angle_deg(est.arg(), truth.arg());
        self.n += 1;
        self.sum_abs_pct += pct;
        self.max_abs_pct = self.max_abs_pct.max(pct);
        self.sum_abs_deg += deg.abs();
        self.max_abs_deg = self.max_abs_deg.max(deg.abs());
        self.sum_pu += m_err;
        self.sum_pu2 += m_err * m_err;
        self.sum_deg += deg;
        self.sum_deg2 += deg * deg;
    }

    fn finish(&self, area: u32) -> AreaErrors {
        let n = self.n.max(1) as f64;
        let sd = |s: f64, s2: f64| {
            if self.n < 2 {
                0.0
            } else {
                ((s2 - s * s / n) / (n - 1.0)).max(0.0).sqrt()
            }
        };
        AreaErrors {
            area,
            buses: self.buses,
            amve_pct: self.sum_abs_pct / n,
            mmve_pct: self.max_abs_pct,
            aave_deg: self.sum_abs_deg / n,
            mave_deg: self.max_abs_deg,
            sd_pu: sd(self.sum_pu, self.sum_pu2),
            sd_deg: sd(self.sum_deg, self.sum_deg2),
        }
    }
}

/// Per-area and overall errors of `estimates` against `truth`, both
/// `[t][bus]`, with `area_map[bus]` the area label of each bus.
pub fn compute_metrics<T: Scalar>(
    estimates: &[Vec<Complex<T>>],
    truth: &[Vec<Complex<T>>],
    area_map: &[u32],
) -> Result<(Vec<AreaErrors>, AreaErrors)> {
    if estimates.len() != truth.len() {
        return Err(DseError::shape("estimate samples", truth.len(), estimates.len()));
    }
    let mut areas: BTreeMap<u32, Acc> = BTreeMap::new();
    let mut all = Acc {
        buses: area_map.len(),
        ..Acc::default()
    };
    for &a in area_map {
        areas.entry(a).or_default().buses += 1;
    }
    for (t, (e_row, t_row)) in estimates.iter().zip(truth).enumerate() {
        if e_row.len() != area_map.len() || t_row.len() != area_map.len() {
            return Err(DseError::shape(
                "buses per sample",
                area_map.len(),
                format!("{}/{} at sample {t}", e_row.len(), t_row.len()),
            ));
        }
        for ((e, v), a) in e_row.iter().zip(t_row).zip(area_map) {
            let e = Complex::new(e.re.to_f64_lossy(), e.im.to_f64_lossy());
            let v = Complex::new(v.re.to_f64_lossy(), v.im.to_f64_lossy());
            areas.get_mut(a).expect("seeded above").push(e, v);
            all.push(e, v);
        }
    }
    Ok((areas.iter().map(|(&a, acc)| acc.finish(a)).collect(), all.finish(u32::MAX)))
}

/// Borrowed inputs of one estimator run on one phase.
#[derive(Clone, Copy, Debug)]
pub struct Inputs<'a, T> {
    pub network: &'a RadialNetwork<T>,
    pub partition: &'a PartitionFile,
    pub plan: &'a MeteringPlan,
    /// `[t][bus position]`
    pub pseudo: &'a [Vec<Complex<T>>],
    pub meters: &'a [MeterSample<T>],
}

impl<T: Scalar> Inputs<'_, T> {
    pub fn samples(&self) -> usize {
        self.pseudo.len().min(self.meters.len())
    }
}

pub fn run_estimator<T: Scalar>(inputs: &Inputs<'_, T>, kind: EstimatorKind, config: &EstimatorConfig) -> Result<EstimationRun<T>> {
    let steps = inputs.samples();
    let i = inputs;
    match kind {
        EstimatorKind::AckfSingle => run_single_layer(i.network, i.plan, i.pseudo, i.meters, steps, config),
        EstimatorKind::AckfMultilayer => {
            let partition = Partition::new(i.network, i.partition)?;
            run_multilayer(i.network, &partition, i.plan, i.pseudo, i.meters, steps, config)
        }
        EstimatorKind::Wls => run_wls(i.network, i.plan, i.pseudo, i.meters, steps, config),
    }
}

/// Area label of every bus position: subarea ids when the partition has
/// subareas (0 for the main area), otherwise the bus id itself.
pub fn area_map<T: Scalar>(network: &RadialNetwork<T>, partition: &PartitionFile) -> Vec<u32> {
    if partition.subareas.is_empty() {
        return network.buses().to_vec();
    }
    let mut label = vec![0; network.load_bus_count()];
    for s in &partition.subareas {
        for m in &s.members {
            if let Some(p) = network.bus_position(*m) {
                label[p] = s.id;
            }
        }
    }
    label
}

/// Scores a finished run.
pub fn report_for<T: Scalar>(kind: EstimatorKind, run: &EstimationRun<T>, truth: &[Vec<Complex<T>>], area_map: &[u32]) -> Result<ErrorReport> {
    let (areas, overall) = compute_metrics(&run.voltages, truth, area_map)?;
    Ok(ErrorReport {
        estimator: kind.name().to_string(),
        areas,
        overall,
        wall_time_s: run.timing.real_time_s,
        offline_time_s: run.timing.offline_s,
        iterations: 1,
        failure: None,
    })
}

/// One phase of a benchmark: inputs plus the truth to score against.
#[derive(Clone, Debug)]
pub struct Case<'a, T> {
    pub inputs: Inputs<'a, T>,
    /// `[t][bus position]`
    pub truth: Vec<Vec<Complex<T>>>,
    pub area_map: Vec<u32>,
}

/// Runs every estimator on every case; phases are pooled into one report
/// per estimator and their times added.
fn run_cases<T: Scalar>(cases: &[Case<'_, T>], kind: EstimatorKind, config: &EstimatorConfig) -> Result<(Vec<Vec<Complex<T>>>, Vec<Vec<Complex<T>>>, Vec<u32>, f64, f64)> {
    let mut est: Vec<Vec<Complex<T>>> = Vec::new();
    let mut truth: Vec<Vec<Complex<T>>> = Vec::new();
    let mut areas = Vec::new();
    let (mut rt, mut off) = (0.0, 0.0);
    for case in cases {
        let run = run_estimator(&case.inputs, kind, config)?;
        if case.truth.len() < run.voltages.len() {
            return Err(DseError::shape("truth samples", run.voltages.len(), case.truth.len()));
        }
        if est.is_empty() {
            est = vec![Vec::new(); run.voltages.len()];
            truth = vec![Vec::new(); run.voltages.len()];
        } else if est.len() != run.voltages.len() {
            return Err(DseError::shape("samples per phase", est.len(), run.voltages.len()));
        }
        for (t, row) in run.voltages.iter().enumerate() {
            est[t].extend_from_slice(row);
            truth[t].extend_from_slice(&case.truth[t]);
        }
        areas.extend_from_slice(&case.area_map);
        rt += run.timing.real_time_s;
        off += run.timing.offline_s;
    }
    Ok((est, truth, areas, rt, off))
}

/// Runs every estimator `repetitions` times on identical inputs. Metrics come
/// from the first repetition, wall times are medians. A failing estimator is
/// recorded and the others still run.
pub fn benchmark_cases<T: Scalar>(
    cases: &[Case<'_, T>],
    estimators: &[EstimatorKind],
    repetitions: usize,
    config: &EstimatorConfig,
) -> Vec<ErrorReport> {
    estimators
        .iter()
        .map(|&kind| {
            let mut times = Vec::new();
            let mut offline = Vec::new();
            let mut report: Option<ErrorReport> = None;
            for _ in 0..repetitions.max(1) {
                let outcome = run_cases(cases, kind, config).and_then(|(est, truth, areas, rt, off)| {
                    times.push(rt);
                    offline.push(off);
                    if report.is_some() {
                        return Ok(None);
                    }
                    let (area_errors, overall) = compute_metrics(&est, &truth, &areas)?;
                    Ok(Some(ErrorReport {
                        estimator: kind.name().to_string(),
                        areas: area_errors,
                        overall,
                        iterations: 1,
                        ..ErrorReport::default()
                    }))
                });
                match outcome {
                    Ok(Some(r)) => report = Some(r),
                    Ok(None) => {}
                    Err(e) => {
                        return ErrorReport {
                            estimator: kind.name().to_string(),
                            failure: Some(e.to_string()),
                            ..ErrorReport::default()
                        }
                    }
                }
            }
            let mut r = report.expect("at least one repetition");
            r.wall_time_s = median(&mut times);
            r.offline_time_s = median(&mut offline);
            r
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub format_version: u32,
    /// Resolved configuration of the run.
    pub config: serde_json::Value,
    pub estimator_config: EstimatorConfig,
    pub repetitions: usize,
    /// Magnitude errors are relative to the true magnitude.
    pub magnitude_error_basis: String,
    /// The WLS baseline sees exactly the ACKF measurement rows.
    pub measurement_set: String,
    pub reports: Vec<ErrorReport>,
}

impl BenchmarkReport {
    pub fn new(config: serde_json::Value, estimator_config: &EstimatorConfig, repetitions: usize, reports: Vec<ErrorReport>) -> Self {
        BenchmarkReport {
            format_version: crate::FORMAT_VERSION,
            config,
            estimator_config: estimator_config.clone(),
            repetitions: repetitions.max(1),
            magnitude_error_basis: "true magnitude".into(),
            measurement_set: "identical rows for every estimator".into(),
            reports,
        }
    }

    pub fn report(&self, kind: EstimatorKind) -> Option<&ErrorReport> {
        self.reports.iter().find(|r| r.estimator == kind.name())
    }
}

/// Benchmark of a generated scenario.
pub fn run_benchmark<T: Scalar>(
    scenario: &Scenario<T>,
    estimators: &[EstimatorKind],
    repetitions: usize,
    config: &EstimatorConfig,
) -> BenchmarkReport {
    let case = Case {
        inputs: scenario.inputs(),
        truth: scenario.truth.voltages(),
        area_map: scenario.area_map(),
    };
    let reports = benchmark_cases(&[case], estimators, repetitions, config);
    let scenario_json = serde_json::to_value(&scenario.config).unwrap_or(serde_json::Value::Null);
    BenchmarkReport::new(serde_json::json!({ "scenario": scenario_json }), config, repetitions, reports)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

impl BenchmarkReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Fixed-width text table, one row per estimator and area.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "estimator", "area", "AMVE %", "MMVE %", "AAVE deg", "MAVE deg", "SD pu", "SD deg", "time s"
        );
        for r in &self.reports {
            if let Some(f) = &r.failure {
                let _ = writeln!(s, "{:<16} failed: {f}", r.estimator);
                continue;
            }
            for a in r.areas.iter().chain(std::iter::once(&r.overall)) {
                let label = if a.area == u32::MAX { "all".to_string() } else { a.area.to_string() };
                let _ = writeln!(
                    s,
                    "{:<16} {:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>10.2e} {:>10.2e} {:>10.3}",
                    r.estimator, label, a.amve_pct, a.mmve_pct, a.aave_deg, a.mave_deg, a.sd_pu, a.sd_deg, r.wall_time_s
                );
            }
        }
        s
    }

    /// One CSV row per estimator and area, after `#`-prefixed header lines.
    pub fn write_csv(&self, path: &Path, header: &str) -> Result<()> {
        let mut buf = Vec::new();
        for line in header.lines() {
            buf.extend_from_slice(format!("# {line}\n").as_bytes());
        }
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record([
            "estimator",
            "area",
            "buses",
            "amve_pct",
            "mmve_pct",
            "aave_deg",
            "mave_deg",
            "sd_pu",
            "sd_deg",
            "wall_time_s",
            "offline_time_s",
            "iterations",
        ])?;
        for r in &self.reports {
            for a in r.areas.iter().chain(std::iter::once(&r.overall)) {
                let label = if a.area == u32::MAX { "all".to_string() } else { a.area.to_string() };
                w.write_record([
                    r.estimator.clone(),
                    label,
                    a.buses.to_string(),
                    a.amve_pct.to_string(),
                    a.mmve_pct.to_string(),
                    a.aave_deg.to_string(),
                    a.mave_deg.to_string(),
                    a.sd_pu.to_string(),
                    a.sd_deg.to_string(),
                    r.wall_time_s.to_string(),
                    r.offline_time_s.to_string(),
                    r.iterations.to_string(),
                ])?;
            }
        }
        w.flush()?;
        drop(w);
        std::fs::write(path, buf)?;
        Ok(())
    }
}

/// Per-sample, per-bus errors in long format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub estimator: String,
    pub t: usize,
    pub bus: u32,
    pub area: u32,
    pub v_true_pu: f64,
    pub v_est_pu: f64,
    pub magnitude_error_pct: f64,
    pub angle_error_deg: f64,
}

pub fn step_errors<T: Scalar>(
    estimator: &str,
    estimates: &[Vec<Complex<T>>],
    truth: &[Vec<Complex<T>>],
    bus_ids: &[u32],
    area_map: &[u32],
) -> Result<Vec<StepError>> {
    if estimates.len() != truth.len() {
        return Err(DseError::shape("estimate samples", truth.len(), estimates.len()));
    }
    let mut out = Vec::with_capacity(estimates.len() * bus_ids.len());
    for (t, (e_row, t_row)) in estimates.iter().zip(truth).enumerate() {
        if e_row.len() != bus_ids.len() || t_row.len() != bus_ids.len() {
            return Err(DseError::shape("buses per sample", bus_ids.len(), e_row.len()));
        }
        for (k, (e, v)) in e_row.iter().zip(t_row).enumerate() {
            let e = Complex::new(e.re.to_f64_lossy(), e.im.to_f64_lossy());
            let v = Complex::new(v.re.to_f64_lossy(), v.im.to_f64_lossy());
            out.push(StepError {
                estimator: estimator.to_string(),
                t,
                bus: bus_ids[k],
                area: area_map[k],
                v_true_pu: v.norm(),
                v_est_pu: e.norm(),
                magnitude_error_pct: 100.0 * (e.norm() - v.norm()) / v.norm(),
                angle_error_deg: wrapped_angle_deg(e.arg(), v.arg()),
            });
        }
    }
    Ok(out)
}

/// Writes rows with `#`-prefixed header lines ahead of the CSV header.
pub fn write_step_errors(path: &Path, header: &str, rows: &[StepError]) -> Result<()> {
    let mut buf = Vec::new();
    for line in header.lines() {
        buf.extend_from_slice(format!("# {line}\n").as_bytes());
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}
