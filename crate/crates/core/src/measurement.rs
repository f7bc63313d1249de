//! Measurement model: metering plans, the stacked observation matrix, the
//! block measurement covariance, bad-data detection and angle synthesis.
//!
//! Rows of every measurement vector are ordered pseudo injections first, then
//! metered branch currents, then metered bus voltages.

use std::collections::{BTreeMap, HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::augmented::AugmentedCovariance;
use crate::error::{DseError, Result};
use crate::grid_model::{BibcMatrix, BranchId, BusId, DlfMatrix, FlowSolution, Phase, RadialNetwork};
use crate::linalg::{rank, CMatrix};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeterKind {
    #[serde(rename = "V")]
    Voltage,
    #[serde(rename = "I")]
    Current,
}

/// Which devices are metered and how noisy they are, in per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteringPlan {
    #[serde(default = "crate::format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub voltage_meters: Vec<BusId>,
    #[serde(default)]
    pub current_meters: Vec<BranchId>,
    /// `None` means every non-reference bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_buses: Option<Vec<BusId>>,
    pub meter_sd: f64,
    pub pseudo_sd: f64,
    /// Per-device overrides keyed `V<bus>`, `I<branch>` or `P<bus>`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sd_overrides: BTreeMap<String, f64>,
    /// Resolved configuration of the run that wrote this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl MeteringPlan {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn voltage_sd(&self, bus: BusId) -> f64 {
        self.sd_overrides.get(&format!("V{bus}")).copied().unwrap_or(self.meter_sd)
    }

    pub fn current_sd(&self, branch: BranchId) -> f64 {
        self.sd_overrides.get(&format!("I{branch}")).copied().unwrap_or(self.meter_sd)
    }

    pub fn pseudo_sd_for(&self, bus: BusId) -> f64 {
        self.sd_overrides.get(&format!("P{bus}")).copied().unwrap_or(self.pseudo_sd)
    }
}

/// A metering plan bound to the positions of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedPlan {
    pub pseudo_ids: Vec<BusId>,
    pub pseudo_pos: Vec<usize>,
    pub current_ids: Vec<BranchId>,
    pub current_pos: Vec<usize>,
    /// Non-reference voltage meters; a meter on the reference bus only
    /// supplies `v_ref`.
    pub voltage_ids: Vec<BusId>,
    pub voltage_pos: Vec<usize>,
    pub head_voltage: Option<BusId>,
    /// Standard deviation of every row.
    pub row_sd: Vec<f64>,
}

impl ResolvedPlan {
    /// Binds `plan` to `network`; unknown devices are plan errors.
    pub fn new<T: Scalar>(plan: &MeteringPlan, network: &RadialNetwork<T>) -> Result<Self> {
        Self::bind(plan, network, false)
    }

    /// Like [`Self::new`] but silently drops devices that are not part of
    /// `network`. Used when a plan written for a whole feeder is applied to
    /// one area of it.
    pub fn restricted<T: Scalar>(plan: &MeteringPlan, network: &RadialNetwork<T>) -> Result<Self> {
        Self::bind(plan, network, true)
    }

    fn bind<T: Scalar>(plan: &MeteringPlan, network: &RadialNetwork<T>, lenient: bool) -> Result<Self> {
        fn check_sd(sd: f64, what: &str) -> Result<()> {
            if !(sd > 0.0) || !sd.is_finite() {
                return Err(DseError::Argument(format!("standard deviation of {what} must be positive, got {sd}")));
            }
            Ok(())
        }
        let mut out = ResolvedPlan {
            pseudo_ids: Vec::new(),
            pseudo_pos: Vec::new(),
            current_ids: Vec::new(),
            current_pos: Vec::new(),
            voltage_ids: Vec::new(),
            voltage_pos: Vec::new(),
            head_voltage: None,
            row_sd: Vec::new(),
        };
        let pseudo: Vec<BusId> = match &plan.pseudo_buses {
            None => network.buses().to_vec(),
            Some(list) => list.clone(),
        };
        let mut seen = HashSet::new();
        for bus in pseudo {
            if !seen.insert(bus) {
                return Err(DseError::Plan(format!("pseudo bus {bus} listed twice")));
            }
            match network.bus_position(bus) {
                Some(p) => {
                    let sd = plan.pseudo_sd_for(bus);
                    check_sd(sd, &format!("pseudo bus {bus}"))?;
                    out.pseudo_ids.push(bus);
                    out.pseudo_pos.push(p);
                    out.row_sd.push(sd);
                }
                None if lenient => {}
                None if bus == network.reference() => {
                    return Err(DseError::Plan(format!("pseudo bus {bus} is the reference bus")));
                }
                None => return Err(DseError::Plan(format!("pseudo bus {bus} is not in the network"))),
            }
        }
        seen.clear();
        for &br in &plan.current_meters {
            if !seen.insert(br) {
                return Err(DseError::Plan(format!("current meter on branch {br} listed twice")));
            }
            match network.branch_position(br) {
                Some(p) => {
                    let sd = plan.current_sd(br);
                    check_sd(sd, &format!("current meter {br}"))?;
                    out.current_ids.push(br);
                    out.current_pos.push(p);
                    out.row_sd.push(sd);
                }
                None if lenient => {}
                None => return Err(DseError::Plan(format!("current meter references unknown branch {br}"))),
            }
        }
        seen.clear();
        for &bus in &plan.voltage_meters {
            if !seen.insert(bus) {
                return Err(DseError::Plan(format!("voltage meter on bus {bus} listed twice")));
            }
            if bus == network.reference() {
                check_sd(plan.voltage_sd(bus), &format!("voltage meter {bus}"))?;
                out.head_voltage = Some(bus);
                continue;
            }
            match network.bus_position(bus) {
                Some(p) => {
                    let sd = plan.voltage_sd(bus);
                    check_sd(sd, &format!("voltage meter {bus}"))?;
                    out.voltage_ids.push(bus);
                    out.voltage_pos.push(p);
                    out.row_sd.push(sd);
                }
                None if lenient => {}
                None => return Err(DseError::Plan(format!("voltage meter references unknown bus {bus}"))),
            }
        }
        Ok(out)
    }

    pub fn rows(&self) -> usize {
        self.row_sd.len()
    }

    pub fn pseudo_rows(&self) -> std::ops::Range<usize> {
        0..self.pseudo_pos.len()
    }

    pub fn current_rows(&self) -> std::ops::Range<usize> {
        let s = self.pseudo_pos.len();
        s..s + self.current_pos.len()
    }

    pub fn voltage_rows(&self) -> std::ops::Range<usize> {
        let s = self.pseudo_pos.len() + self.current_pos.len();
        s..s + self.voltage_pos.len()
    }

    /// Rows that come from physical meters.
    pub fn meter_rows(&self) -> Vec<usize> {
        (self.pseudo_pos.len()..self.rows()).collect()
    }
}

/// `H = [I_sel; BIBC_m; −DLF_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationMatrix<T> {
    pub h: CMatrix<T>,
    pub pseudo_rows: std::ops::Range<usize>,
    pub current_rows: std::ops::Range<usize>,
    pub voltage_rows: std::ops::Range<usize>,
}

pub fn build_observation_matrix<T: Scalar>(plan: &ResolvedPlan, bibc: &BibcMatrix<T>, dlf: &DlfMatrix<T>) -> Result<ObservationMatrix<T>> {
    let n = dlf.matrix.cols();
    if bibc.matrix.cols() != n {
        return Err(DseError::shape("BIBC columns", n, bibc.matrix.cols()));
    }
    let mut h = CMatrix::zeros(plan.rows(), n);
    let mut r = 0;
    for &p in &plan.pseudo_pos {
        if p >= n {
            return Err(DseError::Plan(format!("pseudo position {p} outside a {n}-bus state")));
        }
        h[(r, p)] = Complex::new(T::one(), T::zero());
        r += 1;
    }
    for &b in &plan.current_pos {
        if b >= bibc.matrix.rows() {
            return Err(DseError::Plan(format!("branch position {b} outside BIBC")));
        }
        h.row_mut(r).copy_from_slice(bibc.matrix.row(b));
        r += 1;
    }
    for &k in &plan.voltage_pos {
        if k >= n {
            return Err(DseError::Plan(format!("bus position {k} outside DLF")));
        }
        for (dst, src) in h.row_mut(r).iter_mut().zip(dlf.matrix.row(k)) {
            *dst = -*src;
        }
        r += 1;
    }
    let rk = rank(&h, T::lit(1e-10));
    if rk < n {
        return Err(DseError::Observability(format!(
            "observation matrix has rank {rk} but the state has {n} entries; add pseudo buses or meters"
        )));
    }
    Ok(ObservationMatrix {
        h,
        pseudo_rows: plan.pseudo_rows(),
        current_rows: plan.current_rows(),
        voltage_rows: plan.voltage_rows(),
    })
}

/// One step of the measurement vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementFrame<T> {
    pub timestamp: u64,
    pub pseudo_i_inj: Vec<Complex<T>>,
    pub metered_i_branch: Vec<Complex<T>>,
    /// Stored as `v_measured − v_ref`, so the `−DLF` rows of `H` apply directly.
    pub metered_v: Vec<Complex<T>>,
}

impl<T: Scalar> MeasurementFrame<T> {
    pub fn y(&self) -> Vec<Complex<T>> {
        let mut y = Vec::with_capacity(self.pseudo_i_inj.len() + self.metered_i_branch.len() + self.metered_v.len());
        y.extend_from_slice(&self.pseudo_i_inj);
        y.extend_from_slice(&self.metered_i_branch);
        y.extend_from_slice(&self.metered_v);
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reading<T> {
    Phasor(Complex<T>),
    /// Magnitude-only device; the angle has to be synthesized.
    Magnitude(T),
}

impl<T: Scalar> Reading<T> {
    pub fn magnitude(&self) -> T {
        match self {
            Reading::Phasor(z) => z.norm(),
            Reading::Magnitude(m) => *m,
        }
    }
}

/// All meter readings taken at one sample.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MeterSample<T> {
    pub timestamp: u64,
    pub voltages: BTreeMap<BusId, Reading<T>>,
    pub currents: BTreeMap<BranchId, Reading<T>>,
}

/// Feeder-head voltage, or `1∠0` when the plan has no head meter.
pub fn reference_voltage<T: Scalar>(plan: &ResolvedPlan, sample: &MeterSample<T>) -> Result<Complex<T>> {
    match plan.head_voltage {
        None => Ok(Complex::new(T::one(), T::zero())),
        Some(bus) => match sample.voltages.get(&bus) {
            Some(Reading::Phasor(z)) => Ok(*z),
            Some(Reading::Magnitude(m)) => Ok(Complex::new(*m, T::zero())),
            None => Err(DseError::Data(format!("missing head voltage reading on bus {bus} at t={}", sample.timestamp))),
        },
    }
}

/// `pseudo` holds one injection per network bus position; only planned
/// pseudo rows are copied.
pub fn assemble_frame<T: Scalar>(
    plan: &ResolvedPlan,
    pseudo: &[Complex<T>],
    readings: &MeterSample<T>,
    v_ref: Complex<T>,
) -> Result<MeasurementFrame<T>> {
    let mut pseudo_i_inj = Vec::with_capacity(plan.pseudo_pos.len());
    for (&p, &bus) in plan.pseudo_pos.iter().zip(&plan.pseudo_ids) {
        let v = pseudo
            .get(p)
            .ok_or_else(|| DseError::Data(format!("missing pseudo injection for bus {bus} at t={}", readings.timestamp)))?;
        pseudo_i_inj.push(*v);
    }
    let phasor = |r: Option<&Reading<T>>, kind: &str, id: u32| -> Result<Complex<T>> {
        match r {
            Some(Reading::Phasor(z)) => Ok(*z),
            Some(Reading::Magnitude(_)) => Err(DseError::Data(format!(
                "{kind} meter {id} at t={} has no angle; synthesize it before assembly",
                readings.timestamp
            ))),
            None => Err(DseError::Data(format!("missing {kind} reading for device {id} at t={}", readings.timestamp))),
        }
    };
    let metered_i_branch = plan
        .current_ids
        .iter()
        .map(|&id| phasor(readings.currents.get(&id), "current", id))
        .collect::<Result<Vec<_>>>()?;
    let metered_v = plan
        .voltage_ids
        .iter()
        .map(|&id| phasor(readings.voltages.get(&id), "voltage", id).map(|v| v - v_ref))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementFrame {
        timestamp: readings.timestamp,
        pseudo_i_inj,
        metered_i_branch,
        metered_v,
    })
}

/// Diagonal `Rᵃ` from the planned standard deviations.
pub fn build_r<T: Scalar>(plan: &ResolvedPlan) -> Result<AugmentedCovariance<T>> {
    if let Some(sd) = plan.row_sd.iter().find(|s| !(**s > 0.0)) {
        return Err(DseError::Argument(format!("standard deviation must be positive, got {sd}")));
    }
    let var: Vec<T> = plan.row_sd.iter().map(|s| T::lit(s * s)).collect();
    AugmentedCovariance::diagonal(&var)
}

/// `Rᵃ` with a full (possibly improper) pseudo block and diagonal meter blocks.
pub fn build_r_with_pseudo<T: Scalar>(plan: &ResolvedPlan, pseudo: &AugmentedCovariance<T>) -> Result<AugmentedCovariance<T>> {
    let np = plan.pseudo_pos.len();
    if pseudo.dim() != np {
        return Err(DseError::shape("pseudo covariance", np, pseudo.dim()));
    }
    let meters: Vec<T> = plan.row_sd[np..].iter().map(|s| T::lit(s * s)).collect();
    if meters.iter().any(|v| !(*v > T::zero())) {
        return Err(DseError::Argument("meter standard deviations must be positive".into()));
    }
    Ok(AugmentedCovariance::block_diagonal(&[pseudo, &AugmentedCovariance::diagonal(&meters)?]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BadDataReport {
    /// `flags[t][r]` for every step and measurement row.
    pub flags: Vec<Vec<bool>>,
    pub sd_band: Vec<f64>,
    pub multiplier: f64,
}

impl BadDataReport {
    pub fn flagged_count(&self) -> usize {
        self.flags.iter().flatten().filter(|f| **f).count()
    }
}

/// Flags every row whose innovation magnitude exceeds `k·sd_band[row]`.
pub fn detect_bad_data<T: Scalar>(innovations: &[Vec<Complex<T>>], sd_band: &[T], k: T) -> Result<BadDataReport> {
    if let Some(s) = sd_band.iter().find(|s| !(**s > T::zero())) {
        return Err(DseError::Argument(format!("bad-data band SD must be positive, got {s}")));
    }
    let mut flags = Vec::with_capacity(innovations.len());
    for (t, e) in innovations.iter().enumerate() {
        if e.len() != sd_band.len() {
            return Err(DseError::shape("innovation vector", sd_band.len(), format!("{} at step {t}", e.len())));
        }
        flags.push(e.iter().zip(sd_band).map(|(z, s)| z.norm() > k * *s).collect());
    }
    Ok(BadDataReport {
        flags,
        sd_band: sd_band.iter().map(|s| s.to_f64_lossy()).collect(),
        multiplier: k.to_f64_lossy(),
    })
}

/// Online version of [`detect_bad_data`] with the band estimated from a
/// trailing window of accepted innovations.
#[derive(Clone, Debug)]
pub struct BadDataMonitor {
    rows: Vec<usize>,
    window: usize,
    min_samples: usize,
    k: f64,
    history: Vec<VecDeque<f64>>,
    sums: Vec<f64>,
}

impl BadDataMonitor {
    pub fn new(rows: Vec<usize>, window: usize, k: f64) -> Result<Self> {
        if window == 0 {
            return Err(DseError::Argument("bad-data window must be positive".into()));
        }
        if !(k > 0.0) {
            return Err(DseError::Argument(format!("bad-data multiplier must be positive, got {k}")));
        }
        let n = rows.len();
        Ok(Self {
            rows,
            window,
            min_samples: window.min(30),
            k,
            history: vec![VecDeque::with_capacity(window); n],
            sums: vec![0.0; n],
        })
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    /// RMS innovation magnitude of a monitored row, once enough history exists.
    pub fn sd(&self, i: usize) -> Option<f64> {
        let h = &self.history[i];
        (h.len() >= self.min_samples).then(|| (self.sums[i].max(0.0) / h.len() as f64).sqrt())
    }

    /// Returns the flagged measurement rows; unflagged innovations join the
    /// training window.
    pub fn check<T: Scalar>(&mut self, innovation: &[Complex<T>]) -> Vec<usize> {
        let mut flagged = Vec::new();
        for i in 0..self.rows.len() {
            let row = self.rows[i];
            let Some(z) = innovation.get(row) else { continue };
            let mag = z.norm().to_f64_lossy();
            if let Some(sd) = self.sd(i) {
                if sd > 0.0 && mag > self.k * sd {
                    flagged.push(row);
                    continue;
                }
            }
            let h = &mut self.history[i];
            if h.len() == self.window {
                let old = h.pop_front().expect("full window");
                self.sums[i] -= old;
            }
            h.push_back(mag * mag);
            self.sums[i] += mag * mag;
            if h.len() == self.window && h.len().is_multiple_of(256) {
                self.sums[i] = h.iter().sum();
            }
        }
        flagged
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Bus(BusId),
    Branch(BranchId),
}

/// Gives a magnitude-only reading the angle of the pseudo quantity at the
/// same location. Returns the phasor and whether the angle fell back to zero.
pub fn synthesize_angle<T: Scalar>(
    magnitude: T,
    pseudo_solution: &FlowSolution<T>,
    network: &RadialNetwork<T>,
    location: Location,
) -> Result<(Complex<T>, bool)> {
    let z = match location {
        Location::Bus(id) if id == network.reference() => return Ok((Complex::new(magnitude, T::zero()), false)),
        Location::Bus(id) => {
            let p = network.bus_position(id).ok_or_else(|| DseError::Plan(format!("unknown bus {id}")))?;
            pseudo_solution.bus_voltages[p]
        }
        Location::Branch(id) => {
            let p = network.branch_position(id).ok_or_else(|| DseError::Plan(format!("unknown branch {id}")))?;
            pseudo_solution.branch_currents[p]
        }
    };
    let r = z.norm();
    if !(r > T::lit(1e-12)) {
        return Ok((Complex::new(magnitude, T::zero()), true));
    }
    Ok((z.scale(magnitude / r), false))
}

/// Replaces magnitude-only readings with synthesized phasors. Returns the
/// number of readings that fell back to angle zero.
pub fn resolve_angles<T: Scalar>(sample: &mut MeterSample<T>, pseudo_solution: &FlowSolution<T>, network: &RadialNetwork<T>) -> Result<usize> {
    let mut fallbacks = 0;
    for (&bus, r) in sample.voltages.iter_mut() {
        if let Reading::Magnitude(m) = *r {
            let (z, fb) = synthesize_angle(m, pseudo_solution, network, Location::Bus(bus))?;
            fallbacks += fb as usize;
            *r = Reading::Phasor(z);
        }
    }
    for (&br, r) in sample.currents.iter_mut() {
        if let Reading::Magnitude(m) = *r {
            if network.branch_position(br).is_none() {
                continue;
            }
            let (z, fb) = synthesize_angle(m, pseudo_solution, network, Location::Branch(br))?;
            fallbacks += fb as usize;
            *r = Reading::Phasor(z);
        }
    }
    Ok(fallbacks)
}

pub fn needs_angles<T>(sample: &MeterSample<T>) -> bool {
    sample.voltages.values().chain(sample.currents.values()).any(|r| matches!(r, Reading::Magnitude(_)))
}

/// Row of the meter, pseudo, truth and estimate CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhasorRecord {
    pub timestamp: u64,
    pub device_id: u32,
    pub kind: MeterKind,
    pub magnitude: f64,
    #[serde(default)]
    pub angle_deg: Option<f64>,
    #[serde(default)]
    pub phase: Option<Phase>,
}

impl PhasorRecord {
    pub fn from_complex<T: Scalar>(timestamp: u64, device_id: u32, kind: MeterKind, z: Complex<T>, phase: Option<Phase>) -> Self {
        let z = Complex::new(z.re.to_f64_lossy(), z.im.to_f64_lossy());
        PhasorRecord {
            timestamp,
            device_id,
            kind,
            magnitude: z.norm(),
            angle_deg: Some(z.arg().to_degrees()),
            phase,
        }
    }

    pub fn reading<T: Scalar>(&self) -> Result<Reading<T>> {
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(DseError::Data(format!(
                "invalid magnitude {} for device {} at t={}",
                self.magnitude, self.device_id, self.timestamp
            )));
        }
        Ok(match self.angle_deg {
            Some(a) if a.is_finite() => Reading::Phasor(Complex::from_polar(T::lit(self.magnitude), T::lit(a.to_radians()))),
            Some(a) => return Err(DseError::Data(format!("invalid angle {a} for device {} at t={}", self.device_id, self.timestamp))),
            None => Reading::Magnitude(T::lit(self.magnitude)),
        })
    }

    fn matches(&self, phase: Phase) -> bool {
        self.phase.is_none_or(|p| p == phase)
    }
}

/// Writes records as CSV with a leading `#` line carrying `header` (the
/// format version and the resolved configuration).
pub fn write_phasor_csv(path: &Path, header: &str, records: &[PhasorRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in header.lines() {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_phasor_csv(path: &Path) -> Result<Vec<PhasorRecord>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_phasor_csv_from(file)
}

pub fn read_phasor_csv_from<R: BufRead>(reader: R) -> Result<Vec<PhasorRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Groups meter records into one sample per timestamp, keeping records of
/// `phase` or without a phase.
pub fn meter_stream_from_records<T: Scalar>(records: &[PhasorRecord], phase: Phase) -> Result<Vec<MeterSample<T>>> {
    let mut by_t: BTreeMap<u64, MeterSample<T>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.matches(phase)) {
        let s = by_t.entry(r.timestamp).or_insert_with(|| MeterSample {
            timestamp: r.timestamp,
            ..Default::default()
        });
        let map_dup = match r.kind {
            MeterKind::Voltage => s.voltages.insert(r.device_id, r.reading()?).is_some(),
            MeterKind::Current => s.currents.insert(r.device_id, r.reading()?).is_some(),
        };
        if map_dup {
            return Err(DseError::Data(format!("duplicate reading for device {} at t={}", r.device_id, r.timestamp)));
        }
    }
    Ok(by_t.into_values().collect())
}

pub fn meter_stream_to_records<T: Scalar>(stream: &[MeterSample<T>], phase: Option<Phase>) -> Vec<PhasorRecord> {
    let mut out = Vec::new();
    for s in stream {
        let mut push = |kind, id, r: &Reading<T>| {
            out.push(match r {
                Reading::Phasor(z) => PhasorRecord::from_complex(s.timestamp, id, kind, *z, phase),
                Reading::Magnitude(m) => PhasorRecord {
                    timestamp: s.timestamp,
                    device_id: id,
                    kind,
                    magnitude: m.to_f64_lossy(),
                    angle_deg: None,
                    phase,
                },
            })
        };
        for (&id, r) in &s.voltages {
            push(MeterKind::Voltage, id, r);
        }
        for (&id, r) in &s.currents {
            push(MeterKind::Current, id, r);
        }
    }
    out
}

/// Per-bus time series (current kind) indexed `[t][bus position]`.
pub fn bus_series_from_records<T: Scalar>(records: &[PhasorRecord], network: &RadialNetwork<T>, kind: MeterKind) -> Result<Vec<Vec<Complex<T>>>> {
    let n = network.load_bus_count();
    let mut by_t: BTreeMap<u64, Vec<Option<Complex<T>>>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.kind == kind && r.matches(network.phase())) {
        let Some(p) = network.bus_position(r.device_id) else {
            if r.device_id == network.reference() {
                continue;
            }
            return Err(DseError::Data(format!("record for unknown bus {} at t={}", r.device_id, r.timestamp)));
        };
        let z = match r.reading::<T>()? {
            Reading::Phasor(z) => z,
            Reading::Magnitude(_) => {
                return Err(DseError::Data(format!("bus series record for bus {} at t={} has no angle", r.device_id, r.timestamp)))
            }
        };
        let row = by_t.entry(r.timestamp).or_insert_with(|| vec![None; n]);
        if row[p].replace(z).is_some() {
            return Err(DseError::Data(format!("duplicate record for bus {} at t={}", r.device_id, r.timestamp)));
        }
    }
    by_t.into_iter()
        .map(|(t, row)| {
            row.into_iter()
                .enumerate()
                .map(|(p, z)| z.ok_or_else(|| DseError::Data(format!("missing value for bus {} at t={t}", network.buses()[p]))))
                .collect()
        })
        .collect()
}

pub fn bus_series_to_records<T: Scalar>(series: &[Vec<Complex<T>>], network: &RadialNetwork<T>, kind: MeterKind, phase: Option<Phase>) -> Vec<PhasorRecord> {
    let mut out = Vec::with_capacity(series.len() * network.load_bus_count());
    for (t, row) in series.iter().enumerate() {
        for (&bus, z) in network.buses().iter().zip(row) {
            out.push(PhasorRecord::from_complex(t as u64, bus, kind, *z, phase));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{build_bibc, build_dlf, direct_load_flow, Branch};
    use crate::scalar::c;

    fn line3() -> RadialNetwork<f64> {
        RadialNetwork::new(
            Phase::Single,
            1,
            &[1, 2, 3],
            vec![
                Branch { id: 1, from: 1, to: 2, impedance: c(0.01, 0.02) },
                Branch { id: 2, from: 2, to: 3, impedance: c(0.03, 0.01) },
            ],
        )
        .unwrap()
    }

    fn plan(v: Vec<BusId>, i: Vec<BranchId>) -> MeteringPlan {
        MeteringPlan {
            format_version: 1,
            voltage_meters: v,
            current_meters: i,
            pseudo_buses: None,
            meter_sd: 0.01,
            pseudo_sd: 0.1,
            sd_overrides: BTreeMap::new(),
            config: None,
        }
    }

    #[test]
    fn pseudo_only_is_identity() {
        let net = line3();
        let rp = ResolvedPlan::new(&plan(vec![], vec![]), &net).unwrap();
        let h = build_observation_matrix(&rp, &build_bibc(&net), &build_dlf(&net)).unwrap();
        assert_eq!(h.h, CMatrix::identity(2));
    }

    #[test]
    fn branch_and_voltage_rows() {
        let net = line3();
        let rp = ResolvedPlan::new(&plan(vec![3], vec![1]), &net).unwrap();
        let h = build_observation_matrix(&rp, &build_bibc(&net), &build_dlf(&net)).unwrap();
        assert_eq!(h.h.rows(), 4);
        assert_eq!(h.h.row(2), &[c(1.0, 0.0), c(1.0, 0.0)]);
        assert_eq!(h.h.row(3), &[-c::<f64>(0.01, 0.02), -c::<f64>(0.04, 0.03)]);
    }

    #[test]
    fn unknown_devices_and_unobservable_plans() {
        let net = line3();
        assert!(matches!(ResolvedPlan::new(&plan(vec![9], vec![]), &net), Err(DseError::Plan(_))));
        assert!(matches!(ResolvedPlan::new(&plan(vec![], vec![7]), &net), Err(DseError::Plan(_))));
        let mut p = plan(vec![], vec![1]);
        p.pseudo_buses = Some(vec![]);
        let rp = ResolvedPlan::new(&p, &net).unwrap();
        assert!(matches!(
            build_observation_matrix(&rp, &build_bibc(&net), &build_dlf(&net)),
            Err(DseError::Observability(_))
        ));
    }

    #[test]
    fn head_meter_supplies_reference_voltage() {
        let net = line3();
        let rp = ResolvedPlan::new(&plan(vec![1], vec![]), &net).unwrap();
        assert_eq!(rp.head_voltage, Some(1));
        assert_eq!(rp.rows(), 2);
        let mut s = MeterSample::<f64>::default();
        assert!(reference_voltage(&rp, &s).is_err());
        s.voltages.insert(1, Reading::Phasor(c(1.02, -0.01)));
        assert_eq!(reference_voltage(&rp, &s).unwrap(), c(1.02, -0.01));
    }

    #[test]
    fn frame_matches_truth() {
        let net = line3();
        let bibc = build_bibc(&net);
        let dlf = build_dlf(&net);
        let rp = ResolvedPlan::new(&plan(vec![1, 3], vec![2]), &net).unwrap();
        let h = build_observation_matrix(&rp, &bibc, &dlf).unwrap();
        let x = vec![c(0.3, -0.1), c(0.2, 0.05)];
        let v_ref = c(1.01, 0.0);
        let flow = direct_load_flow(&bibc, &dlf, &x, v_ref).unwrap();
        let mut s = MeterSample::default();
        s.voltages.insert(1, Reading::Phasor(v_ref));
        s.voltages.insert(3, Reading::Phasor(flow.bus_voltages[1]));
        s.currents.insert(2, Reading::Phasor(flow.branch_currents[1]));
        let f = assemble_frame(&rp, &x, &s, reference_voltage(&rp, &s).unwrap()).unwrap();
        let hx = h.h.mul_vec(&x);
        for (a, b) in f.y().iter().zip(&hx) {
            assert!((a - b).norm() < 1e-14);
        }
        s.currents.clear();
        assert!(matches!(assemble_frame(&rp, &x, &s, v_ref), Err(DseError::Data(_))));
    }

    #[test]
    fn r_is_diagonal_variances() {
        let net = line3();
        let rp = ResolvedPlan::new(&plan(vec![], vec![1]), &net).unwrap();
        let r: AugmentedCovariance<f64> = build_r(&rp).unwrap();
        let d: Vec<f64> = r.gamma().diagonal().iter().map(|z| z.re).collect();
        assert!((d[0] - 0.01).abs() < 1e-15 && (d[1] - 0.01).abs() < 1e-15 && (d[2] - 1e-4).abs() < 1e-15);
        assert!(r.c().max_abs() == 0.0);
        let mut p = plan(vec![], vec![1]);
        p.meter_sd = 0.0;
        assert!(matches!(ResolvedPlan::new(&p, &net), Err(DseError::Argument(_))));
    }

    #[test]
    fn band_examples() {
        let e = vec![vec![c::<f64>(6.0, 0.0)], vec![c(0.0, 4.0)]];
        let rep = detect_bad_data(&e, &[1.0], 5.0).unwrap();
        assert_eq!(rep.flags, vec![vec![true], vec![false]]);
        assert!(detect_bad_data(&e, &[0.0], 5.0).is_err());
    }

    #[test]
    fn monitor_flags_spike_after_training() {
        let mut m = BadDataMonitor::new(vec![1], 100, 5.0).unwrap();
        for t in 0..200 {
            let s = if t % 2 == 0 { 1.0 } else { -1.0 };
            assert!(m.check(&[c::<f64>(100.0, 0.0), c(s, 0.0)]).is_empty());
        }
        assert_eq!(m.check(&[c::<f64>(0.0, 0.0), c(6.0, 0.0)]), vec![1]);
        assert!((m.sd(0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn angle_synthesis() {
        let net = line3();
        let sol = FlowSolution {
            branch_currents: vec![c(1.0, 1.0), c(0.0, 0.0)],
            bus_voltages: vec![c(1.0, 0.0), c(0.0, 0.0)],
        };
        let (z, fb) = synthesize_angle(2.0, &sol, &net, Location::Branch(1)).unwrap();
        assert!(!fb && (z - c(2f64.sqrt(), 2f64.sqrt())).norm() < 1e-14);
        let (z, fb) = synthesize_angle(1.0, &sol, &net, Location::Bus(2)).unwrap();
        assert!(!fb && (z - c(1.0, 0.0)).norm() < 1e-15);
        let (z, fb) = synthesize_angle(2.0, &sol, &net, Location::Branch(2)).unwrap();
        assert!(fb && z == c(2.0, 0.0));
    }

    #[test]
    fn csv_roundtrip() {
        let recs = vec![
            PhasorRecord::from_complex(0, 2, MeterKind::Current, c::<f64>(0.5, -0.2), None),
            PhasorRecord {
                timestamp: 0,
                device_id: 1,
                kind: MeterKind::Voltage,
                magnitude: 1.01,
                angle_deg: None,
                phase: Some(Phase::A),
            },
        ];
        let dir = std::env::temp_dir().join(format!("ackf-dse-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.csv");
        write_phasor_csv(&path, "format_version=1", &recs).unwrap();
        let back = read_phasor_csv(&path).unwrap();
        assert_eq!(back, recs);
        let stream = meter_stream_from_records::<f64>(&back, Phase::A).unwrap();
        assert_eq!(stream.len(), 1);
        assert!(matches!(stream[0].voltages[&1], Reading::Magnitude(_)));
        std::fs::remove_dir_all(&dir).ok();
    }
}
