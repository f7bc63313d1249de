//! Main-area/subarea decomposition and the layered estimation pipeline.
//!
//! Every subarea hangs off a boundary bus that belongs to its parent area (the
//! main area or another subarea). Seen from the parent, a subarea is one big
//! load at its boundary bus, so each bus carries a *group* injection: its own
//! load plus the totals of all subareas rooted there.
//!
//! Per sample the main area runs the augmented complex Kalman filter on group
//! injections. Estimated group injections at boundary buses are then split
//! over the subareas by pseudo scaling factors, and each subarea is finished
//! with a forward solve from its boundary voltage, layer by layer.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use num_complex::Complex;
use num_traits::Zero;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ackf::{init, predict, update_with, CovarianceUpdate, FilterOptions, FilterState, StateSpaceModel};
use crate::augmented::{estimate_noise_covariance, AugmentedCovariance};
use crate::error::{DseError, Result};
use crate::grid_model::{build_bibc, build_dlf, direct_load_flow, subarea_forward_solve, BibcMatrix, Branch, BusId, DlfMatrix, RadialNetwork};
use crate::linalg::CMatrix;
use crate::measurement::{
    assemble_frame, build_observation_matrix, build_r, needs_angles, reference_voltage, resolve_angles, BadDataMonitor, MeterSample,
    MeteringPlan, ObservationMatrix, Reading, ResolvedPlan,
};
use crate::scalar::Scalar;

/// Aggregate pseudo currents below this magnitude cannot be normalized.
pub const DEGENERATE_DENOMINATOR: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SfMode {
    /// Complex ratio of pseudo currents.
    #[default]
    Complex,
    /// Ratio of pseudo current magnitudes.
    Magnitude,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFactors<T> {
    pub sf: Vec<Complex<T>>,
    /// Inclusive range of pseudo samples that were summed.
    pub basis_window: (usize, usize),
}

impl<T: Scalar> ScalingFactors<T> {
    pub fn sum(&self) -> Complex<T> {
        self.sf.iter().fold(Complex::zero(), |a, b| a + b)
    }
}

/// Centered window of `width` samples around `t`, clipped to `[0, len)`.
pub fn basis_window(t: usize, width: usize, len: usize) -> (usize, usize) {
    let width = width.max(1);
    let lo = t.saturating_sub((width - 1) / 2);
    let hi = (lo + width - 1).min(len.saturating_sub(1));
    let lo = hi.saturating_sub(width - 1).min(lo);
    (lo, hi)
}

/// Scaling factors of one instant from already aggregated pseudo values.
pub fn scaling_factors_of<T: Scalar>(values: &[Complex<T>], mode: SfMode) -> Result<Vec<Complex<T>>> {
    if values.is_empty() {
        return Err(DseError::Argument("scaling factors need at least one component".into()));
    }
    match mode {
        SfMode::Complex => {
            let total = values.iter().fold(Complex::<T>::zero(), |a, b| a + b);
            let mag = total.norm();
            if !(mag.to_f64_lossy() > DEGENERATE_DENOMINATOR) {
                return Err(DseError::DegenerateDenominator { magnitude: mag.to_f64_lossy() });
            }
            Ok(values.iter().map(|v| v / total).collect())
        }
        SfMode::Magnitude => {
            let total: T = values.iter().map(|v| v.norm()).sum();
            if !(total.to_f64_lossy() > DEGENERATE_DENOMINATOR) {
                return Err(DseError::DegenerateDenominator { magnitude: total.to_f64_lossy() });
            }
            Ok(values.iter().map(|v| Complex::new(v.norm() / total, T::zero())).collect())
        }
    }
}

/// `SF_j(t) = I_j(t) / Σ_i I_i(t)` over a centered basis window.
///
/// `pseudo[j]` is the pseudo current series of component `j`.
pub fn compute_scaling_factors<T: Scalar>(pseudo: &[Vec<Complex<T>>], t: usize, window: usize, mode: SfMode) -> Result<ScalingFactors<T>> {
    let len = pseudo.first().map_or(0, Vec::len);
    if pseudo.iter().any(|s| s.len() != len) {
        return Err(DseError::Argument("pseudo series have different lengths".into()));
    }
    if t >= len {
        return Err(DseError::Argument(format!("sample {t} outside a series of length {len}")));
    }
    let (lo, hi) = basis_window(t, window, len);
    let sums: Vec<Complex<T>> = pseudo.iter().map(|s| s[lo..=hi].iter().fold(Complex::zero(), |a, b| a + b)).collect();
    Ok(ScalingFactors {
        sf: scaling_factors_of(&sums, mode)?,
        basis_window: (lo, hi),
    })
}

/// `I_j = SF_j · I_total`.
pub fn update_pseudo_injections<T: Scalar>(sf: &ScalingFactors<T>, measured_total: Complex<T>) -> Vec<Complex<T>> {
    sf.sf.iter().map(|s| s * measured_total).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubareaRecord {
    pub id: u32,
    pub boundary_bus: BusId,
    pub members: Vec<BusId>,
}

/// JSON partition document.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionFile {
    #[serde(default = "crate::format_version")]
    pub format_version: u32,
    #[serde(default)]
    pub subareas: Vec<SubareaRecord>,
    /// Resolved configuration of the run that wrote this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl PartitionFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Subarea<T> {
    pub id: u32,
    pub boundary_bus: BusId,
    /// Position of the boundary bus in the full network.
    pub boundary_pos: usize,
    /// Subarea rooted at the boundary; its buses are the members.
    pub network: RadialNetwork<T>,
    /// Full-network position of every subarea bus position.
    pub member_map: Vec<usize>,
    /// Index of the parent subarea, `None` for the main area.
    pub parent: Option<usize>,
    /// 2 for subareas of the main area, 3 for their children, and so on.
    pub layer: usize,
    pub bibc: BibcMatrix<T>,
    pub dlf: DlfMatrix<T>,
}

/// A validated decomposition of one network.
#[derive(Clone, Debug)]
pub struct Partition<T> {
    pub main_area: RadialNetwork<T>,
    /// Full-network position of every main-area bus position.
    pub main_map: Vec<usize>,
    pub subareas: Vec<Subarea<T>>,
    /// Subarea indices per layer, starting with layer 2.
    pub layer_schedule: Vec<Vec<usize>>,
    /// Subareas rooted at each full-network bus position.
    rooted_at: Vec<Vec<usize>>,
}

fn sub_network<T: Scalar>(network: &RadialNetwork<T>, root: BusId, positions: &[usize]) -> Result<RadialNetwork<T>> {
    let mut ids = vec![root];
    ids.extend(positions.iter().map(|&p| network.buses()[p]));
    let branches: Vec<Branch<T>> = positions.iter().map(|&p| network.branches()[p].clone()).collect();
    RadialNetwork::new(network.phase(), root, &ids, branches)
}

fn position_map<T: Scalar>(full: &RadialNetwork<T>, part: &RadialNetwork<T>) -> Vec<usize> {
    part.buses().iter().map(|&b| full.bus_position(b).expect("sub-network bus is in the full network")).collect()
}

impl<T: Scalar> Partition<T> {
    /// Partition without subareas: the main area is the whole network.
    pub fn trivial(network: &RadialNetwork<T>) -> Self {
        let n = network.load_bus_count();
        Partition {
            main_area: network.clone(),
            main_map: (0..n).collect(),
            subareas: Vec::new(),
            layer_schedule: Vec::new(),
            rooted_at: vec![Vec::new(); n],
        }
    }

    pub fn new(network: &RadialNetwork<T>, file: &PartitionFile) -> Result<Self> {
        let n = network.load_bus_count();
        let mut area_of: Vec<Option<usize>> = vec![None; n];
        let mut ids = BTreeSet::new();
        for (s, rec) in file.subareas.iter().enumerate() {
            if !ids.insert(rec.id) {
                return Err(DseError::Validation(format!("duplicate subarea id {}", rec.id)));
            }
            if rec.members.is_empty() {
                return Err(DseError::Validation(format!("subarea {} has no members", rec.id)));
            }
            if network.bus_position(rec.boundary_bus).is_none() {
                return Err(DseError::Validation(format!(
                    "subarea {} boundary bus {} is not a non-reference bus of the network",
                    rec.id, rec.boundary_bus
                )));
            }
            for &m in &rec.members {
                let p = network
                    .bus_position(m)
                    .ok_or_else(|| DseError::Validation(format!("subarea {} member {m} is not a non-reference bus", rec.id)))?;
                if let Some(other) = area_of[p].replace(s) {
                    return Err(DseError::Validation(format!(
                        "bus {m} belongs to subareas {} and {}",
                        file.subareas[other].id, rec.id
                    )));
                }
            }
            if rec.members.contains(&rec.boundary_bus) {
                return Err(DseError::Validation(format!("subarea {} lists its boundary bus as a member", rec.id)));
            }
        }
        // every bus hangs off its own area, or off the boundary of its subarea
        for p in 0..n {
            let parent_area = network.parent_position(p).and_then(|q| area_of[q]);
            if area_of[p] == parent_area {
                continue;
            }
            let ok = match area_of[p] {
                Some(s) => file.subareas[s].boundary_bus == network.parent_bus(p),
                None => false,
            };
            if !ok {
                return Err(DseError::Validation(format!(
                    "bus {} is not connected to its area through the area's boundary bus",
                    network.buses()[p]
                )));
            }
        }

        let main_pos: Vec<usize> = (0..n).filter(|&p| area_of[p].is_none()).collect();
        let main_area = sub_network(network, network.reference(), &main_pos)?;
        let main_map = position_map(network, &main_area);

        let mut rooted_at = vec![Vec::new(); n];
        let mut subareas = Vec::with_capacity(file.subareas.len());
        for (s, rec) in file.subareas.iter().enumerate() {
            let boundary_pos = network.bus_position(rec.boundary_bus).expect("checked above");
            let positions: Vec<usize> = (0..n).filter(|&p| area_of[p] == Some(s)).collect();
            let sub = sub_network(network, rec.boundary_bus, &positions)?;
            let member_map = position_map(network, &sub);
            rooted_at[boundary_pos].push(s);
            subareas.push(Subarea {
                id: rec.id,
                boundary_bus: rec.boundary_bus,
                boundary_pos,
                bibc: build_bibc(&sub),
                dlf: build_dlf(&sub),
                network: sub,
                member_map,
                parent: area_of[boundary_pos],
                layer: 0,
            });
        }
        // layers follow the parent chain; the tree structure rules out cycles
        for s in 0..subareas.len() {
            let mut depth = 2;
            let mut cur = subareas[s].parent;
            while let Some(q) = cur {
                depth += 1;
                cur = subareas[q].parent;
                if depth > subareas.len() + 2 {
                    return Err(DseError::Validation("subarea nesting is cyclic".into()));
                }
            }
            subareas[s].layer = depth;
        }
        let max_layer = subareas.iter().map(|s| s.layer).max().unwrap_or(1);
        let layer_schedule = (2..=max_layer)
            .map(|l| (0..subareas.len()).filter(|&s| subareas[s].layer == l).collect())
            .collect();
        Ok(Partition {
            main_area,
            main_map,
            subareas,
            layer_schedule,
            rooted_at,
        })
    }

    pub fn is_trivial(&self) -> bool {
        self.subareas.is_empty()
    }

    /// Own injection plus the totals of all subareas rooted at each bus.
    pub fn group_injections(&self, own: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut g = own.to_vec();
        if self.subareas.is_empty() {
            return g;
        }
        // members of a subarea follow its boundary bus in pre-order
        for p in (0..own.len()).rev() {
            for &s in &self.rooted_at[p] {
                let total = self.subareas[s].member_map.iter().fold(Complex::zero(), |a, &m| a + g[m]);
                g[p] = g[p] + total;
            }
        }
        g
    }

    pub fn subareas_rooted_at(&self, pos: usize) -> &[usize] {
        &self.rooted_at[pos]
    }

    /// Area label per full-network position: `0` for the main area, else the subarea id.
    pub fn area_labels(&self, n: usize) -> Vec<u32> {
        let mut out = vec![0; n];
        for s in &self.subareas {
            for &p in &s.member_map {
                out[p] = s.id;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum ProcessNoise {
    /// Increment statistics of metered feeder-head currents, shared out by
    /// mean pseudo magnitude; buses without a metered head fall back to
    /// pseudo increments.
    MeterIncrements,
    /// Sample (pseudo)covariance of the pseudo-data increments.
    PseudoIncrements,
    /// Circular white increments with this standard deviation on every bus.
    Fixed { sd: f64 },
}

/// Knobs shared by the single-layer, multi-layer and WLS pipelines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub sf_mode: SfMode,
    /// Width of the pseudo-data window summed for each scaling factor.
    pub sf_window: usize,
    pub bad_data_k: f64,
    pub bad_data_window: usize,
    /// Variance multiplier applied to rows flagged as bad data.
    pub bad_data_inflation: f64,
    pub process_noise: ProcessNoise,
    pub covariance_update: CovarianceUpdate,
    pub condition_limit: f64,
    /// Solve the subareas of a layer on the rayon pool.
    pub parallel: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            sf_mode: SfMode::Complex,
            sf_window: 1,
            bad_data_k: 5.0,
            bad_data_window: 1440,
            bad_data_inflation: 1e6,
            process_noise: ProcessNoise::MeterIncrements,
            covariance_update: CovarianceUpdate::Subtractive,
            condition_limit: 1e12,
            parallel: true,
        }
    }
}

impl EstimatorConfig {
    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            covariance_update: self.covariance_update,
            condition_limit: self.condition_limit,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    /// `(sample, measurement row)` of every flagged meter reading. The
    /// feeder-head voltage of an area is reported as the row after its last
    /// measurement row.
    pub bad_data: Vec<(usize, usize)>,
    pub regularized_steps: usize,
    pub sf_fallbacks: usize,
    pub angle_fallbacks: usize,
    /// Largest `|ΣSF − 1|` seen.
    pub max_sf_sum_error: f64,
    /// Largest `|Σ updated − total|` seen.
    pub max_conservation_error: f64,
}

impl RunDiagnostics {
    fn track_sf<T: Scalar>(&mut self, sf: &[Complex<T>], updated: &[Complex<T>], total: Complex<T>) {
        let s = sf.iter().fold(Complex::<T>::zero(), |a, b| a + b);
        let e = (s - Complex::new(T::one(), T::zero())).norm().to_f64_lossy();
        self.max_sf_sum_error = self.max_sf_sum_error.max(e);
        let u = updated.iter().fold(Complex::<T>::zero(), |a, b| a + b);
        self.max_conservation_error = self.max_conservation_error.max((u - total).norm().to_f64_lossy());
    }

    fn merge(&mut self, o: &RunDiagnostics) {
        self.bad_data.extend_from_slice(&o.bad_data);
        self.regularized_steps += o.regularized_steps;
        self.sf_fallbacks += o.sf_fallbacks;
        self.angle_fallbacks += o.angle_fallbacks;
        self.max_sf_sum_error = self.max_sf_sum_error.max(o.max_sf_sum_error);
        self.max_conservation_error = self.max_conservation_error.max(o.max_conservation_error);
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Matrices, scaling-factor bases and noise statistics.
    pub offline_s: f64,
    /// The per-sample loop.
    pub real_time_s: f64,
}

/// Estimates over time, indexed `[t][full-network bus position]`.
#[derive(Clone, Debug)]
pub struct EstimationRun<T> {
    pub voltages: Vec<Vec<Complex<T>>>,
    /// Estimated own injection of every bus.
    pub injections: Vec<Vec<Complex<T>>>,
    pub diagnostics: RunDiagnostics,
    pub timing: Timing,
}

/// Windowed sums of a `[t][component]` series.
#[derive(Clone, Debug)]
pub(crate) struct WindowedSeries<T> {
    width: usize,
    raw: Vec<Vec<Complex<T>>>,
    prefix: Vec<Vec<Complex<T>>>,
}

impl<T: Scalar> WindowedSeries<T> {
    pub(crate) fn new(raw: Vec<Vec<Complex<T>>>, width: usize) -> Self {
        let width = width.max(1);
        let mut prefix = Vec::new();
        if width > 1 {
            let n = raw.first().map_or(0, Vec::len);
            prefix.push(vec![Complex::zero(); n]);
            for row in &raw {
                let last = prefix.last().expect("seeded");
                let next: Vec<Complex<T>> = last.iter().zip(row).map(|(a, b)| a + b).collect();
                prefix.push(next);
            }
        }
        WindowedSeries { width, raw, prefix }
    }

    pub(crate) fn raw(&self, t: usize) -> &[Complex<T>] {
        &self.raw[t]
    }

    pub(crate) fn len(&self) -> usize {
        self.raw.len()
    }

    /// Windowed sum of component `j` around `t`.
    pub(crate) fn at(&self, t: usize, j: usize) -> Complex<T> {
        if self.width == 1 {
            return self.raw[t][j];
        }
        let (lo, hi) = basis_window(t, self.width, self.raw.len());
        self.prefix[hi + 1][j] - self.prefix[lo][j]
    }
}

/// Builds measurement vectors for one area: resolves magnitude-only meters,
/// rescales pseudo injections below each metered head branch by scaling
/// factors and stacks the rows in plan order.
#[derive(Clone, Debug)]
pub struct AreaFrames<T> {
    pub network: RadialNetwork<T>,
    pub plan: ResolvedPlan,
    pub bibc: BibcMatrix<T>,
    pub dlf: DlfMatrix<T>,
    pub h: ObservationMatrix<T>,
    /// `(branch position, bus positions of its subtree)` for metered branches
    /// leaving the reference bus.
    heads: Vec<(usize, Vec<usize>)>,
    pseudo: WindowedSeries<T>,
    samples: Vec<MeterSample<T>>,
    sf_mode: SfMode,
}

/// One assembled step.
#[derive(Clone, Debug)]
pub struct AreaFrame<T> {
    pub y: Vec<Complex<T>>,
    pub v_ref: Complex<T>,
    /// Pseudo injections after scaling, by area bus position.
    pub pseudo: Vec<Complex<T>>,
}

impl<T: Scalar> AreaFrames<T> {
    /// `pseudo` is indexed `[t][area bus position]`; `meters` must cover the
    /// same samples.
    pub fn new(
        network: RadialNetwork<T>,
        plan: ResolvedPlan,
        pseudo: Vec<Vec<Complex<T>>>,
        meters: &[MeterSample<T>],
        config: &EstimatorConfig,
        diag: &mut RunDiagnostics,
    ) -> Result<Self> {
        let n = network.load_bus_count();
        if let Some((t, row)) = pseudo.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(DseError::shape("pseudo injections", n, format!("{} at sample {t}", row.len())));
        }
        if meters.len() < pseudo.len() {
            return Err(DseError::Data(format!("meter stream has {} samples, {} needed", meters.len(), pseudo.len())));
        }
        let bibc = build_bibc(&network);
        let dlf = build_dlf(&network);
        let h = build_observation_matrix(&plan, &bibc, &dlf)?;
        let mut heads = Vec::new();
        for &b in &plan.current_pos {
            if network.parent_position(b).is_none() {
                let mut sub = vec![b];
                for k in b + 1..n {
                    match network.parent_position(k) {
                        Some(p) if sub.contains(&p) => sub.push(k),
                        _ => break,
                    }
                }
                heads.push((b, sub));
            }
        }
        // keep only the planned devices, with angles resolved
        let mut samples = Vec::with_capacity(pseudo.len());
        for (t, s) in meters.iter().take(pseudo.len()).enumerate() {
            let mut keep = MeterSample {
                timestamp: s.timestamp,
                ..Default::default()
            };
            for id in plan.voltage_ids.iter().chain(plan.head_voltage.iter()) {
                if let Some(r) = s.voltages.get(id) {
                    keep.voltages.insert(*id, *r);
                }
            }
            for id in &plan.current_ids {
                if let Some(r) = s.currents.get(id) {
                    keep.currents.insert(*id, *r);
                }
            }
            if needs_angles(&keep) {
                let v_ref = reference_voltage(&plan, &keep)?;
                let flow = direct_load_flow(&bibc, &dlf, &pseudo[t], v_ref)?;
                diag.angle_fallbacks += resolve_angles(&mut keep, &flow, &network)?;
            }
            samples.push(keep);
        }
        Ok(AreaFrames {
            pseudo: WindowedSeries::new(pseudo, config.sf_window),
            network,
            plan,
            bibc,
            dlf,
            h,
            heads,
            samples,
            sf_mode: config.sf_mode,
        })
    }

    pub fn len(&self) -> usize {
        self.pseudo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pseudo.len() == 0
    }

    pub fn sample(&self, t: usize) -> &MeterSample<T> {
        &self.samples[t]
    }

    pub fn raw_pseudo(&self, t: usize) -> &[Complex<T>] {
        self.pseudo.raw(t)
    }

    /// Phasor of a metered head branch at sample `t`.
    fn head_current(&self, t: usize, branch_pos: usize) -> Result<Complex<T>> {
        let id = self.network.branches()[branch_pos].id;
        match self.samples[t].currents.get(&id) {
            Some(Reading::Phasor(z)) => Ok(*z),
            _ => Err(DseError::Data(format!("missing current reading for branch {id} at sample {t}"))),
        }
    }

    /// Frame at sample `t` offset by the raw head voltage reading.
    pub fn frame(&self, t: usize, diag: &mut RunDiagnostics) -> Result<AreaFrame<T>> {
        self.frame_with(t, None, diag)
    }

    /// Frame at sample `t`; `v_ref` replaces the raw head reading when given.
    pub fn frame_with(&self, t: usize, v_ref: Option<Complex<T>>, diag: &mut RunDiagnostics) -> Result<AreaFrame<T>> {
        let mut pseudo = self.pseudo.raw(t).to_vec();
        for (b, sub) in &self.heads {
            let total = self.head_current(t, *b)?;
            let basis: Vec<Complex<T>> = sub.iter().map(|&k| self.pseudo.at(t, k)).collect();
            let sf = match scaling_factors_of(&basis, self.sf_mode) {
                Ok(sf) => sf,
                Err(DseError::DegenerateDenominator { .. }) => {
                    diag.sf_fallbacks += 1;
                    let share = T::one() / T::from_usize(sub.len()).expect("small count");
                    vec![Complex::new(share, T::zero()); sub.len()]
                }
                Err(e) => return Err(e),
            };
            let updated: Vec<Complex<T>> = sf.iter().map(|s| s * total).collect();
            diag.track_sf(&sf, &updated, total);
            for (&k, u) in sub.iter().zip(updated) {
                pseudo[k] = u;
            }
        }
        let sample = &self.samples[t];
        let v_ref = match v_ref {
            Some(v) => v,
            None => reference_voltage(&self.plan, sample)?,
        };
        let frame = assemble_frame(&self.plan, &pseudo, sample, v_ref)?;
        Ok(AreaFrame { y: frame.y(), v_ref, pseudo })
    }

    fn head_increments(&self, branch_pos: usize) -> Vec<Vec<Complex<T>>> {
        let mut out = Vec::new();
        for t in 1..self.len() {
            if let (Ok(a), Ok(b)) = (self.head_current(t - 1, branch_pos), self.head_current(t, branch_pos)) {
                out.push(vec![b - a]);
            }
        }
        out
    }

    fn pseudo_increment_covariance(&self) -> Result<AugmentedCovariance<T>> {
        let inc: Vec<Vec<Complex<T>>> = (1..self.len())
            .map(|t| self.pseudo.raw(t).iter().zip(self.pseudo.raw(t - 1)).map(|(a, b)| a - b).collect())
            .collect();
        estimate_noise_covariance(&inc)?.covariance.repaired()
    }

    /// Process noise of the random-walk injection model.
    pub fn process_noise(&self, source: ProcessNoise) -> Result<AugmentedCovariance<T>> {
        let n = self.network.load_bus_count();
        match source {
            ProcessNoise::Fixed { sd } => {
                if !(sd >= 0.0) {
                    return Err(DseError::Argument(format!("process noise SD must be non-negative, got {sd}")));
                }
                AugmentedCovariance::diagonal(&vec![T::lit(sd * sd); n])
            }
            ProcessNoise::PseudoIncrements => self.pseudo_increment_covariance(),
            ProcessNoise::MeterIncrements => {
                let mut gamma = CMatrix::zeros(n, n);
                let mut c = CMatrix::zeros(n, n);
                let mut covered = vec![false; n];
                for (b, sub) in &self.heads {
                    let inc = self.head_increments(*b);
                    if inc.len() < 2 {
                        continue;
                    }
                    let est = estimate_noise_covariance(&inc)?.covariance;
                    let id = self.network.branches()[*b].id;
                    let row = self.plan.current_ids.iter().position(|&x| x == id).expect("head is metered");
                    let meter_var = T::lit(2.0 * self.plan.row_sd[self.plan.current_rows().start + row].powi(2));
                    let g_raw = est.gamma()[(0, 0)].re;
                    let g_tot = (g_raw - meter_var).max(g_raw * T::lit(0.1));
                    let mut c_tot = est.c()[(0, 0)];
                    if c_tot.norm() > g_tot * T::lit(0.99) {
                        c_tot = c_tot.scale(g_tot * T::lit(0.99) / c_tot.norm());
                    }
                    let means: Vec<T> = sub
                        .iter()
                        .map(|&k| (0..self.len()).map(|t| self.pseudo.raw(t)[k].norm()).sum::<T>())
                        .collect();
                    let total: T = means.iter().copied().sum();
                    for (&k, m) in sub.iter().zip(&means) {
                        let w = if total > T::zero() {
                            *m / total
                        } else {
                            T::one() / T::from_usize(sub.len()).expect("small count")
                        };
                        gamma[(k, k)] = Complex::new(g_tot * w, T::zero());
                        c[(k, k)] = c_tot.scale(w);
                        covered[k] = true;
                    }
                }
                if covered.iter().any(|c| !c) {
                    let fallback = self.pseudo_increment_covariance()?;
                    for k in (0..n).filter(|&k| !covered[k]) {
                        gamma[(k, k)] = fallback.gamma()[(k, k)];
                        c[(k, k)] = fallback.c()[(k, k)];
                    }
                }
                AugmentedCovariance::new(gamma, c)
            }
        }
    }

    /// Initial state and covariance: scaled pseudo at the first sample with
    /// the planned pseudo variance on every state.
    pub fn initial_state(&self, plan: &MeteringPlan, diag: &mut RunDiagnostics) -> Result<FilterState<T>> {
        let x0 = self.frame(0, diag)?.pseudo;
        let var: Vec<T> = self.network.buses().iter().map(|&b| T::lit(plan.pseudo_sd_for(b).powi(2))).collect();
        init(x0, AugmentedCovariance::diagonal(&var)?)
    }
}

/// Variance of a random walk observed in white noise, from the slope of its
/// lag variogram: `E|x(t+L) − x(t)|² = L·q + 2σ²`.
pub fn variogram_walk_variance<T: Scalar>(series: &[Complex<T>], max_lag: usize) -> Result<AugmentedCovariance<T>> {
    let lags = max_lag.min(series.len() / 4).max(1);
    let mut g = Vec::with_capacity(lags);
    let mut c = Vec::with_capacity(lags);
    for l in 1..=lags {
        let n = series.len().saturating_sub(l);
        if n == 0 {
            return Err(DseError::Argument("series too short for a variogram".into()));
        }
        let (mut sg, mut sc) = (T::zero(), Complex::<T>::zero());
        for t in 0..n {
            let d = series[t + l] - series[t];
            sg = sg + d.norm_sqr();
            sc = sc + d * d;
        }
        let k = T::from_usize(n).expect("sample count");
        g.push(sg / k);
        c.push(sc / k);
    }
    let floor = g[0] * T::lit(1e-3);
    let (q, qc) = if lags < 2 {
        (g[0], c[0])
    } else {
        let m = T::from_usize(lags).expect("small count");
        let l_bar = (T::one() + m) / T::lit(2.0);
        let g_bar = g.iter().copied().sum::<T>() / m;
        let c_bar = c.iter().fold(Complex::<T>::zero(), |a, b| a + b) / m;
        let (mut sxx, mut sxg, mut sxc) = (T::zero(), T::zero(), Complex::<T>::zero());
        for (i, (gi, ci)) in g.iter().zip(&c).enumerate() {
            let dx = T::from_usize(i + 1).expect("small count") - l_bar;
            sxx = sxx + dx * dx;
            sxg = sxg + dx * (*gi - g_bar);
            sxc = sxc + (ci - c_bar).scale(dx);
        }
        (sxg / sxx, sxc / sxx)
    };
    let q = q.max(floor);
    let qc = if qc.norm() > q * T::lit(0.99) { qc.scale(q * T::lit(0.99) / qc.norm()) } else { qc };
    AugmentedCovariance::new(CMatrix::from_rows(&[vec![Complex::new(q, T::zero())]])?, CMatrix::from_rows(&[vec![qc]])?)
}

/// Lags fitted when estimating the head voltage walk.
const HEAD_VARIOGRAM_LAGS: usize = 30;

/// Random-walk filter of the metered feeder-head voltage.
struct HeadVoltageFilter<T> {
    bus: BusId,
    /// Bad-data rows of this filter are reported as this measurement row.
    row: usize,
    model: StateSpaceModel<T>,
    state: FilterState<T>,
    monitor: BadDataMonitor,
    options: FilterOptions,
    inflation: T,
}

impl<T: Scalar> HeadVoltageFilter<T> {
    fn new(frames: &AreaFrames<T>, plan: &MeteringPlan, config: &EstimatorConfig) -> Result<Option<Self>> {
        let Some(bus) = frames.plan.head_voltage else {
            return Ok(None);
        };
        let readings = (0..frames.len())
            .map(|t| reference_voltage(&frames.plan, frames.sample(t)))
            .collect::<Result<Vec<_>>>()?;
        let var = T::lit(plan.voltage_sd(bus).powi(2));
        let q = if readings.len() < 2 {
            AugmentedCovariance::diagonal(&[var])?
        } else {
            variogram_walk_variance(&readings, HEAD_VARIOGRAM_LAGS)?
        };
        let r = AugmentedCovariance::diagonal(&[var])?;
        let model = StateSpaceModel::random_walk(CMatrix::from_rows(&[vec![Complex::new(T::one(), T::zero())]])?, q, r)?;
        let state = init(vec![readings[0]], AugmentedCovariance::diagonal(&[var])?)?;
        Ok(Some(HeadVoltageFilter {
            bus,
            row: frames.plan.rows(),
            model,
            state,
            monitor: BadDataMonitor::new(vec![0], config.bad_data_window, config.bad_data_k)?,
            options: config.filter_options(),
            inflation: T::lit(config.bad_data_inflation),
        }))
    }

    fn step(&mut self, sample: &MeterSample<T>, t: usize, diag: &mut RunDiagnostics) -> Result<Complex<T>> {
        let y = match sample.voltages.get(&self.bus) {
            Some(Reading::Phasor(z)) => *z,
            Some(Reading::Magnitude(m)) => Complex::new(*m, T::zero()),
            None => return Err(DseError::Data(format!("missing head voltage reading on bus {} at sample {t}", self.bus))),
        };
        let predicted = predict(&self.state, &self.model)?;
        let e = [y - predicted.x_hat[0]];
        let r_override = if self.monitor.check(&e).is_empty() {
            None
        } else {
            diag.bad_data.push((t, self.row));
            let mut r = self.model.r().clone();
            r.inflate(0, self.inflation);
            Some(r)
        };
        let out = update_with(&predicted, &[y], &self.model, r_override.as_ref(), &self.options)?;
        self.state = out.state;
        Ok(self.state.x_hat[0])
    }
}

/// The Kalman filter of one area together with its frame builder.
pub struct AreaFilter<T> {
    pub frames: AreaFrames<T>,
    head: Option<HeadVoltageFilter<T>>,
    model: StateSpaceModel<T>,
    state: FilterState<T>,
    monitor: BadDataMonitor,
    options: FilterOptions,
    inflation: T,
}

/// Filter output at one sample, by area bus position.
#[derive(Clone, Debug)]
pub struct AreaEstimate<T> {
    pub injections: Vec<Complex<T>>,
    pub voltages: Vec<Complex<T>>,
    pub v_ref: Complex<T>,
}

impl<T: Scalar> AreaFilter<T> {
    pub fn new(frames: AreaFrames<T>, plan: &MeteringPlan, config: &EstimatorConfig, diag: &mut RunDiagnostics) -> Result<Self> {
        let q = frames.process_noise(config.process_noise)?;
        let r = build_r(&frames.plan)?;
        let model = StateSpaceModel::random_walk(frames.h.h.clone(), q, r)?;
        let state = frames.initial_state(plan, diag)?;
        let monitor = BadDataMonitor::new(frames.plan.meter_rows(), config.bad_data_window, config.bad_data_k)?;
        let head = HeadVoltageFilter::new(&frames, plan, config)?;
        Ok(AreaFilter {
            frames,
            head,
            model,
            state,
            monitor,
            options: config.filter_options(),
            inflation: T::lit(config.bad_data_inflation),
        })
    }

    pub fn state(&self) -> &FilterState<T> {
        &self.state
    }

    pub fn model(&self) -> &StateSpaceModel<T> {
        &self.model
    }

    /// Predict, screen meter rows for bad data, update, and map to voltages.
    pub fn step(&mut self, t: usize, diag: &mut RunDiagnostics) -> Result<AreaEstimate<T>> {
        let v_ref = match &mut self.head {
            Some(h) => Some(h.step(self.frames.sample(t), t, diag)?),
            None => None,
        };
        let frame = self.frames.frame_with(t, v_ref, diag)?;
        let predicted = predict(&self.state, &self.model)?;
        let e: Vec<Complex<T>> = frame.y.iter().zip(self.model.h().mul_vec(&predicted.x_hat)).map(|(a, b)| a - b).collect();
        let flagged = self.monitor.check(&e);
        let r_override = if flagged.is_empty() {
            None
        } else {
            let mut r = self.model.r().clone();
            for &row in &flagged {
                r.inflate(row, self.inflation);
                diag.bad_data.push((t, row));
            }
            Some(r)
        };
        let out = update_with(&predicted, &frame.y, &self.model, r_override.as_ref(), &self.options)?;
        if out.diagnostics.regularized {
            diag.regularized_steps += 1;
        }
        self.state = out.state;
        let flow = direct_load_flow(&self.frames.bibc, &self.frames.dlf, &self.state.x_hat, frame.v_ref)?;
        Ok(AreaEstimate {
            injections: self.state.x_hat.clone(),
            voltages: flow.bus_voltages,
            v_ref: frame.v_ref,
        })
    }
}

fn check_inputs<T: Scalar>(network: &RadialNetwork<T>, pseudo: &[Vec<Complex<T>>], meters: &[MeterSample<T>], steps: usize) -> Result<()> {
    if steps == 0 {
        return Err(DseError::Argument("need at least one sample".into()));
    }
    if pseudo.len() < steps {
        return Err(DseError::Data(format!("pseudo data covers {} samples, {steps} requested", pseudo.len())));
    }
    if meters.len() < steps {
        return Err(DseError::Data(format!("meter stream covers {} samples, {steps} requested", meters.len())));
    }
    let n = network.load_bus_count();
    if let Some(t) = pseudo.iter().take(steps).position(|r| r.len() != n) {
        return Err(DseError::shape("pseudo injections", n, format!("{} at sample {t}", pseudo[t].len())));
    }
    Ok(())
}

/// One filter over the full injection vector of the network.
pub fn run_single_layer<T: Scalar>(
    network: &RadialNetwork<T>,
    plan: &MeteringPlan,
    pseudo: &[Vec<Complex<T>>],
    meters: &[MeterSample<T>],
    steps: usize,
    config: &EstimatorConfig,
) -> Result<EstimationRun<T>> {
    check_inputs(network, pseudo, meters, steps)?;
    let offline = Instant::now();
    let mut diag = RunDiagnostics::default();
    let resolved = ResolvedPlan::new(plan, network)?;
    let frames = AreaFrames::new(network.clone(), resolved, pseudo[..steps].to_vec(), meters, config, &mut diag)?;
    let mut filter = AreaFilter::new(frames, plan, config, &mut diag)?;
    let offline_s = offline.elapsed().as_secs_f64();

    let online = Instant::now();
    let mut voltages = Vec::with_capacity(steps);
    let mut injections = Vec::with_capacity(steps);
    for t in 0..steps {
        let est = filter.step(t, &mut diag)?;
        voltages.push(est.voltages);
        injections.push(est.injections);
    }
    Ok(EstimationRun {
        voltages,
        injections,
        diagnostics: diag,
        timing: Timing {
            offline_s,
            real_time_s: online.elapsed().as_secs_f64(),
        },
    })
}

/// Precomputed pseudo bases of one split point: the own load of a bus and
/// the totals of the subareas rooted there, or the member groups of a subarea.
struct SplitBasis<T> {
    series: WindowedSeries<T>,
}

impl<T: Scalar> SplitBasis<T> {
    fn split(&self, t: usize, total: Complex<T>, mode: SfMode, diag: &mut RunDiagnostics) -> Result<Vec<Complex<T>>> {
        let k = self.series.raw(t).len();
        let basis: Vec<Complex<T>> = (0..k).map(|j| self.series.at(t, j)).collect();
        let sf = match scaling_factors_of(&basis, mode) {
            Ok(sf) => sf,
            Err(DseError::DegenerateDenominator { .. }) => {
                diag.sf_fallbacks += 1;
                let share = T::one() / T::from_usize(k).expect("small count");
                vec![Complex::new(share, T::zero()); k]
            }
            Err(e) => return Err(e),
        };
        let updated: Vec<Complex<T>> = sf.iter().map(|s| s * total).collect();
        diag.track_sf(&sf, &updated, total);
        Ok(updated)
    }
}

/// Layered estimation: filter on the main area, then scaling-factor
/// disaggregation and forward solves for every subarea, layer by layer.
pub fn run_multilayer<T: Scalar>(
    network: &RadialNetwork<T>,
    partition: &Partition<T>,
    plan: &MeteringPlan,
    pseudo: &[Vec<Complex<T>>],
    meters: &[MeterSample<T>],
    steps: usize,
    config: &EstimatorConfig,
) -> Result<EstimationRun<T>> {
    check_inputs(network, pseudo, meters, steps)?;
    let offline = Instant::now();
    let n = network.load_bus_count();
    let mut diag = RunDiagnostics::default();

    // group pseudo injections on every bus
    let groups: Vec<Vec<Complex<T>>> = pseudo[..steps].iter().map(|row| partition.group_injections(row)).collect();
    let main_pseudo: Vec<Vec<Complex<T>>> = groups.iter().map(|g| partition.main_map.iter().map(|&p| g[p]).collect()).collect();
    let main_plan_file = if partition.is_trivial() {
        plan.clone()
    } else {
        let mut p = plan.clone();
        p.pseudo_buses = None;
        // group pseudo noise adds up over the buses a group covers
        for (k, &full) in partition.main_map.iter().enumerate() {
            let bus = partition.main_area.buses()[k];
            p.sd_overrides.insert(format!("P{bus}"), group_variance(partition, plan, network, full).sqrt());
        }
        p
    };
    let main_plan = if partition.is_trivial() {
        ResolvedPlan::new(&main_plan_file, &partition.main_area)?
    } else {
        ResolvedPlan::restricted(&main_plan_file, &partition.main_area)?
    };
    let frames = AreaFrames::new(partition.main_area.clone(), main_plan, main_pseudo, meters, config, &mut diag)?;
    let mut filter = AreaFilter::new(frames, &main_plan_file, config, &mut diag)?;

    // bases for boundary splits and member splits
    let mut boundary_basis: HashMap<usize, SplitBasis<T>> = HashMap::new();
    for p in 0..n {
        let rooted = partition.subareas_rooted_at(p);
        if rooted.is_empty() {
            continue;
        }
        let series = (0..steps)
            .map(|t| {
                let mut row = vec![pseudo[t][p]];
                for &s in rooted {
                    row.push(partition.subareas[s].member_map.iter().fold(Complex::zero(), |a, &m| a + groups[t][m]));
                }
                row
            })
            .collect();
        boundary_basis.insert(
            p,
            SplitBasis {
                series: WindowedSeries::new(series, config.sf_window),
            },
        );
    }
    let member_basis: Vec<SplitBasis<T>> = partition
        .subareas
        .iter()
        .map(|s| SplitBasis {
            series: WindowedSeries::new((0..steps).map(|t| s.member_map.iter().map(|&m| groups[t][m]).collect()).collect(), config.sf_window),
        })
        .collect();
    let offline_s = offline.elapsed().as_secs_f64();

    let online = Instant::now();
    let mut voltages = Vec::with_capacity(steps);
    let mut injections = Vec::with_capacity(steps);
    for t in 0..steps {
        let main = filter.step(t, &mut diag)?;
        if partition.is_trivial() {
            voltages.push(main.voltages);
            injections.push(main.injections);
            continue;
        }
        let mut v = vec![Complex::zero(); n];
        let mut g = vec![Complex::zero(); n];
        for (k, &full) in partition.main_map.iter().enumerate() {
            v[full] = main.voltages[k];
            g[full] = main.injections[k];
        }
        let mut own = g.clone();
        let mut totals = vec![Complex::zero(); partition.subareas.len()];
        split_boundaries(partition, partition.main_map.iter().copied(), &g, &boundary_basis, t, config.sf_mode, &mut own, &mut totals, &mut diag)?;

        for layer in &partition.layer_schedule {
            let solve = |&s: &usize| -> Result<(usize, Vec<Complex<T>>, Vec<Complex<T>>, RunDiagnostics)> {
                let sub = &partition.subareas[s];
                let mut d = RunDiagnostics::default();
                let updated = member_basis[s].split(t, totals[s], config.sf_mode, &mut d)?;
                let flow = subarea_forward_solve(&sub.bibc, &sub.dlf, &updated, v[sub.boundary_pos])?;
                Ok((s, updated, flow.bus_voltages, d))
            };
            let results: Vec<_> = if config.parallel && layer.len() > 1 {
                layer.par_iter().map(solve).collect::<Result<Vec<_>>>()?
            } else {
                layer.iter().map(solve).collect::<Result<Vec<_>>>()?
            };
            for (s, updated, vs, d) in results {
                diag.merge(&d);
                let sub = &partition.subareas[s];
                for (k, &full) in sub.member_map.iter().enumerate() {
                    v[full] = vs[k];
                    g[full] = updated[k];
                    own[full] = updated[k];
                }
                split_boundaries(
                    partition,
                    sub.member_map.iter().copied(),
                    &g,
                    &boundary_basis,
                    t,
                    config.sf_mode,
                    &mut own,
                    &mut totals,
                    &mut diag,
                )?;
            }
        }
        voltages.push(v);
        injections.push(own);
    }
    Ok(EstimationRun {
        voltages,
        injections,
        diagnostics: diag,
        timing: Timing {
            offline_s,
            real_time_s: online.elapsed().as_secs_f64(),
        },
    })
}

/// Splits the group estimate of every boundary bus among `positions` into
/// its own load and the totals of the subareas rooted there.
#[allow(clippy::too_many_arguments)]
fn split_boundaries<T: Scalar>(
    partition: &Partition<T>,
    positions: impl Iterator<Item = usize>,
    g: &[Complex<T>],
    basis: &HashMap<usize, SplitBasis<T>>,
    t: usize,
    mode: SfMode,
    own: &mut [Complex<T>],
    totals: &mut [Complex<T>],
    diag: &mut RunDiagnostics,
) -> Result<()> {
    for p in positions {
        let rooted = partition.subareas_rooted_at(p);
        if rooted.is_empty() {
            continue;
        }
        let parts = basis[&p].split(t, g[p], mode, diag)?;
        own[p] = parts[0];
        for (&s, part) in rooted.iter().zip(&parts[1..]) {
            totals[s] = *part;
        }
    }
    Ok(())
}

/// Pseudo variance of a group: the sum over every bus it aggregates.
fn group_variance<T: Scalar>(partition: &Partition<T>, plan: &MeteringPlan, network: &RadialNetwork<T>, pos: usize) -> f64 {
    let mut var = plan.pseudo_sd_for(network.buses()[pos]).powi(2);
    for &s in partition.subareas_rooted_at(pos) {
        for &m in &partition.subareas[s].member_map {
            var += group_variance(partition, plan, network, m);
        }
    }
    var
}

/// Per-area bus lists for reporting: `0` is the main area.
pub fn area_members<T: Scalar>(network: &RadialNetwork<T>, partition: &Partition<T>) -> BTreeMap<u32, Vec<usize>> {
    let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, a) in partition.area_labels(network.load_bus_count()).into_iter().enumerate() {
        out.entry(a).or_default().push(p);
    }
    out
}
