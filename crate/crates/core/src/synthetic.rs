//! Synthetic smart-meter scenarios.
//!
//! Each customer's load current is a complex random walk with white,
//! slightly improper increments, reflected so its magnitude stays inside
//! configured bounds. A share of customers carries rooftop PV: a half-sine
//! daytime shape times a capacity times a slowly wandering cloud factor.
//! The previous day, which the estimators use as pseudo data, is built from
//! the same customers with a second, independent walk mixed in so that its
//! deviations correlate with the true day at `day_correlation`.
//!
//! All draws come from ChaCha streams keyed by the seed and the customer
//! index, so customers can be generated in any order or in parallel.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::grid_model::{build_bibc, build_dlf, direct_load_flow, Branch, BranchId, BusId, FlowSolution, Phase, RadialNetwork};
use crate::layering::{PartitionFile, SubareaRecord};
use crate::measurement::{MeterKind, MeterSample, MeteringPlan, Reading};
use crate::scalar::Scalar;

const MINUTES_PER_DAY: usize = 1440;

// Stream offsets keep the draws of different purposes apart.
const STREAM_CUSTOMER: u64 = 0;
const STREAM_TOPOLOGY: u64 = 1 << 40;
const STREAM_PSEUDO: u64 = 2 << 40;
const STREAM_METER: u64 = 3 << 40;
const STREAM_SELECTION: u64 = 4 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PvParams {
    /// Hour of day at which the half-sine starts.
    pub sunrise_h: f64,
    pub sunset_h: f64,
    /// Capacity as a share of the customer's base load, drawn uniformly.
    pub capacity_min: f64,
    pub capacity_max: f64,
    /// Per-sample SD of the cloud factor walk.
    pub cloud_sd: f64,
    /// Lowest cloud factor (full sun is 1).
    pub cloud_floor: f64,
}

impl Default for PvParams {
    fn default() -> Self {
        PvParams {
            sunrise_h: 6.0,
            sunset_h: 18.0,
            capacity_min: 0.3,
            capacity_max: 0.8,
            cloud_sd: 0.01,
            cloud_floor: 0.3,
        }
    }
}

/// Feeder topology of a scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeederSpec {
    /// One load bus per area on a short lateral-tapped line. Five areas give
    /// the six-bus feeder 1-2, 2-3, 3-4, 4-5, 3-6.
    Compact,
    /// A long feeder with a trunk and three subareas, one of which holds a
    /// nested subarea.
    Layered { buses: usize },
}

/// A bad-data spike added to one meter at one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub sample: usize,
    pub kind: MeterKind,
    pub device: u32,
    /// Size of the deviation from truth in multiples of the meter SD.
    pub sd_multiple: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub feeder: FeederSpec,
    /// Number of load buses of a compact feeder.
    pub areas: usize,
    /// Customers attached to every load bus.
    pub customers_per_area: usize,
    #[serde(rename = "T")]
    pub samples: usize,
    /// Per-sample SD of a customer's load walk, in customer units.
    pub increment_sd: f64,
    /// Variance of the imaginary increment relative to the real one.
    pub increment_imag_ratio: f64,
    /// Correlation between real and imaginary increments.
    pub increment_correlation: f64,
    /// Bounds of the walk magnitude, in customer units.
    pub min_magnitude: f64,
    pub max_magnitude: f64,
    /// Per-unit current of one customer unit.
    pub load_scale: f64,
    pub pv_penetration: f64,
    pub pv: PvParams,
    pub day_correlation: f64,
    pub meter_sd: f64,
    /// SD of the white error added to every per-bus pseudo reading.
    pub pseudo_sd: f64,
    /// Report meter magnitudes only, except at the feeder head.
    pub magnitude_only: bool,
    pub spikes: Vec<Spike>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 7,
            feeder: FeederSpec::Compact,
            areas: 5,
            customers_per_area: 20,
            samples: MINUTES_PER_DAY,
            increment_sd: 0.02,
            increment_imag_ratio: 0.25,
            increment_correlation: 0.3,
            min_magnitude: 0.1,
            max_magnitude: 2.0,
            load_scale: 0.01,
            pv_penetration: 0.2,
            pv: PvParams::default(),
            day_correlation: 0.8,
            meter_sd: 0.0002,
            pseudo_sd: 0.1,
            magnitude_only: false,
            spikes: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    /// Five areas of twenty houses on the six-bus feeder.
    pub fn six_bus(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            ..Self::default()
        }
    }

    /// A 150-bus layered feeder with one customer per load bus.
    pub fn layered(seed: u64) -> Self {
        ScenarioConfig {
            seed,
            feeder: FeederSpec::Layered { buses: 150 },
            customers_per_area: 1,
            pseudo_sd: 0.002,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sds = [
            ("increment_sd", self.increment_sd),
            ("meter_sd", self.meter_sd),
            ("pseudo_sd", self.pseudo_sd),
            ("pv.cloud_sd", self.pv.cloud_sd),
            ("load_scale", self.load_scale),
        ];
        for (name, v) in sds {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(DseError::Argument(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.pv_penetration) {
            return Err(DseError::Argument(format!("pv_penetration must lie in [0, 1], got {}", self.pv_penetration)));
        }
        if !(self.day_correlation > 0.0 && self.day_correlation <= 1.0) {
            return Err(DseError::Argument(format!("day_correlation must lie in (0, 1], got {}", self.day_correlation)));
        }
        if !(self.increment_correlation.abs() < 1.0) || !(self.increment_imag_ratio >= 0.0) {
            return Err(DseError::Argument("increment shape parameters out of range".into()));
        }
        if !(self.min_magnitude > 0.0 && self.min_magnitude < self.max_magnitude) {
            return Err(DseError::Argument(format!(
                "magnitude bounds must satisfy 0 < min < max, got [{}, {}]",
                self.min_magnitude, self.max_magnitude
            )));
        }
        if !(self.pv.sunrise_h < self.pv.sunset_h) || !(0.0..1.0).contains(&self.pv.cloud_floor) {
            return Err(DseError::Argument("pv parameters out of range".into()));
        }
        if !(0.0 <= self.pv.capacity_min && self.pv.capacity_min <= self.pv.capacity_max) {
            return Err(DseError::Argument("pv capacity bounds out of order".into()));
        }
        if self.samples == 0 || self.customers_per_area == 0 {
            return Err(DseError::Argument("samples and customers_per_area must be positive".into()));
        }
        match self.feeder {
            FeederSpec::Compact if self.areas == 0 => Err(DseError::Argument("a compact feeder needs at least one area".into())),
            FeederSpec::Layered { buses } if buses < 40 => {
                Err(DseError::Argument(format!("a layered feeder needs at least 40 buses, got {buses}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-customer current series of the true day and the previous day.
#[derive(Clone, Debug, PartialEq)]
pub struct CustomerProfiles<T> {
    /// `[t][customer]`
    pub truth: Vec<Vec<Complex<T>>>,
    /// `[t][customer]`
    pub previous_day: Vec<Vec<Complex<T>>>,
    pub has_pv: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthRun<T> {
    /// Bus each customer is attached to.
    pub customer_bus: Vec<BusId>,
    pub profiles: CustomerProfiles<T>,
    /// `[t][bus position]`
    pub bus_injections: Vec<Vec<Complex<T>>>,
    /// `[t][bus position]`
    pub previous_day_injections: Vec<Vec<Complex<T>>>,
    pub v_ref: Vec<Complex<T>>,
    pub flows: Vec<FlowSolution<T>>,
}

impl<T: Scalar> TruthRun<T> {
    pub fn samples(&self) -> usize {
        self.flows.len()
    }

    /// True voltage of every bus position at every sample.
    pub fn voltages(&self) -> Vec<Vec<Complex<T>>> {
        self.flows.iter().map(|f| f.bus_voltages.clone()).collect()
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Circular complex Gaussian with `E|z|² = sd²`.
fn circular(rng: &mut ChaCha8Rng, sd: f64) -> Complex<f64> {
    let s = sd * std::f64::consts::FRAC_1_SQRT_2;
    Complex::new(s * gauss(rng), s * gauss(rng))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * span);
    if y > span {
        y = 2.0 * span - y;
    }
    lo + y
}

struct Walk {
    re_sd: f64,
    im_sd: f64,
    corr: f64,
    lo: f64,
    hi: f64,
}

impl Walk {
    fn increment(&self, rng: &mut ChaCha8Rng) -> Complex<f64> {
        let a = gauss(rng);
        let b = gauss(rng);
        let im = self.corr * a + (1.0 - self.corr * self.corr).sqrt() * b;
        Complex::new(self.re_sd * a, self.im_sd * im)
    }

    fn series(&self, start: Complex<f64>, len: usize, rng: &mut ChaCha8Rng) -> Vec<Complex<f64>> {
        let mut out = Vec::with_capacity(len);
        let mut z = start;
        for t in 0..len {
            if t > 0 {
                z += self.increment(rng);
                let m = z.norm();
                if m > 0.0 {
                    z *= reflect(m, self.lo, self.hi) / m;
                } else {
                    z = Complex::new(self.lo, 0.0);
                }
            }
            out.push(z);
        }
        out
    }
}

fn cloud_walk(len: usize, sd: f64, floor: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut k = 1.0;
    (0..len)
        .map(|t| {
            if t > 0 {
                k = reflect(k + sd * gauss(rng), floor, 1.0);
            }
            k
        })
        .collect()
}

/// Half-sine daylight shape at sample `t` of a one-minute series.
pub fn pv_shape(t: usize, pv: &PvParams) -> f64 {
    let h = (t % MINUTES_PER_DAY) as f64 / 60.0;
    if h <= pv.sunrise_h || h >= pv.sunset_h {
        return 0.0;
    }
    (std::f64::consts::PI * (h - pv.sunrise_h) / (pv.sunset_h - pv.sunrise_h)).sin()
}

/// Draws the true day and the previous day of `customers` customers.
pub fn generate_customers<T: Scalar>(config: &ScenarioConfig, customers: usize) -> Result<CustomerProfiles<T>> {
    config.validate()?;
    let len = config.samples;
    let rho = config.day_correlation;
    let mix = (1.0 - rho * rho).max(0.0).sqrt();
    let walk = Walk {
        re_sd: config.increment_sd / (1.0 + config.increment_imag_ratio).sqrt(),
        im_sd: config.increment_sd * (config.increment_imag_ratio / (1.0 + config.increment_imag_ratio)).sqrt(),
        corr: config.increment_correlation,
        lo: config.min_magnitude,
        hi: config.max_magnitude,
    };

    let mut selection = stream(config.seed, STREAM_SELECTION);
    let mut order: Vec<usize> = (0..customers).collect();
    order.shuffle(&mut selection);
    let pv_count = (config.pv_penetration * customers as f64).round() as usize;
    let mut has_pv = vec![false; customers];
    for &c in &order[..pv_count] {
        has_pv[c] = true;
    }

    let per_customer: Vec<(Vec<Complex<f64>>, Vec<Complex<f64>>)> = (0..customers)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(config.seed, STREAM_CUSTOMER + c as u64);
            let mid = 0.5 * (config.min_magnitude + config.max_magnitude);
            let base = rng.gen_range(0.4 * mid..1.2 * mid).clamp(config.min_magnitude, config.max_magnitude);
            let pf_angle: f64 = rng.gen_range(0.1..0.45);
            let rot = Complex::from_polar(1.0, -pf_angle);
            let capacity = base * rng.gen_range(config.pv.capacity_min..=config.pv.capacity_max);
            let start = Complex::new(base, 0.0);

            let today = walk.series(start, len, &mut rng);
            let other = walk.series(start, len, &mut rng);
            let (cloud_today, cloud_other) = if has_pv[c] {
                (
                    cloud_walk(len, config.pv.cloud_sd, config.pv.cloud_floor, &mut rng),
                    cloud_walk(len, config.pv.cloud_sd, config.pv.cloud_floor, &mut rng),
                )
            } else {
                (Vec::new(), Vec::new())
            };

            let mut truth = Vec::with_capacity(len);
            let mut prev = Vec::with_capacity(len);
            for t in 0..len {
                let yesterday = start + (today[t] - start) * rho + (other[t] - start) * mix;
                let mut i_now = rot * today[t];
                let mut i_prev = rot * yesterday;
                if has_pv[c] {
                    let s = capacity * pv_shape(t, &config.pv);
                    let k_prev = (1.0 + rho * (cloud_today[t] - 1.0) + mix * (cloud_other[t] - 1.0)).clamp(0.0, 1.0);
                    i_now -= s * cloud_today[t];
                    i_prev -= s * k_prev;
                }
                truth.push(i_now * config.load_scale);
                prev.push(i_prev * config.load_scale);
            }
            (truth, prev)
        })
        .collect();

    let cast = |z: &Complex<f64>| Complex::new(T::lit(z.re), T::lit(z.im));
    let mut truth = vec![Vec::with_capacity(customers); len];
    let mut previous_day = vec![Vec::with_capacity(customers); len];
    for (tr, pr) in &per_customer {
        for t in 0..len {
            truth[t].push(cast(&tr[t]));
            previous_day[t].push(cast(&pr[t]));
        }
    }
    Ok(CustomerProfiles {
        truth,
        previous_day,
        has_pv,
    })
}

/// Sums `[t][customer]` profiles over customer groups, giving `[t][group]`.
pub fn aggregate_subarea<T: Scalar>(profiles: &[Vec<Complex<T>>], membership: &[Vec<usize>]) -> Result<Vec<Vec<Complex<T>>>> {
    let n = profiles.first().map_or(0, Vec::len);
    for (g, members) in membership.iter().enumerate() {
        if members.is_empty() {
            return Err(DseError::Argument(format!("subarea {g} has no members")));
        }
        if let Some(&c) = members.iter().find(|&&c| c >= n) {
            return Err(DseError::Argument(format!("subarea {g} refers to customer {c} of {n}")));
        }
    }
    Ok(profiles
        .iter()
        .map(|row| {
            membership
                .iter()
                .map(|members| members.iter().fold(Complex::zero(), |a, &c| a + row[c]))
                .collect()
        })
        .collect())
}

fn feeder_head_walk(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = 1.0;
    (0..len)
        .map(|t| {
            if t > 0 {
                v = reflect(v + 2e-5 * gauss(rng), 0.98, 1.04);
            }
            v
        })
        .collect()
}

/// Customers of every load bus, in position order.
pub fn customer_buses<T: Scalar>(network: &RadialNetwork<T>, per_bus: usize) -> Vec<BusId> {
    network.buses().iter().flat_map(|&b| std::iter::repeat_n(b, per_bus)).collect()
}

/// True day on `network` with `customers_per_area` customers per load bus.
pub fn generate_profiles<T: Scalar>(config: &ScenarioConfig, network: &RadialNetwork<T>) -> Result<TruthRun<T>> {
    let customer_bus = customer_buses(network, config.customers_per_area);
    let profiles = generate_customers::<T>(config, customer_bus.len())?;
    let n = network.load_bus_count();
    let membership: Vec<Vec<usize>> = (0..n)
        .map(|p| (p * config.customers_per_area..(p + 1) * config.customers_per_area).collect())
        .collect();
    let bus_injections = aggregate_subarea(&profiles.truth, &membership)?;
    let previous_day_injections = aggregate_subarea(&profiles.previous_day, &membership)?;

    let mut rng = stream(config.seed, STREAM_TOPOLOGY + 1);
    let v_ref: Vec<Complex<T>> = feeder_head_walk(config.samples, &mut rng)
        .into_iter()
        .map(|v| Complex::new(T::lit(v), T::zero()))
        .collect();
    let bibc = build_bibc(network);
    let dlf = build_dlf(network);
    let flows = bus_injections
        .par_iter()
        .zip(v_ref.par_iter())
        .map(|(i, v)| direct_load_flow(&bibc, &dlf, i, *v))
        .collect::<Result<Vec<_>>>()?;
    Ok(TruthRun {
        customer_bus,
        profiles,
        bus_injections,
        previous_day_injections,
        v_ref,
        flows,
    })
}

/// Previous-day bus injections plus white circular error of `pseudo_sd`.
pub fn pseudo_measurements<T: Scalar>(truth: &TruthRun<T>, pseudo_sd: f64, seed: u64) -> Vec<Vec<Complex<T>>> {
    let mut rng = stream(seed, STREAM_PSEUDO);
    truth
        .previous_day_injections
        .iter()
        .map(|row| {
            row.iter()
                .map(|z| {
                    let e = circular(&mut rng, pseudo_sd);
                    Complex::new(z.re + T::lit(e.re), z.im + T::lit(e.im))
                })
                .collect()
        })
        .collect()
}

/// Meter readings of `plan` taken from `truth`, with circular Gaussian noise
/// and optional spikes.
///
/// A spiked reading sits exactly `sd_multiple` SDs from truth in a random
/// direction. With `magnitude_only`, every meter off the reference bus
/// reports a magnitude.
pub fn corrupt_measurements<T: Scalar>(
    truth: &TruthRun<T>,
    network: &RadialNetwork<T>,
    plan: &MeteringPlan,
    seed: u64,
    spikes: &[Spike],
    magnitude_only: bool,
) -> Result<Vec<MeterSample<T>>> {
    for &b in &plan.voltage_meters {
        if b != network.reference() && network.bus_position(b).is_none() {
            return Err(DseError::Plan(format!("voltage meter on unknown bus {b}")));
        }
    }
    for &b in &plan.current_meters {
        if network.branch_position(b).is_none() {
            return Err(DseError::Plan(format!("current meter on unknown branch {b}")));
        }
    }
    let mut spike_at: BTreeMap<(usize, MeterKind, u32), f64> = BTreeMap::new();
    for s in spikes {
        spike_at.insert((s.sample, s.kind, s.device), s.sd_multiple);
    }
    let mut rng = stream(seed, STREAM_METER);
    let mut out = Vec::with_capacity(truth.samples());
    for (t, flow) in truth.flows.iter().enumerate() {
        let mut sample = MeterSample {
            timestamp: t as u64,
            ..Default::default()
        };
        let mut read = |kind: MeterKind, device: u32, value: Complex<T>, sd: f64, phasor: bool| -> Reading<T> {
            let noise = circular(&mut rng, sd);
            let err = match spike_at.get(&(t, kind, device)) {
                Some(m) => Complex::from_polar(m * sd, rng.gen_range(0.0..std::f64::consts::TAU)),
                None => noise,
            };
            let z = Complex::new(value.re + T::lit(err.re), value.im + T::lit(err.im));
            if phasor {
                Reading::Phasor(z)
            } else {
                Reading::Magnitude(z.norm())
            }
        };
        for &b in &plan.voltage_meters {
            let (v, head) = match network.bus_position(b) {
                Some(p) => (flow.bus_voltages[p], false),
                None => (truth.v_ref[t], true),
            };
            let r = read(MeterKind::Voltage, b, v, plan.voltage_sd(b), head || !magnitude_only);
            sample.voltages.insert(b, r);
        }
        for &b in &plan.current_meters {
            let p = network.branch_position(b).expect("checked above");
            let at_head = network.parent_position(p).is_none();
            let r = read(MeterKind::Current, b, flow.branch_currents[p], plan.current_sd(b), at_head || !magnitude_only);
            sample.currents.insert(b, r);
        }
        out.push(sample);
    }
    Ok(out)
}

fn branch<T: Scalar>(id: u32, from: BusId, to: BusId, z: Complex<f64>) -> Branch<T> {
    Branch {
        id,
        from,
        to,
        impedance: Complex::new(T::lit(z.re), T::lit(z.im)),
    }
}

/// Compact feeder: bus 1 is the reference, load buses `2..=areas+1` form a
/// line except the last one, which is tapped off bus 3 once there are at
/// least four areas.
pub fn compact_feeder<T: Scalar>(areas: usize) -> Result<RadialNetwork<T>> {
    let z = Complex::new(0.01, 0.008);
    let buses: Vec<BusId> = (1..=areas as BusId + 1).collect();
    let last = areas as BusId + 1;
    let branches = (2..=last)
        .map(|b| {
            let from = if areas >= 4 && b == last { 3 } else { b - 1 };
            branch(b - 1, from, b, z)
        })
        .collect();
    RadialNetwork::new(Phase::Single, 1, &buses, branches)
}

/// The six-bus feeder 1-2, 2-3, 3-4, 4-5, 3-6.
pub fn six_bus_feeder<T: Scalar>() -> RadialNetwork<T> {
    compact_feeder(5).expect("fixed topology is radial")
}

/// A layered feeder and its partition.
///
/// Bus 1 is the reference and buses 2..=11 form the trunk (the main area).
/// Subareas hang off trunk buses 3, 6 and 9; the third holds a nested
/// subarea. Inside a subarea each new bus attaches to one of the four most
/// recently added buses, which gives long laterals with some branching.
pub fn layered_feeder<T: Scalar>(buses: usize, seed: u64) -> Result<(RadialNetwork<T>, PartitionFile)> {
    if buses < 40 {
        return Err(DseError::Argument(format!("a layered feeder needs at least 40 buses, got {buses}")));
    }
    let mut rng = stream(seed, STREAM_TOPOLOGY);
    let trunk_z = Complex::new(0.002, 0.0015);
    let lateral_z = Complex::new(0.004, 0.003);
    let mut branches = Vec::new();
    let mut next: BusId = 2;
    for b in 2..=11 {
        branches.push(branch::<T>(b - 1, b - 1, b, trunk_z));
        next = b + 1;
    }
    let rest = buses - 11;
    let sizes = [rest / 4, rest / 4, rest - 2 * (rest / 4) - rest / 5, rest / 5];
    let mut grow = |boundary: BusId, size: usize, branches: &mut Vec<Branch<T>>| -> Vec<BusId> {
        let mut members: Vec<BusId> = Vec::with_capacity(size);
        for _ in 0..size {
            let parent = if members.is_empty() {
                boundary
            } else {
                let back = rng.gen_range(0..members.len().min(4));
                members[members.len() - 1 - back]
            };
            branches.push(branch(next - 1, parent, next, lateral_z));
            members.push(next);
            next += 1;
        }
        members
    };
    let a = grow(3, sizes[0], &mut branches);
    let b = grow(6, sizes[1], &mut branches);
    let c = grow(9, sizes[2], &mut branches);
    let d_boundary = c[c.len() / 3];
    let d = grow(d_boundary, sizes[3], &mut branches);

    let all: Vec<BusId> = (1..next).collect();
    let network = RadialNetwork::new(Phase::Single, 1, &all, branches)?;
    let record = |id: u32, boundary: BusId, members: Vec<BusId>| SubareaRecord {
        id,
        boundary_bus: boundary,
        members,
    };
    let partition = PartitionFile {
        format_version: crate::FORMAT_VERSION,
        subareas: vec![record(1, 3, a), record(2, 6, b), record(3, 9, c), record(4, d_boundary, d)],
        config: None,
    };
    Ok((network, partition))
}

/// Feeder-head V and I meters: a voltage meter on the reference bus and a
/// current meter on every branch leaving it.
pub fn head_metering_plan<T: Scalar>(network: &RadialNetwork<T>, meter_sd: f64, pseudo_sd: f64) -> MeteringPlan {
    let current_meters: Vec<BranchId> = network
        .children(None)
        .into_iter()
        .map(|p| network.branches()[p].id)
        .collect();
    MeteringPlan {
        format_version: crate::FORMAT_VERSION,
        voltage_meters: vec![network.reference()],
        current_meters,
        pseudo_buses: None,
        meter_sd,
        pseudo_sd,
        sd_overrides: BTreeMap::new(),
        config: None,
    }
}

/// Everything an estimator run needs, plus the truth to score it against.
#[derive(Clone, Debug)]
pub struct Scenario<T> {
    pub config: ScenarioConfig,
    pub network: RadialNetwork<T>,
    pub partition: PartitionFile,
    pub plan: MeteringPlan,
    pub truth: TruthRun<T>,
    /// `[t][bus position]`
    pub pseudo: Vec<Vec<Complex<T>>>,
    pub meters: Vec<MeterSample<T>>,
}

impl<T: Scalar> Scenario<T> {
    /// Subarea labels on a partitioned feeder (0 for the main area), bus ids
    /// otherwise.
    pub fn area_map(&self) -> Vec<u32> {
        crate::metrics::area_map(&self.network, &self.partition)
    }

    pub fn inputs(&self) -> crate::metrics::Inputs<'_, T> {
        crate::metrics::Inputs {
            network: &self.network,
            partition: &self.partition,
            plan: &self.plan,
            pseudo: &self.pseudo,
            meters: &self.meters,
        }
    }
}

pub fn build_scenario<T: Scalar>(config: &ScenarioConfig) -> Result<Scenario<T>> {
    config.validate()?;
    let (network, partition) = match config.feeder {
        FeederSpec::Compact => (
            compact_feeder::<T>(config.areas)?,
            PartitionFile {
                format_version: crate::FORMAT_VERSION,
                subareas: Vec::new(),
                config: None,
            },
        ),
        FeederSpec::Layered { buses } => layered_feeder::<T>(buses, config.seed)?,
    };
    let plan = head_metering_plan(&network, config.meter_sd, config.pseudo_sd);
    let truth = generate_profiles(config, &network)?;
    let pseudo = pseudo_measurements(&truth, config.pseudo_sd, config.seed);
    let meters = corrupt_measurements(&truth, &network, &plan, config.seed, &config.spikes, config.magnitude_only)?;
    Ok(Scenario {
        config: config.clone(),
        network,
        partition,
        plan,
        truth,
        pseudo,
        meters,
    })
}

/// Distinct buses in a partition, for sanity checks.
pub fn partition_buses(file: &PartitionFile) -> BTreeSet<BusId> {
    file.subareas.iter().flat_map(|s| s.members.iter().copied()).collect()
}
