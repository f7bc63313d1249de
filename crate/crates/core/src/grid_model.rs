//! Radial distribution networks and the direct load flow.
//!
//! Non-reference buses are kept in depth-first pre-order from the reference
//! bus, and branch `k` is always the branch feeding bus `k`. Every matrix and
//! vector in the crate uses this ordering, so BIBC comes out upper triangular
//! with a unit diagonal.
//!
//! Sign convention: a positive injected current is current drawn by a load,
//! so it produces a voltage drop. Generation is a negative injection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use num_complex::Complex;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::linalg::CMatrix;
use crate::scalar::Scalar;

pub type BusId = u32;
pub type BranchId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
    /// Single-phase equivalent of a balanced network.
    #[serde(rename = "1")]
    #[default]
    Single,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub id: BranchId,
    /// Upstream bus (closer to the reference).
    pub from: BusId,
    /// Downstream bus.
    pub to: BusId,
    pub impedance: Complex<T>,
}

/// A radial network for one phase, immutable once built.
#[derive(Clone, Debug)]
pub struct RadialNetwork<T> {
    phase: Phase,
    reference: BusId,
    buses: Vec<BusId>,
    bus_index: HashMap<BusId, usize>,
    /// Parent of each non-reference bus; `None` means the reference bus.
    parent: Vec<Option<usize>>,
    branches: Vec<Branch<T>>,
    branch_index: HashMap<BranchId, usize>,
}

impl<T: Scalar> RadialNetwork<T> {
    /// Builds and validates a radial network.
    ///
    /// `buses` lists every bus including the reference; branch endpoints may
    /// be given in either direction and are re-oriented away from the
    /// reference.
    pub fn new(phase: Phase, reference: BusId, buses: &[BusId], branches: Vec<Branch<T>>) -> Result<Self> {
        let mut all: HashSet<BusId> = HashSet::new();
        for &b in buses {
            if !all.insert(b) {
                return Err(DseError::Topology(format!("duplicate bus {b}")));
            }
        }
        if !all.contains(&reference) {
            return Err(DseError::Topology(format!("reference bus {reference} is not in the bus list")));
        }
        if branches.len() + 1 != all.len() {
            return Err(DseError::Topology(format!(
                "a radial network with {} buses needs {} branches, found {}",
                all.len(),
                all.len() - 1,
                branches.len()
            )));
        }
        let mut ids = HashSet::new();
        let mut adj: BTreeMap<BusId, Vec<usize>> = BTreeMap::new();
        for (k, br) in branches.iter().enumerate() {
            if !ids.insert(br.id) {
                return Err(DseError::Topology(format!("duplicate branch id {}", br.id)));
            }
            for end in [br.from, br.to] {
                if !all.contains(&end) {
                    return Err(DseError::Topology(format!("branch {} references unknown bus {end}", br.id)));
                }
            }
            if br.from == br.to {
                return Err(DseError::Topology(format!("branch {} is a self-loop at bus {}", br.id, br.from)));
            }
            if br.impedance.re < T::zero() || !br.impedance.re.is_finite() || !br.impedance.im.is_finite() {
                return Err(DseError::Validation(format!(
                    "branch {} has invalid impedance (negative or non-finite resistance)",
                    br.id
                )));
            }
            adj.entry(br.from).or_default().push(k);
            adj.entry(br.to).or_default().push(k);
        }

        // Depth-first pre-order, children in branch-list order.
        let mut order: Vec<(BusId, Option<BusId>, Option<usize>)> = Vec::with_capacity(all.len());
        let mut seen: HashSet<BusId> = HashSet::new();
        let mut stack = vec![(reference, None::<BusId>, None::<usize>)];
        while let Some((bus, parent, via)) = stack.pop() {
            if !seen.insert(bus) {
                let br = &branches[via.expect("only the reference has no feeding branch")];
                return Err(DseError::Topology(format!("cycle detected: branch {} closes a loop at bus {bus}", br.id)));
            }
            order.push((bus, parent, via));
            let mut next = Vec::new();
            for &k in adj.get(&bus).map(Vec::as_slice).unwrap_or(&[]) {
                if Some(k) == via {
                    continue;
                }
                let br = &branches[k];
                let other = if br.from == bus { br.to } else { br.from };
                next.push((other, Some(bus), Some(k)));
            }
            for item in next.into_iter().rev() {
                stack.push(item);
            }
        }
        if let Some(missing) = buses.iter().find(|b| !seen.contains(b)) {
            return Err(DseError::Topology(format!("bus {missing} is not reachable from reference bus {reference}")));
        }

        let mut bus_list = Vec::with_capacity(all.len() - 1);
        let mut bus_index = HashMap::new();
        for (bus, _, _) in order.iter().skip(1) {
            bus_index.insert(*bus, bus_list.len());
            bus_list.push(*bus);
        }
        let mut parent = Vec::with_capacity(bus_list.len());
        let mut oriented = Vec::with_capacity(bus_list.len());
        let mut branch_index = HashMap::new();
        for (bus, up, via) in order.into_iter().skip(1) {
            let up = up.expect("non-reference bus has a parent");
            parent.push(if up == reference { None } else { Some(bus_index[&up]) });
            let br = &branches[via.expect("non-reference bus has a feeding branch")];
            branch_index.insert(br.id, oriented.len());
            oriented.push(Branch {
                id: br.id,
                from: up,
                to: bus,
                impedance: br.impedance,
            });
        }
        Ok(Self {
            phase,
            reference,
            buses: bus_list,
            bus_index,
            parent,
            branches: oriented,
            branch_index,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn reference(&self) -> BusId {
        self.reference
    }

    /// Non-reference buses in topological order.
    pub fn buses(&self) -> &[BusId] {
        &self.buses
    }

    /// Branches in the same order as [`Self::buses`]; branch `k` feeds bus `k`.
    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len() + 1
    }

    pub fn load_bus_count(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.bus_index.get(&id).copied()
    }

    pub fn branch_position(&self, id: BranchId) -> Option<usize> {
        self.branch_index.get(&id).copied()
    }

    /// Parent position of a non-reference bus; `None` for children of the reference.
    pub fn parent_position(&self, pos: usize) -> Option<usize> {
        self.parent[pos]
    }

    pub fn parent_bus(&self, pos: usize) -> BusId {
        self.parent[pos].map_or(self.reference, |p| self.buses[p])
    }

    /// Positions of the buses on the path reference → `pos`, root end first.
    pub fn path_to(&self, pos: usize) -> Vec<usize> {
        let mut path = vec![pos];
        let mut cur = pos;
        while let Some(p) = self.parent[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn children(&self, pos: Option<usize>) -> Vec<usize> {
        (0..self.buses.len()).filter(|&k| self.parent[k] == pos).collect()
    }
}

/// Bus-injection to branch-current matrix (branches × non-reference buses).
#[derive(Clone, Debug, PartialEq)]
pub struct BibcMatrix<T> {
    pub matrix: CMatrix<T>,
    pub branch_ids: Vec<BranchId>,
    pub bus_ids: Vec<BusId>,
}

/// Direct load flow matrix (non-reference buses × non-reference buses).
#[derive(Clone, Debug, PartialEq)]
pub struct DlfMatrix<T> {
    pub matrix: CMatrix<T>,
    pub bus_ids: Vec<BusId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSolution<T> {
    pub branch_currents: Vec<Complex<T>>,
    pub bus_voltages: Vec<Complex<T>>,
}

/// Entry `(b, j)` is one iff branch `b` lies on the reference-to-`j` path.
pub fn build_bibc<T: Scalar>(network: &RadialNetwork<T>) -> BibcMatrix<T> {
    let n = network.load_bus_count();
    let mut m = CMatrix::zeros(n, n);
    for j in 0..n {
        for b in network.path_to(j) {
            m[(b, j)] = Complex::one();
        }
    }
    BibcMatrix {
        matrix: m,
        branch_ids: network.branches().iter().map(|b| b.id).collect(),
        bus_ids: network.buses().to_vec(),
    }
}

/// Entry `(k, j)` is the impedance of the path shared by the reference-to-`k`
/// and reference-to-`j` paths.
pub fn build_dlf<T: Scalar>(network: &RadialNetwork<T>) -> DlfMatrix<T> {
    let n = network.load_bus_count();
    let mut path_z = vec![Complex::<T>::zero(); n];
    for j in 0..n {
        let up = network.parent_position(j).map_or(Complex::zero(), |p| path_z[p]);
        path_z[j] = up + network.branches()[j].impedance;
    }
    // Row j equals its parent's row everywhere outside j's subtree and the
    // full path impedance of j inside it.
    let mut m = CMatrix::zeros(n, n);
    let mut in_subtree = vec![false; n];
    for j in 0..n {
        in_subtree.iter_mut().for_each(|f| *f = false);
        in_subtree[j] = true;
        // pre-order: descendants of j follow j contiguously
        for k in j + 1..n {
            match network.parent_position(k) {
                Some(p) if in_subtree[p] => in_subtree[k] = true,
                _ => break,
            }
        }
        let parent_row = network.parent_position(j).map(|p| m.row(p).to_vec());
        let row = m.row_mut(j);
        for k in 0..n {
            row[k] = if in_subtree[k] {
                path_z[j]
            } else {
                parent_row.as_ref().map_or(Complex::zero(), |r| r[k])
            };
        }
    }
    DlfMatrix {
        matrix: m,
        bus_ids: network.buses().to_vec(),
    }
}

fn flow<T: Scalar>(bibc: &BibcMatrix<T>, dlf: &DlfMatrix<T>, i_inj: &[Complex<T>], v_root: Complex<T>, context: &'static str) -> Result<FlowSolution<T>> {
    let n = dlf.matrix.cols();
    if i_inj.len() != n || bibc.matrix.cols() != n {
        return Err(DseError::shape(context, n, i_inj.len()));
    }
    let branch_currents = bibc.matrix.mul_vec(i_inj);
    let bus_voltages = dlf.matrix.mul_vec(i_inj).into_iter().map(|d| v_root - d).collect();
    Ok(FlowSolution {
        branch_currents,
        bus_voltages,
    })
}

/// `i_branch = BIBC·i_inj`, `v = v_ref − DLF·i_inj`.
pub fn direct_load_flow<T: Scalar>(bibc: &BibcMatrix<T>, dlf: &DlfMatrix<T>, i_inj: &[Complex<T>], v_ref: Complex<T>) -> Result<FlowSolution<T>> {
    flow(bibc, dlf, i_inj, v_ref, "direct_load_flow")
}

/// Forward solve of one subarea rooted at its boundary bus.
pub fn subarea_forward_solve<T: Scalar>(
    bibc_j: &BibcMatrix<T>,
    dlf_j: &DlfMatrix<T>,
    i_updated: &[Complex<T>],
    v_boundary: Complex<T>,
) -> Result<FlowSolution<T>> {
    flow(bibc_j, dlf_j, i_updated, v_boundary, "subarea_forward_solve")
}

/// Per-unit bases carried by network files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Base {
    /// Line-to-line base voltage in kV.
    pub voltage_kv: f64,
    /// Three-phase base power in kVA.
    pub power_kva: f64,
}

impl Base {
    pub fn impedance_ohm(&self) -> f64 {
        self.voltage_kv * self.voltage_kv * 1000.0 / self.power_kva
    }
}

impl Default for Base {
    fn default() -> Self {
        Base {
            voltage_kv: 0.4,
            power_kva: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImpedanceUnit {
    #[default]
    Pu,
    Ohm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusRecord {
    pub id: BusId,
    #[serde(default)]
    pub phase: Phase,
    #[serde(default)]
    pub is_reference: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<BranchId>,
    pub from: BusId,
    pub to: BusId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub unit: ImpedanceUnit,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

/// JSON network document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkFile {
    #[serde(default = "crate::format_version")]
    pub format_version: u32,
    pub buses: Vec<BusRecord>,
    pub branches: Vec<BranchRecord>,
    #[serde(default)]
    pub base: Base,
    /// Resolved configuration of the run that wrote this file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl NetworkFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// One validated network per phase present in the file, ordered A, B, C, single.
    pub fn into_networks<T: Scalar>(&self) -> Result<Vec<RadialNetwork<T>>> {
        let mut phases: BTreeMap<Phase, Vec<&BusRecord>> = BTreeMap::new();
        for b in &self.buses {
            phases.entry(b.phase).or_default().push(b);
        }
        let zbase = self.base.impedance_ohm();
        let mut out = Vec::new();
        for (phase, buses) in phases {
            let refs: Vec<BusId> = buses.iter().filter(|b| b.is_reference).map(|b| b.id).collect();
            if refs.len() != 1 {
                return Err(DseError::Topology(format!("phase {phase:?} needs exactly one reference bus, found {}", refs.len())));
            }
            let ids: Vec<BusId> = buses.iter().map(|b| b.id).collect();
            let mut branches = Vec::new();
            for (k, br) in self.branches.iter().enumerate() {
                if br.phase.is_some_and(|p| p != phase) {
                    continue;
                }
                if br.phase.is_none() && !(ids.contains(&br.from) && ids.contains(&br.to)) {
                    continue;
                }
                let scale = match br.unit {
                    ImpedanceUnit::Pu => 1.0,
                    ImpedanceUnit::Ohm => 1.0 / zbase,
                };
                branches.push(Branch {
                    id: br.id.unwrap_or(k as BranchId + 1),
                    from: br.from,
                    to: br.to,
                    impedance: Complex::new(T::lit(br.r * scale), T::lit(br.x * scale)),
                });
            }
            out.push(RadialNetwork::new(phase, refs[0], &ids, branches)?);
        }
        Ok(out)
    }

    /// Single-phase loader; fails if the file holds more than one phase.
    pub fn into_network<T: Scalar>(&self) -> Result<RadialNetwork<T>> {
        let mut nets = self.into_networks()?;
        if nets.len() != 1 {
            return Err(DseError::Validation(format!("expected a single-phase network, found {} phases", nets.len())));
        }
        Ok(nets.remove(0))
    }

    pub fn from_network<T: Scalar>(net: &RadialNetwork<T>, base: Base) -> Self {
        let mut buses = vec![BusRecord {
            id: net.reference(),
            phase: net.phase(),
            is_reference: true,
        }];
        buses.extend(net.buses().iter().map(|&id| BusRecord {
            id,
            phase: net.phase(),
            is_reference: false,
        }));
        let branches = net
            .branches()
            .iter()
            .map(|b| BranchRecord {
                id: Some(b.id),
                from: b.from,
                to: b.to,
                r: b.impedance.re.to_f64_lossy(),
                x: b.impedance.im.to_f64_lossy(),
                unit: ImpedanceUnit::Pu,
                phase: None,
            })
            .collect();
        NetworkFile {
            format_version: crate::FORMAT_VERSION,
            buses,
            branches,
            base,
            config: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;

    fn br(id: BranchId, from: BusId, to: BusId, z: Complex<f64>) -> Branch<f64> {
        Branch { id, from, to, impedance: z }
    }

    pub(crate) fn line3(z1: Complex<f64>, z2: Complex<f64>) -> RadialNetwork<f64> {
        RadialNetwork::new(Phase::Single, 1, &[1, 2, 3], vec![br(1, 1, 2, z1), br(2, 2, 3, z2)]).unwrap()
    }

    #[test]
    fn single_branch_matrices() {
        let z = c(0.1, 0.05);
        let net = RadialNetwork::new(Phase::Single, 1, &[1, 2], vec![br(1, 1, 2, z)]).unwrap();
        assert_eq!(build_bibc(&net).matrix, CMatrix::identity(1));
        assert_eq!(build_dlf(&net).matrix[(0, 0)], z);
        let bibc = build_bibc(&net);
        let dlf = build_dlf(&net);
        let sol = direct_load_flow(&bibc, &dlf, &[c(1.0, 0.0)], c(1.0, 0.0)).unwrap();
        assert!((sol.bus_voltages[0] - c(0.9, -0.05)).norm() < 1e-15);
        assert_eq!(sol.branch_currents[0], c(1.0, 0.0));
    }

    #[test]
    fn line_and_star_matrices() {
        let (z1, z2) = (c(0.1, 0.2), c(0.3, 0.05));
        let line = line3(z1, z2);
        let one = c(1.0, 0.0);
        let zero = c(0.0, 0.0);
        assert_eq!(build_bibc(&line).matrix.to_rows(), vec![vec![one, one], vec![zero, one]]);
        assert_eq!(build_dlf(&line).matrix.to_rows(), vec![vec![z1, z1], vec![z1, z1 + z2]]);

        let star = RadialNetwork::new(Phase::Single, 1, &[1, 2, 3], vec![br(1, 1, 2, z1), br(2, 1, 3, z2)]).unwrap();
        assert_eq!(build_bibc(&star).matrix, CMatrix::identity(2));
        assert_eq!(build_dlf(&star).matrix.to_rows(), vec![vec![z1, zero], vec![zero, z2]]);
    }

    #[test]
    fn reversed_branch_is_reoriented() {
        let net = RadialNetwork::new(Phase::Single, 1, &[1, 2, 3], vec![br(7, 2, 1, c(0.1, 0.0)), br(9, 3, 2, c(0.1, 0.0))]).unwrap();
        assert_eq!(net.branches()[0].from, 1);
        assert_eq!(net.branches()[1].from, 2);
        assert_eq!(net.branch_position(9), Some(1));
    }

    #[test]
    fn topology_errors() {
        let z = c(0.1, 0.1);
        // cycle: 3 branches over 3 buses fails the count; use 4 buses with a loop and an island
        let err = RadialNetwork::new(Phase::Single, 1, &[1, 2, 3, 4], vec![br(1, 1, 2, z), br(2, 2, 3, z), br(3, 3, 1, z)]).unwrap_err();
        assert!(matches!(err, DseError::Topology(_)), "{err}");
        assert!(err.to_string().contains("cycle") || err.to_string().contains("reachable"));
        let err = RadialNetwork::new(Phase::Single, 1, &[1, 2, 3], vec![br(1, 1, 2, z)]).unwrap_err();
        assert!(matches!(err, DseError::Topology(_)));
        let err = RadialNetwork::new(Phase::Single, 1, &[1, 2], vec![br(1, 1, 2, c(-0.1, 0.0))]).unwrap_err();
        assert!(matches!(err, DseError::Validation(_)));
        let err = RadialNetwork::new(Phase::Single, 9, &[1, 2], vec![br(1, 1, 2, z)]).unwrap_err();
        assert!(err.to_string().contains("reference"));
    }

    #[test]
    fn zero_injection_keeps_reference_voltage() {
        let net = line3(c(0.1, 0.2), c(0.3, 0.05));
        let bibc = build_bibc(&net);
        let dlf = build_dlf(&net);
        let v = c(1.02, -0.01);
        let sol = direct_load_flow(&bibc, &dlf, &[c(0.0, 0.0); 2], v).unwrap();
        assert!(sol.bus_voltages.iter().all(|x| *x == v));
        assert!(sol.branch_currents.iter().all(|x| x.norm() == 0.0));
        let sub = subarea_forward_solve(&bibc, &dlf, &[c(0.0, 0.0); 2], v).unwrap();
        assert_eq!(sub, sol);
        assert!(direct_load_flow(&bibc, &dlf, &[c(0.0, 0.0); 3], v).is_err());
    }

    #[test]
    fn file_roundtrip_and_ohm_conversion() {
        let file = NetworkFile {
            format_version: 1,
            buses: vec![
                BusRecord { id: 1, phase: Phase::A, is_reference: true },
                BusRecord { id: 2, phase: Phase::A, is_reference: false },
                BusRecord { id: 1, phase: Phase::B, is_reference: true },
                BusRecord { id: 2, phase: Phase::B, is_reference: false },
            ],
            branches: vec![
                BranchRecord { id: Some(1), from: 1, to: 2, r: 0.016, x: 0.008, unit: ImpedanceUnit::Ohm, phase: Some(Phase::A) },
                BranchRecord { id: Some(2), from: 1, to: 2, r: 0.1, x: 0.0, unit: ImpedanceUnit::Pu, phase: Some(Phase::B) },
            ],
            base: Base { voltage_kv: 0.4, power_kva: 100.0 },
            config: None,
        };
        let nets: Vec<RadialNetwork<f64>> = file.into_networks().unwrap();
        assert_eq!(nets.len(), 2);
        // zbase = 0.16·1000/100 = 1.6 ohm
        assert!((nets[0].branches()[0].impedance - c(0.01, 0.005)).norm() < 1e-15);
        assert_eq!(nets[1].phase(), Phase::B);
        assert!(file.into_network::<f64>().is_err());
        let text = serde_json::to_string(&file).unwrap();
        let back: NetworkFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
    }
}
