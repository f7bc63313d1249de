mod common;

use std::collections::HashMap;

use ackf_dse::grid_model::{build_bibc, build_dlf, direct_load_flow, subarea_forward_solve, RadialNetwork};
use ackf_dse::layering::Partition;
use ackf_dse::synthetic::layered_feeder;
use common::*;
use num_complex::Complex64 as C64;
use rand::Rng;

/// Branch indices on the path from the reference to every bus, found by a
/// breadth-first search over the raw branch list.
fn paths_by_search(net: &RadialNetwork<f64>) -> HashMap<u32, Vec<usize>> {
    let mut adj: HashMap<u32, Vec<(u32, usize)>> = HashMap::new();
    for (k, b) in net.branches().iter().enumerate() {
        adj.entry(b.from).or_default().push((b.to, k));
        adj.entry(b.to).or_default().push((b.from, k));
    }
    let mut paths = HashMap::from([(net.reference(), Vec::new())]);
    let mut queue = std::collections::VecDeque::from([net.reference()]);
    while let Some(u) = queue.pop_front() {
        for &(v, k) in adj.get(&u).into_iter().flatten() {
            if !paths.contains_key(&v) {
                let mut p = paths[&u].clone();
                p.push(k);
                paths.insert(v, p);
                queue.push_back(v);
            }
        }
    }
    paths
}

#[test]
fn load_flow_matches_nodal_solve() {
    let mut rng = rng(11);
    for _ in 0..100 {
        let n = rng.gen_range(4..50);
        let net = random_network(&mut rng, n);
        let i: Vec<C64> = (0..n).map(|_| uniform_c(&mut rng, -0.5, 1.0)).collect();
        let v_ref = C64::from_polar(rng.gen_range(0.95..1.05), rng.gen_range(-0.1..0.1));
        let flow = direct_load_flow(&build_bibc(&net), &build_dlf(&net), &i, v_ref).unwrap();
        let oracle = nodal_voltages(&net, &i, v_ref);
        for (a, b) in flow.bus_voltages.iter().zip(&oracle) {
            assert!((a - b).norm() <= 1e-9 * b.norm(), "{a} vs {b}");
        }
    }
}

#[test]
fn bibc_is_unit_upper_triangular() {
    let mut rng = rng(12);
    for _ in 0..100 {
        let n = rng.gen_range(1..50);
        let net = random_network(&mut rng, n);
        let b = build_bibc(&net).matrix;
        for r in 0..n {
            assert_eq!(b[(r, r)], C64::new(1.0, 0.0));
            for c in 0..r {
                assert_eq!(b[(r, c)], C64::new(0.0, 0.0));
            }
        }
    }
}

#[test]
fn dlf_is_path_impedance_product() {
    let mut rng = rng(13);
    for _ in 0..100 {
        let n = rng.gen_range(1..50);
        let net = random_network(&mut rng, n);
        let b = to_dense(&build_bibc(&net).matrix);
        let z = nalgebra::DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(n, net.branches().iter().map(|br| br.impedance)));
        let btzb = b.transpose() * z * &b;
        let dlf = to_dense(&build_dlf(&net).matrix);
        let paths = paths_by_search(&net);
        for k in 0..n {
            for j in 0..n {
                let (pk, pj) = (&paths[&net.buses()[k]], &paths[&net.buses()[j]]);
                let shared: C64 = pk.iter().filter(|e| pj.contains(e)).map(|&e| net.branches()[e].impedance).sum();
                assert!((dlf[(k, j)] - btzb[(k, j)]).norm() <= 1e-12);
                assert!((dlf[(k, j)] - shared).norm() <= 1e-12);
            }
        }
    }
}

#[test]
fn subarea_solves_reproduce_monolithic_flow() {
    let mut rng = rng(14);
    for seed in 0..5 {
        let (net, file) = layered_feeder::<f64>(60 + 20 * seed as usize, seed).unwrap();
        let part = Partition::new(&net, &file).unwrap();
        let n = net.load_bus_count();
        let own: Vec<C64> = (0..n).map(|_| uniform_c(&mut rng, -0.05, 0.1)).collect();
        let v_ref = C64::from_polar(1.02, 0.01);
        let full = direct_load_flow(&build_bibc(&net), &build_dlf(&net), &own, v_ref).unwrap();
        let group = part.group_injections(&own);
        for s in &part.subareas {
            let i: Vec<C64> = s.member_map.iter().map(|&p| group[p]).collect();
            let sol = subarea_forward_solve(&s.bibc, &s.dlf, &i, full.bus_voltages[s.boundary_pos]).unwrap();
            for (k, &p) in s.member_map.iter().enumerate() {
                assert!((sol.bus_voltages[k] - full.bus_voltages[p]).norm() <= 1e-10);
                assert!((sol.branch_currents[k] - full.branch_currents[p]).norm() <= 1e-10);
            }
        }
    }
}
