mod common;

use ackf_dse::grid_model::{build_bibc, build_dlf, subarea_forward_solve};
use ackf_dse::layering::{run_multilayer, run_single_layer, EstimatorConfig, Partition, ProcessNoise};
use ackf_dse::measurement::{assemble_frame, build_observation_matrix, build_r, reference_voltage, MeterKind, Reading, ResolvedPlan};
use ackf_dse::synthetic::{build_scenario, corrupt_measurements, FeederSpec, Scenario, ScenarioConfig, Spike};
use num_complex::Complex64 as C64;

fn small_layered(seed: u64, samples: usize) -> ScenarioConfig {
    ScenarioConfig {
        samples,
        ..ScenarioConfig {
            feeder: FeederSpec::Layered { buses: 60 },
            ..ScenarioConfig::layered(seed)
        }
    }
}

/// Pseudo data equal to the truth and meters read without noise.
fn exact(mut config: ScenarioConfig) -> Scenario<f64> {
    config.meter_sd = 0.0;
    let mut s = build_scenario::<f64>(&config).unwrap();
    s.pseudo = s.truth.bus_injections.clone();
    s.plan.meter_sd = 1e-8;
    s.plan.pseudo_sd = 1e-8;
    s
}

fn max_voltage_error(est: &[Vec<C64>], truth: &[Vec<C64>]) -> f64 {
    est.iter().zip(truth).flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm())).fold(0.0, f64::max)
}

#[test]
fn exact_inputs_give_exact_voltages() {
    let s = exact(small_layered(3, 120));
    let t = s.truth.samples();
    let truth = s.truth.voltages();
    let part = Partition::new(&s.network, &s.partition).unwrap();
    let cfg = EstimatorConfig::default();
    let multi = run_multilayer(&s.network, &part, &s.plan, &s.pseudo, &s.meters, t, &cfg).unwrap();
    assert!(max_voltage_error(&multi.voltages, &truth) <= 1e-8);
    let single = run_single_layer(&s.network, &s.plan, &s.pseudo, &s.meters, t, &cfg).unwrap();
    assert!(max_voltage_error(&single.voltages, &truth) <= 1e-8);
}

#[test]
fn voltage_meters_everywhere_recover_injections() {
    let mut s = exact(ScenarioConfig {
        samples: 1,
        ..ScenarioConfig::six_bus(4)
    });
    s.plan.voltage_meters = std::iter::once(s.network.reference()).chain(s.network.buses().iter().copied()).collect();
    s.plan.meter_sd = 1e-9;
    s.plan.pseudo_sd = 1.0;
    s.meters = corrupt_measurements(&s.truth, &s.network, &s.plan, 4, &[], false).unwrap();
    // pseudo far from the truth so only the voltage rows can pin the state
    let pseudo: Vec<Vec<C64>> = s.pseudo.iter().map(|r| r.iter().map(|z| z * 1.5).collect()).collect();
    let cfg = EstimatorConfig {
        process_noise: ProcessNoise::Fixed { sd: 0.01 },
        ..EstimatorConfig::default()
    };
    let run = run_single_layer(&s.network, &s.plan, &pseudo, &s.meters, 1, &cfg).unwrap();
    for (a, b) in run.injections[0].iter().zip(&s.truth.bus_injections[0]) {
        assert!((a - b).norm() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn subareas_hang_off_estimated_boundary_voltages() {
    let s = build_scenario::<f64>(&small_layered(5, 60)).unwrap();
    let part = Partition::new(&s.network, &s.partition).unwrap();
    let run = run_multilayer(&s.network, &part, &s.plan, &s.pseudo, &s.meters, 60, &EstimatorConfig::default()).unwrap();
    for t in 0..60 {
        let group = part.group_injections(&run.injections[t]);
        for sub in &part.subareas {
            let i: Vec<C64> = sub.member_map.iter().map(|&p| group[p]).collect();
            let sol = subarea_forward_solve(&sub.bibc, &sub.dlf, &i, run.voltages[t][sub.boundary_pos]).unwrap();
            for (k, &p) in sub.member_map.iter().enumerate() {
                assert!((sol.bus_voltages[k] - run.voltages[t][p]).norm() <= 1e-12);
            }
        }
    }
}

#[test]
fn parallel_and_sequential_runs_agree_bitwise() {
    let s = build_scenario::<f64>(&small_layered(6, 200)).unwrap();
    let part = Partition::new(&s.network, &s.partition).unwrap();
    let run = |parallel| {
        let cfg = EstimatorConfig {
            parallel,
            ..EstimatorConfig::default()
        };
        run_multilayer(&s.network, &part, &s.plan, &s.pseudo, &s.meters, 200, &cfg).unwrap()
    };
    let (a, b) = (run(true), run(false));
    assert_eq!(a.voltages, b.voltages);
    assert_eq!(a.injections, b.injections);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn meter_noise_has_the_planned_sd() {
    let mut sum = 0.0;
    let mut count = 0usize;
    for seed in 0..5 {
        let s = build_scenario::<f64>(&ScenarioConfig::six_bus(seed)).unwrap();
        for (t, m) in s.meters.iter().enumerate() {
            let Reading::Phasor(i) = m.currents[&1] else { panic!("head current is a phasor") };
            let Reading::Phasor(v) = m.voltages[&1] else { panic!("head voltage is a phasor") };
            sum += (i - s.truth.flows[t].branch_currents[0]).norm_sqr();
            sum += (v - s.truth.v_ref[t]).norm_sqr();
            count += 2;
        }
    }
    let sd = (sum / count as f64).sqrt();
    let planned = ScenarioConfig::default().meter_sd;
    assert!((sd / planned - 1.0).abs() <= 0.05, "{sd} vs {planned}");
}

#[test]
fn true_injections_explain_meter_rows() {
    let mut s = build_scenario::<f64>(&ScenarioConfig {
        samples: 300,
        ..ScenarioConfig::six_bus(8)
    })
    .unwrap();
    s.plan.voltage_meters.extend([4, 6]);
    s.plan.current_meters.extend([3, 5]);
    s.meters = corrupt_measurements(&s.truth, &s.network, &s.plan, 8, &[], false).unwrap();
    let plan = ResolvedPlan::new(&s.plan, &s.network).unwrap();
    let h = build_observation_matrix(&plan, &build_bibc(&s.network), &build_dlf(&s.network)).unwrap();
    let sd = s.plan.meter_sd;
    for t in 0..300 {
        let v_ref = reference_voltage(&plan, &s.meters[t]).unwrap();
        let frame = assemble_frame(&plan, &s.truth.bus_injections[t], &s.meters[t], v_ref).unwrap();
        let hx = h.h.mul_vec(&s.truth.bus_injections[t]);
        for r in plan.meter_rows() {
            assert!((frame.y()[r] - hx[r]).norm() <= 5.0 * sd, "row {r} at {t}");
        }
        for r in plan.pseudo_rows() {
            assert!((frame.y()[r] - hx[r]).norm() <= 1e-15);
        }
    }
}

#[test]
fn measurement_covariance_is_diagonal() {
    let s = build_scenario::<f64>(&small_layered(2, 10)).unwrap();
    let plan = ResolvedPlan::new(&s.plan, &s.network).unwrap();
    let r = build_r::<f64>(&plan).unwrap();
    for i in 0..r.dim() {
        for j in 0..r.dim() {
            if i != j {
                assert_eq!(r.gamma()[(i, j)], C64::new(0.0, 0.0));
            }
            assert_eq!(r.c()[(i, j)], C64::new(0.0, 0.0));
        }
    }
}

#[test]
fn estimator_flags_meter_spikes() {
    let spikes = [300, 700, 1100].map(|sample| Spike {
        sample,
        kind: MeterKind::Current,
        device: 1,
        sd_multiple: 200.0,
    });
    let s = build_scenario::<f64>(&ScenarioConfig {
        spikes: spikes.to_vec(),
        ..ScenarioConfig::six_bus(9)
    })
    .unwrap();
    let run = run_single_layer(&s.network, &s.plan, &s.pseudo, &s.meters, s.truth.samples(), &EstimatorConfig::default()).unwrap();
    let plan = ResolvedPlan::new(&s.plan, &s.network).unwrap();
    let row = plan.current_rows().start;
    for sp in &spikes {
        assert!(run.diagnostics.bad_data.contains(&(sp.sample, row)), "{:?}", run.diagnostics.bad_data);
    }
    // the flagged reading is not trusted, so the estimate stays near the truth
    let truth = s.truth.voltages();
    for sp in &spikes {
        let err = run.voltages[sp.sample].iter().zip(&truth[sp.sample]).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
