//! Snapshot weighted least squares on the same linear measurement model.

use std::time::Instant;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{DseError, Result};
use crate::grid_model::{direct_load_flow, RadialNetwork};
use crate::layering::{AreaFrames, EstimationRun, EstimatorConfig, RunDiagnostics, Timing};
use crate::linalg::{CMatrix, Qr};
use crate::measurement::{MeterSample, MeteringPlan, ResolvedPlan};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WlsConfig {
    /// One strictly positive weight per measurement row.
    pub weights: Vec<f64>,
    /// The model is linear, so one solve is exact; kept for reporting.
    pub max_iterations: usize,
}

impl WlsConfig {
    /// Inverse-variance weights from a resolved plan.
    pub fn from_plan(plan: &ResolvedPlan) -> Self {
        WlsConfig {
            weights: plan.row_sd.iter().map(|s| 1.0 / (s * s)).collect(),
            max_iterations: 1,
        }
    }

    fn validate(&self, rows: usize) -> Result<()> {
        if self.weights.len() != rows {
            return Err(DseError::shape("WLS weights", rows, self.weights.len()));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(DseError::Argument(format!("WLS weights must be positive, got {w}")));
        }
        Ok(())
    }
}

/// A WLS problem with its factorization cached across snapshots.
#[derive(Clone, Debug)]
pub struct WlsSolver<T> {
    sqrt_w: Vec<T>,
    qr: Qr<T>,
}

impl<T: Scalar> WlsSolver<T> {
    pub fn new(h: &CMatrix<T>, config: &WlsConfig) -> Result<Self> {
        config.validate(h.rows())?;
        let sqrt_w: Vec<T> = config.weights.iter().map(|w| T::lit(w.sqrt())).collect();
        let mut a = h.clone();
        for (i, s) in sqrt_w.iter().enumerate() {
            for z in a.row_mut(i) {
                *z = z.scale(*s);
            }
        }
        Ok(WlsSolver {
            qr: Qr::factor(&a, T::lit(1e-12))?,
            sqrt_w,
        })
    }

    pub fn solve(&self, y: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if y.len() != self.sqrt_w.len() {
            return Err(DseError::shape("WLS measurement vector", self.sqrt_w.len(), y.len()));
        }
        let b: Vec<Complex<T>> = y.iter().zip(&self.sqrt_w).map(|(z, s)| z.scale(*s)).collect();
        Ok(self.qr.solve_vec(&b))
    }
}

/// Minimizes `Σ w_r |y_r − (H·x)_r|²`.
pub fn wls_estimate<T: Scalar>(h: &CMatrix<T>, y: &[Complex<T>], config: &WlsConfig) -> Result<Vec<Complex<T>>> {
    WlsSolver::new(h, config)?.solve(y)
}

/// Snapshot WLS over every sample, fed with exactly the rows the single-layer
/// filter sees.
pub fn run_wls<T: Scalar>(
    network: &RadialNetwork<T>,
    plan: &MeteringPlan,
    pseudo: &[Vec<Complex<T>>],
    meters: &[MeterSample<T>],
    steps: usize,
    config: &EstimatorConfig,
) -> Result<EstimationRun<T>> {
    if pseudo.len() < steps || meters.len() < steps {
        return Err(DseError::Data(format!("inputs cover fewer than {steps} samples")));
    }
    let offline = Instant::now();
    let mut diag = RunDiagnostics::default();
    let resolved = ResolvedPlan::new(plan, network)?;
    let frames = AreaFrames::new(network.clone(), resolved, pseudo[..steps].to_vec(), meters, config, &mut diag)?;
    let solver = WlsSolver::new(&frames.h.h, &WlsConfig::from_plan(&frames.plan))?;
    let offline_s = offline.elapsed().as_secs_f64();

    let online = Instant::now();
    let mut voltages = Vec::with_capacity(steps);
    let mut injections = Vec::with_capacity(steps);
    for t in 0..steps {
        let f = frames.frame(t, &mut diag)?;
        let x = solver.solve(&f.y)?;
        voltages.push(direct_load_flow(&frames.bibc, &frames.dlf, &x, f.v_ref)?.bus_voltages);
        injections.push(x);
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
