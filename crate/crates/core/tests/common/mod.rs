//! Independent dense oracles shared by the integration tests.
#![allow(dead_code)]

use ackf_dse::ackf::{init, FilterState, StateSpaceModel};
use ackf_dse::augmented::AugmentedCovariance;
use ackf_dse::grid_model::{Branch, Phase, RadialNetwork};
use ackf_dse::linalg::CMatrix;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Unit-variance circular complex normal.
pub fn circular(rng: &mut ChaCha8Rng) -> C64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    C64::new(s * normal(rng), s * normal(rng))
}

pub fn uniform_c(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> C64 {
    C64::new(rng.gen_range(lo..hi), rng.gen_range(lo..hi))
}

/// Random tree with shuffled bus ids, shuffled branch order and a few
/// branches written against the flow direction.
pub fn random_network(rng: &mut ChaCha8Rng, load_buses: usize) -> RadialNetwork<f64> {
    let mut ids: Vec<u32> = (1..=load_buses as u32 + 1).map(|k| 3 * k + 100).collect();
    ids.shuffle(rng);
    let mut branches = Vec::with_capacity(load_buses);
    for k in 1..=load_buses {
        let parent = ids[rng.gen_range(0..k)];
        let z = C64::new(rng.gen_range(0.005..0.1), rng.gen_range(0.002..0.08));
        let (from, to) = if rng.gen_bool(0.2) { (ids[k], parent) } else { (parent, ids[k]) };
        branches.push(Branch {
            id: 0,
            from,
            to,
            impedance: z,
        });
    }
    branches.shuffle(rng);
    for (k, b) in branches.iter_mut().enumerate() {
        b.id = 1000 + 7 * k as u32;
    }
    let mut buses = ids.clone();
    buses.shuffle(rng);
    RadialNetwork::new(Phase::Single, ids[0], &buses, branches).expect("random tree is radial")
}

/// Bus voltages from the nodal admittance equations `Y·v = −i`, with the
/// reference bus eliminated. Output follows the network's bus order.
pub fn nodal_voltages(network: &RadialNetwork<f64>, i_inj: &[C64], v_ref: C64) -> Vec<C64> {
    let n = network.load_bus_count();
    // index n is the reference bus
    let idx = |bus: u32| network.bus_position(bus).unwrap_or(n);
    let mut y = DMatrix::<C64>::zeros(n + 1, n + 1);
    for b in network.branches() {
        let g = C64::new(1.0, 0.0) / b.impedance;
        let (i, j) = (idx(b.from), idx(b.to));
        y[(i, i)] += g;
        y[(j, j)] += g;
        y[(i, j)] -= g;
        y[(j, i)] -= g;
    }
    let yll = y.view((0, 0), (n, n)).into_owned();
    let rhs = DVector::from_iterator(n, (0..n).map(|k| -i_inj[k] - y[(k, n)] * v_ref));
    let v = yll.lu().solve(&rhs).expect("admittance matrix is nonsingular");
    v.iter().copied().collect()
}

pub fn to_dense(m: &CMatrix<f64>) -> DMatrix<C64> {
    DMatrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)])
}

pub fn from_dense(m: &DMatrix<C64>) -> CMatrix<f64> {
    CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<C64> {
    DMatrix::from_fn(rows, cols, |_, _| circular(rng) * scale)
}

/// Covariance of `A·z + B·z*` for circular white `z`, plus `floor·I`.
/// `improper = false` leaves out `B`.
pub fn random_covariance(rng: &mut ChaCha8Rng, n: usize, scale: f64, improper: bool, floor: f64) -> AugmentedCovariance<f64> {
    let a = random_matrix(rng, n, n, scale);
    let b = if improper { random_matrix(rng, n, n, 0.7 * scale) } else { DMatrix::zeros(n, n) };
    let mut gamma = &a * a.adjoint() + &b * b.adjoint();
    for i in 0..n {
        gamma[(i, i)] += C64::new(floor, 0.0);
    }
    let c = &a * b.transpose() + &b * a.transpose();
    let gamma = (&gamma + gamma.adjoint()) * C64::new(0.5, 0.0);
    let c = (&c + c.transpose()) * C64::new(0.5, 0.0);
    AugmentedCovariance::new(from_dense(&gamma), from_dense(&c)).expect("constructed covariance is valid")
}

/// Draws a sample with the given augmented covariance.
pub struct ComplexSampler {
    /// Lower Cholesky factor of the real-stacked covariance.
    l: DMatrix<f64>,
}

impl ComplexSampler {
    pub fn new(cov: &AugmentedCovariance<f64>) -> Self {
        let mut r = real_covariance(cov);
        let n = r.nrows();
        for i in 0..n {
            r[(i, i)] += 1e-300_f64.max(1e-15 * r[(i, i)].abs());
        }
        ComplexSampler {
            l: r.cholesky().expect("covariance is positive definite").l(),
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Vec<C64> {
        let n = self.l.nrows() / 2;
        let z = DVector::from_iterator(2 * n, (0..2 * n).map(|_| normal(rng)));
        let r = &self.l * z;
        (0..n).map(|i| C64::new(r[i], r[n + i])).collect()
    }
}

/// `[Re M, −Im M; Im M, Re M]`
pub fn real_operator(m: &DMatrix<C64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = m[(i, j)];
            out[(i, j)] = z.re;
            out[(i, c + j)] = -z.im;
            out[(r + i, j)] = z.im;
            out[(r + i, c + j)] = z.re;
        }
    }
    out
}

/// Covariance of `[Re w; Im w]` from the complex second moments of `w`.
pub fn real_covariance(cov: &AugmentedCovariance<f64>) -> DMatrix<f64> {
    let n = cov.dim();
    let (g, c) = (to_dense(cov.gamma()), to_dense(cov.c()));
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let (gij, cij) = (g[(i, j)], c[(i, j)]);
            out[(i, j)] = 0.5 * (gij + cij).re;
            out[(i, n + j)] = 0.5 * (cij - gij).im;
            out[(n + i, j)] = 0.5 * (gij + cij).im;
            out[(n + i, n + j)] = 0.5 * (gij - cij).re;
        }
    }
    out
}

pub fn stack(x: &[C64]) -> DVector<f64> {
    let n = x.len();
    DVector::from_iterator(2 * n, x.iter().map(|z| z.re).chain(x.iter().map(|z| z.im)))
}

pub fn unstack(v: &DVector<f64>) -> Vec<C64> {
    let n = v.len() / 2;
    (0..n).map(|i| C64::new(v[i], v[n + i])).collect()
}

/// Textbook Kalman filter on real-stacked coordinates.
pub struct RealKalman {
    pub f: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

impl RealKalman {
    pub fn step(&mut self, y: &[C64]) {
        let x = &self.f * &self.x;
        let p = &self.f * &self.p * self.f.transpose() + &self.q;
        let s = &self.h * &p * self.h.transpose() + &self.r;
        let k = &p * self.h.transpose() * s.try_inverse().expect("innovation covariance is invertible");
        let e = stack(y) - &self.h * &x;
        self.x = &x + &k * e;
        self.p = &p - &k * &self.h * &p;
        self.p = (&self.p + self.p.transpose()) * 0.5;
    }

    pub fn estimate(&self) -> Vec<C64> {
        unstack(&self.x)
    }
}

/// A random linear complex model with its initial state.
pub struct RandomModel {
    pub f: DMatrix<C64>,
    pub h: DMatrix<C64>,
    pub model: StateSpaceModel<f64>,
    pub state: FilterState<f64>,
}

pub fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize, improper: bool, identity_f: bool) -> RandomModel {
    let f = if identity_f {
        DMatrix::identity(n, n)
    } else {
        // keep the spectral radius below one
        random_matrix(rng, n, n, 0.9 / (2.0 * n as f64).sqrt())
    };
    let h = random_matrix(rng, m, n, 1.0);
    let q = random_covariance(rng, n, 0.3, improper, 0.01);
    let r = random_covariance(rng, m, 0.2, improper, 0.01);
    let p0 = random_covariance(rng, n, 0.5, improper, 0.05);
    let x0: Vec<C64> = (0..n).map(|_| circular(rng)).collect();
    let fm = if identity_f { None } else { Some(from_dense(&f)) };
    let model = StateSpaceModel::new(fm, from_dense(&h), q, r).unwrap();
    let state = init(x0, p0).unwrap();
    RandomModel { f, h, model, state }
}

impl RandomModel {
    pub fn real_oracle(&self) -> RealKalman {
        RealKalman {
            f: real_operator(&self.f),
            h: real_operator(&self.h),
            q: real_covariance(self.model.q()),
            r: real_covariance(self.model.r()),
            x: stack(&self.state.x_hat),
            p: real_covariance(&self.state.p),
        }
    }

    /// Simulated measurements of a true trajectory.
    pub fn simulate(&self, rng: &mut ChaCha8Rng, steps: usize) -> Vec<Vec<C64>> {
        let qs = ComplexSampler::new(self.model.q());
        let rs = ComplexSampler::new(self.model.r());
        let mut x = DVector::from_iterator(self.state.x_hat.len(), self.state.x_hat.iter().copied());
        (0..steps)
            .map(|_| {
                let w = qs.draw(rng);
                x = &self.f * &x + DVector::from_vec(w);
                let v = rs.draw(rng);
                (&self.h * &x).iter().zip(v).map(|(a, b)| a + b).collect()
            })
            .collect()
    }
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eigenvalue(m: &CMatrix<f64>) -> f64 {
    let d = to_dense(m);
    let d = (&d + d.adjoint()) * C64::new(0.5, 0.0);
    d.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}

/// Lag-k sample autocorrelation.
pub fn autocorrelation(x: &[f64], k: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum();
    cov / var
}

pub fn sample_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}
