//! Augmented complex Kalman filter.
//!
//! The filter carries the state estimate `x̂` only; its conjugate is implied.
//! The error covariance is the full augmented matrix, stored as its `(Γ, C)`
//! blocks. Gains come from the `2m × 2m` augmented innovation covariance and
//! the state update uses the top block row `(G11, G12)`:
//!
//! ```text
//! x̂⁺ = x̂ + G11·e + G12·e*,      e = y − H·x̂
//! ```
//!
//! Because every augmented matrix in the recursion has the widely-linear
//! structure `[[A, B], [B*, A*]]`, only the top block row is ever formed; the
//! bottom row is its conjugate mirror.

use num_complex::Complex;

use crate::augmented::AugmentedCovariance;
use crate::error::{DseError, Result};
use crate::linalg::{CMatrix, Lu};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct StateSpaceModel<T> {
    /// `None` is the identity transition.
    f: Option<CMatrix<T>>,
    h: CMatrix<T>,
    q: AugmentedCovariance<T>,
    r: AugmentedCovariance<T>,
}

impl<T: Scalar> StateSpaceModel<T> {
    pub fn new(f: Option<CMatrix<T>>, h: CMatrix<T>, q: AugmentedCovariance<T>, r: AugmentedCovariance<T>) -> Result<Self> {
        let n = h.cols();
        if let Some(f) = &f {
            if f.rows() != n || f.cols() != n {
                return Err(DseError::shape("transition matrix", format!("{n}x{n}"), format!("{}x{}", f.rows(), f.cols())));
            }
        }
        if q.dim() != n {
            return Err(DseError::shape("process covariance", n, q.dim()));
        }
        if r.dim() != h.rows() {
            return Err(DseError::shape("measurement covariance", h.rows(), r.dim()));
        }
        Ok(Self { f, h, q, r })
    }

    /// Random-walk state model, `F = I`.
    pub fn random_walk(h: CMatrix<T>, q: AugmentedCovariance<T>, r: AugmentedCovariance<T>) -> Result<Self> {
        Self::new(None, h, q, r)
    }

    pub fn state_dim(&self) -> usize {
        self.h.cols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.h.rows()
    }

    pub fn f(&self) -> Option<&CMatrix<T>> {
        self.f.as_ref()
    }

    pub fn h(&self) -> &CMatrix<T> {
        &self.h
    }

    pub fn q(&self) -> &AugmentedCovariance<T> {
        &self.q
    }

    pub fn r(&self) -> &AugmentedCovariance<T> {
        &self.r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterState<T> {
    pub x_hat: Vec<Complex<T>>,
    pub p: AugmentedCovariance<T>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GainBlocks<T> {
    pub g11: CMatrix<T>,
    pub g12: CMatrix<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceUpdate {
    /// `P⁺ = (I − GH)·P`.
    #[default]
    Subtractive,
    /// `P⁺ = (I − GH)·P·(I − GH)ᴴ + G·R·Gᴴ`.
    Joseph,
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FilterOptions {
    pub covariance_update: CovarianceUpdate,
    /// Innovation covariances with a larger pivot-ratio estimate get
    /// diagonal loading.
    pub condition_limit: f64,
}

impl Default for FilterOptions {
    fn default() -> Self {
        Self {
            covariance_update: CovarianceUpdate::Subtractive,
            condition_limit: 1e12,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GainDiagnostics {
    pub condition_estimate: f64,
    pub regularized: bool,
    /// Diagonal loading that was added, zero when not regularized.
    pub epsilon: f64,
}

/// Output of [`update_with`].
#[derive(Clone, Debug)]
pub struct UpdateOutcome<T> {
    pub state: FilterState<T>,
    pub innovation: Vec<Complex<T>>,
    pub diagnostics: GainDiagnostics,
}

pub fn init<T: Scalar>(x0: Vec<Complex<T>>, p0: AugmentedCovariance<T>) -> Result<FilterState<T>> {
    if x0.len() != p0.dim() {
        return Err(DseError::shape("initial covariance", x0.len(), p0.dim()));
    }
    p0.validate()?;
    Ok(FilterState { x_hat: x0, p: p0, step: 0 })
}

fn check_state<T: Scalar>(state: &FilterState<T>, model: &StateSpaceModel<T>) -> Result<()> {
    let n = model.state_dim();
    if state.x_hat.len() != n || state.p.dim() != n {
        return Err(DseError::shape("filter state", n, format!("x̂ {} / P {}", state.x_hat.len(), state.p.dim())));
    }
    Ok(())
}

/// `x̂ ← F·x̂`, `Pᵃ ← Fᵃ·Pᵃ·Fᵃᴴ + Qᵃ`.
pub fn predict<T: Scalar>(state: &FilterState<T>, model: &StateSpaceModel<T>) -> Result<FilterState<T>> {
    check_state(state, model)?;
    let (x_hat, gamma, c) = match model.f() {
        None => (state.x_hat.clone(), state.p.gamma() + model.q.gamma(), state.p.c() + model.q.c()),
        Some(f) => {
            let x = f.mul_vec(&state.x_hat);
            let g = &f.matmul(state.p.gamma()).matmul(&f.adjoint()) + model.q.gamma();
            let c = &f.matmul(state.p.c()).matmul(&f.transpose()) + model.q.c();
            (x, g.hermitian_part(), c.symmetric_part())
        }
    };
    Ok(FilterState {
        x_hat,
        p: AugmentedCovariance::from_parts_unchecked(gamma, c)?,
        step: state.step,
    })
}

/// `e = y − H·x̂`.
pub fn innovation<T: Scalar>(state: &FilterState<T>, y: &[Complex<T>], model: &StateSpaceModel<T>) -> Result<Vec<Complex<T>>> {
    check_state(state, model)?;
    if y.len() != model.measurement_dim() {
        return Err(DseError::shape("measurement vector", model.measurement_dim(), y.len()));
    }
    let hx = model.h.mul_vec(&state.x_hat);
    Ok(y.iter().zip(hx).map(|(a, b)| *a - b).collect())
}

/// Pieces of the gain computation reused by the covariance update.
struct GainWork<T> {
    blocks: GainBlocks<T>,
    diagnostics: GainDiagnostics,
}

fn compute_gain<T: Scalar>(p: &AugmentedCovariance<T>, h: &CMatrix<T>, r: &AugmentedCovariance<T>, opts: &FilterOptions) -> Result<GainWork<T>> {
    let m = h.rows();
    let h_adj = h.adjoint();
    // top block row of Pᵃ·Hᵃᴴ: [Γ·Hᴴ, C·Hᵀ]
    let a = p.gamma().matmul(&h_adj);
    let b = p.c().matmul(&h.transpose());
    // innovation covariance blocks
    let s11 = &h.matmul(&a) + r.gamma();
    let s12 = &h.matmul(&b) + r.c();
    let s11 = s11.hermitian_part();
    let s12 = s12.symmetric_part();
    let mut s = CMatrix::from_blocks(&s11, &s12, &s12.conj(), &s11.conj());

    // G_top·S = [A, B]  ⇔  Sᵀ·G_topᵀ = [A, B]ᵀ
    let mut diagnostics = GainDiagnostics::default();
    let mut lu = Lu::factor(&s.transpose());
    let cond = lu.as_ref().map(|l| l.condition_estimate().to_f64_lossy()).unwrap_or(f64::INFINITY);
    diagnostics.condition_estimate = cond;
    if !(cond <= opts.condition_limit) {
        let trace = s11.trace().re.to_f64_lossy().max(0.0);
        let mut eps = 1e-12 * trace / m.max(1) as f64;
        if !(eps > 0.0) {
            eps = 1e-12;
        }
        s.add_diagonal(Complex::new(T::lit(eps), T::zero()));
        diagnostics.regularized = true;
        diagnostics.epsilon = eps;
        lu = Lu::factor(&s.transpose());
    }
    let lu = lu?;
    let rhs = CMatrix::from_blocks(&a, &b, &CMatrix::zeros(0, m), &CMatrix::zeros(0, m));
    let g_top = lu.solve_mat(&rhs.transpose()).transpose();
    let n = g_top.rows();
    Ok(GainWork {
        blocks: GainBlocks {
            g11: g_top.block(0, 0, n, m),
            g12: g_top.block(0, m, n, m),
        },
        diagnostics,
    })
}

/// `Gᵃ = Pᵃ·Hᵃᴴ·(Hᵃ·Pᵃ·Hᵃᴴ + Rᵃ)⁻¹`, top block row.
pub fn gain<T: Scalar>(state: &FilterState<T>, model: &StateSpaceModel<T>) -> Result<(GainBlocks<T>, GainDiagnostics)> {
    check_state(state, model)?;
    let w = compute_gain(&state.p, &model.h, &model.r, &FilterOptions::default())?;
    Ok((w.blocks, w.diagnostics))
}

/// Measurement update with the model's own `R` and default options.
pub fn update<T: Scalar>(state: &FilterState<T>, y: &[Complex<T>], model: &StateSpaceModel<T>) -> Result<FilterState<T>> {
    Ok(update_with(state, y, model, None, &FilterOptions::default())?.state)
}

/// Measurement update; `r_override` replaces the model's `R` for this step
/// (bad-data handling inflates individual rows this way).
pub fn update_with<T: Scalar>(
    state: &FilterState<T>,
    y: &[Complex<T>],
    model: &StateSpaceModel<T>,
    r_override: Option<&AugmentedCovariance<T>>,
    opts: &FilterOptions,
) -> Result<UpdateOutcome<T>> {
    let e = innovation(state, y, model)?;
    let r = r_override.unwrap_or(&model.r);
    if r.dim() != model.measurement_dim() {
        return Err(DseError::shape("measurement covariance override", model.measurement_dim(), r.dim()));
    }
    let GainWork { blocks, diagnostics } = compute_gain(&state.p, &model.h, r, opts)?;
    let e_conj: Vec<Complex<T>> = e.iter().map(|z| z.conj()).collect();
    let d1 = blocks.g11.mul_vec(&e);
    let d2 = blocks.g12.mul_vec(&e_conj);
    let x_hat: Vec<Complex<T>> = state.x_hat.iter().zip(d1).zip(d2).map(|((x, a), b)| *x + a + b).collect();

    let h = &model.h;
    let k1 = blocks.g11.matmul(h);
    let k2 = blocks.g12.matmul(&h.conj());
    let p = match opts.covariance_update {
        CovarianceUpdate::Subtractive => {
            let gamma = state.p.gamma();
            let c = state.p.c();
            let g_new = &(gamma - &k1.matmul(gamma)) - &k2.matmul(&c.conj());
            let c_new = &(c - &k1.matmul(c)) - &k2.matmul(&gamma.conj());
            AugmentedCovariance::from_parts_unchecked(g_new.hermitian_part(), c_new.symmetric_part())?
        }
        CovarianceUpdate::Joseph => joseph(&state.p, &blocks, &k1, &k2, r)?,
    };
    Ok(UpdateOutcome {
        state: FilterState {
            x_hat,
            p,
            step: state.step + 1,
        },
        innovation: e,
        diagnostics,
    })
}

fn joseph<T: Scalar>(p: &AugmentedCovariance<T>, g: &GainBlocks<T>, k1: &CMatrix<T>, k2: &CMatrix<T>, r: &AugmentedCovariance<T>) -> Result<AugmentedCovariance<T>> {
    let n = k1.rows();
    let eye = CMatrix::identity(n);
    let l11 = &eye - k1;
    let l12 = -k2;
    let l = CMatrix::from_blocks(&l11, &l12, &l12.conj(), &l11.conj());
    let ga = CMatrix::from_blocks(&g.g11, &g.g12, &g.g12.conj(), &g.g11.conj());
    let pa = p.assemble_block()?;
    let ra = r.assemble_block()?;
    let out = &l.matmul(&pa).matmul(&l.adjoint()) + &ga.matmul(&ra).matmul(&ga.adjoint());
    AugmentedCovariance::from_block(&out)
}

/// Convenience wrapper that owns a model, options and the running state.
#[derive(Clone, Debug)]
pub struct AugmentedKalmanFilter<T> {
    pub model: StateSpaceModel<T>,
    pub options: FilterOptions,
    pub state: FilterState<T>,
}

impl<T: Scalar> AugmentedKalmanFilter<T> {
    pub fn new(model: StateSpaceModel<T>, state: FilterState<T>, options: FilterOptions) -> Result<Self> {
        check_state(&state, &model)?;
        Ok(Self { model, options, state })
    }

    /// Predict followed by update; returns the innovation.
    pub fn step(&mut self, y: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        let predicted = predict(&self.state, &self.model)?;
        let out = update_with(&predicted, y, &self.model, None, &self.options)?;
        self.state = out.state;
        Ok(out.innovation)
    }
}

/// Sum of the real diagonal of Γ.
pub fn covariance_trace<T: Scalar>(p: &AugmentedCovariance<T>) -> T {
    p.gamma().diagonal().iter().map(|z| z.re).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;
    use num_traits::Zero;

    fn zero_vec<T: Scalar>(n: usize) -> Vec<Complex<T>> {
        vec![Complex::zero(); n]
    }

    fn scalar_model(h: f64, q: f64, r: f64) -> StateSpaceModel<f64> {
        StateSpaceModel::random_walk(
            CMatrix::from_diagonal(&[c(h, 0.0)]),
            AugmentedCovariance::diagonal(&[q]).unwrap(),
            AugmentedCovariance::diagonal(&[r]).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn init_validates() {
        let s = init(zero_vec::<f64>(2), AugmentedCovariance::identity(2)).unwrap();
        assert_eq!(s.step, 0);
        assert_eq!(s.p, AugmentedCovariance::identity(2));
        assert!(init(zero_vec::<f64>(3), AugmentedCovariance::identity(2)).is_err());
        let neg = AugmentedCovariance::from_parts_unchecked(CMatrix::from_diagonal(&[c(-1.0, 0.0)]), CMatrix::zeros(1, 1)).unwrap();
        assert!(init(zero_vec::<f64>(1), neg).is_err());
    }

    #[test]
    fn predict_identity_adds_q() {
        let s = init(vec![c(0.5, 0.5)], AugmentedCovariance::identity(1)).unwrap();
        let still = predict(&s, &scalar_model(1.0, 0.0, 1.0)).unwrap();
        assert_eq!(still, s);
        let grown = predict(&s, &scalar_model(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(grown.p.gamma()[(0, 0)], c(2.0, 0.0));
        assert_eq!(grown.x_hat, s.x_hat);
    }

    #[test]
    fn scalar_update_halves_innovation() {
        let s = init(vec![c(0.0, 0.0)], AugmentedCovariance::identity(1)).unwrap();
        let m = scalar_model(1.0, 0.0, 1.0);
        let (g, _) = gain(&s, &m).unwrap();
        assert!((g.g11[(0, 0)] - c(0.5, 0.0)).norm() < 1e-15);
        assert!(g.g12[(0, 0)].norm() < 1e-15);
        let out = update(&s, &[c(2.0, 0.0)], &m).unwrap();
        assert!((out.x_hat[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((out.p.gamma()[(0, 0)] - c(0.5, 0.0)).norm() < 1e-15);
        assert_eq!(out.step, 1);
    }

    #[test]
    fn innovation_arithmetic() {
        let s = init(vec![c(1.0, 0.0)], AugmentedCovariance::identity(1)).unwrap();
        let m = scalar_model(2.0, 0.0, 1.0);
        assert_eq!(innovation(&s, &[c(5.0, 0.0)], &m).unwrap(), vec![c(3.0, 0.0)]);
        assert_eq!(innovation(&s, &[c(2.0, 0.0)], &m).unwrap(), vec![c(0.0, 0.0)]);
        assert!(innovation(&s, &[c(2.0, 0.0), c(1.0, 0.0)], &m).is_err());
    }

    #[test]
    fn zero_innovation_keeps_state() {
        let s = init(vec![c(0.3, -0.7), c(1.0, 0.2)], AugmentedCovariance::identity(2)).unwrap();
        let h = CMatrix::from_rows(&[vec![c(1.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(1.0, 0.0)]]).unwrap();
        let m = StateSpaceModel::random_walk(h.clone(), AugmentedCovariance::identity(2), AugmentedCovariance::diagonal(&[0.1, 0.1, 0.01]).unwrap()).unwrap();
        let y = h.mul_vec(&s.x_hat);
        let out = update(&s, &y, &m).unwrap();
        assert_eq!(out.x_hat, s.x_hat);
    }

    #[test]
    fn gain_limits() {
        let s = init(zero_vec::<f64>(2), AugmentedCovariance::identity(2)).unwrap();
        let exact = StateSpaceModel::random_walk(CMatrix::identity(2), AugmentedCovariance::zeros(2), AugmentedCovariance::diagonal(&[1e-12, 1e-12]).unwrap()).unwrap();
        let (g, _) = gain(&s, &exact).unwrap();
        assert!((&g.g11 - &CMatrix::identity(2)).max_abs() < 1e-9);
        assert!(g.g12.max_abs() < 1e-9);
        let vague = StateSpaceModel::random_walk(CMatrix::identity(2), AugmentedCovariance::zeros(2), AugmentedCovariance::diagonal(&[1e12, 1e12]).unwrap()).unwrap();
        let (g, _) = gain(&s, &vague).unwrap();
        assert!(g.g11.max_abs() < 1e-11 && g.g12.max_abs() < 1e-11);
    }

    #[test]
    fn singular_innovation_covariance_is_regularized() {
        let s = init(zero_vec::<f64>(1), AugmentedCovariance::zeros(1)).unwrap();
        let m = StateSpaceModel::random_walk(CMatrix::identity(1), AugmentedCovariance::zeros(1), AugmentedCovariance::zeros(1)).unwrap();
        let (g, d) = gain(&s, &m).unwrap();
        assert!(d.regularized);
        assert!(g.g11.max_abs().is_finite());
    }

    #[test]
    fn joseph_matches_subtractive_with_optimal_gain() {
        let s = init(vec![c::<f64>(0.1, 0.2), c(-0.3, 0.0)], AugmentedCovariance::new(
            CMatrix::from_rows(&[vec![c(2.0, 0.0), c(0.3, 0.4)], vec![c(0.3, -0.4), c(1.5, 0.0)]]).unwrap(),
            CMatrix::from_rows(&[vec![c(0.5, 0.1), c(0.1, 0.0)], vec![c(0.1, 0.0), c(0.2, -0.3)]]).unwrap(),
        ).unwrap()).unwrap();
        let h = CMatrix::from_rows(&[vec![c(1.0, 0.5), c(0.0, 0.0)], vec![c(0.3, 0.0), c(1.0, -1.0)], vec![c(1.0, 0.0), c(1.0, 0.0)]]).unwrap();
        let r = AugmentedCovariance::new(
            CMatrix::from_diagonal(&[c(0.2, 0.0), c(0.3, 0.0), c(0.1, 0.0)]),
            CMatrix::from_diagonal(&[c(0.1, 0.0), c(0.0, 0.05), c(0.0, 0.0)]),
        ).unwrap();
        let m = StateSpaceModel::random_walk(h, AugmentedCovariance::zeros(2), r).unwrap();
        let y = vec![c(1.0, 0.0), c(0.5, 0.5), c(-0.2, 0.1)];
        let a = update_with(&s, &y, &m, None, &FilterOptions::default()).unwrap();
        let b = update_with(&s, &y, &m, None, &FilterOptions { covariance_update: CovarianceUpdate::Joseph, ..Default::default() }).unwrap();
        assert_eq!(a.state.x_hat, b.state.x_hat);
        assert!((a.state.p.gamma() - b.state.p.gamma()).max_abs() < 1e-12);
        assert!((a.state.p.c() - b.state.p.c()).max_abs() < 1e-12);
    }
}
