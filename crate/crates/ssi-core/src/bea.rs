//! Backward-error-analysis truncations: modified and inverse modified
//! Hamiltonians for the Symplectic Euler and implicit midpoint methods,
//! identification of the governing Hamiltonian from a trained surrogate, and
//! empirical order checks for the series relations.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SsiError};
use crate::gp::{GpHamiltonianModel, IntegratorTag};
use crate::phase::{apply_j_inv, HamiltonianField, PhaseState};
use crate::sample::{uniform_mesh, MeshSpec};
use crate::stats::variance;

/// Truncation index of a modified-Hamiltonian series. For the midpoint rule
/// only even powers occur, so orders 0/1 and 2/3 evaluate identically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TruncationOrder(u8);

impl TruncationOrder {
    pub fn new(order: u8) -> Result<Self> {
        if order > 3 {
            return Err(SsiError::InvalidArgument(format!(
                "truncation orders range over 0..=3, got {order}"
            )));
        }
        Ok(Self(order))
    }

    pub fn value(self) -> u8 {
        self.0
    }
}

struct SeriesTerms {
    h0: f64,
    /// `H_q . H_p`
    gradient_pairing: f64,
    /// `(H_q^T H_pp H_q, H_p^T H_qq H_p, H_p^T H_qp H_q)`
    quadratic: (f64, f64, f64),
}

fn series_terms<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    order: u8,
) -> SeriesTerms {
    let n = field.dim();
    let h0 = field.value(z);
    if order == 0 {
        return SeriesTerms {
            h0,
            gradient_pairing: 0.0,
            quadratic: (0.0, 0.0, 0.0),
        };
    }
    let grad = field.gradient(z);
    let hq = grad.rows(0, n);
    let hp = grad.rows(n, n);
    let gradient_pairing = hq.dot(&hp);
    if order == 1 {
        return SeriesTerms {
            h0,
            gradient_pairing,
            quadratic: (0.0, 0.0, 0.0),
        };
    }
    let hess = field.hessian(z);
    let hqq = hess.view((0, 0), (n, n));
    let hqp = hess.view((0, n), (n, n));
    let hpp = hess.view((n, n), (n, n));
    let t_pp = hq.dot(&(hpp * hq));
    let t_qq = hp.dot(&(hqq * hp));
    let t_qp = hp.dot(&(hqp * hq));
    SeriesTerms {
        h0,
        gradient_pairing,
        quadratic: (t_pp, t_qq, t_qp),
    }
}

/// Modified Hamiltonian of the Symplectic Euler method, truncated:
/// `H - (h/2) H_q.H_p + (h^2/12)(H_q^T H_pp H_q + H_p^T H_qq H_p + 4 H_p^T H_qp H_q)`.
pub fn modified_h_se<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    order: TruncationOrder,
) -> Result<f64> {
    if order.value() > 2 {
        return Err(SsiError::UnsupportedOrder {
            order: order.value(),
            integrator: "symplectic_euler".into(),
        });
    }
    let t = series_terms(field, z, order.value());
    let mut value = t.h0;
    if order.value() >= 1 {
        value -= 0.5 * h * t.gradient_pairing;
    }
    if order.value() >= 2 {
        let (t_pp, t_qq, t_qp) = t.quadratic;
        value += h * h / 12.0 * (t_pp + t_qq + 4.0 * t_qp);
    }
    Ok(value)
}

/// Inverse modified Hamiltonian of the Symplectic Euler method, truncated:
/// `H + (h/2) H_q.H_p + (h^2/6)(H_q^T H_pp H_q + H_p^T H_qq H_p + H_p^T H_qp H_q)`.
pub fn inverse_modified_h_se<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    order: TruncationOrder,
) -> Result<f64> {
    if order.value() > 2 {
        return Err(SsiError::UnsupportedOrder {
            order: order.value(),
            integrator: "symplectic_euler".into(),
        });
    }
    let t = series_terms(field, z, order.value());
    let mut value = t.h0;
    if order.value() >= 1 {
        value += 0.5 * h * t.gradient_pairing;
    }
    if order.value() >= 2 {
        let (t_pp, t_qq, t_qp) = t.quadratic;
        value += h * h / 6.0 * (t_pp + t_qq + t_qp);
    }
    Ok(value)
}

fn mp_correction<F: HamiltonianField + ?Sized>(field: &F, z: &PhaseState) -> f64 {
    let grad = field.gradient(z);
    let f = apply_j_inv(&grad);
    let hess = field.hessian(z);
    f.dot(&(&hess * &f))
}

/// Modified Hamiltonian of the implicit midpoint rule, truncated:
/// `H - (h^2/24) f^T Hess(H) f` with `f = J^{-1} grad H`. Even series, so
/// orders 0/1 and 2/3 coincide.
pub fn modified_h_mp<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    order: TruncationOrder,
) -> Result<f64> {
    let value = field.value(z);
    if order.value() < 2 {
        return Ok(value);
    }
    Ok(value - h * h / 24.0 * mp_correction(field, z))
}

/// Inverse modified Hamiltonian of the implicit midpoint rule, truncated:
/// `H + (h^2/24) f^T Hess(H) f`.
pub fn inverse_modified_h_mp<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    order: TruncationOrder,
) -> Result<f64> {
    let value = field.value(z);
    if order.value() < 2 {
        return Ok(value);
    }
    Ok(value + h * h / 24.0 * mp_correction(field, z))
}

/// The identified Hamiltonian: the modified-Hamiltonian series of the
/// model's integrator applied to the learned surrogate at the training step
/// size, truncated at `order`.
pub fn identify_hamiltonian(
    model: &GpHamiltonianModel,
    z: &PhaseState,
    order: TruncationOrder,
) -> Result<f64> {
    let field = model.as_field();
    match model.integrator() {
        IntegratorTag::SymplecticEuler => modified_h_se(&field, z, model.h(), order),
        IntegratorTag::ImplicitMidpoint => modified_h_mp(&field, z, model.h(), order),
    }
}

/// Potential recovered from the identified Hamiltonian at zero momentum.
pub fn recover_potential(
    model: &GpHamiltonianModel,
    q: &[f64],
    order: TruncationOrder,
) -> Result<f64> {
    if q.len() != model.n() {
        return Err(SsiError::dims(model.n(), q.len()));
    }
    let z = PhaseState::from_blocks(q, &vec![0.0; q.len()]);
    identify_hamiltonian(model, &z, order)
}

/// Standard deviation of `H - identified` under the uniform distribution on
/// the mesh. Invariant under adding constants to either field.
pub fn sigma_hdiff<F: HamiltonianField + ?Sized>(
    exact: &F,
    mut identified: impl FnMut(&PhaseState) -> Result<f64>,
    mesh: &MeshSpec,
) -> Result<f64> {
    let points = uniform_mesh(mesh)?;
    let mut diffs = Vec::with_capacity(points.len());
    for z in &points {
        diffs.push(exact.value(z) - identified(z)?);
    }
    Ok(variance(&diffs).sqrt())
}

/// Scalar field with finite-difference derivatives, used to compose
/// truncated series where no closed-form derivatives exist.
struct FdScalarField<'a> {
    f: &'a dyn Fn(&PhaseState) -> f64,
    n: usize,
}

const FD_GRAD_STEP: f64 = 1e-6;
const FD_HESS_STEP: f64 = 5e-4;

impl FdScalarField<'_> {
    fn shifted(&self, z: &PhaseState, d: usize, delta: f64) -> PhaseState {
        let mut coords = z.as_vector().clone();
        coords[d] += delta;
        PhaseState::from_flat_unchecked(coords)
    }
}

impl HamiltonianField for FdScalarField<'_> {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, z: &PhaseState) -> f64 {
        (self.f)(z)
    }

    fn gradient(&self, z: &PhaseState) -> DVector<f64> {
        let dim = 2 * self.n;
        let mut g = DVector::zeros(dim);
        for d in 0..dim {
            let hi = (self.f)(&self.shifted(z, d, FD_GRAD_STEP));
            let lo = (self.f)(&self.shifted(z, d, -FD_GRAD_STEP));
            g[d] = (hi - lo) / (2.0 * FD_GRAD_STEP);
        }
        g
    }

    fn hessian(&self, z: &PhaseState) -> DMatrix<f64> {
        let dim = 2 * self.n;
        let s = FD_HESS_STEP;
        let mut hess = DMatrix::zeros(dim, dim);
        let center = (self.f)(z);
        for i in 0..dim {
            let hi = (self.f)(&self.shifted(z, i, s));
            let lo = (self.f)(&self.shifted(z, i, -s));
            hess[(i, i)] = (hi - 2.0 * center + lo) / (s * s);
            for j in 0..i {
                let pp = (self.f)(&self.shifted(&self.shifted(z, i, s), j, s));
                let pm = (self.f)(&self.shifted(&self.shifted(z, i, s), j, -s));
                let mp = (self.f)(&self.shifted(&self.shifted(z, i, -s), j, s));
                let mm = (self.f)(&self.shifted(&self.shifted(z, i, -s), j, -s));
                let v = (pp - pm - mp + mm) / (4.0 * s * s);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        hess
    }
}

/// Empirical order of the composition `modified(inverse_modified(H)) - H`.
///
/// For each step size the residual is maximized over the sample points; the
/// returned value is the fitted log-log slope. By construction of the series
/// the slope is close to 3 for Symplectic Euler and 4 for the midpoint rule.
pub fn bea_order_check<F: HamiltonianField + ?Sized>(
    field: &F,
    h_list: &[f64],
    integrator: IntegratorTag,
    sample_points: &[PhaseState],
) -> Result<f64> {
    if h_list.len() < 3 {
        return Err(SsiError::Domain(
            "order check needs at least three step sizes".into(),
        ));
    }
    if sample_points.is_empty() {
        return Err(SsiError::Domain("order check needs sample points".into()));
    }
    let ratio = h_list[1] / h_list[0];
    for w in h_list.windows(2) {
        if !(w[0] > 0.0 && w[1] > 0.0) || (w[1] / w[0] - ratio).abs() > 1e-9 * ratio.abs() {
            return Err(SsiError::Domain(
                "order check needs a geometric ladder of positive step sizes".into(),
            ));
        }
    }
    if (ratio - 1.0).abs() < 1e-9 {
        return Err(SsiError::Domain("degenerate step-size ladder".into()));
    }

    let order = TruncationOrder::new(2)?;
    let mut log_h = Vec::with_capacity(h_list.len());
    let mut log_err = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let inverse = |z: &PhaseState| -> f64 {
            match integrator {
                IntegratorTag::SymplecticEuler => {
                    inverse_modified_h_se(field, z, h, order).expect("order 2 is supported")
                }
                IntegratorTag::ImplicitMidpoint => {
                    inverse_modified_h_mp(field, z, h, order).expect("order 2 is supported")
                }
            }
        };
        let fd = FdScalarField {
            f: &inverse,
            n: field.dim(),
        };
        let mut worst = 0.0_f64;
        for z in sample_points {
            let composed = match integrator {
                IntegratorTag::SymplecticEuler => modified_h_se(&fd, z, h, order)?,
                IntegratorTag::ImplicitMidpoint => modified_h_mp(&fd, z, h, order)?,
            };
            worst = worst.max((composed - field.value(z)).abs());
        }
        log_h.push(h.ln());
        log_err.push(worst.max(1e-300).ln());
    }

    // Least-squares slope of log err against log h.
    let m = log_h.len() as f64;
    let mean_x = log_h.iter().sum::<f64>() / m;
    let mean_y = log_err.iter().sum::<f64>() / m;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in log_h.iter().zip(&log_err) {
        num += (x - mean_x) * (y - mean_y);
        den += (x - mean_x) * (x - mean_x);
    }
    Ok(num / den)
}
