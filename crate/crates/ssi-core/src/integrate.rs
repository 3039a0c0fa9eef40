//! Symplectic one-step methods, the Stoermer-Verlet reference integrator for
//! data generation, and trajectory drivers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsiError};
use crate::phase::{apply_j_inv, HamiltonianField, PhaseState};

/// How the implicit step equations are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStrategy {
    /// Plain fixed-point iteration.
    FixedPoint,
    /// Fixed-point iteration that switches to damped Newton when the
    /// residual stops contracting.
    NewtonFallback,
}

/// Tolerances for implicit step equations. Convergence is measured in the
/// max-norm of the defining-equation residual, not iterate displacement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImplicitSolveOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub strategy: SolveStrategy,
}

impl Default for ImplicitSolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 50,
            strategy: SolveStrategy::NewtonFallback,
        }
    }
}

impl ImplicitSolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(SsiError::InvalidArgument(format!(
                "implicit solve options need tolerance > 0 and max_iterations >= 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One-step method identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodTag {
    SymplecticEuler,
    ImplicitMidpoint,
    StormerVerlet,
}

impl std::fmt::Display for MethodTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MethodTag::SymplecticEuler => "symplectic_euler",
            MethodTag::ImplicitMidpoint => "implicit_midpoint",
            MethodTag::StormerVerlet => "stormer_verlet",
        };
        f.write_str(s)
    }
}

/// A time-ordered sequence of states with uniform step size.
#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub states: Vec<PhaseState>,
    pub h: f64,
    pub t0: f64,
    pub method_tag: MethodTag,
    pub field_tag: String,
}

impl TrajectoryRecord {
    pub fn time_at(&self, index: usize) -> f64 {
        self.t0 + self.h * index as f64
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Solve `x = g(x)` by fixed-point iteration with optional damped-Newton
/// fallback. `residual(x) = g(x) - x`; `jacobian_g` is the derivative of `g`.
fn solve_fixed_point(
    x0: &DVector<f64>,
    g: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    jacobian_g: &dyn Fn(&DVector<f64>) -> DMatrix<f64>,
    opts: &ImplicitSolveOptions,
) -> Result<DVector<f64>> {
    let mut x = x0.clone();
    let mut gx = g(&x);
    let mut res = max_abs_diff(gx.as_slice(), x.as_slice());
    let mut prev_res = f64::INFINITY;
    let mut newton = false;

    for iter in 0..opts.max_iterations {
        if res <= opts.tolerance {
            return Ok(x);
        }
        if opts.strategy == SolveStrategy::NewtonFallback
            && !newton
            && (!res.is_finite() || res > 0.5 * prev_res)
            && iter > 0
        {
            newton = true;
        }
        prev_res = res;

        if newton {
            // Newton on r(x) = g(x) - x, with step damping if the residual grows.
            let jr = jacobian_g(&x) - DMatrix::identity(x.len(), x.len());
            let r = &gx - &x;
            let delta = jr
                .lu()
                .solve(&(-&r))
                .ok_or(SsiError::NonConvergence {
                    iterations: iter,
                    residual: res,
                })?;
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..5 {
                let cand = &x + &delta * scale;
                let gc = g(&cand);
                let rc = max_abs_diff(gc.as_slice(), cand.as_slice());
                if rc < res || !res.is_finite() {
                    x = cand;
                    gx = gc;
                    res = rc;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                return Err(SsiError::NonConvergence {
                    iterations: iter,
                    residual: res,
                });
            }
        } else {
            x = gx;
            gx = g(&x);
            res = max_abs_diff(gx.as_slice(), x.as_slice());
        }
    }
    if res <= opts.tolerance {
        return Ok(x);
    }
    Err(SsiError::NonConvergence {
        iterations: opts.max_iterations,
        residual: res,
    })
}

/// One Symplectic Euler step: `q_new = q + h H_p(q_new, p)` solved
/// implicitly, then `p_new = p - h H_q(q_new, p)` explicitly.
pub fn symplectic_euler_step<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    opts: &ImplicitSolveOptions,
) -> Result<PhaseState> {
    opts.validate()?;
    if z.n() != field.dim() {
        return Err(SsiError::dims(field.dim(), z.n()));
    }
    let n = z.n();
    let q = DVector::from_column_slice(z.q().as_slice());
    let p = z.p().clone_owned();

    let state_at = |qc: &DVector<f64>| PhaseState::from_blocks(qc.as_slice(), p.as_slice());
    let g = |qc: &DVector<f64>| {
        let grad = field.gradient(&state_at(qc));
        &q + grad.rows(n, n) * h
    };
    let jac = |qc: &DVector<f64>| {
        // d(h H_p)/dq is the lower-left n x n block of the Hessian.
        let hess = field.hessian(&state_at(qc));
        hess.view((n, 0), (n, n)) * h
    };
    let q_new = solve_fixed_point(&q, &g, &jac, opts)?;

    let grad = field.gradient(&state_at(&q_new));
    let p_new = &p - grad.rows(0, n) * h;
    Ok(PhaseState::from_blocks(
        q_new.as_slice(),
        p_new.as_slice(),
    ))
}

/// One implicit midpoint step: `z_new = z + h f((z_new + z) / 2)` with
/// `f = J^{-1} grad H`.
pub fn implicit_midpoint_step<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    opts: &ImplicitSolveOptions,
) -> Result<PhaseState> {
    opts.validate()?;
    if z.n() != field.dim() {
        return Err(SsiError::dims(field.dim(), z.n()));
    }
    let z0 = z.as_vector().clone();
    let g = |zc: &DVector<f64>| {
        let mid = PhaseState::from_flat_unchecked((&z0 + zc) * 0.5);
        let f = apply_j_inv(&field.gradient(&mid));
        &z0 + f * h
    };
    let jac = |zc: &DVector<f64>| {
        let mid = PhaseState::from_flat_unchecked((&z0 + zc) * 0.5);
        let hess = field.hessian(&mid);
        // (h/2) J^{-1} Hess(mid)
        let dim = z0.len();
        let n = dim / 2;
        let mut out = DMatrix::zeros(dim, dim);
        for c in 0..dim {
            for r in 0..n {
                out[(r, c)] = 0.5 * h * hess[(n + r, c)];
                out[(n + r, c)] = -0.5 * h * hess[(r, c)];
            }
        }
        out
    };
    let z_new = solve_fixed_point(&z0, &g, &jac, opts)?;
    Ok(PhaseState::from_flat_unchecked(z_new))
}

/// One Stoermer-Verlet step for a separable Hamiltonian with unit mass
/// matrix: half kick, drift, half kick.
pub fn stormer_verlet_step<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
) -> Result<PhaseState> {
    let sep = field.separable_potential().ok_or_else(|| {
        SsiError::InvalidArgument(
            "Stoermer-Verlet requires a separable Hamiltonian with unit mass matrix".into(),
        )
    })?;
    if z.n() != field.dim() {
        return Err(SsiError::dims(field.dim(), z.n()));
    }
    let q = z.q().clone_owned();
    let p = z.p().clone_owned();
    let p_half = &p - sep.grad_v(q.as_slice()) * (0.5 * h);
    let q_new = &q + &p_half * h;
    let p_new = &p_half - sep.grad_v(q_new.as_slice()) * (0.5 * h);
    Ok(PhaseState::from_blocks(
        q_new.as_slice(),
        p_new.as_slice(),
    ))
}

/// High-precision approximation of the exact time-`h` flow:
/// `n_substeps` Stoermer-Verlet sub-steps of size `h / n_substeps`.
pub fn reference_flow<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    n_substeps: usize,
) -> Result<PhaseState> {
    if n_substeps == 0 {
        return Err(SsiError::InvalidArgument(
            "reference flow needs at least one substep".into(),
        ));
    }
    let sub = h / n_substeps as f64;
    let mut state = z.clone();
    for _ in 0..n_substeps {
        state = stormer_verlet_step(field, &state, sub)?;
    }
    Ok(state)
}

fn step_once<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
    h: f64,
    method: MethodTag,
    opts: &ImplicitSolveOptions,
) -> Result<PhaseState> {
    match method {
        MethodTag::SymplecticEuler => symplectic_euler_step(field, z, h, opts),
        MethodTag::ImplicitMidpoint => implicit_midpoint_step(field, z, h, opts),
        MethodTag::StormerVerlet => stormer_verlet_step(field, z, h),
    }
}

/// Integrate `steps` steps of the chosen method from `z0`.
pub fn integrate<F: HamiltonianField + ?Sized>(
    field: &F,
    z0: &PhaseState,
    h: f64,
    steps: usize,
    method: MethodTag,
    opts: &ImplicitSolveOptions,
    field_tag: &str,
) -> Result<TrajectoryRecord> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.clone());
    for step in 0..steps {
        let next = step_once(field, states.last().unwrap(), h, method, opts)
            .map_err(|e| SsiError::StepFailure {
                step,
                source: Box::new(e),
            })?;
        states.push(next);
    }
    Ok(TrajectoryRecord {
        states,
        h,
        t0: 0.0,
        method_tag: method,
        field_tag: field_tag.to_string(),
    })
}

/// As [`integrate`], but stops early once the max-norm of the state exceeds
/// `escape_threshold`. Returns the trajectory up to the stop together with
/// the escape step index, if any.
pub fn integrate_until_escape<F: HamiltonianField + ?Sized>(
    field: &F,
    z0: &PhaseState,
    h: f64,
    max_steps: usize,
    method: MethodTag,
    opts: &ImplicitSolveOptions,
    field_tag: &str,
    escape_threshold: f64,
) -> Result<(TrajectoryRecord, Option<usize>)> {
    let mut states = Vec::with_capacity(max_steps + 1);
    states.push(z0.clone());
    let mut escape = None;
    for step in 0..max_steps {
        let next = step_once(field, states.last().unwrap(), h, method, opts)
            .map_err(|e| SsiError::StepFailure {
                step,
                source: Box::new(e),
            })?;
        let out = !next.is_finite() || next.norm_inf() > escape_threshold;
        states.push(next);
        if out {
            escape = Some(step + 1);
            break;
        }
    }
    Ok((
        TrajectoryRecord {
            states,
            h,
            t0: 0.0,
            method_tag: method,
            field_tag: field_tag.to_string(),
        },
        escape,
    ))
}
