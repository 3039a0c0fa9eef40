//! Radial-basis covariance function, its derivative tower, and regularized
//! symmetric solves.
//!
//! The kernel is `k(x, y) = k_c exp(-|x - y|^2 / e^2)`. Derivatives are coded
//! in closed form; finite differences appear only as test oracles.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsiError};
use crate::phase::PhaseState;

/// Signal scale `k_c` and length scale `e` of the RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub k_c: f64,
    pub e: f64,
}

impl KernelParams {
    pub fn new(k_c: f64, e: f64) -> Result<Self> {
        if !(k_c > 0.0) || !(e > 0.0) {
            return Err(SsiError::InvalidArgument(format!(
                "kernel parameters must be positive, got k_c = {k_c}, e = {e}"
            )));
        }
        Ok(Self { k_c, e })
    }
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(SsiError::dims(x.len(), y.len()));
    }
    Ok(())
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        let d = a - b;
        s += d * d;
    }
    s
}

/// `k(x, y) = k_c exp(-|x - y|^2 / e^2)`.
pub fn rbf_eval(x: &PhaseState, y: &PhaseState, params: &KernelParams) -> Result<f64> {
    check_dims(x.as_slice(), y.as_slice())?;
    Ok(rbf_eval_flat(x.as_slice(), y.as_slice(), params))
}

/// Gradient of `k` with respect to its first argument:
/// `-(2 / e^2) (x - y) k(x, y)`.
pub fn rbf_grad1(x: &PhaseState, y: &PhaseState, params: &KernelParams) -> Result<DVector<f64>> {
    check_dims(x.as_slice(), y.as_slice())?;
    let mut out = DVector::zeros(x.phase_dim());
    rbf_grad1_flat(x.as_slice(), y.as_slice(), params, out.as_mut_slice());
    Ok(out)
}

/// Second derivative of `k` with respect to its first argument:
/// `[(4 / e^4)(x - y)(x - y)^T - (2 / e^2) I] k(x, y)`.
pub fn rbf_hess1(x: &PhaseState, y: &PhaseState, params: &KernelParams) -> Result<DMatrix<f64>> {
    check_dims(x.as_slice(), y.as_slice())?;
    let d = x.phase_dim();
    let xs = x.as_slice();
    let ys = y.as_slice();
    let k = rbf_eval_flat(xs, ys, params);
    let inv_e2 = 1.0 / (params.e * params.e);
    let mut out = DMatrix::zeros(d, d);
    for i in 0..d {
        let di = xs[i] - ys[i];
        for j in 0..=i {
            let dj = xs[j] - ys[j];
            let mut v = 4.0 * inv_e2 * inv_e2 * di * dj * k;
            if i == j {
                v -= 2.0 * inv_e2 * k;
            }
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

pub(crate) fn rbf_eval_flat(x: &[f64], y: &[f64], params: &KernelParams) -> f64 {
    params.k_c * (-sq_dist(x, y) / (params.e * params.e)).exp()
}

pub(crate) fn rbf_grad1_flat(x: &[f64], y: &[f64], params: &KernelParams, out: &mut [f64]) {
    let k = rbf_eval_flat(x, y, params);
    let c = -2.0 / (params.e * params.e) * k;
    for (o, (a, b)) in out.iter_mut().zip(x.iter().zip(y)) {
        *o = c * (a - b);
    }
}

/// Covariance matrix `k(Z, Z)`. Symmetric by construction (the upper triangle
/// is mirrored), with diagonal exactly `k_c`.
pub fn gram_matrix(nodes: &[PhaseState], params: &KernelParams) -> Result<DMatrix<f64>> {
    if nodes.is_empty() {
        return Err(SsiError::Domain("gram matrix of an empty node set".into()));
    }
    let dim = nodes[0].phase_dim();
    for z in nodes {
        if z.phase_dim() != dim {
            return Err(SsiError::dims(dim, z.phase_dim()));
        }
    }
    let n = nodes.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = params.k_c;
        for j in 0..i {
            let v = rbf_eval_flat(nodes[i].as_slice(), nodes[j].as_slice(), params);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Cholesky factorization of `k(Z, Z) + sigma I`, the regularized covariance
/// used wherever a multiplication by the inverse covariance is required.
pub struct RegularizedGram {
    nodes: Vec<PhaseState>,
    params: KernelParams,
    sigma: f64,
    chol: Cholesky<f64, Dyn>,
}

impl RegularizedGram {
    pub fn nodes(&self) -> &[PhaseState] {
        &self.nodes
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Solve `(k(Z,Z) + sigma I) x = rhs` for a single right-hand side.
    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// Solve with a matrix of right-hand sides (one per column).
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    /// `log det(k(Z,Z) + sigma I)` from the Cholesky diagonal.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        let mut acc = 0.0;
        for i in 0..self.nodes.len() {
            acc += l[(i, i)].ln();
        }
        2.0 * acc
    }
}

/// Factorize `k(Z, Z) + sigma I`. A failure reports the first non-positive
/// pivot so the caller can retry with a larger `sigma`.
pub fn factorize_regularized(
    nodes: &[PhaseState],
    params: &KernelParams,
    sigma: f64,
) -> Result<RegularizedGram> {
    if sigma < 0.0 {
        return Err(SsiError::InvalidArgument(format!(
            "regularization must be nonnegative, got {sigma}"
        )));
    }
    let mut k = gram_matrix(nodes, params)?;
    for i in 0..nodes.len() {
        k[(i, i)] += sigma;
    }
    match Cholesky::new(k.clone()) {
        Some(chol) => Ok(RegularizedGram {
            nodes: nodes.to_vec(),
            params: *params,
            sigma,
            chol,
        }),
        None => {
            let (pivot, value) = first_bad_pivot(&k);
            Err(SsiError::Factorization { pivot, value })
        }
    }
}

/// Locate the first non-positive pivot of a failed Cholesky factorization.
/// Only runs on the error path.
fn first_bad_pivot(m: &DMatrix<f64>) -> (usize, f64) {
    let n = m.nrows();
    let mut a = m.clone();
    for j in 0..n {
        let d = a[(j, j)];
        if !(d > 0.0) || !d.is_finite() {
            return (j, d);
        }
        let root = d.sqrt();
        for i in (j + 1)..n {
            a[(i, j)] /= root;
        }
        for kcol in (j + 1)..n {
            for i in kcol..n {
                let v = a[(i, j)] * a[(kcol, j)];
                a[(i, kcol)] -= v;
            }
        }
    }
    (n - 1, a[(n - 1, n - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn params(k_c: f64, e: f64) -> KernelParams {
        KernelParams::new(k_c, e).unwrap()
    }

    fn random_state(rng: &mut StdRng, n: usize, scale: f64) -> PhaseState {
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        PhaseState::new(&q, &p).unwrap()
    }

    #[test]
    fn eval_matches_closed_form() {
        let x = PhaseState::new(&[0.0], &[0.0]).unwrap();
        assert_eq!(rbf_eval(&x, &x, &params(1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(rbf_eval(&x, &x, &params(3.0, 1.0)).unwrap(), 3.0);

        // |x - y|^2 = 4 with e = 2 forces exp(-1).
        let y = PhaseState::new(&[2.0], &[0.0]).unwrap();
        assert_relative_eq!(
            rbf_eval(&x, &y, &params(1.0, 2.0)).unwrap(),
            (-1.0_f64).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn grad_is_zero_at_coincident_points_and_antisymmetric() {
        let mut rng = StdRng::seed_from_u64(7);
        let pr = params(1.3, 1.7);
        let x = random_state(&mut rng, 2, 1.0);
        assert_eq!(rbf_grad1(&x, &x, &pr).unwrap().norm(), 0.0);
        let y = random_state(&mut rng, 2, 1.0);
        let gxy = rbf_grad1(&x, &y, &pr).unwrap();
        let gyx = rbf_grad1(&y, &x, &pr).unwrap();
        assert_relative_eq!(gxy, -gyx, max_relative = 1e-14);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let pr = params(0.8, 1.4);
        let eps = 1e-6;
        for _ in 0..100 {
            let x = random_state(&mut rng, 2, 1.5);
            let y = random_state(&mut rng, 2, 1.5);
            let g = rbf_grad1(&x, &y, &pr).unwrap();
            for d in 0..x.phase_dim() {
                let mut hi = x.as_slice().to_vec();
                let mut lo = hi.clone();
                hi[d] += eps;
                lo[d] -= eps;
                let fd = (rbf_eval_flat(&hi, y.as_slice(), &pr)
                    - rbf_eval_flat(&lo, y.as_slice(), &pr))
                    / (2.0 * eps);
                assert_relative_eq!(g[d], fd, max_relative = 1e-7, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn hess_matches_finite_differences_of_grad() {
        let mut rng = StdRng::seed_from_u64(13);
        let pr = params(1.0, 2.0);
        let eps = 1e-5;
        for _ in 0..50 {
            let x = random_state(&mut rng, 1, 2.0);
            let y = random_state(&mut rng, 1, 2.0);
            let h = rbf_hess1(&x, &y, &pr).unwrap();
            for d in 0..x.phase_dim() {
                let mut hi = x.as_slice().to_vec();
                let mut lo = hi.clone();
                hi[d] += eps;
                lo[d] -= eps;
                let mut ghi = vec![0.0; 2];
                let mut glo = vec![0.0; 2];
                rbf_grad1_flat(&hi, y.as_slice(), &pr, &mut ghi);
                rbf_grad1_flat(&lo, y.as_slice(), &pr, &mut glo);
                for r in 0..x.phase_dim() {
                    let fd = (ghi[r] - glo[r]) / (2.0 * eps);
                    assert_relative_eq!(h[(r, d)], fd, max_relative = 1e-6, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn hess_at_coincident_points() {
        let x = PhaseState::new(&[0.3], &[-0.2]).unwrap();
        let pr = params(1.0, 2.0);
        let h = rbf_hess1(&x, &x, &pr).unwrap();
        // -(2/e^2) I, trace -(2/4) * 2 = -1 for 2n = 2.
        assert_relative_eq!(h[(0, 0)], -0.5, max_relative = 1e-15);
        assert_relative_eq!(h[(1, 1)], -0.5, max_relative = 1e-15);
        assert_eq!(h[(0, 1)], 0.0);
        assert_relative_eq!(h.trace(), -1.0, max_relative = 1e-15);
    }

    #[test]
    fn gram_structure() {
        let pr = params(2.5, 1.0);
        let single = vec![PhaseState::new(&[0.0], &[0.0]).unwrap()];
        let k1 = gram_matrix(&single, &pr).unwrap();
        assert_eq!(k1.nrows(), 1);
        assert_eq!(k1[(0, 0)], 2.5);

        // Collinear equally spaced nodes give a Toeplitz gram.
        let nodes: Vec<PhaseState> = (0..3)
            .map(|i| PhaseState::new(&[i as f64 * 0.5], &[0.0]).unwrap())
            .collect();
        let k = gram_matrix(&nodes, &pr).unwrap();
        assert_eq!(k[(0, 1)], k[(1, 2)]);
        assert_eq!(k[(0, 0)], k[(1, 1)]);
        assert_eq!(k, k.transpose());
        assert!(k.iter().all(|&v| v > 0.0 && v <= 2.5));

        assert!(gram_matrix(&[], &pr).is_err());
    }

    #[test]
    fn factorization_solve_roundtrip() {
        let pr = params(1.0, 2.0);
        let single = vec![PhaseState::new(&[0.0], &[0.0]).unwrap()];
        let g = factorize_regularized(&single, &pr, 0.0).unwrap();
        let rhs = DVector::from_column_slice(&[2.0]);
        assert_relative_eq!(g.solve_vec(&rhs)[0], 2.0, max_relative = 1e-15);

        let mut rng = StdRng::seed_from_u64(17);
        let nodes: Vec<PhaseState> = (0..40).map(|_| random_state(&mut rng, 1, 3.0)).collect();
        let g = factorize_regularized(&nodes, &pr, 1e-13).unwrap();
        let k = gram_matrix(&nodes, &pr).unwrap()
            + DMatrix::<f64>::identity(40, 40) * 1e-13;
        let v = DVector::from_fn(40, |i, _| (i as f64 * 0.37).sin());
        let back = g.solve_vec(&(&k * &v));
        assert_relative_eq!(back, v, max_relative = 1e-8);
    }

    #[test]
    fn factorization_reports_failing_pivot() {
        // Duplicate nodes make the unregularized gram exactly singular.
        let z = PhaseState::new(&[0.1], &[0.2]).unwrap();
        let nodes = vec![z.clone(), z.clone(), z];
        match factorize_regularized(&nodes, &params(1.0, 1.0), 0.0) {
            Err(SsiError::Factorization { pivot, .. }) => assert!(pivot > 0),
            other => panic!("expected factorization failure, got {other:?}"),
        }
    }

    #[test]
    fn kernel_decreases_with_distance() {
        let pr = params(1.0, 1.5);
        let origin = PhaseState::new(&[0.0], &[0.0]).unwrap();
        let mut last = f64::INFINITY;
        for i in 1..30 {
            let y = PhaseState::new(&[i as f64 * 0.1], &[0.0]).unwrap();
            let v = rbf_eval(&origin, &y, &pr).unwrap();
            assert!(v < last);
            last = v;
        }
    }
}
