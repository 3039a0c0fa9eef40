//! Phase-space primitives and the analytic benchmark systems.
//!
//! Canonical coordinates are ordered `(q, p)`; gradients stack the `q`-block
//! first, and the symplectic pairing `J` acts as `(q, p) -> (-p, q)`.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsiError};

/// A point `z = (q, p)` of the `2n`-dimensional phase space.
///
/// Coordinates are stored flat, configuration block first, so kernel and
/// integrator hot loops can read them as a single slice.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState {
    coords: DVector<f64>,
    n: usize,
}

impl PhaseState {
    /// Build a state from configuration and momentum blocks of equal length.
    pub fn new(q: &[f64], p: &[f64]) -> Result<Self> {
        if q.is_empty() || q.len() != p.len() {
            return Err(SsiError::InvalidArgument(format!(
                "q and p must have identical length >= 1, got {} and {}",
                q.len(),
                p.len()
            )));
        }
        if q.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(SsiError::InvalidArgument(
                "phase-space coordinates must be finite".into(),
            ));
        }
        Ok(Self::from_blocks(q, p))
    }

    /// As [`PhaseState::new`] without the finiteness/shape checks. Used by
    /// integrator internals where intermediate states can grow unboundedly.
    pub fn from_blocks(q: &[f64], p: &[f64]) -> Self {
        debug_assert_eq!(q.len(), p.len());
        let mut coords = DVector::zeros(q.len() + p.len());
        coords.as_mut_slice()[..q.len()].copy_from_slice(q);
        coords.as_mut_slice()[q.len()..].copy_from_slice(p);
        Self {
            coords,
            n: q.len(),
        }
    }

    /// Reassemble from a flat `(q, p)` vector of even length.
    pub fn from_flat(coords: DVector<f64>) -> Result<Self> {
        if coords.len() == 0 || coords.len() % 2 != 0 {
            return Err(SsiError::InvalidArgument(format!(
                "flat phase vector must have positive even length, got {}",
                coords.len()
            )));
        }
        let n = coords.len() / 2;
        Ok(Self { coords, n })
    }

    pub(crate) fn from_flat_unchecked(coords: DVector<f64>) -> Self {
        let n = coords.len() / 2;
        Self { coords, n }
    }

    /// Configuration dimension `n`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Full phase-space dimension `2n`.
    pub fn phase_dim(&self) -> usize {
        2 * self.n
    }

    pub fn q(&self) -> DVectorView<'_, f64> {
        self.coords.rows(0, self.n)
    }

    pub fn p(&self) -> DVectorView<'_, f64> {
        self.coords.rows(self.n, self.n)
    }

    /// Flat `(q, p)` coordinates.
    pub fn as_slice(&self) -> &[f64] {
        self.coords.as_slice()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    /// Max-norm over all coordinates.
    pub fn norm_inf(&self) -> f64 {
        self.coords.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Componentwise midpoint `(self + other) / 2`.
    pub fn midpoint(&self, other: &PhaseState) -> PhaseState {
        debug_assert_eq!(self.n, other.n);
        PhaseState::from_flat_unchecked((&self.coords + &other.coords) * 0.5)
    }
}

/// Apply the symplectic pairing `J = (0, -I; I, 0)` to a flat `(q, p)` vector:
/// `(v_q, v_p) -> (-v_p, v_q)`.
pub fn apply_j(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    let mut out = DVector::zeros(v.len());
    for i in 0..n {
        out[i] = -v[n + i];
        out[n + i] = v[i];
    }
    out
}

/// Apply `J^{-1} = -J`: `(v_q, v_p) -> (v_p, -v_q)`.
pub fn apply_j_inv(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() / 2;
    let mut out = DVector::zeros(v.len());
    for i in 0..n {
        out[i] = v[n + i];
        out[n + i] = -v[i];
    }
    out
}

#[derive(Serialize, Deserialize)]
struct QpBlocks {
    q: Vec<f64>,
    p: Vec<f64>,
}

impl Serialize for PhaseState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        QpBlocks {
            q: self.q().iter().copied().collect(),
            p: self.p().iter().copied().collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PhaseState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let blocks = QpBlocks::deserialize(deserializer)?;
        PhaseState::new(&blocks.q, &blocks.p).map_err(serde::de::Error::custom)
    }
}

/// Evaluation interface for a scalar Hamiltonian.
///
/// `gradient` stacks the `q`-derivatives first; `hessian` is the full
/// `2n x 2n` second derivative in the same ordering.
pub trait HamiltonianField {
    /// Configuration dimension `n` (the phase space has dimension `2n`).
    fn dim(&self) -> usize;

    fn value(&self, z: &PhaseState) -> f64;

    fn gradient(&self, z: &PhaseState) -> DVector<f64>;

    fn hessian(&self, z: &PhaseState) -> DMatrix<f64>;

    /// For separable Hamiltonians `H = |p|^2/2 + V(q)` with unit mass matrix,
    /// exposes the potential gradient so leapfrog-style steppers apply.
    fn separable_potential(&self) -> Option<&dyn SeparablePotential> {
        None
    }
}

/// Potential part of a separable Hamiltonian `H(q, p) = |p|^2/2 + V(q)`.
pub trait SeparablePotential {
    fn grad_v(&self, q: &[f64]) -> DVector<f64>;
}

/// The Hamiltonian vector field `J^{-1} grad H(z)`, returned as the
/// `(q_dot, p_dot) = (H_p, -H_q)` velocity pair.
pub fn hamiltonian_vector_field<F: HamiltonianField + ?Sized>(
    field: &F,
    z: &PhaseState,
) -> Result<PhaseState> {
    if z.n() != field.dim() {
        return Err(SsiError::dims(field.dim(), z.n()));
    }
    let g = field.gradient(z);
    Ok(PhaseState::from_flat_unchecked(apply_j_inv(&g)))
}

/// Mathematical pendulum, `H(q, p) = p^2/2 + (1 - cos q)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PendulumSystem;

impl HamiltonianField for PendulumSystem {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, z: &PhaseState) -> f64 {
        let q = z.as_slice()[0];
        let p = z.as_slice()[1];
        0.5 * p * p + (1.0 - q.cos())
    }

    fn gradient(&self, z: &PhaseState) -> DVector<f64> {
        let q = z.as_slice()[0];
        let p = z.as_slice()[1];
        DVector::from_column_slice(&[q.sin(), p])
    }

    fn hessian(&self, z: &PhaseState) -> DMatrix<f64> {
        let q = z.as_slice()[0];
        DMatrix::from_row_slice(2, 2, &[q.cos(), 0.0, 0.0, 1.0])
    }

    fn separable_potential(&self) -> Option<&dyn SeparablePotential> {
        Some(self)
    }
}

impl SeparablePotential for PendulumSystem {
    fn grad_v(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&[q[0].sin()])
    }
}

/// Henon-Heiles system, `H = |p|^2/2 + |q|^2/2 + mu (q1^2 q2 - q2^3/3)`.
#[derive(Debug, Clone, Copy)]
pub struct HenonHeilesSystem {
    pub mu: f64,
}

impl HenonHeilesSystem {
    pub fn new(mu: f64) -> Self {
        Self { mu }
    }

    pub fn potential(&self, q: &[f64]) -> f64 {
        let (q1, q2) = (q[0], q[1]);
        0.5 * (q1 * q1 + q2 * q2) + self.mu * (q1 * q1 * q2 - q2 * q2 * q2 / 3.0)
    }
}

impl HamiltonianField for HenonHeilesSystem {
    fn dim(&self) -> usize {
        2
    }

    fn value(&self, z: &PhaseState) -> f64 {
        let s = z.as_slice();
        let (p1, p2) = (s[2], s[3]);
        0.5 * (p1 * p1 + p2 * p2) + self.potential(&s[..2])
    }

    fn gradient(&self, z: &PhaseState) -> DVector<f64> {
        let s = z.as_slice();
        let (q1, q2, p1, p2) = (s[0], s[1], s[2], s[3]);
        DVector::from_column_slice(&[
            q1 + 2.0 * self.mu * q1 * q2,
            q2 + self.mu * (q1 * q1 - q2 * q2),
            p1,
            p2,
        ])
    }

    fn hessian(&self, z: &PhaseState) -> DMatrix<f64> {
        let s = z.as_slice();
        let (q1, q2) = (s[0], s[1]);
        let mut h = DMatrix::zeros(4, 4);
        h[(0, 0)] = 1.0 + 2.0 * self.mu * q2;
        h[(0, 1)] = 2.0 * self.mu * q1;
        h[(1, 0)] = 2.0 * self.mu * q1;
        h[(1, 1)] = 1.0 - 2.0 * self.mu * q2;
        h[(2, 2)] = 1.0;
        h[(3, 3)] = 1.0;
        h
    }

    fn separable_potential(&self) -> Option<&dyn SeparablePotential> {
        Some(self)
    }
}

impl SeparablePotential for HenonHeilesSystem {
    fn grad_v(&self, q: &[f64]) -> DVector<f64> {
        let (q1, q2) = (q[0], q[1]);
        DVector::from_column_slice(&[
            q1 + 2.0 * self.mu * q1 * q2,
            q2 + self.mu * (q1 * q1 - q2 * q2),
        ])
    }
}

/// Largest energy below which Henon-Heiles level sets have a bounded
/// component: `1 / (6 mu^2)`.
pub fn henon_heiles_critical_energy(mu: f64) -> Result<f64> {
    if mu == 0.0 {
        return Err(SsiError::Domain(
            "critical energy is undefined for mu = 0".into(),
        ));
    }
    Ok(1.0 / (6.0 * mu * mu))
}

/// Isotropic harmonic oscillator `H = (|q|^2 + |p|^2) / 2` in `n` degrees of
/// freedom. Benchmark system; every quadratic-invariant check uses it.
#[derive(Debug, Clone, Copy)]
pub struct HarmonicOscillator {
    pub n: usize,
}

impl HamiltonianField for HarmonicOscillator {
    fn dim(&self) -> usize {
        self.n
    }

    fn value(&self, z: &PhaseState) -> f64 {
        0.5 * z.as_vector().norm_squared()
    }

    fn gradient(&self, z: &PhaseState) -> DVector<f64> {
        z.as_vector().clone()
    }

    fn hessian(&self, _z: &PhaseState) -> DMatrix<f64> {
        DMatrix::identity(2 * self.n, 2 * self.n)
    }

    fn separable_potential(&self) -> Option<&dyn SeparablePotential> {
        Some(self)
    }
}

impl SeparablePotential for HarmonicOscillator {
    fn grad_v(&self, q: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(q)
    }
}
