//! Gaussian-process regression of the inverse modified Hamiltonian, plus the
//! direct flow-map GP baseline.
//!
//! The training system stacks, for every flow observation `(y_j, ybar_j)`,
//! the gradient rows of the GP posterior mean evaluated at the integrator's
//! native point — `(qbar_j, p_j)` for Symplectic Euler, the midpoint
//! `(y_j + ybar_j) / 2` for the implicit midpoint rule — against the scaled
//! increments `J (ybar_j - y_j) / h`, and one normalization row pinning the
//! posterior mean at a reference point. The least-squares solution of that
//! system is the vector of node values `Hbar(Z)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsiError};
use crate::kernel::{
    factorize_regularized, rbf_eval_flat, rbf_grad1_flat, KernelParams, RegularizedGram,
};
use crate::phase::{apply_j, HamiltonianField, PhaseState};
use crate::sample::DomainBox;

/// Paired flow observations: `ybar_j` is the exact time-`h` flow of `y_j`.
#[derive(Debug, Clone)]
pub struct FlowDataset {
    pub y: Vec<PhaseState>,
    pub ybar: Vec<PhaseState>,
    pub h: f64,
}

impl FlowDataset {
    pub fn new(y: Vec<PhaseState>, ybar: Vec<PhaseState>, h: f64) -> Result<Self> {
        if y.is_empty() || y.len() != ybar.len() {
            return Err(SsiError::InvalidArgument(format!(
                "flow data needs matching nonempty input/output lists, got {} and {}",
                y.len(),
                ybar.len()
            )));
        }
        if !(h > 0.0) {
            return Err(SsiError::InvalidArgument(format!(
                "flow data step size must be positive, got {h}"
            )));
        }
        let n = y[0].n();
        for z in y.iter().chain(&ybar) {
            if z.n() != n {
                return Err(SsiError::dims(n, z.n()));
            }
        }
        Ok(Self { y, ybar, h })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n(&self) -> usize {
        self.y[0].n()
    }
}

/// Which symplectic method the learned Hamiltonian is adapted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegratorTag {
    SymplecticEuler,
    ImplicitMidpoint,
}

impl std::fmt::Display for IntegratorTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IntegratorTag::SymplecticEuler => f.write_str("symplectic_euler"),
            IntegratorTag::ImplicitMidpoint => f.write_str("implicit_midpoint"),
        }
    }
}

/// The Hamiltonian is defined up to a constant; the regression pins the
/// posterior mean to `value` at `point`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub point: PhaseState,
    pub value: f64,
}

impl Normalization {
    pub fn zero_at(point: PhaseState) -> Self {
        Self { point, value: 0.0 }
    }
}

fn se_evaluation_point(y: &PhaseState, ybar: &PhaseState) -> PhaseState {
    // New position, old momentum.
    PhaseState::from_blocks(ybar.q().as_slice(), y.p().as_slice())
}

fn mp_evaluation_point(y: &PhaseState, ybar: &PhaseState) -> PhaseState {
    y.midpoint(ybar)
}

fn assemble_with_gram(
    data: &FlowDataset,
    gram: &RegularizedGram,
    normalization: &Normalization,
    integrator: IntegratorTag,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = data.n();
    let d = 2 * n;
    let count = data.len();
    let node_count = gram.len();
    if gram.nodes()[0].n() != n {
        return Err(SsiError::dims(n, gram.nodes()[0].n()));
    }
    if normalization.point.n() != n {
        return Err(SsiError::dims(n, normalization.point.n()));
    }
    let rows = d * count + 1;
    let params = *gram.params();

    // Build B^T column by column so the regularized solve handles all
    // right-hand sides in one sweep; A = (solve(B^T))^T.
    let mut bt = DMatrix::zeros(node_count, rows);
    let mut b = DVector::zeros(rows);
    let mut grad = vec![0.0; d];
    for (j, (y, ybar)) in data.y.iter().zip(&data.ybar).enumerate() {
        let x = match integrator {
            IntegratorTag::SymplecticEuler => se_evaluation_point(y, ybar),
            IntegratorTag::ImplicitMidpoint => mp_evaluation_point(y, ybar),
        };
        for (i, node) in gram.nodes().iter().enumerate() {
            rbf_grad1_flat(x.as_slice(), node.as_slice(), &params, &mut grad);
            for (dd, &g) in grad.iter().enumerate() {
                bt[(i, d * j + dd)] = g;
            }
        }
        let increment = ybar.as_vector() - y.as_vector();
        let rhs = apply_j(&increment) / data.h;
        b.rows_mut(d * j, d).copy_from(&rhs);
    }
    for (i, node) in gram.nodes().iter().enumerate() {
        bt[(i, rows - 1)] = rbf_eval_flat(
            normalization.point.as_slice(),
            node.as_slice(),
            &params,
        );
    }
    b[rows - 1] = normalization.value;

    let a = gram.solve_mat(&bt).transpose();
    Ok((a, b))
}

/// Assemble the Symplectic Euler training system: `2n Ntilde + 1` equations
/// for `N` node values, gradient rows evaluated at `(qbar_j, p_j)`.
pub fn assemble_se_system(
    data: &FlowDataset,
    nodes: &[PhaseState],
    params: &KernelParams,
    sigma: f64,
    normalization: &Normalization,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let gram = factorize_regularized(nodes, params, sigma)?;
    assemble_with_gram(data, &gram, normalization, IntegratorTag::SymplecticEuler)
}

/// Assemble the implicit-midpoint training system; identical to the
/// Symplectic Euler system except gradient rows sit at the midpoints.
pub fn assemble_mp_system(
    data: &FlowDataset,
    nodes: &[PhaseState],
    params: &KernelParams,
    sigma: f64,
    normalization: &Normalization,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let gram = factorize_regularized(nodes, params, sigma)?;
    assemble_with_gram(data, &gram, normalization, IntegratorTag::ImplicitMidpoint)
}

/// Trained inverse-modified-Hamiltonian surrogate.
pub struct GpHamiltonianModel {
    gram: RegularizedGram,
    nodes_flat: Vec<f64>,
    node_values: DVector<f64>,
    weights: DVector<f64>,
    integrator: IntegratorTag,
    h: f64,
    normalization: Normalization,
    residual: f64,
    rank: usize,
    rank_deficient: bool,
}

fn flatten_nodes(nodes: &[PhaseState]) -> Vec<f64> {
    let mut flat = Vec::with_capacity(nodes.len() * nodes[0].phase_dim());
    for z in nodes {
        flat.extend_from_slice(z.as_slice());
    }
    flat
}

/// Escalate the regularization by x100 until the factorization succeeds,
/// up to 1e-7.
fn factorize_with_ladder(
    nodes: &[PhaseState],
    params: &KernelParams,
    sigma: f64,
) -> Result<RegularizedGram> {
    let mut sig = sigma;
    loop {
        match factorize_regularized(nodes, params, sig) {
            Ok(g) => return Ok(g),
            Err(err @ SsiError::Factorization { .. }) => {
                let next = if sig == 0.0 { 1e-13 } else { sig * 100.0 };
                if next > 1e-7 {
                    return Err(err);
                }
                sig = next;
            }
            Err(other) => return Err(other),
        }
    }
}

/// Solve the training system in the least-squares sense and package the
/// resulting node values as an evaluatable model.
pub fn train(
    data: &FlowDataset,
    nodes: &[PhaseState],
    params: &KernelParams,
    sigma: f64,
    integrator: IntegratorTag,
    normalization: &Normalization,
) -> Result<GpHamiltonianModel> {
    let gram = factorize_with_ladder(nodes, params, sigma)?;
    let (a, b) = assemble_with_gram(data, &gram, normalization, integrator)?;
    let (values, residual, rank) = solve_least_squares(&a, &b)?;
    let weights = gram.solve_vec(&values);
    let node_count = nodes.len();
    Ok(GpHamiltonianModel {
        nodes_flat: flatten_nodes(gram.nodes()),
        gram,
        node_values: values,
        weights,
        integrator,
        h: data.h,
        normalization: normalization.clone(),
        residual,
        rank,
        rank_deficient: rank < node_count,
    })
}

/// Minimum-norm least squares via Householder QR followed by an SVD of the
/// triangular factor (rank-revealing; normal equations are avoided).
fn solve_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64, usize)> {
    let qr = a.clone().qr();
    let r = qr.r();
    let c = qr.q().transpose() * b;
    let svd = r.svd(true, true);
    let smax = svd
        .singular_values
        .iter()
        .fold(0.0_f64, |m, &s| m.max(s));
    let eps = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let rank = svd.rank(eps);
    let values = svd
        .solve(&c, eps)
        .map_err(|e| SsiError::InvalidArgument(e.to_string()))?
        .column(0)
        .clone_owned();
    let residual = (a * &values - b).norm();
    Ok((values, residual, rank))
}

impl GpHamiltonianModel {
    /// Build a surrogate directly from prescribed node values (no training).
    pub fn from_node_values(
        nodes: &[PhaseState],
        node_values: &[f64],
        params: &KernelParams,
        sigma: f64,
        integrator: IntegratorTag,
        h: f64,
        normalization: Normalization,
    ) -> Result<Self> {
        if nodes.len() != node_values.len() {
            return Err(SsiError::dims(nodes.len(), node_values.len()));
        }
        if node_values.iter().any(|v| !v.is_finite()) {
            return Err(SsiError::InvalidArgument(
                "node values must be finite".into(),
            ));
        }
        let gram = factorize_regularized(nodes, params, sigma)?;
        let values = DVector::from_column_slice(node_values);
        let weights = gram.solve_vec(&values);
        Ok(Self {
            nodes_flat: flatten_nodes(gram.nodes()),
            gram,
            node_values: values,
            weights,
            integrator,
            h,
            normalization,
            residual: 0.0,
            rank: nodes.len(),
            rank_deficient: false,
        })
    }

    pub fn nodes(&self) -> &[PhaseState] {
        self.gram.nodes()
    }

    pub fn node_values(&self) -> &DVector<f64> {
        &self.node_values
    }

    pub fn params(&self) -> &KernelParams {
        self.gram.params()
    }

    pub fn sigma(&self) -> f64 {
        self.gram.sigma()
    }

    pub fn integrator(&self) -> IntegratorTag {
        self.integrator
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    /// Euclidean norm of the least-squares residual of the training system.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn rank_deficient(&self) -> bool {
        self.rank_deficient
    }

    /// Configuration dimension `n` of the phase space.
    pub fn n(&self) -> usize {
        self.gram.nodes()[0].n()
    }

    pub fn len(&self) -> usize {
        self.gram.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gram.is_empty()
    }

    /// Posterior mean `k(y, Z)^T (k(Z,Z) + sigma I)^{-1} Hbar(Z)`.
    pub fn gp_mean(&self, y: &PhaseState) -> f64 {
        let d = 2 * self.n();
        assert_eq!(y.phase_dim(), d, "phase dimension mismatch");
        let params = self.gram.params();
        let ys = y.as_slice();
        let mut acc = 0.0;
        for (i, node) in self.nodes_flat.chunks_exact(d).enumerate() {
            acc += self.weights[i] * rbf_eval_flat(ys, node, params);
        }
        acc
    }

    /// Closed-form gradient of [`GpHamiltonianModel::gp_mean`].
    pub fn gp_grad(&self, y: &PhaseState) -> DVector<f64> {
        let d = 2 * self.n();
        assert_eq!(y.phase_dim(), d, "phase dimension mismatch");
        let params = self.gram.params();
        let scale = -2.0 / (params.e * params.e);
        let ys = y.as_slice();
        let mut out = DVector::zeros(d);
        for (i, node) in self.nodes_flat.chunks_exact(d).enumerate() {
            let c = scale * self.weights[i] * rbf_eval_flat(ys, node, params);
            for dd in 0..d {
                out[dd] += c * (ys[dd] - node[dd]);
            }
        }
        out
    }

    /// Closed-form Hessian of [`GpHamiltonianModel::gp_mean`]; symmetric by
    /// construction.
    pub fn gp_hess(&self, y: &PhaseState) -> DMatrix<f64> {
        let d = 2 * self.n();
        assert_eq!(y.phase_dim(), d, "phase dimension mismatch");
        let params = self.gram.params();
        let inv_e2 = 1.0 / (params.e * params.e);
        let ys = y.as_slice();
        let mut out = DMatrix::zeros(d, d);
        for (i, node) in self.nodes_flat.chunks_exact(d).enumerate() {
            let k = rbf_eval_flat(ys, node, params);
            let c = self.weights[i] * k;
            for r in 0..d {
                let dr = ys[r] - node[r];
                for col in 0..=r {
                    let dc = ys[col] - node[col];
                    let mut v = 4.0 * inv_e2 * inv_e2 * dr * dc * c;
                    if r == col {
                        v -= 2.0 * inv_e2 * c;
                    }
                    out[(r, col)] += v;
                }
            }
        }
        for r in 0..d {
            for col in (r + 1)..d {
                out[(r, col)] = out[(col, r)];
            }
        }
        out
    }

    /// View the surrogate as a [`HamiltonianField`] for the integrators.
    pub fn as_field(&self) -> GpField<'_> {
        GpField { model: self }
    }

    pub fn to_json(&self) -> Result<String> {
        let dto = ModelDto {
            kernel: *self.gram.params(),
            sigma: self.gram.sigma(),
            integrator: self.integrator,
            h: self.h,
            normalization: self.normalization.clone(),
            n: self.n(),
            nodes: self.nodes_flat.clone(),
            node_values: self.node_values.as_slice().to_vec(),
            residual: self.residual,
            rank: self.rank,
            rank_deficient: self.rank_deficient,
        };
        Ok(serde_json::to_string_pretty(&dto)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let dto: ModelDto = serde_json::from_str(json)?;
        let d = 2 * dto.n;
        if d == 0 || dto.nodes.len() % d != 0 {
            return Err(SsiError::InvalidArgument(
                "model nodes are not a multiple of the phase dimension".into(),
            ));
        }
        let nodes: Vec<PhaseState> = dto
            .nodes
            .chunks_exact(d)
            .map(|c| PhaseState::new(&c[..dto.n], &c[dto.n..]))
            .collect::<Result<_>>()?;
        let gram = factorize_regularized(&nodes, &dto.kernel, dto.sigma)?;
        let values = DVector::from_column_slice(&dto.node_values);
        if values.len() != nodes.len() {
            return Err(SsiError::dims(nodes.len(), values.len()));
        }
        let weights = gram.solve_vec(&values);
        Ok(Self {
            nodes_flat: flatten_nodes(gram.nodes()),
            gram,
            node_values: values,
            weights,
            integrator: dto.integrator,
            h: dto.h,
            normalization: dto.normalization,
            residual: dto.residual,
            rank: dto.rank,
            rank_deficient: dto.rank_deficient,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelDto {
    kernel: KernelParams,
    sigma: f64,
    integrator: IntegratorTag,
    h: f64,
    normalization: Normalization,
    n: usize,
    /// Node coordinates, row-major `(q, p)` blocks.
    nodes: Vec<f64>,
    node_values: Vec<f64>,
    residual: f64,
    rank: usize,
    rank_deficient: bool,
}

/// [`HamiltonianField`] adapter delegating to the GP surrogate.
pub struct GpField<'a> {
    model: &'a GpHamiltonianModel,
}

impl HamiltonianField for GpField<'_> {
    fn dim(&self) -> usize {
        self.model.n()
    }

    fn value(&self, z: &PhaseState) -> f64 {
        self.model.gp_mean(z)
    }

    fn gradient(&self, z: &PhaseState) -> DVector<f64> {
        self.model.gp_grad(z)
    }

    fn hessian(&self, z: &PhaseState) -> DMatrix<f64> {
        self.model.gp_hess(z)
    }
}

/// Direct GP fit of the flow map, one posterior per output coordinate
/// (the structure-agnostic baseline).
pub struct FlowMapGpModel {
    nodes_flat: Vec<f64>,
    n: usize,
    params: KernelParams,
    noise_variance: f64,
    weights: Vec<DVector<f64>>,
    log_marginal: f64,
}

/// Hyperparameter grids for the baseline: `k_c` decades, length scales
/// log-spaced up to the domain diameter, and a few noise floors.
pub fn default_flowmap_grids(domain: &DomainBox) -> (Vec<KernelParams>, Vec<f64>) {
    let diam = domain.diameter();
    let mut params = Vec::new();
    for &k_c in &[0.1, 1.0, 10.0] {
        for i in 0..8 {
            let t = i as f64 / 7.0;
            let e = (diam / 50.0) * (50.0_f64).powf(t);
            params.push(KernelParams { k_c, e });
        }
    }
    (params, vec![1e-10, 1e-8, 1e-6])
}

/// Fit the flow-map baseline by grid search over the Gaussian log marginal
/// likelihood, shared across output coordinates.
pub fn fit_flowmap_baseline(
    data: &FlowDataset,
    param_grid: &[KernelParams],
    noise_grid: &[f64],
) -> Result<FlowMapGpModel> {
    if param_grid.is_empty() || noise_grid.is_empty() {
        return Err(SsiError::InvalidArgument(
            "hyperparameter grids must be nonempty".into(),
        ));
    }
    let d = 2 * data.n();
    let count = data.len();
    let targets: Vec<DVector<f64>> = (0..d)
        .map(|c| DVector::from_fn(count, |j, _| data.ybar[j].as_slice()[c]))
        .collect();

    let mut best: Option<(f64, KernelParams, f64, Vec<DVector<f64>>)> = None;
    for params in param_grid {
        for &noise in noise_grid {
            let gram = match factorize_regularized(&data.y, params, noise) {
                Ok(g) => g,
                Err(SsiError::Factorization { .. }) => continue,
                Err(e) => return Err(e),
            };
            let log_det = gram.log_det();
            let mut lml = -0.5 * d as f64 * (log_det + count as f64 * (2.0 * std::f64::consts::PI).ln());
            let mut weights = Vec::with_capacity(d);
            for t in &targets {
                let alpha = gram.solve_vec(t);
                lml -= 0.5 * t.dot(&alpha);
                weights.push(alpha);
            }
            if best.as_ref().is_none_or(|(b, ..)| lml > *b) {
                best = Some((lml, *params, noise, weights));
            }
        }
    }
    let (log_marginal, params, noise_variance, weights) = best.ok_or_else(|| {
        SsiError::Domain("all hyperparameter candidates were numerically indefinite".into())
    })?;
    Ok(FlowMapGpModel {
        nodes_flat: flatten_nodes(&data.y),
        n: data.n(),
        params,
        noise_variance,
        weights,
        log_marginal,
    })
}

impl FlowMapGpModel {
    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Standard deviation of the fitted observation noise.
    pub fn noise_level(&self) -> f64 {
        self.noise_variance.sqrt()
    }

    pub fn log_marginal(&self) -> f64 {
        self.log_marginal
    }
}

/// Posterior-mean prediction of the flow map, coordinate by coordinate.
pub fn predict_flowmap(model: &FlowMapGpModel, z: &PhaseState) -> PhaseState {
    let d = 2 * model.n;
    assert_eq!(z.phase_dim(), d, "phase dimension mismatch");
    let zs = z.as_slice();
    let count = model.nodes_flat.len() / d;
    let mut kvec = DVector::zeros(count);
    for (i, node) in model.nodes_flat.chunks_exact(d).enumerate() {
        kvec[i] = rbf_eval_flat(zs, node, &model.params);
    }
    let mut out = DVector::zeros(d);
    for c in 0..d {
        out[c] = model.weights[c].dot(&kvec);
    }
    PhaseState::from_flat_unchecked(out)
}

/// Iterate the learned flow map to produce a baseline trajectory.
pub fn iterate_flowmap(model: &FlowMapGpModel, z0: &PhaseState, steps: usize) -> Vec<PhaseState> {
    let mut states = Vec::with_capacity(steps + 1);
    states.push(z0.clone());
    for _ in 0..steps {
        let next = predict_flowmap(model, states.last().unwrap());
        states.push(next);
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn state(q: f64, p: f64) -> PhaseState {
        PhaseState::new(&[q], &[p]).unwrap()
    }

    fn params(k_c: f64, e: f64) -> KernelParams {
        KernelParams::new(k_c, e).unwrap()
    }

    fn toy_dataset() -> FlowDataset {
        let y = vec![state(0.0, 0.1), state(0.5, -0.2), state(-0.4, 0.3)];
        let ybar = vec![state(0.03, 0.09), state(0.44, -0.25), state(-0.31, 0.34)];
        FlowDataset::new(y, ybar, 0.3).unwrap()
    }

    #[test]
    fn system_shapes_count_rows() {
        let data = toy_dataset();
        let nodes = data.y.clone();
        let norm = Normalization::zero_at(data.y[0].clone());
        let (a, b) =
            assemble_se_system(&data, &nodes, &params(1.0, 2.0), 1e-13, &norm).unwrap();
        assert_eq!(a.nrows(), 2 * 3 + 1);
        assert_eq!(a.ncols(), 3);
        assert_eq!(b.len(), 7);

        let (a, _) =
            assemble_mp_system(&data, &nodes, &params(1.0, 2.0), 1e-13, &norm).unwrap();
        assert_eq!(a.nrows(), 7);
    }

    #[test]
    fn fixed_point_datum_gives_zero_rhs_block() {
        let z = state(0.2, -0.1);
        let data = FlowDataset::new(vec![z.clone()], vec![z.clone()], 0.3).unwrap();
        let norm = Normalization {
            point: z.clone(),
            value: 0.7,
        };
        let (_, b) =
            assemble_se_system(&data, &[z], &params(1.0, 2.0), 1e-13, &norm).unwrap();
        assert_eq!(b[0], 0.0);
        assert_eq!(b[1], 0.0);
        assert_eq!(b[2], 0.7);
    }

    #[test]
    fn midpoint_rows_are_symmetric_under_pair_swap() {
        let pr = params(1.0, 2.0);
        let nodes = vec![state(0.0, 0.0), state(0.4, 0.2)];
        let norm = Normalization::zero_at(nodes[0].clone());
        let y = state(0.1, -0.2);
        let ybar = state(0.3, 0.1);
        let fwd = FlowDataset::new(vec![y.clone()], vec![ybar.clone()], 0.3).unwrap();
        let rev = FlowDataset::new(vec![ybar], vec![y], 0.3).unwrap();
        let (a1, b1) = assemble_mp_system(&fwd, &nodes, &pr, 1e-13, &norm).unwrap();
        let (a2, b2) = assemble_mp_system(&rev, &nodes, &pr, 1e-13, &norm).unwrap();
        assert_relative_eq!(a1, a2, max_relative = 1e-14);
        assert_relative_eq!(b1.rows(0, 2), -b2.rows(0, 2), max_relative = 1e-14);
    }

    #[test]
    fn single_fixed_point_datum_trains_to_zero() {
        let z = state(0.0, 0.0);
        let data = FlowDataset::new(vec![z.clone()], vec![z.clone()], 0.3).unwrap();
        let norm = Normalization::zero_at(z.clone());
        let model = train(
            &data,
            &[z],
            &params(1.0, 2.0),
            1e-13,
            IntegratorTag::SymplecticEuler,
            &norm,
        )
        .unwrap();
        assert!(model.node_values().norm() < 1e-12);
        assert!(model.gp_mean(&state(0.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn single_node_interpolates_its_value() {
        let z = state(0.3, -0.4);
        let model = GpHamiltonianModel::from_node_values(
            &[z.clone()],
            &[2.5],
            &params(1.0, 2.0),
            0.0,
            IntegratorTag::SymplecticEuler,
            0.3,
            Normalization::zero_at(z.clone()),
        )
        .unwrap();
        assert_relative_eq!(model.gp_mean(&z), 2.5, max_relative = 1e-14);
    }

    #[test]
    fn zero_node_values_evaluate_to_zero_everywhere() {
        let nodes = vec![state(0.0, 0.0), state(1.0, 0.5), state(-0.5, 0.2)];
        let model = GpHamiltonianModel::from_node_values(
            &nodes,
            &[0.0, 0.0, 0.0],
            &params(1.0, 2.0),
            1e-13,
            IntegratorTag::SymplecticEuler,
            0.3,
            Normalization::zero_at(nodes[0].clone()),
        )
        .unwrap();
        let probe = state(0.37, -0.12);
        assert_eq!(model.gp_mean(&probe), 0.0);
        assert_eq!(model.gp_grad(&probe).norm(), 0.0);
        assert_eq!(model.gp_hess(&probe).norm(), 0.0);
    }

    #[test]
    fn gp_derivatives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(23);
        let nodes: Vec<PhaseState> = (0..12)
            .map(|_| state(rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0)))
            .collect();
        let values: Vec<f64> = nodes
            .iter()
            .map(|z| z.as_slice()[0].sin() + 0.5 * z.as_slice()[1].powi(2))
            .collect();
        let model = GpHamiltonianModel::from_node_values(
            &nodes,
            &values,
            &params(1.0, 1.5),
            1e-13,
            IntegratorTag::SymplecticEuler,
            0.3,
            Normalization::zero_at(nodes[0].clone()),
        )
        .unwrap();

        let eps = 1e-6;
        for _ in 0..100 {
            let z = state(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let g = model.gp_grad(&z);
            for dd in 0..2 {
                let mut hi = z.as_slice().to_vec();
                let mut lo = hi.clone();
                hi[dd] += eps;
                lo[dd] -= eps;
                let fd = (model.gp_mean(&PhaseState::new(&hi[..1], &hi[1..]).unwrap())
                    - model.gp_mean(&PhaseState::new(&lo[..1], &lo[1..]).unwrap()))
                    / (2.0 * eps);
                assert_relative_eq!(g[dd], fd, max_relative = 1e-6, epsilon = 1e-9);
            }
        }

        let eps = 1e-5;
        for _ in 0..25 {
            let z = state(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let hess = model.gp_hess(&z);
            assert_eq!(hess[(0, 1)], hess[(1, 0)]);
            for dd in 0..2 {
                let mut hi = z.as_slice().to_vec();
                let mut lo = hi.clone();
                hi[dd] += eps;
                lo[dd] -= eps;
                let ghi = model.gp_grad(&PhaseState::new(&hi[..1], &hi[1..]).unwrap());
                let glo = model.gp_grad(&PhaseState::new(&lo[..1], &lo[1..]).unwrap());
                for r in 0..2 {
                    let fd = (ghi[r] - glo[r]) / (2.0 * eps);
                    assert_relative_eq!(hess[(r, dd)], fd, max_relative = 1e-5, epsilon = 1e-8);
                }
            }
        }
    }

    #[test]
    fn far_field_gradient_decays() {
        let nodes = vec![state(0.0, 0.0), state(0.5, 0.1)];
        let model = GpHamiltonianModel::from_node_values(
            &nodes,
            &[1.0, -2.0],
            &params(1.0, 1.0),
            1e-13,
            IntegratorTag::SymplecticEuler,
            0.3,
            Normalization::zero_at(nodes[0].clone()),
        )
        .unwrap();
        let far = state(40.0, 0.0);
        assert!(model.gp_grad(&far).norm() < 1e-12 * model.node_values().norm());
    }

    #[test]
    fn field_adapter_delegates_bitwise() {
        let nodes = vec![state(0.1, 0.2), state(-0.3, 0.4)];
        let model = GpHamiltonianModel::from_node_values(
            &nodes,
            &[0.7, -0.2],
            &params(1.0, 2.0),
            1e-13,
            IntegratorTag::SymplecticEuler,
            0.3,
            Normalization::zero_at(nodes[0].clone()),
        )
        .unwrap();
        let field = model.as_field();
        let z = state(0.05, -0.15);
        assert_eq!(field.value(&z), model.gp_mean(&z));
        assert_eq!(field.gradient(&z), model.gp_grad(&z));
        assert_eq!(field.hessian(&z), model.gp_hess(&z));
        assert_eq!(field.dim(), 1);
    }

    #[test]
    fn json_roundtrip_preserves_evaluation() {
        let data = toy_dataset();
        let norm = Normalization::zero_at(data.y[0].clone());
        let model = train(
            &data,
            &data.y.clone(),
            &params(1.0, 2.0),
            1e-13,
            IntegratorTag::SymplecticEuler,
            &norm,
        )
        .unwrap();
        let json = model.to_json().unwrap();
        let back = GpHamiltonianModel::from_json(&json).unwrap();
        let probe = state(0.21, 0.11);
        assert_eq!(model.gp_mean(&probe).to_bits(), back.gp_mean(&probe).to_bits());
        assert_eq!(model.residual(), back.residual());
        assert_eq!(model.integrator(), back.integrator());
    }

    #[test]
    fn flowmap_baseline_matches_dense_solve_oracle() {
        let data = toy_dataset();
        let pr = params(1.0, 2.0);
        let noise = 1e-10;
        let model = fit_flowmap_baseline(&data, &[pr], &[noise]).unwrap();

        // Independent dense solve: explicitly invert K + noise I.
        let k = crate::kernel::gram_matrix(&data.y, &pr).unwrap()
            + DMatrix::<f64>::identity(3, 3) * noise;
        let kinv = k.try_inverse().unwrap();
        let probe = state(0.2, 0.05);
        let kvec = DVector::from_fn(3, |i, _| {
            rbf_eval_flat(probe.as_slice(), data.y[i].as_slice(), &pr)
        });
        let predicted = predict_flowmap(&model, &probe);
        for c in 0..2 {
            let t = DVector::from_fn(3, |j, _| data.ybar[j].as_slice()[c]);
            let expected = kvec.dot(&(&kinv * &t));
            assert_relative_eq!(predicted.as_slice()[c], expected, epsilon = 1e-10);
        }
    }

    #[test]
    fn flowmap_baseline_reproduces_training_points() {
        let data = toy_dataset();
        let (grid, noises) =
            default_flowmap_grids(&DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap());
        let model = fit_flowmap_baseline(&data, &grid, &noises).unwrap();
        for (y, ybar) in data.y.iter().zip(&data.ybar) {
            let pred = predict_flowmap(&model, y);
            for c in 0..2 {
                assert!(
                    (pred.as_slice()[c] - ybar.as_slice()[c]).abs() <= 3.0 * model.noise_level(),
                    "training point not reproduced within the fitted noise level"
                );
            }
        }

        // Far outside the data the posterior falls back to the zero prior.
        let far = state(500.0, 500.0);
        assert!(predict_flowmap(&model, &far).norm_inf() < 1e-6);
    }

    #[test]
    fn empty_grids_are_rejected() {
        let data = toy_dataset();
        assert!(fit_flowmap_baseline(&data, &[], &[1e-8]).is_err());
        assert!(fit_flowmap_baseline(&data, &[params(1.0, 1.0)], &[]).is_err());
    }
}
