//! Quasi-random training sets, uniform evaluation meshes, and flow-data
//! synthesis.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsiError};
use crate::gp::FlowDataset;
use crate::integrate::reference_flow;
use crate::phase::{HamiltonianField, PhaseState};

/// Axis-aligned box with per-dimension bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DomainBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(SsiError::InvalidArgument(
                "box bounds must be nonempty and of equal length".into(),
            ));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !(lo < hi) {
                return Err(SsiError::InvalidArgument(format!(
                    "box bound violated: {lo} >= {hi}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Euclidean length of the main diagonal.
    pub fn diameter(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        DomainBox::new(self.lower.clone(), self.upper.clone()).map(|_| ())
    }
}

/// Uniform tensor grid over a box, endpoints inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    #[serde(rename = "box")]
    pub domain: DomainBox,
    pub points_per_axis: Vec<usize>,
}

impl MeshSpec {
    pub fn new(domain: DomainBox, points_per_axis: Vec<usize>) -> Result<Self> {
        let spec = Self {
            domain,
            points_per_axis,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        if self.points_per_axis.len() != self.domain.dim() {
            return Err(SsiError::dims(
                self.domain.dim(),
                self.points_per_axis.len(),
            ));
        }
        if self.points_per_axis.iter().any(|&m| m < 2) {
            return Err(SsiError::InvalidArgument(
                "a mesh needs at least two points per axis".into(),
            ));
        }
        Ok(())
    }

    pub fn point_count(&self) -> usize {
        self.points_per_axis.iter().product()
    }
}

const HALTON_BASES: [u64; 6] = [2, 3, 5, 7, 11, 13];

/// Van der Corput radical inverse of `index` in the given base.
fn radical_inverse(base: u64, mut index: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut factor = inv;
    let mut result = 0.0;
    while index > 0 {
        result += (index % base) as f64 * factor;
        index /= base;
        factor *= inv;
    }
    result
}

/// First `count` points of the Halton sequence in prime bases 2, 3, 5, ...,
/// mapped affinely into `domain`. Indexing starts at `start_index`; index 0
/// is the all-zeros point and is skipped by default.
pub fn halton_sequence_from(
    dim: usize,
    count: usize,
    domain: &DomainBox,
    start_index: u64,
) -> Result<Vec<DVector<f64>>> {
    if dim == 0 || dim > HALTON_BASES.len() {
        return Err(SsiError::InvalidArgument(format!(
            "Halton sequence supports dimensions 1..=6, got {dim}"
        )));
    }
    if count == 0 {
        return Err(SsiError::InvalidArgument("count must be >= 1".into()));
    }
    if domain.dim() != dim {
        return Err(SsiError::dims(dim, domain.dim()));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let idx = start_index + i;
        let mut x = DVector::zeros(dim);
        for (d, &base) in HALTON_BASES[..dim].iter().enumerate() {
            let u = radical_inverse(base, idx);
            x[d] = domain.lower[d] + u * (domain.upper[d] - domain.lower[d]);
        }
        points.push(x);
    }
    Ok(points)
}

/// [`halton_sequence_from`] with the default start index 1.
pub fn halton_sequence(dim: usize, count: usize, domain: &DomainBox) -> Result<Vec<DVector<f64>>> {
    halton_sequence_from(dim, count, domain, 1)
}

/// Halton points interpreted as phase-space states (first half `q`, second
/// half `p`). Requires an even dimension.
pub fn halton_phase_states(
    count: usize,
    domain: &DomainBox,
    start_index: u64,
) -> Result<Vec<PhaseState>> {
    let dim = domain.dim();
    if dim % 2 != 0 {
        return Err(SsiError::InvalidArgument(format!(
            "phase-space sampling needs an even dimension, got {dim}"
        )));
    }
    let raw = halton_sequence_from(dim, count, domain, start_index)?;
    Ok(raw
        .into_iter()
        .map(PhaseState::from_flat_unchecked)
        .collect())
}

/// Tensor-product grid with inclusive endpoints, row-major enumeration
/// (last axis fastest).
pub fn uniform_grid(domain: &DomainBox, points_per_axis: &[usize]) -> Result<Vec<DVector<f64>>> {
    domain.validate()?;
    if points_per_axis.len() != domain.dim() {
        return Err(SsiError::dims(domain.dim(), points_per_axis.len()));
    }
    if points_per_axis.iter().any(|&m| m < 2) {
        return Err(SsiError::InvalidArgument(
            "a grid needs at least two points per axis".into(),
        ));
    }
    let dim = domain.dim();
    let total: usize = points_per_axis.iter().product();
    let mut points = Vec::with_capacity(total);
    let mut index = vec![0usize; dim];
    loop {
        let mut x = DVector::zeros(dim);
        for d in 0..dim {
            let m = points_per_axis[d];
            let t = index[d] as f64 / (m - 1) as f64;
            x[d] = domain.lower[d] + t * (domain.upper[d] - domain.lower[d]);
        }
        points.push(x);
        let mut d = dim;
        loop {
            if d == 0 {
                return Ok(points);
            }
            d -= 1;
            index[d] += 1;
            if index[d] < points_per_axis[d] {
                break;
            }
            index[d] = 0;
        }
    }
}

/// Uniform phase-space mesh for statistics over the training domain.
pub fn uniform_mesh(spec: &MeshSpec) -> Result<Vec<PhaseState>> {
    spec.validate()?;
    if spec.domain.dim() % 2 != 0 {
        return Err(SsiError::InvalidArgument(
            "a phase-space mesh needs an even dimension".into(),
        ));
    }
    let raw = uniform_grid(&spec.domain, &spec.points_per_axis)?;
    Ok(raw
        .into_iter()
        .map(PhaseState::from_flat_unchecked)
        .collect())
}

/// Synthesize flow observations: `ybar_j` is the high-precision time-`h` flow
/// of `y_j`, computed with `n_substeps` Stoermer-Verlet sub-steps.
pub fn generate_flow_dataset<F: HamiltonianField + ?Sized>(
    field: &F,
    inputs: &[PhaseState],
    h: f64,
    n_substeps: usize,
) -> Result<FlowDataset> {
    let mut outputs = Vec::with_capacity(inputs.len());
    for y in inputs {
        outputs.push(reference_flow(field, y, h, n_substeps)?);
    }
    FlowDataset::new(inputs.to_vec(), outputs, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::PendulumSystem;
    use approx::assert_relative_eq;

    #[test]
    fn halton_first_points() {
        let unit1 = DomainBox::new(vec![0.0], vec![1.0]).unwrap();
        let pts = halton_sequence(1, 3, &unit1).unwrap();
        assert_eq!(pts[0][0], 0.5);
        assert_eq!(pts[1][0], 0.25);
        assert_eq!(pts[2][0], 0.75);

        let unit2 = DomainBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let pts = halton_sequence(2, 1, &unit2).unwrap();
        assert_eq!(pts[0][0], 0.5);
        assert_relative_eq!(pts[0][1], 1.0 / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn halton_points_stay_inside_and_never_repeat() {
        let domain = DomainBox::new(vec![-1.0, -2.0], vec![1.0, 2.0]).unwrap();
        let pts = halton_sequence(2, 10_000, &domain).unwrap();
        for x in &pts {
            assert!(x[0] > -1.0 && x[0] < 1.0);
            assert!(x[1] > -2.0 && x[1] < 2.0);
        }
        let mut seen: Vec<(u64, u64)> = pts
            .iter()
            .map(|x| (x[0].to_bits(), x[1].to_bits()))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 10_000);
    }

    #[test]
    fn halton_rejects_unsupported_dimension() {
        let domain = DomainBox::new(vec![0.0; 7], vec![1.0; 7]).unwrap();
        assert!(halton_sequence(7, 1, &domain).is_err());
    }

    #[test]
    fn mesh_corners_and_counts() {
        let domain = DomainBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let spec = MeshSpec::new(domain, vec![2, 2]).unwrap();
        let mesh = uniform_mesh(&spec).unwrap();
        assert_eq!(mesh.len(), 4);
        let flat: Vec<&[f64]> = mesh.iter().map(|z| z.as_slice()).collect();
        assert_eq!(flat[0], &[0.0, 0.0]);
        assert_eq!(flat[1], &[0.0, 1.0]);
        assert_eq!(flat[2], &[1.0, 0.0]);
        assert_eq!(flat[3], &[1.0, 1.0]);

        let spec = MeshSpec::new(
            DomainBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap(),
            vec![3, 5],
        )
        .unwrap();
        assert_eq!(uniform_mesh(&spec).unwrap().len(), 15);
    }

    #[test]
    fn pendulum_mesh_spans_the_training_domain() {
        let tau = 2.0 * std::f64::consts::PI;
        let domain = DomainBox::new(vec![-tau, -1.2], vec![tau, 1.2]).unwrap();
        let spec = MeshSpec::new(domain, vec![120, 120]).unwrap();
        let mesh = uniform_mesh(&spec).unwrap();
        assert_eq!(mesh.len(), 14_400);
        assert_eq!(mesh[0].as_slice(), &[-tau, -1.2]);
        assert_eq!(mesh[14_399].as_slice(), &[tau, 1.2]);
    }

    #[test]
    fn flow_dataset_generation() {
        let sys = PendulumSystem;
        let y = vec![PhaseState::new(&[0.3], &[0.1]).unwrap()];

        // One tiny SV step: ybar = y + h f(y) + O(h^2).
        let data = generate_flow_dataset(&sys, &y, 1e-6, 1).unwrap();
        let f_q = 0.1;
        let f_p = -(0.3_f64).sin();
        assert_relative_eq!(
            data.ybar[0].as_slice()[0],
            0.3 + 1e-6 * f_q,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            data.ybar[0].as_slice()[1],
            0.1 + 1e-6 * f_p,
            epsilon = 1e-12
        );

        // Energy drift of the generated pairs stays at the SV level.
        let tau = 2.0 * std::f64::consts::PI;
        let domain = DomainBox::new(vec![-tau, -1.2], vec![tau, 1.2]).unwrap();
        let inputs = halton_phase_states(40, &domain, 1).unwrap();
        let data = generate_flow_dataset(&sys, &inputs, 0.3, 800).unwrap();
        for (y, ybar) in data.y.iter().zip(&data.ybar) {
            use crate::phase::HamiltonianField;
            assert!((sys.value(y) - sys.value(ybar)).abs() <= 1e-8);
        }
    }

    #[test]
    fn dataset_generation_is_deterministic() {
        let sys = PendulumSystem;
        let domain =
            DomainBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let inputs = halton_phase_states(20, &domain, 1).unwrap();
        let a = generate_flow_dataset(&sys, &inputs, 0.3, 100).unwrap();
        let b = generate_flow_dataset(&sys, &inputs, 0.3, 100).unwrap();
        for (x, y) in a.ybar.iter().zip(&b.ybar) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
    }
}
