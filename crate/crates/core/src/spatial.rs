//! Spatial building blocks: area adjacency graphs with the intrinsic CAR
//! (ICAR) structure matrix and its scaling, the BYM2 mixture of iid and
//! scaled-ICAR effects, and the Matérn covariance.

use crate::error::{Error, Result};
use crate::math;
use crate::prelude::*;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative eigenvalue threshold separating the null space of `Q`.
const NULL_TOL: f64 = 1e-9;

/// Adjacency graph over areas together with the ICAR structure matrix
/// `Q = D - A` and the factor that scales it to unit geometric-mean
/// marginal variance under the sum-to-zero constraint.
#[derive(Debug, Clone)]
pub struct SpatialStructure {
    ids: Vec<String>,
    index: BTreeMap<String, usize>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    precision: DMatrix<f64>,
    scaling_factor: f64,
    // Eigenpairs of the unscaled Q, ascending; column 0 spans the null space.
    eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

impl SpatialStructure {
    /// Builds the structure from an edge list; nodes are ordered by first
    /// appearance.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self> {
        let mut nodes: Vec<String> = Vec::new();
        let mut seen = BTreeSet::new();
        for (a, b) in edges {
            for n in [a.as_ref(), b.as_ref()] {
                if seen.insert(n.to_owned()) {
                    nodes.push(n.to_owned());
                }
            }
        }
        Self::with_nodes(&nodes, edges)
    }

    /// Builds the structure over an explicit node list, so that isolated
    /// nodes are detected and the node order is fixed by the caller.
    pub fn with_nodes<N: AsRef<str>, S: AsRef<str>>(nodes: &[N], edges: &[(S, S)]) -> Result<Self> {
        let ids: Vec<String> = nodes.iter().map(|n| n.as_ref().to_owned()).collect();
        let mut index = BTreeMap::new();
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::invalid("adjacency", format!("duplicate node `{id}`")));
            }
        }
        if ids.len() < 2 {
            return Err(Error::invalid("adjacency", "at least two areas are required"));
        }
        let mut pairs = BTreeSet::new();
        for (a, b) in edges {
            let (a, b) = (a.as_ref(), b.as_ref());
            if a == b {
                return Err(Error::invalid("adjacency", format!("self-loop on `{a}`")));
            }
            let ia = *index.get(a).ok_or_else(|| Error::UnknownArea(a.to_owned()))?;
            let ib = *index.get(b).ok_or_else(|| Error::UnknownArea(b.to_owned()))?;
            pairs.insert((ia.min(ib), ia.max(ib)));
        }
        let edges: Vec<(usize, usize)> = pairs.into_iter().collect();
        let n = ids.len();
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }

        let components = connected_components(&neighbors);
        if components.len() > 1 {
            let named = components
                .iter()
                .map(|c| c.iter().map(|&i| ids[i].clone()).collect())
                .collect();
            return Err(Error::Disconnected(named));
        }

        let precision = icar_precision(n, &edges);
        let (eigenvalues, eigenvectors) = sorted_eigen(&precision)?;
        let scaling_factor = geometric_mean(&generalized_inverse_diagonal(&eigenvalues, &eigenvectors));

        Ok(SpatialStructure {
            ids,
            index,
            edges,
            neighbors,
            precision,
            scaling_factor,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Unordered edges as `(i, j)` with `i < j`, deduplicated.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Unscaled ICAR structure `Q`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn scaling_factor(&self) -> f64 {
        self.scaling_factor
    }

    pub fn scaled_precision(&self) -> DMatrix<f64> {
        &self.precision * self.scaling_factor
    }

    /// Eigenvalues of the scaled structure, ascending (the first is zero).
    pub fn scaled_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.eigenvalues.iter().map(|l| l * self.scaling_factor).collect();
        ev[0] = 0.0;
        ev
    }

    /// Orthonormal eigenvectors of `Q` as columns, ascending in eigenvalue;
    /// column 0 is the constant direction.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Eigenvalues of the BYM2 correlation `(1 - phi) I + phi Q_scaled^+` in
    /// the eigenbasis of `Q`; the constant direction carries `1 - phi`.
    pub fn bym2_spectrum(&self, phi: f64) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .enumerate()
            .map(|(k, &l)| if k == 0 { 1.0 - phi } else { (1.0 - phi) + phi / (l * self.scaling_factor) })
            .collect()
    }

    /// Marginal variances of the scaled ICAR under the sum-to-zero constraint.
    pub fn marginal_variances(&self) -> Vec<f64> {
        generalized_inverse_diagonal(&self.eigenvalues, &self.eigenvectors)
            .into_iter()
            .map(|v| v / self.scaling_factor)
            .collect()
    }

    /// One draw from the scaled ICAR restricted to the sum-to-zero subspace.
    pub fn sample_scaled_icar<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let n = self.len();
        let mut s = vec![0.0; n];
        for k in 1..n {
            let z: f64 = rng.sample(StandardNormal);
            let scale = z / (self.eigenvalues[k] * self.scaling_factor).sqrt();
            for (i, si) in s.iter_mut().enumerate() {
                *si += scale * self.eigenvectors[(i, k)];
            }
        }
        s
    }

    /// `S' Q_scaled S` after centring `S`.
    pub fn icar_quadratic(&self, s: &[f64]) -> f64 {
        assert_eq!(s.len(), self.len(), "effect vector length");
        let centred = centred(s);
        let v = nalgebra::DVector::from_column_slice(&centred);
        self.scaling_factor * (v.transpose() * &self.precision * &v)[(0, 0)]
    }

    /// Scaled-ICAR log density on the sum-to-zero subspace, including the
    /// normalising constant of the `n - 1` dimensional Gaussian.
    pub fn icar_logdensity(&self, s: &[f64]) -> f64 {
        let rank = (self.len() - 1) as f64;
        let log_det: f64 = self.scaled_eigenvalues()[1..].iter().map(|l| l.ln()).sum();
        -0.5 * rank * (2.0 * core::f64::consts::PI).ln() + 0.5 * log_det - 0.5 * self.icar_quadratic(s)
    }
}

fn centred(s: &[f64]) -> Vec<f64> {
    let m = math::mean(s);
    s.iter().map(|x| x - m).collect()
}

fn icar_precision(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(n, n);
    for &(i, j) in edges {
        q[(i, j)] -= 1.0;
        q[(j, i)] -= 1.0;
        q[(i, i)] += 1.0;
        q[(j, j)] += 1.0;
    }
    q
}

fn connected_components(neighbors: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = neighbors.len();
    let mut label = vec![usize::MAX; n];
    let mut components = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        let id = components.len();
        let mut members = vec![start];
        label[start] = id;
        let mut head = 0;
        while head < members.len() {
            let v = members[head];
            head += 1;
            for &w in &neighbors[v] {
                if label[w] == usize::MAX {
                    label[w] = id;
                    members.push(w);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

fn sorted_eigen(q: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = q.nrows();
    let eig = SymmetricEigen::try_new(q.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numeric("eigendecomposition of the structure matrix did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    let largest = values[n - 1].abs().max(1.0);
    if values[0].abs() > NULL_TOL * largest || values[1] <= NULL_TOL * largest {
        return Err(Error::Numeric(format!(
            "structure matrix does not have exactly one null direction (smallest eigenvalues {:e}, {:e})",
            values[0], values[1]
        )));
    }
    Ok((values, vectors))
}

fn generalized_inverse_diagonal(values: &[f64], vectors: &DMatrix<f64>) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|i| (1..n).map(|k| vectors[(i, k)] * vectors[(i, k)] / values[k]).sum())
        .collect()
}

fn geometric_mean(xs: &[f64]) -> f64 {
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

/// Scales an ICAR structure matrix so that the geometric mean of the
/// marginal variances of its sum-to-zero generalised inverse is one.
/// Returns the scaled matrix and the factor applied.
pub fn scale_icar(q: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if q.nrows() != q.ncols() || q.nrows() < 2 {
        return Err(Error::invalid("structure matrix", "must be square with at least two rows"));
    }
    let (values, vectors) = sorted_eigen(q)?;
    let factor = geometric_mean(&generalized_inverse_diagonal(&values, &vectors));
    Ok((q * factor, factor))
}

/// BYM2 effect `sigma_b (sqrt(1 - phi) e + sqrt(phi) s)`.
pub fn bym2_combine(iid: &[f64], spatial: &[f64], sigma_b: f64, phi: f64) -> Vec<f64> {
    assert_eq!(iid.len(), spatial.len(), "effect vectors differ in length");
    assert!((0.0..=1.0).contains(&phi), "phi outside [0, 1]");
    let a = (1.0 - phi).sqrt();
    let b = phi.sqrt();
    iid.iter()
        .zip(spatial)
        .map(|(e, s)| sigma_b * (a * e + b * s))
        .collect()
}

/// Matérn covariance parameters. `range` is the distance at which the
/// correlation has fallen to roughly 0.1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaternParams {
    pub sigma: f64,
    pub range: f64,
    pub smoothness: f64,
}

impl MaternParams {
    pub fn new(sigma: f64, range: f64, smoothness: f64) -> Result<Self> {
        for (name, v) in [("sigma", sigma), ("range", range), ("smoothness", smoothness)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid("Matérn parameter", format!("{name} = {v}")));
            }
        }
        Ok(MaternParams { sigma, range, smoothness })
    }
}

pub fn matern_cov(distance: f64, params: &MaternParams) -> f64 {
    params.sigma * params.sigma * matern_correlation(distance, params.range, params.smoothness)
}

/// Matérn correlation with argument `sqrt(8 nu) d / range`. Half-integer
/// smoothness 1/2, 3/2 and 5/2 use the exponential-polynomial closed forms.
pub fn matern_correlation(distance: f64, range: f64, smoothness: f64) -> f64 {
    if distance <= 0.0 {
        return 1.0;
    }
    let x = (8.0 * smoothness).sqrt() * distance / range;
    if smoothness == 0.5 {
        (-x).exp()
    } else if smoothness == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if smoothness == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_correlation_bessel(distance, range, smoothness)
    }
}

/// The general form `2^(1-nu) / Γ(nu) x^nu K_nu(x)`.
pub fn matern_correlation_bessel(distance: f64, range: f64, smoothness: f64) -> f64 {
    if distance <= 0.0 {
        return 1.0;
    }
    let x = (8.0 * smoothness).sqrt() * distance / range;
    if x > 700.0 {
        return 0.0;
    }
    let log_c = (1.0 - smoothness) * core::f64::consts::LN_2 - math::ln_gamma(smoothness) + smoothness * x.ln();
    log_c.exp() * math::bessel_k(smoothness, x)
}

/// Axis-aligned box in coordinate units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

/// Rectangular grid of areas with rook adjacency, `rows * cols` areas named
/// `A01, A02, ...` in row-major order. Area `(r, c)` occupies the unit
/// square `[c, c+1] x [r, r+1]`.
#[derive(Debug, Clone, Copy)]
pub struct Lattice {
    pub rows: usize,
    pub cols: usize,
}

impl Lattice {
    pub fn new(rows: usize, cols: usize) -> Self {
        Lattice { rows, cols }
    }

    pub fn ids(&self) -> Vec<String> {
        let width = digits(self.rows * self.cols).max(2);
        (0..self.rows * self.cols)
            .map(|k| format!("A{:0width$}", k + 1, width = width))
            .collect()
    }

    pub fn edges(&self) -> Vec<(String, String)> {
        let ids = self.ids();
        let mut out = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let k = r * self.cols + c;
                if c + 1 < self.cols {
                    out.push((ids[k].clone(), ids[k + 1].clone()));
                }
                if r + 1 < self.rows {
                    out.push((ids[k].clone(), ids[k + self.cols].clone()));
                }
            }
        }
        out
    }

    pub fn bounding_boxes(&self) -> Vec<BoundingBox> {
        (0..self.rows * self.cols)
            .map(|k| {
                let (r, c) = ((k / self.cols) as f64, (k % self.cols) as f64);
                BoundingBox { min_x: c, min_y: r, max_x: c + 1.0, max_y: r + 1.0 }
            })
            .collect()
    }

    pub fn structure(&self) -> Result<SpatialStructure> {
        SpatialStructure::with_nodes(&self.ids(), &self.edges())
    }
}

fn digits(mut n: usize) -> usize {
    let mut d = 1;
    while n >= 10 {
        n /= 10;
        d += 1;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;

    fn path3() -> SpatialStructure {
        SpatialStructure::from_edges(&[("A", "B"), ("B", "C")]).unwrap()
    }

    #[test]
    fn path_graph_structure_matrix() {
        let s = path3();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(s.precision(), &expected);
    }

    #[test]
    fn complete_graph_structure_matrix() {
        let s = SpatialStructure::from_edges(&[("a", "b"), ("b", "c"), ("a", "c")]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { -1.0 };
                assert_eq!(s.precision()[(i, j)], want);
            }
        }
    }

    #[test]
    fn duplicate_edges_are_ignored() {
        let s = SpatialStructure::from_edges(&[("A", "B"), ("B", "A"), ("B", "C"), ("A", "B")]).unwrap();
        assert_eq!(s.precision(), path3().precision());
        assert_eq!(s.edges().len(), 2);
    }

    #[test]
    fn disconnected_graph_names_components() {
        let err = SpatialStructure::from_edges(&[("A", "B"), ("C", "D")]).unwrap_err();
        match err {
            Error::Disconnected(c) => {
                assert_eq!(c, vec![vec!["A".to_string(), "B".into()], vec!["C".into(), "D".into()]]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = SpatialStructure::with_nodes(&["A", "B", "Z"], &[("A", "B")]).unwrap_err();
        assert!(matches!(err, Error::Disconnected(_)));
    }

    #[test]
    fn self_loops_rejected() {
        assert!(SpatialStructure::from_edges(&[("A", "A"), ("A", "B")]).is_err());
    }

    /// Path on three nodes: eigenpairs (1, (1,0,-1)/√2) and (3, (1,-2,1)/√6)
    /// give generalised-inverse diagonal (5/9, 2/9, 5/9).
    #[test]
    fn path_scaling_factor_matches_hand_pseudo_inverse() {
        let s = path3();
        let want = (25.0f64 / 81.0 * 2.0 / 9.0).powf(1.0 / 3.0);
        assert_abs_diff_eq!(s.scaling_factor(), want, epsilon = 1e-12);
    }

    #[test]
    fn path_scaling_factor_matches_regularised_inverse() {
        // (Q + 11'/n)^{-1} - 11'/n is the pseudo-inverse of a connected Laplacian.
        let s = path3();
        let n = 3;
        let j = DMatrix::from_element(n, n, 1.0 / n as f64);
        let inv = (s.precision() + &j).try_inverse().unwrap() - &j;
        let gm = (0..n).map(|i| inv[(i, i)].ln()).sum::<f64>() / n as f64;
        assert_abs_diff_eq!(s.scaling_factor(), gm.exp(), epsilon = 1e-12);
    }

    #[test]
    fn scaled_structure_is_a_fixpoint() {
        let s = Lattice::new(3, 4).structure().unwrap();
        let (scaled, factor) = scale_icar(s.precision()).unwrap();
        assert_abs_diff_eq!(factor, s.scaling_factor(), epsilon = 1e-12);
        let (_, again) = scale_icar(&scaled).unwrap();
        assert_abs_diff_eq!(again, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn cycle_marginal_variances_all_one() {
        let edges: Vec<(String, String)> = (0..7).map(|i| (format!("n{i}"), format!("n{}", (i + 1) % 7))).collect();
        let s = SpatialStructure::from_edges(&edges).unwrap();
        for v in s.marginal_variances() {
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn quadratic_form_matches_edge_differences() {
        let s = Lattice::new(3, 3).structure().unwrap();
        let mut rng = stream_rng(3, 0);
        for _ in 0..20 {
            let x: Vec<f64> = (0..9).map(|_| rng.sample(StandardNormal)).collect();
            let edge_sum: f64 = s.edges().iter().map(|&(i, j)| (x[i] - x[j]).powi(2)).sum();
            assert_abs_diff_eq!(s.icar_quadratic(&x), s.scaling_factor() * edge_sum, epsilon = 1e-10);
            let shifted: Vec<f64> = x.iter().map(|v| v + 3.5).collect();
            assert_abs_diff_eq!(s.icar_logdensity(&shifted), s.icar_logdensity(&x), epsilon = 1e-10);
        }
        assert_abs_diff_eq!(s.icar_quadratic(&[0.0; 9]), 0.0);
    }

    #[test]
    fn scaled_icar_draws_have_unit_average_variance() {
        let s = Lattice::new(3, 5).structure().unwrap();
        let mut rng = stream_rng(11, 0);
        let n = s.len();
        let draws = 40_000;
        let mut sumsq = vec![0.0; n];
        for _ in 0..draws {
            let x = s.sample_scaled_icar(&mut rng);
            assert!(x.iter().sum::<f64>().abs() < 1e-9);
            for (acc, v) in sumsq.iter_mut().zip(&x) {
                *acc += v * v;
            }
        }
        let want = s.marginal_variances();
        for (acc, w) in sumsq.iter().zip(&want) {
            assert!((acc / draws as f64 / w - 1.0).abs() < 0.04);
        }
    }

    #[test]
    fn bym2_limits() {
        let e = [0.3, -1.2, 0.5];
        let s = [1.0, 0.0, -1.0];
        assert_eq!(bym2_combine(&e, &s, 2.0, 0.0), vec![0.6, -2.4, 1.0]);
        assert_eq!(bym2_combine(&e, &s, 2.0, 1.0), vec![2.0, 0.0, -2.0]);
    }

    #[test]
    fn bym2_marginal_variance_is_sigma_squared() {
        // On a cycle every scaled-ICAR marginal variance is exactly one.
        let edges: Vec<(String, String)> = (0..9).map(|i| (format!("n{i}"), format!("n{}", (i + 1) % 9))).collect();
        let s = SpatialStructure::from_edges(&edges).unwrap();
        let mut rng = stream_rng(5, 0);
        let (sigma, phi) = (0.7, 0.6);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let e: Vec<f64> = (0..s.len()).map(|_| rng.sample(StandardNormal)).collect();
            let sp = s.sample_scaled_icar(&mut rng);
            acc += bym2_combine(&e, &sp, sigma, phi)[0].powi(2);
        }
        let got = acc / draws as f64;
        assert!((got / (sigma * sigma) - 1.0).abs() < 0.02, "{got}");
    }

    #[test]
    fn matern_exponential_case() {
        for &d in &[0.0, 0.01, 0.3, 1.0, 2.5, 7.0] {
            let want = (-2.0 * d / 1.3f64).exp();
            assert_abs_diff_eq!(matern_correlation(d, 1.3, 0.5), want, epsilon = 1e-12);
            assert_abs_diff_eq!(matern_correlation_bessel(d, 1.3, 0.5), want, epsilon = 1e-12);
        }
        let p = MaternParams::new(2.0, 1.0, 0.5).unwrap();
        assert_eq!(matern_cov(0.0, &p), 4.0);
    }

    #[test]
    fn matern_closed_forms_match_bessel_route() {
        for &nu in &[1.5, 2.5] {
            for &d in &[0.001, 0.2, 0.9, 3.0] {
                let a = matern_correlation(d, 0.8, nu);
                let b = matern_correlation_bessel(d, 0.8, nu);
                assert_abs_diff_eq!(a, b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn matern_is_continuous_at_zero_and_monotone() {
        for &nu in &[0.5, 0.8, 1.5, 2.5, 3.3] {
            assert_abs_diff_eq!(matern_correlation(1e-9, 1.0, nu), 1.0, epsilon = 1e-6);
            let mut last = 1.0;
            for k in 1..400 {
                let c = matern_correlation(k as f64 * 0.01, 1.0, nu);
                assert!(c <= last + 1e-15);
                last = c;
            }
        }
    }

    #[test]
    fn matern_correlation_near_a_tenth_at_the_range() {
        for &nu in &[0.5, 1.5, 2.5] {
            let c = matern_correlation(2.0, 2.0, nu);
            assert!((0.08..=0.15).contains(&c), "nu={nu}: {c}");
        }
    }

    #[test]
    fn lattice_ids_and_adjacency() {
        let l = Lattice::new(3, 9);
        assert_eq!(l.ids().len(), 27);
        assert_eq!(l.ids()[0], "A01");
        assert_eq!(l.edges().len(), 3 * 8 + 2 * 9);
        assert_eq!(l.structure().unwrap().len(), 27);
    }
}
