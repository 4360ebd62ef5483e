//! Domain types of the multivariate probit mixed model and the GICC functional.
//!
//! Each binary graph on `N` nodes is stored as a vector over the
//! `D = N(N−1)/2` node pairs in row-major upper-triangle order:
//! (1,2), (1,3), …, (1,N), (2,3), …, (N−1,N). Public node ids and edge slots
//! are 1-based; internal indexing is 0-based.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, PSD_TOL};
use crate::normal;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GraphShape {
    n_nodes: usize,
    n_edges: usize,
}

impl GraphShape {
    pub fn new(n_nodes: usize) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::domain(format!(
                "a graph needs at least two nodes, got {n_nodes}"
            )));
        }
        Ok(GraphShape {
            n_nodes,
            n_edges: n_nodes * (n_nodes - 1) / 2,
        })
    }

    /// Shape whose edge count is exactly `n_edges`, if such a node count exists.
    pub fn from_edges(n_edges: usize) -> Result<Self> {
        let n = ((1.0 + (1.0 + 8.0 * n_edges as f64).sqrt()) / 2.0).round() as usize;
        match GraphShape::new(n) {
            Ok(s) if s.n_edges == n_edges => Ok(s),
            _ => Err(Error::domain(format!(
                "{n_edges} is not a triangular number N(N-1)/2"
            ))),
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// 1-based edge slot of the node pair `(a, b)`, `1 ≤ a < b ≤ N`.
    pub fn edge_index(&self, a: usize, b: usize) -> Result<usize> {
        if a == 0 || b > self.n_nodes || a >= b {
            return Err(Error::domain(format!(
                "node pair ({a}, {b}) is not 1 <= a < b <= {}",
                self.n_nodes
            )));
        }
        Ok(self.slot(a - 1, b - 1) + 1)
    }

    /// Inverse of [`edge_index`](Self::edge_index): the 1-based node pair of slot `d`.
    pub fn edge_pair(&self, d: usize) -> Result<(usize, usize)> {
        if d == 0 || d > self.n_edges {
            return Err(Error::domain(format!(
                "edge slot {d} outside 1..={}",
                self.n_edges
            )));
        }
        let (a, b) = self.pair(d - 1);
        Ok((a + 1, b + 1))
    }

    /// 0-based slot of 0-based pair `a < b`.
    pub(crate) fn slot(&self, a: usize, b: usize) -> usize {
        debug_assert!(a < b && b < self.n_nodes);
        a * (2 * self.n_nodes - a - 1) / 2 + (b - a - 1)
    }

    /// 0-based pair of 0-based slot.
    pub(crate) fn pair(&self, mut d: usize) -> (usize, usize) {
        let n = self.n_nodes;
        let mut a = 0;
        while d >= n - a - 1 {
            d -= n - a - 1;
            a += 1;
        }
        (a, a + 1 + d)
    }

    /// All 0-based pairs in slot order.
    pub(crate) fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n_nodes).flat_map(move |a| (a + 1..self.n_nodes).map(move |b| (a, b)))
    }
}

/// Turns a symmetric 0/1 adjacency matrix with zero diagonal into its edge vector.
pub fn vectorize_graph(adjacency: &DMatrix<u8>, shape: GraphShape) -> Result<Vec<bool>> {
    let n = shape.n_nodes();
    if adjacency.nrows() != n || adjacency.ncols() != n {
        return Err(Error::validation(format!(
            "adjacency is {}x{}, expected {n}x{n}",
            adjacency.nrows(),
            adjacency.ncols()
        )));
    }
    for a in 0..n {
        if adjacency[(a, a)] != 0 {
            return Err(Error::validation(format!("self-loop at node {}", a + 1)));
        }
        for b in 0..n {
            let v = adjacency[(a, b)];
            if v > 1 {
                return Err(Error::validation(format!(
                    "entry ({}, {}) = {v} is not binary",
                    a + 1,
                    b + 1
                )));
            }
            if v != adjacency[(b, a)] {
                return Err(Error::validation(format!(
                    "adjacency is not symmetric at ({}, {})",
                    a + 1,
                    b + 1
                )));
            }
        }
    }
    Ok(shape.pairs().map(|(a, b)| adjacency[(a, b)] == 1).collect())
}

pub fn devectorize_graph(edges: &[bool], shape: GraphShape) -> Result<DMatrix<u8>> {
    if edges.len() != shape.n_edges() {
        return Err(Error::validation(format!(
            "edge vector has length {}, expected {}",
            edges.len(),
            shape.n_edges()
        )));
    }
    let n = shape.n_nodes();
    let mut m = DMatrix::zeros(n, n);
    for ((a, b), &e) in shape.pairs().zip(edges) {
        let v = u8::from(e);
        m[(a, b)] = v;
        m[(b, a)] = v;
    }
    Ok(m)
}

/// All repeated graph measurements of one subject, one edge vector per visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectGraphs {
    pub visits: Vec<Vec<bool>>,
}

impl SubjectGraphs {
    pub fn n_visits(&self) -> usize {
        self.visits.len()
    }
}

/// Binary graphs observed for `I` subjects with `J_i` visits each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryGraphDataset {
    shape: GraphShape,
    subjects: Vec<SubjectGraphs>,
}

impl BinaryGraphDataset {
    pub fn new(shape: GraphShape, subjects: Vec<SubjectGraphs>) -> Result<Self> {
        for (i, s) in subjects.iter().enumerate() {
            if s.visits.is_empty() {
                return Err(Error::validation(format!(
                    "subject {} has no visits",
                    i + 1
                )));
            }
            if let Some((j, v)) = s
                .visits
                .iter()
                .enumerate()
                .find(|(_, v)| v.len() != shape.n_edges())
            {
                return Err(Error::validation(format!(
                    "subject {} visit {} has {} edges, expected {}",
                    i + 1,
                    j + 1,
                    v.len(),
                    shape.n_edges()
                )));
            }
        }
        Ok(BinaryGraphDataset { shape, subjects })
    }

    pub fn shape(&self) -> GraphShape {
        self.shape
    }

    pub fn n_edges(&self) -> usize {
        self.shape.n_edges()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> &[SubjectGraphs] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &SubjectGraphs {
        &self.subjects[i]
    }

    pub fn visits_per_subject(&self) -> Vec<usize> {
        self.subjects.iter().map(SubjectGraphs::n_visits).collect()
    }

    /// Σ_i J_i.
    pub fn total_visits(&self) -> usize {
        self.subjects.iter().map(SubjectGraphs::n_visits).sum()
    }

    /// Number of observed ones per edge, pooled over subjects and visits.
    pub fn edge_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_edges()];
        for v in self.subjects.iter().flat_map(|s| &s.visits) {
            for (c, &o) in counts.iter_mut().zip(v) {
                *c += usize::from(o);
            }
        }
        counts
    }

    /// Pooled frequency of `o(d) = 1`.
    pub fn edge_frequencies(&self) -> Vec<f64> {
        let n = self.total_visits() as f64;
        self.edge_counts().iter().map(|&c| c as f64 / n).collect()
    }

    /// Dataset with every subject repeated `times` times.
    pub fn replicated(&self, times: usize) -> Self {
        let subjects = (0..times)
            .flat_map(|_| self.subjects.iter().cloned())
            .collect();
        BinaryGraphDataset {
            shape: self.shape,
            subjects,
        }
    }
}

/// Edge means on the probit scale and the random-effect covariance Σ_x.
///
/// The residual covariance is the identity and is not stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    mu: DVector<f64>,
    sigma_x: DMatrix<f64>,
}

impl ModelParams {
    /// Validates shapes, symmetry (to 1e-8, then exactly symmetrized) and PSD-ness.
    pub fn new(mu: DVector<f64>, sigma_x: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 || sigma_x.nrows() != d || sigma_x.ncols() != d {
            return Err(Error::validation(format!(
                "mu has length {d} but sigma_x is {}x{}",
                sigma_x.nrows(),
                sigma_x.ncols()
            )));
        }
        if mu.iter().chain(sigma_x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite model parameter"));
        }
        let asym = linalg::max_abs_diff(&sigma_x, &sigma_x.transpose());
        if asym > 1e-8 {
            return Err(Error::validation(format!(
                "sigma_x is not symmetric (max asymmetry {asym:.3e})"
            )));
        }
        let sigma_x = linalg::symmetrize(&sigma_x);
        let min_eig = linalg::min_eigenvalue(&sigma_x);
        if min_eig < -PSD_TOL {
            return Err(Error::domain(format!(
                "sigma_x is not positive semidefinite (min eigenvalue {min_eig:.3e})"
            )));
        }
        Ok(ModelParams { mu, sigma_x })
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn sigma_x(&self) -> &DMatrix<f64> {
        &self.sigma_x
    }

    pub fn n_edges(&self) -> usize {
        self.mu.len()
    }

    pub fn gicc(&self) -> f64 {
        gicc_unchecked(&self.sigma_x)
    }
}

/// Latent random effects `x[i]` and latent Gaussians `y[i][j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<Vec<DVector<f64>>>,
}

impl LatentState {
    /// Checks `o = 1 ⇔ y > 0` for every entry.
    pub fn is_consistent_with(&self, data: &BinaryGraphDataset) -> bool {
        self.y.len() == data.n_subjects()
            && self.y.iter().zip(data.subjects()).all(|(ys, s)| {
                ys.len() == s.n_visits()
                    && ys
                        .iter()
                        .zip(&s.visits)
                        .all(|(y, o)| y.iter().zip(o).all(|(&y, &o)| (y > 0.0) == o))
            })
    }
}

/// Graphical ICC: tr(Σ_x) / (tr(Σ_x) + D).
pub fn gicc(sigma_x: &DMatrix<f64>) -> Result<f64> {
    let d = sigma_x.nrows();
    if d == 0 || sigma_x.ncols() != d {
        return Err(Error::domain("sigma_x must be a non-empty square matrix"));
    }
    let min_eig = linalg::min_eigenvalue(sigma_x);
    if min_eig < -PSD_TOL {
        return Err(Error::domain(format!(
            "sigma_x is not positive semidefinite (min eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(gicc_unchecked(sigma_x))
}

pub(crate) fn gicc_unchecked(sigma_x: &DMatrix<f64>) -> f64 {
    let tr = sigma_x.trace();
    tr / (tr + sigma_x.nrows() as f64)
}

/// P(o = 1 | x) = Φ(μ + x).
pub fn probit_prob(mu: f64, x: f64) -> Result<f64> {
    if !mu.is_finite() || !x.is_finite() {
        return Err(Error::domain("probit_prob needs finite arguments"));
    }
    Ok(normal::cdf(mu + x))
}

/// Log joint density of all `x_i` and `y_ij` under the latent threshold model,
/// normalizing constants included.
pub fn complete_loglik(params: &ModelParams, state: &LatentState) -> Result<f64> {
    let d = params.n_edges();
    let chol = linalg::spd_cholesky(params.sigma_x(), "sigma_x")?;
    let log_det: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    if state.x.len() != state.y.len() {
        return Err(Error::validation(
            "latent state x and y disagree on subject count",
        ));
    }
    let mut total = 0.0;
    for (x, ys) in state.x.iter().zip(&state.y) {
        if x.len() != d || ys.iter().any(|y| y.len() != d) {
            return Err(Error::validation("latent vector length differs from D"));
        }
        let z = chol
            .l()
            .solve_lower_triangular(x)
            .expect("factor is nonsingular");
        total += -0.5 * (d as f64 * ln_2pi + log_det + z.norm_squared());
        for y in ys {
            let r = y - params.mu() - x;
            total += -0.5 * (d as f64 * ln_2pi + r.norm_squared());
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn edge_index_examples() {
        let s4 = GraphShape::new(4).unwrap();
        assert_eq!(s4.n_edges(), 6);
        assert_eq!(s4.edge_index(1, 2).unwrap(), 1);
        assert_eq!(s4.edge_index(1, 4).unwrap(), 3);
        assert_eq!(s4.edge_index(2, 3).unwrap(), 4);
        assert_eq!(s4.edge_index(3, 4).unwrap(), 6);
        assert_eq!(GraphShape::new(2).unwrap().edge_index(1, 2).unwrap(), 1);
    }

    #[test]
    fn edge_index_errors() {
        let s = GraphShape::new(4).unwrap();
        assert!(s.edge_index(2, 2).is_err());
        assert!(s.edge_index(3, 2).is_err());
        assert!(s.edge_index(0, 2).is_err());
        assert!(s.edge_index(1, 5).is_err());
        assert!(s.edge_pair(0).is_err());
        assert!(s.edge_pair(7).is_err());
        assert!(GraphShape::new(1).is_err());
    }

    #[test]
    fn edge_round_trip_up_to_twenty_nodes() {
        for n in 2..=20 {
            let s = GraphShape::new(n).unwrap();
            for d in 1..=s.n_edges() {
                let (a, b) = s.edge_pair(d).unwrap();
                assert_eq!(s.edge_index(a, b).unwrap(), d);
            }
            let listed: Vec<_> = s.pairs().collect();
            assert_eq!(listed.len(), s.n_edges());
            for (k, &(a, b)) in listed.iter().enumerate() {
                assert_eq!(s.slot(a, b), k);
            }
        }
    }

    #[test]
    fn from_edges_inverts_triangular_numbers() {
        assert_eq!(GraphShape::from_edges(10).unwrap().n_nodes(), 5);
        assert_eq!(GraphShape::from_edges(1).unwrap().n_nodes(), 2);
        assert!(GraphShape::from_edges(7).is_err());
    }

    #[test]
    fn vectorize_figure_one_graph() {
        let s = GraphShape::new(4).unwrap();
        let mut adj = DMatrix::<u8>::zeros(4, 4);
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            adj[(a, b)] = 1;
            adj[(b, a)] = 1;
        }
        let v = vectorize_graph(&adj, s).unwrap();
        assert_eq!(v, vec![true, true, false, true, false, false]);
        assert_eq!(devectorize_graph(&v, s).unwrap(), adj);

        let s3 = GraphShape::new(3).unwrap();
        assert_eq!(
            vectorize_graph(&DMatrix::zeros(3, 3), s3).unwrap(),
            vec![false; 3]
        );
        let complete = DMatrix::from_fn(4, 4, |a, b| u8::from(a != b));
        assert_eq!(vectorize_graph(&complete, s).unwrap(), vec![true; 6]);
    }

    #[test]
    fn vectorize_rejects_bad_input() {
        let s = GraphShape::new(3).unwrap();
        let mut asym = DMatrix::<u8>::zeros(3, 3);
        asym[(0, 1)] = 1;
        assert!(matches!(
            vectorize_graph(&asym, s),
            Err(Error::Validation(_))
        ));
        let mut nonbin = DMatrix::<u8>::zeros(3, 3);
        nonbin[(0, 1)] = 2;
        nonbin[(1, 0)] = 2;
        assert!(vectorize_graph(&nonbin, s).is_err());
        let mut looped = DMatrix::<u8>::zeros(3, 3);
        looped[(1, 1)] = 1;
        assert!(vectorize_graph(&looped, s).is_err());
    }

    #[test]
    fn gicc_examples() {
        let d2 = DMatrix::from_diagonal_element(10, 10, 2.0);
        assert!((gicc(&d2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let d4 = DMatrix::from_diagonal_element(10, 10, 4.0);
        assert!((gicc(&d4).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(gicc(&DMatrix::zeros(5, 5)).unwrap(), 0.0);
        assert_eq!(gicc(&DMatrix::identity(7, 7)).unwrap(), 0.5);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(gicc(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn probit_prob_examples() {
        assert_eq!(probit_prob(0.0, 0.0).unwrap(), 0.5);
        assert_eq!(probit_prob(0.5, -0.5).unwrap(), 0.5);
        assert!((probit_prob(0.5, 0.0).unwrap() - 0.6915).abs() < 5e-5);
        assert!(probit_prob(f64::NAN, 0.0).is_err());
        assert!(probit_prob(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn params_validation() {
        let mu = DVector::zeros(2);
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(ModelParams::new(mu.clone(), asym).is_err());
        let nonpsd = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(ModelParams::new(mu.clone(), nonpsd).is_err());
        let tiny_asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5 + 1e-12, 1.0]);
        let p = ModelParams::new(mu, tiny_asym).unwrap();
        assert_eq!(p.sigma_x()[(0, 1)], p.sigma_x()[(1, 0)]);
        assert!(ModelParams::new(DVector::zeros(3), DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn complete_loglik_examples() {
        let p1 = ModelParams::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let state = |x: f64, y: f64| LatentState {
            x: vec![DVector::from_element(1, x)],
            y: vec![vec![DVector::from_element(1, y)]],
        };
        let ll = complete_loglik(&p1, &state(0.0, 0.0)).unwrap();
        assert!((ll + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);

        // moving y toward mu + x raises the density
        let far = complete_loglik(&p1, &state(0.3, 2.0)).unwrap();
        let near = complete_loglik(&p1, &state(0.3, 1.0)).unwrap();
        assert!(near > far);

        // diagonal factorization
        let p2 =
            ModelParams::new(DVector::from_vec(vec![0.2, -0.4]), DMatrix::identity(2, 2)).unwrap();
        let s2 = LatentState {
            x: vec![DVector::from_vec(vec![0.5, -1.0])],
            y: vec![vec![DVector::from_vec(vec![1.2, 0.3])]],
        };
        let pa = ModelParams::new(DVector::from_element(1, 0.2), DMatrix::identity(1, 1)).unwrap();
        let pb = ModelParams::new(DVector::from_element(1, -0.4), DMatrix::identity(1, 1)).unwrap();
        let sum = complete_loglik(&pa, &state(0.5, 1.2)).unwrap()
            + complete_loglik(&pb, &state(-1.0, 0.3)).unwrap();
        assert!((complete_loglik(&p2, &s2).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn complete_loglik_singular_sigma() {
        let p = ModelParams::new(DVector::zeros(2), DMatrix::from_element(2, 2, 1.0)).unwrap();
        let s = LatentState {
            x: vec![DVector::zeros(2)],
            y: vec![vec![DVector::zeros(2)]],
        };
        assert!(matches!(
            complete_loglik(&p, &s),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn dataset_validation() {
        let s = GraphShape::new(3).unwrap();
        let ok = SubjectGraphs {
            visits: vec![vec![true, false, true]],
        };
        let ragged = SubjectGraphs {
            visits: vec![vec![true, false, true], vec![false, false, false]],
        };
        let ds = BinaryGraphDataset::new(s, vec![ok.clone(), ragged]).unwrap();
        assert_eq!(ds.visits_per_subject(), vec![1, 2]);
        assert_eq!(ds.total_visits(), 3);
        assert_eq!(ds.edge_counts(), vec![2, 0, 2]);
        let short = SubjectGraphs {
            visits: vec![vec![true]],
        };
        assert!(BinaryGraphDataset::new(s, vec![ok, short]).is_err());
        let empty = SubjectGraphs { visits: vec![] };
        assert!(BinaryGraphDataset::new(s, vec![empty]).is_err());
    }

    fn random_rotation(seed: &[f64], d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |i, j| {
            seed[(i * d + j) % seed.len()] + (i * 7 + j) as f64 * 0.01
        });
        m.qr().q()
    }

    proptest! {
        #[test]
        fn probit_symmetry(m in -30.0f64..30.0) {
            let s = probit_prob(m, 0.0).unwrap() + probit_prob(-m, 0.0).unwrap();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }

        #[test]
        fn probit_monotone(a in -8.0f64..8.0, delta in 1e-3f64..2.0) {
            prop_assert!(probit_prob(a + delta, 0.0).unwrap() > probit_prob(a, 0.0).unwrap());
        }

        #[test]
        fn gicc_trace_invariance(
            diag in proptest::collection::vec(0.0f64..5.0, 4),
            rot in proptest::collection::vec(-1.0f64..1.0, 16),
        ) {
            let sigma = DMatrix::from_diagonal(&DVector::from_vec(diag));
            let q = random_rotation(&rot, 4);
            let rotated = linalg::symmetrize(&(&q * &sigma * q.transpose()));
            let a = gicc(&sigma).unwrap();
            let b = gicc(&rotated).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
            prop_assert!((0.0..1.0).contains(&a));
            prop_assert_eq!(a == 0.0, sigma.trace() == 0.0);
        }
    }
}
