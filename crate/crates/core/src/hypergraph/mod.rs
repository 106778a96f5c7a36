//! Multiscale crowd hypergraphs and random-walk spectral convolution.
//!
//! Vertices are agents. For each KNN scale `K`, every agent spawns a
//! candidate hyperedge made of itself and its `K` most similar neighbours
//! under a Mahalanobis similarity; identical vertex sets are merged.

mod conv;
mod similarity;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub use conv::{effective_scales, hypergraph_convolve, GroupBranch, GroupOutput};
pub use similarity::{mahalanobis_matrix, similarity_matrix, CovarianceMode, SimilarityMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypergraphError {
    #[error("hypergraph needs at least 2 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("KNN scale {k} must lie in [1, {max}]")]
    BadScale { k: usize, max: usize },
    #[error("invalid hypergraph: {0}")]
    Invalid(String),
}

/// Weighted hypergraph over `n_vertices` agents.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypergraph {
    pub n_vertices: usize,
    /// Sorted vertex lists, one per hyperedge.
    pub edges: Vec<Vec<usize>>,
    /// `H`, `N × M`, entries in {0, 1}.
    pub incidence: DMatrix<f64>,
    /// Diagonal of `W`.
    pub edge_weights: DVector<f64>,
    /// Diagonal of `M_v`: `d(v) = Σ_e w(e) H(v, e)`.
    pub vertex_degrees: DVector<f64>,
    /// Diagonal of `M_e`: `d(e) = Σ_v H(v, e)`.
    pub edge_degrees: DVector<f64>,
    /// KNN scale that produced the hypergraph (0 when built by hand).
    pub scale: usize,
}

impl Hypergraph {
    /// Builds a hypergraph from explicit vertex sets. Every hyperedge must
    /// link at least two distinct vertices and every vertex must be covered.
    pub fn new(n_vertices: usize, edges: Vec<Vec<usize>>, weights: Vec<f64>, scale: usize) -> Result<Self, HypergraphError> {
        if n_vertices < 2 {
            return Err(HypergraphError::TooFewVertices(n_vertices));
        }
        if weights.len() != edges.len() || weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(HypergraphError::Invalid("one positive finite weight per hyperedge required".into()));
        }
        let m = edges.len();
        let mut incidence = DMatrix::zeros(n_vertices, m);
        let mut sorted_edges = Vec::with_capacity(m);
        for (e, verts) in edges.into_iter().enumerate() {
            let mut vs = verts;
            vs.sort_unstable();
            vs.dedup();
            if vs.len() < 2 {
                return Err(HypergraphError::Invalid(format!("hyperedge {e} links fewer than 2 vertices")));
            }
            if let Some(&v) = vs.iter().find(|&&v| v >= n_vertices) {
                return Err(HypergraphError::Invalid(format!("vertex {v} out of range")));
            }
            for &v in &vs {
                incidence[(v, e)] = 1.0;
            }
            sorted_edges.push(vs);
        }
        let edge_weights = DVector::from_vec(weights);
        let vertex_degrees = &incidence * &edge_weights;
        if let Some(v) = vertex_degrees.iter().position(|&d| d == 0.0) {
            return Err(HypergraphError::Invalid(format!("vertex {v} is isolated")));
        }
        let edge_degrees = DVector::from_iterator(m, incidence.column_iter().map(|c| c.sum()));
        Ok(Self {
            n_vertices,
            edges: sorted_edges,
            incidence,
            edge_weights,
            vertex_degrees,
            edge_degrees,
            scale,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// `A = H W Hᵀ − M_v`.
    pub fn adjacency(&self) -> DMatrix<f64> {
        let hw = &self.incidence * DMatrix::from_diagonal(&self.edge_weights);
        &hw * self.incidence.transpose() - DMatrix::from_diagonal(&self.vertex_degrees)
    }

    /// `M_v^{1/2} · 1`, the stationary direction of the normalised walk.
    pub fn sqrt_degree_vector(&self) -> DVector<f64> {
        self.vertex_degrees.map(f64::sqrt)
    }

    /// Row-stochastic walk `M_v^{-1} H W M_e^{-1} Hᵀ`: the probability of
    /// stepping from `v_i` to `v_j` through a shared hyperedge.
    pub fn walk_matrix(&self) -> DMatrix<f64> {
        let left = DMatrix::from_diagonal(&self.vertex_degrees.map(|d| 1.0 / d)) * &self.incidence;
        let mid = DMatrix::from_diagonal(&self.edge_weights.component_div(&self.edge_degrees));
        left * mid * self.incidence.transpose()
    }

    /// Symmetric normalised operator `O = M_v^{-1/2} H W M_e^{-1} Hᵀ M_v^{-1/2}`.
    pub fn random_walk_matrix(&self) -> DMatrix<f64> {
        let dv = DMatrix::from_diagonal(&self.vertex_degrees.map(|d| 1.0 / d.sqrt()));
        let mid = DMatrix::from_diagonal(&self.edge_weights.component_div(&self.edge_degrees));
        let left = &dv * &self.incidence;
        let o = &left * mid * left.transpose();
        // exact symmetry regardless of summation order
        (&o + o.transpose()) * 0.5
    }

    /// `Δ = I − O`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        DMatrix::identity(self.n_vertices, self.n_vertices) - self.random_walk_matrix()
    }

    /// Eigenvalues of the Laplacian in ascending order.
    pub fn laplacian_spectrum(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.laplacian()).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Spectral partition objective `trace(Fᵀ Δ F)` for an `N × p` matrix.
    pub fn partition_cost(&self, f: &DMatrix<f64>) -> Result<f64, HypergraphError> {
        if f.nrows() != self.n_vertices {
            return Err(HypergraphError::Invalid(format!(
                "F has {} rows, hypergraph has {} vertices",
                f.nrows(),
                self.n_vertices
            )));
        }
        Ok((f.transpose() * self.laplacian() * f).trace())
    }
}

/// One hyperedge per vertex from its `k` most similar other vertices
/// (ties to the lower index), merging duplicate vertex sets in first-seen
/// order. Weights are 1.
pub fn build_hyperedges_knn(sim: &SimilarityMatrix, k: usize) -> Result<Hypergraph, HypergraphError> {
    let n = sim.values.nrows();
    if n < 2 {
        return Err(HypergraphError::TooFewVertices(n));
    }
    if k == 0 || k >= n {
        return Err(HypergraphError::BadScale { k, max: n - 1 });
    }
    let mut edges: Vec<Vec<usize>> = Vec::with_capacity(n);
    for v in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&u| u != v).collect();
        others.sort_by(|&a, &b| sim.values[(v, b)].total_cmp(&sim.values[(v, a)]).then(a.cmp(&b)));
        let mut e: Vec<usize> = others[..k].to_vec();
        e.push(v);
        e.sort_unstable();
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    let m = edges.len();
    Hypergraph::new(n, edges, vec![1.0; m], k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair() -> Hypergraph {
        Hypergraph::new(2, vec![vec![0, 1]], vec![1.0], 0).unwrap()
    }

    /// Symmetrised scalar evaluation of the per-pair walk probability.
    fn walk_oracle(g: &Hypergraph) -> DMatrix<f64> {
        let n = g.n_vertices;
        let mut o = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut p = 0.0;
                for (e, verts) in g.edges.iter().enumerate() {
                    let hi = f64::from(u8::from(verts.contains(&i)));
                    let hj = f64::from(u8::from(verts.contains(&j)));
                    p += g.edge_weights[e] * hi * hj / (g.vertex_degrees[i] * verts.len() as f64);
                }
                o[(i, j)] = p * (g.vertex_degrees[i] / g.vertex_degrees[j]).sqrt();
            }
        }
        o
    }

    fn random_hypergraph(rng: &mut ChaCha8Rng, n: usize) -> Hypergraph {
        let m = rng.random_range(1..=n);
        let mut edges: Vec<Vec<usize>> = (0..m)
            .map(|_| {
                let size = rng.random_range(2..=n);
                let mut vs: Vec<usize> = (0..n).collect();
                for i in 0..size {
                    let j = rng.random_range(i..n);
                    vs.swap(i, j);
                }
                vs.truncate(size);
                vs
            })
            .collect();
        for v in 0..n {
            if !edges.iter().any(|e| e.contains(&v)) {
                edges.push(vec![v, (v + 1) % n]);
            }
        }
        let w = (0..edges.len()).map(|_| rng.random_range(0.2..3.0)).collect();
        Hypergraph::new(n, edges, w, 0).unwrap()
    }

    #[test]
    fn degrees_and_adjacency() {
        let g = Hypergraph::new(4, vec![vec![0, 1, 2], vec![2, 3]], vec![2.0, 0.5], 0).unwrap();
        assert_eq!(g.vertex_degrees.as_slice(), &[2.0, 2.0, 2.5, 0.5]);
        assert_eq!(g.edge_degrees.as_slice(), &[3.0, 2.0]);
        let a = g.adjacency();
        assert_eq!(a, a.transpose());
        assert_eq!(a[(0, 1)], 2.0);
        assert_eq!(a[(2, 3)], 0.5);
        assert_eq!(a[(0, 0)], 0.0);
    }

    #[test]
    fn rejects_singleton_edges_and_isolated_vertices() {
        assert!(Hypergraph::new(3, vec![vec![0]], vec![1.0], 0).is_err());
        assert!(Hypergraph::new(3, vec![vec![0, 1]], vec![1.0], 0).is_err());
        assert!(matches!(Hypergraph::new(1, vec![], vec![], 0), Err(HypergraphError::TooFewVertices(1))));
    }

    #[test]
    fn two_vertex_operator_and_laplacian() {
        let g = pair();
        let o = g.random_walk_matrix();
        for v in o.iter() {
            assert_abs_diff_eq!(*v, 0.5, epsilon = 1e-15);
        }
        let l = g.laplacian();
        assert_abs_diff_eq!(l[(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(l[(0, 1)], -0.5, epsilon = 1e-15);
        let ev = g.laplacian_spectrum();
        assert_abs_diff_eq!(ev[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ev[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn walk_matches_scalar_oracle_and_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let g = random_hypergraph(&mut rng, 6);
            let o = g.random_walk_matrix();
            assert!((&o - walk_oracle(&g)).amax() < 1e-10);
            let s = g.sqrt_degree_vector();
            assert!((&o * &s - &s).amax() < 1e-10);
            for row in g.walk_matrix().row_iter() {
                assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn complete_edge_has_rank_n_minus_1() {
        let g = Hypergraph::new(5, vec![(0..5).collect()], vec![1.0], 4).unwrap();
        let ev = g.laplacian_spectrum();
        let rank = ev.iter().filter(|v| v.abs() > 1e-9).count();
        assert_eq!(rank, 4);
    }

    #[test]
    fn laplacian_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = random_hypergraph(&mut rng, 7);
        let l = g.laplacian();
        for _ in 0..100 {
            let f = DVector::from_fn(7, |_, _| rng.random_range(-1.0..1.0));
            assert!((f.transpose() * &l * &f)[(0, 0)] >= -1e-12);
        }
    }

    #[test]
    fn partition_cost_examples() {
        let g = pair();
        let f = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        assert_abs_diff_eq!(g.partition_cost(&f).unwrap(), 0.5, epsilon = 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_hypergraph(&mut rng, 6);
        let s = g.sqrt_degree_vector();
        let null = DMatrix::from_column_slice(6, 1, s.as_slice());
        assert_abs_diff_eq!(g.partition_cost(&null).unwrap(), 0.0, epsilon = 1e-10);

        let f = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let l = g.laplacian();
        let by_column: f64 = f.column_iter().map(|c| (c.transpose() * &l * c)[(0, 0)]).sum();
        assert_abs_diff_eq!(g.partition_cost(&f).unwrap(), by_column, epsilon = 1e-12);
        assert!(g.partition_cost(&DMatrix::zeros(5, 1)).is_err());
    }

    fn colinear_similarity() -> SimilarityMatrix {
        let q = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 3.0]);
        let d = mahalanobis_matrix(&q, CovarianceMode::Identity).unwrap();
        similarity_matrix(&d)
    }

    #[test]
    fn knn_colinear_example() {
        let g = build_hyperedges_knn(&colinear_similarity(), 1).unwrap();
        assert_eq!(g.edges, vec![vec![0, 1], vec![1, 2]]);
        assert_eq!(g.n_edges(), 2);
        assert_eq!(g.scale, 1);
    }

    #[test]
    fn knn_full_scale_is_one_edge() {
        let g = build_hyperedges_knn(&colinear_similarity(), 2).unwrap();
        assert_eq!(g.edges, vec![vec![0, 1, 2]]);
        assert!(matches!(
            build_hyperedges_knn(&colinear_similarity(), 3),
            Err(HypergraphError::BadScale { k: 3, max: 2 })
        ));
        assert!(build_hyperedges_knn(&colinear_similarity(), 0).is_err());
    }
}
