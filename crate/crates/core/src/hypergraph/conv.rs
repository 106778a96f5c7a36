use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;

use super::{build_hyperedges_knn, mahalanobis_matrix, similarity_matrix, CovarianceMode, Hypergraph};
use crate::nn::{FeedForward, Linear};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

fn dmatrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_fn(&[m.nrows(), m.ncols()], |k| m[(k / m.ncols(), k % m.ncols())])
}

/// First-order spectral convolution `ReLU(O · X · Θ)`.
pub fn hypergraph_convolve(tape: &mut Tape, g: &Hypergraph, x: Var, theta: Var) -> Result<Var> {
    if tape.shape(x)[0] != g.n_vertices {
        return Err(TensorError::Shape {
            op: "hypergraph_convolve",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![g.n_vertices],
        });
    }
    let o = tape.constant(dmatrix_to_tensor(&g.random_walk_matrix()))?;
    let ox = tape.matmul(o, x)?;
    let y = tape.matmul(ox, theta)?;
    tape.relu(y)
}

/// Clamps configured scales to `n - 1` and drops repeats, keeping the first
/// configured index for each distinct scale. Returns `(index, k)` pairs.
pub fn effective_scales(scales: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    if n < 2 {
        return out;
    }
    for (i, &k) in scales.iter().enumerate() {
        let k = k.clamp(1, n - 1);
        if !out.iter().any(|&(_, seen)| seen == k) {
            out.push((i, k));
        }
    }
    out
}

/// Group-wise interaction branch: trajectory embedding, per-scale KNN
/// hypergraphs, two stacked convolutions per scale and a shared token MLP.
#[derive(Clone, Debug)]
pub struct GroupBranch {
    pub embed: Linear,
    pub scales: Vec<usize>,
    /// `(Θ₁ [d_emb × d_model], Θ₂ [d_model × d_model])` per configured scale.
    pub conv: Vec<(ParamId, ParamId)>,
    pub mix: FeedForward,
    pub covariance: CovarianceMode,
    pub d_model: usize,
}

pub struct GroupOutput {
    /// `[N, L_H, d_model]`
    pub features: Var,
    pub hypergraphs: Vec<Hypergraph>,
}

impl GroupBranch {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        obs_dim: usize,
        d_emb: usize,
        d_model: usize,
        scales: &[usize],
        covariance: CovarianceMode,
    ) -> Self {
        let embed = Linear::new(store, rng, &format!("{name}/embed"), obs_dim, d_emb);
        let conv = scales
            .iter()
            .enumerate()
            .map(|(i, _)| {
                (
                    store.add(format!("{name}/scale{i}/theta1"), glorot(rng, d_emb, d_model)),
                    store.add(format!("{name}/scale{i}/theta2"), glorot(rng, d_model, d_model)),
                )
            })
            .collect();
        let mix = FeedForward::new(store, rng, &format!("{name}/mix"), d_model, d_model);
        Self {
            embed,
            scales: scales.to_vec(),
            conv,
            mix,
            covariance,
            d_model,
        }
    }

    /// `ReLU(FC(X))` over flattened, zero-filled observed tracks `[N, obs_dim]`.
    pub fn embed_trajectories(&self, tape: &mut Tape, store: &ParamStore, obs_flat: Var) -> Result<Var> {
        let e = self.embed.forward(tape, store, obs_flat)?;
        tape.relu(e)
    }

    /// Hypergraphs for every effective scale, built from embedding values.
    pub fn build_hypergraphs(&self, embeddings: &Tensor) -> Result<Vec<(usize, Hypergraph)>> {
        let n = embeddings.shape()[0];
        let d = embeddings.shape()[1];
        let q = DMatrix::from_row_slice(n, d, embeddings.data());
        let err = |e: super::HypergraphError| TensorError::Invalid { op: "hypergraph", msg: e.to_string() };
        let dist = mahalanobis_matrix(&q, self.covariance).map_err(err)?;
        let sim = similarity_matrix(&dist);
        effective_scales(&self.scales, n)
            .into_iter()
            .map(|(i, k)| Ok((i, build_hyperedges_knn(&sim, k).map_err(err)?)))
            .collect()
    }

    /// `Ŷ_H` of shape `[N, L_H, d_model]`. With fewer than two agents the
    /// branch emits zeros with one token per configured scale.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, obs_flat: Var) -> Result<GroupOutput> {
        let n = tape.shape(obs_flat)[0];
        if n < 2 {
            let z = tape.constant(Tensor::zeros(&[n, self.scales.len().max(1), self.d_model]))?;
            return Ok(GroupOutput { features: z, hypergraphs: Vec::new() });
        }
        let q = self.embed_trajectories(tape, store, obs_flat)?;
        let graphs = self.build_hypergraphs(tape.value(q))?;
        let mut tokens = Vec::with_capacity(graphs.len());
        for (i, g) in &graphs {
            let (t1, t2) = self.conv[*i];
            let t1 = tape.param(store, t1);
            let t2 = tape.param(store, t2);
            let y1 = hypergraph_convolve(tape, g, q, t1)?;
            let y2 = hypergraph_convolve(tape, g, y1, t2)?;
            tokens.push(tape.reshape(y2, &[n, 1, self.d_model])?);
        }
        let stacked = if tokens.len() == 1 { tokens[0] } else { tape.concat(&tokens, 1)? };
        let features = self.mix.forward(tape, store, stacked)?;
        Ok(GroupOutput {
            features,
            hypergraphs: graphs.into_iter().map(|(_, g)| g).collect(),
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.embed.params().to_vec();
        for &(a, b) in &self.conv {
            p.extend([a, b]);
        }
        p.extend(self.mix.up.params());
        p.extend(self.mix.down.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params};
    use crate::params::uniform;
    use rand::SeedableRng;

    #[test]
    fn scale_clamping() {
        assert_eq!(effective_scales(&[2, 3, 4], 9), vec![(0, 2), (1, 3), (2, 4)]);
        assert_eq!(effective_scales(&[2, 3, 4], 2), vec![(0, 1)]);
        assert_eq!(effective_scales(&[2, 3, 4], 4), vec![(0, 2), (1, 3)]);
        assert!(effective_scales(&[2], 1).is_empty());
    }

    #[test]
    fn averaging_operator_on_complete_edge() {
        let g = Hypergraph::new(3, vec![vec![0, 1, 2]], vec![1.0], 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap()).unwrap();
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let y = hypergraph_convolve(&mut tape, &g, x, eye).unwrap();
        for row in tape.value(y).data().chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12 && row[1] == 0.0);
        }
        let zero = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let y = hypergraph_convolve(&mut tape, &g, zero, eye).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        assert!(hypergraph_convolve(&mut tape, &g, bad, eye).is_err());
    }

    #[test]
    fn convolution_gradients() {
        let g = Hypergraph::new(4, vec![vec![0, 1, 2], vec![2, 3], vec![0, 3]], vec![1.0; 3], 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(&mut rng, &[4, 3], 1.0);
        let theta = uniform(&mut rng, &[3, 2], 1.0);
        let report = check_inputs(&[x, theta], 1e-5, |tape, v| {
            let y = hypergraph_convolve(tape, &g, v[0], v[1])?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    fn branch(store: &mut ParamStore, scales: &[usize]) -> GroupBranch {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        GroupBranch::new(store, &mut rng, "group", 16, 8, 8, scales, CovarianceMode::Sample)
    }

    #[test]
    fn embedding_examples() {
        let mut store = ParamStore::new();
        let b = branch(&mut store, &[2]);
        store.get_mut(b.embed.b).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[3, 16])).unwrap();
        let e = b.embed_trajectories(&mut tape, &store, zero).unwrap();
        assert!(tape.value(e).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = uniform(&mut rng, &[1, 16], 2.0);
        let two = Tensor::new(vec![2, 16], row.data().repeat(2)).unwrap();
        let x = tape.constant(two).unwrap();
        let e = b.embed_trajectories(&mut tape, &store, x).unwrap();
        let v = tape.value(e).data();
        assert_eq!(&v[..8], &v[8..]);
    }

    #[test]
    fn embedding_gradients() {
        let mut store = ParamStore::new();
        let b = branch(&mut store, &[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = uniform(&mut rng, &[3, 16], 2.0);
        let report = check_params(&store, &b.embed.params(), 1e-5, |s, tape| {
            let xv = tape.constant(x.clone())?;
            let e = b.embed_trajectories(tape, s, xv)?;
            let sq = tape.mul(e, e)?;
            tape.sum(sq)
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn multiscale_shapes() {
        let mut store = ParamStore::new();
        let b = branch(&mut store, &[2, 3, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(uniform(&mut rng, &[9, 16], 3.0)).unwrap();
        let out = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.features), &[9, 3, 8]);
        assert_eq!(out.hypergraphs.iter().map(|g| g.scale).collect::<Vec<_>>(), vec![2, 3, 4]);

        let x = tape.constant(uniform(&mut rng, &[2, 16], 3.0)).unwrap();
        let out = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.features), &[2, 1, 8]);

        let x = tape.constant(uniform(&mut rng, &[1, 16], 3.0)).unwrap();
        let out = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.features), &[1, 3, 8]);
        assert!(tape.value(out.features).data().iter().all(|&v| v == 0.0));
    }
}
