//! Pair-wise interaction encoders.
//!
//! The spatial encoder attends across agents within each observed timestep;
//! the temporal encoder attends across timesteps within each agent. Both add
//! a learned distance bias `ω` to the attention logits and hide absent keys
//! with `-inf`.

use rand_chacha::ChaCha8Rng;

use crate::data::TrajectoryWindow;
use crate::nn::{FeedForward, Linear, MultiHeadAttention, Norm};
use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

/// Observed segment of a window, zero-filled where absent.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedTracks {
    pub n: usize,
    pub steps: usize,
    /// `[n * steps]`, agent-major.
    pub positions: Vec<[f64; 2]>,
    pub presence: Vec<bool>,
}

impl ObservedTracks {
    pub fn from_window(w: &TrajectoryWindow) -> Self {
        let steps = w.horizon.obs;
        let n = w.n_agents();
        let mut positions = Vec::with_capacity(n * steps);
        let mut presence = Vec::with_capacity(n * steps);
        for a in 0..n {
            for t in 0..steps {
                let p = w.present(a, t);
                presence.push(p);
                positions.push(if p { w.pos(a, t) } else { [0.0, 0.0] });
            }
        }
        Self { n, steps, positions, presence }
    }

    pub fn pos(&self, agent: usize, t: usize) -> [f64; 2] {
        self.positions[agent * self.steps + t]
    }

    pub fn present(&self, agent: usize, t: usize) -> bool {
        self.presence[agent * self.steps + t]
    }

    /// `[n, steps, 2]`
    pub fn position_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.n, self.steps, 2], |k| self.positions[k / 2][k % 2])
    }

    /// `[n, steps, width]` of ones at present slots.
    pub fn presence_tensor(&self, width: usize) -> Tensor {
        Tensor::from_fn(&[self.n, self.steps, width], |k| {
            if self.presence[k / width] {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Keeps the listed agents in the given order.
    pub fn select(&self, agents: &[usize]) -> Self {
        let mut positions = Vec::with_capacity(agents.len() * self.steps);
        let mut presence = Vec::with_capacity(agents.len() * self.steps);
        for &a in agents {
            positions.extend_from_slice(&self.positions[a * self.steps..(a + 1) * self.steps]);
            presence.extend_from_slice(&self.presence[a * self.steps..(a + 1) * self.steps]);
        }
        Self {
            n: agents.len(),
            steps: self.steps,
            positions,
            presence,
        }
    }
}

/// Additive attention mask: `-inf` at absent keys, `ω` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub values: Tensor,
}

impl AttentionMask {
    pub fn is_hidden(&self, row: usize, col: usize) -> bool {
        self.values.get(&[row, col]) == f64::NEG_INFINITY
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Spatial mask at one timestep with `ω = w·‖p_i − p_j‖ + b`.
pub fn build_spatial_mask(positions: &[[f64; 2]], presence: &[bool], w: f64, b: f64) -> Result<AttentionMask> {
    let n = positions.len();
    if presence.len() != n {
        return Err(TensorError::Shape {
            op: "spatial_mask",
            lhs: vec![n],
            rhs: vec![presence.len()],
        });
    }
    let values = Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if presence[j] {
            w * dist(positions[i], positions[j]) + b
        } else {
            f64::NEG_INFINITY
        }
    });
    Ok(AttentionMask { values })
}

/// Sinusoidal table `[len, d]`: `sin(p / 10000^(2i/d))` at even columns and
/// the matching cosine at odd ones.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(TensorError::Invalid {
            op: "positional_encode",
            msg: format!("d_model must be even, got {d}"),
        });
    }
    Ok(Tensor::from_fn(&[len, d], |k| {
        let (p, c) = (k / d, k % d);
        let freq = 10000f64.powf((c - c % 2) as f64 / d as f64);
        let a = p as f64 / freq;
        if c % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    }))
}

/// `x + PE` for `x` of shape `[L, d]`.
pub fn positional_encode(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(TensorError::Shape {
            op: "positional_encode",
            lhs: s.to_vec(),
            rhs: vec![],
        });
    }
    let pe = positional_encoding(s[0], s[1])?;
    Tensor::new(s.to_vec(), x.data().iter().zip(pe.data()).map(|(a, b)| a + b).collect())
}

/// Builds `[B, L, L]` bias-plus-presence logits on the tape. `pair` gives the
/// bias feature of `(b, i, j)` and `visible` whether key `j` is present.
fn bias_mask(
    tape: &mut Tape,
    store: &ParamStore,
    omega: Option<ParamId>,
    (b, l): (usize, usize),
    pair: impl Fn(usize, usize, usize) -> f64,
    visible: impl Fn(usize, usize) -> bool,
) -> Result<Var> {
    let hidden = Tensor::from_fn(&[b, l, l], |k| {
        if visible(k / (l * l), k % l) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    });
    let hidden = tape.constant(hidden)?;
    let Some(omega) = omega else {
        return Ok(hidden);
    };
    let feats = Tensor::from_fn(&[b * l * l, 1], |r| pair(r / (l * l), (r / l) % l, r % l));
    let feats = tape.constant(feats)?;
    let w = tape.param(store, omega);
    let bias = tape.matmul(feats, w)?;
    let bias = tape.reshape(bias, &[b, l, l])?;
    tape.add(bias, hidden)
}

/// Shared hyperparameters of both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    /// Neighbourhood radius of the spatial graph convolution, meters.
    pub gcn_radius: f64,
    /// Time-gap bias in the temporal mask; off leaves only presence.
    pub temporal_bias: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 8,
            ffn_hidden: 256,
            layers: 2,
            gcn_radius: 5.0,
            temporal_bias: true,
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    norm1: Norm,
    attn: MultiHeadAttention,
    norm2: Norm,
    ffn: FeedForward,
    /// `[1, 1]` distance weight of `ω`. A bias would shift every logit of a
    /// row equally and cancel in the softmax, so none is learned.
    omega: Option<ParamId>,
    gcn: Option<ParamId>,
}

impl EncoderLayer {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &EncoderConfig,
        omega: bool,
        gcn: bool,
    ) -> Result<Self> {
        Ok(Self {
            norm1: Norm::new(store, &format!("{name}/norm1"), cfg.d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}/attn"), cfg.d_model, cfg.heads)?,
            norm2: Norm::new(store, &format!("{name}/norm2"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}/ffn"), cfg.d_model, cfg.ffn_hidden),
            omega: omega.then(|| store.add(format!("{name}/omega"), Tensor::zeros(&[1, 1]))),
            gcn: gcn.then(|| store.add(format!("{name}/gcn"), glorot(rng, cfg.d_model, cfg.d_model))),
        })
    }

    /// Pre-norm block: `x + MHA(LN x) [+ Â·LN(x)·W_g]`, then `+ FFN(LN x)`.
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Var,
        adjacency: Option<Var>,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(tape, store, x)?;
        let att = self.attn.forward(tape, store, h, h, Some(mask))?;
        let mut x = tape.add(x, att.out)?;
        if let (Some(a), Some(wg)) = (adjacency, self.gcn) {
            let wg = tape.param(store, wg);
            let ah = tape.matmul(a, h)?;
            let g = tape.matmul(ah, wg)?;
            x = tape.add(x, g)?;
        }
        let h = self.norm2.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        Ok((tape.add(x, f)?, att.weights))
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.norm1.gain, self.norm1.bias];
        p.extend(self.attn.params());
        p.extend([self.norm2.gain, self.norm2.bias]);
        p.extend(self.ffn.up.params());
        p.extend(self.ffn.down.params());
        p.extend(self.omega);
        p.extend(self.gcn);
        p
    }

    fn omega_weight(&self, store: &ParamStore) -> f64 {
        self.omega.map_or(0.0, |id| store.get(id).data()[0])
    }
}

/// Stores `[B, h, Lq, Lk]` weights as one `[h, Lq, Lk]` probe per batch
/// entry, named `<prefix>/<b>`.
pub(crate) fn record_attention(tape: &mut Tape, prefix: &str, weights: Var) {
    if !tape.probing() {
        return;
    }
    let w = tape.value(weights).clone();
    let s = w.shape().to_vec();
    let per = s[1] * s[2] * s[3];
    let probes: Vec<(String, Tensor)> = (0..s[0])
        .map(|b| {
            let data = w.data()[b * per..(b + 1) * per].to_vec();
            let t = Tensor::new(s[1..].to_vec(), data).expect("slice of weights");
            (format!("{prefix}/{b}"), t)
        })
        .collect();
    for (name, t) in probes {
        tape.record_probe(name, t);
    }
}

/// Symmetric-normalised `D^{-1/2}(A + I)D^{-1/2}` per timestep over present
/// agents closer than `radius`. `[steps, n, n]`.
pub fn spatial_adjacency(tracks: &ObservedTracks, radius: f64) -> Tensor {
    let (n, steps) = (tracks.n, tracks.steps);
    let mut out = Tensor::zeros(&[steps, n, n]);
    for t in 0..steps {
        let linked = |i: usize, j: usize| {
            tracks.present(i, t)
                && tracks.present(j, t)
                && (i == j || dist(tracks.pos(i, t), tracks.pos(j, t)) < radius)
        };
        let deg: Vec<f64> = (0..n).map(|i| (0..n).filter(|&j| linked(i, j)).count() as f64).collect();
        for i in 0..n {
            for j in 0..n {
                if linked(i, j) {
                    out.set(&[t, i, j], 1.0 / (deg[i] * deg[j]).sqrt());
                }
            }
        }
    }
    out
}

/// Attention across agents at each observed timestep.
#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    radius: f64,
    d_model: usize,
}

impl SpatialEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let embed = Linear::new(store, rng, &format!("{name}/embed"), 2, cfg.d_model);
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{name}/layer{l}"), cfg, true, true))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            radius: cfg.gcn_radius,
            d_model: cfg.d_model,
        })
    }

    /// `Ŷ_S` of shape `[N, T_i, d_model]`, zero at absent slots.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tracks: &ObservedTracks) -> Result<Var> {
        let (n, steps, d) = (tracks.n, tracks.steps, self.d_model);
        // time-major [T, N, ..] so every timestep is one attention batch
        let pos = tape.constant(tracks.position_tensor())?;
        let pos = tape.permute(pos, &[1, 0, 2])?;
        let mut x = self.embed.forward(tape, store, pos)?;
        let adjacency = tape.constant(spatial_adjacency(tracks, self.radius))?;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = bias_mask(
                tape,
                store,
                layer.omega,
                (steps, n),
                |t, i, j| dist(tracks.pos(i, t), tracks.pos(j, t)),
                |t, j| tracks.present(j, t),
            )?;
            let (y, weights) = layer.forward(tape, store, x, mask, Some(adjacency))?;
            record_attention(tape, &format!("attn/spatial/{l}"), weights);
            x = y;
        }
        let x = tape.permute(x, &[1, 0, 2])?;
        let keep = tape.constant(tracks.presence_tensor(d))?;
        tape.mul(x, keep)
    }

    /// Plain-value masks per layer and timestep, as used by the forward pass.
    pub fn masks(&self, store: &ParamStore, tracks: &ObservedTracks) -> Result<Vec<Vec<AttentionMask>>> {
        self.layers
            .iter()
            .map(|layer| {
                let w = layer.omega_weight(store);
                (0..tracks.steps)
                    .map(|t| {
                        let pos: Vec<_> = (0..tracks.n).map(|a| tracks.pos(a, t)).collect();
                        let pres: Vec<_> = (0..tracks.n).map(|a| tracks.present(a, t)).collect();
                        build_spatial_mask(&pos, &pres, w, 0.0)
                    })
                    .collect()
            })
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.embed.params().to_vec();
        for l in &self.layers {
            p.extend(l.params());
        }
        p
    }
}

/// Attention across timesteps within each agent.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    embed: Linear,
    layers: Vec<EncoderLayer>,
    d_model: usize,
}

impl TemporalEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        positional_encoding(1, cfg.d_model)?;
        let embed = Linear::new(store, rng, &format!("{name}/embed"), 2, cfg.d_model);
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{name}/layer{l}"), cfg, cfg.temporal_bias, false))
            .collect::<Result<_>>()?;
        Ok(Self {
            embed,
            layers,
            d_model: cfg.d_model,
        })
    }

    /// `Ŷ_T` of shape `[N, T_i, d_model]`, zero at absent slots.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tracks: &ObservedTracks) -> Result<Var> {
        let (n, steps, d) = (tracks.n, tracks.steps, self.d_model);
        let pos = tape.constant(tracks.position_tensor())?;
        let e = self.embed.forward(tape, store, pos)?;
        let pe = tape.constant(positional_encoding(steps, d)?)?;
        let mut x = tape.add(e, pe)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = bias_mask(
                tape,
                store,
                layer.omega,
                (n, steps),
                |_, t, u| t.abs_diff(u) as f64,
                |a, u| tracks.present(a, u),
            )?;
            let (y, weights) = layer.forward(tape, store, x, mask, None)?;
            record_attention(tape, &format!("attn/temporal/{l}"), weights);
            x = y;
        }
        let keep = tape.constant(tracks.presence_tensor(d))?;
        tape.mul(x, keep)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.embed.params().to_vec();
        for l in &self.layers {
            p.extend(l.params());
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::uniform;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            layers: 2,
            gcn_radius: 5.0,
            temporal_bias: true,
        }
    }

    fn random_tracks(rng: &mut ChaCha8Rng, n: usize, steps: usize) -> ObservedTracks {
        let mut positions = Vec::new();
        let mut presence = Vec::new();
        for _ in 0..n * steps {
            positions.push([rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)]);
            presence.push(rng.random_bool(0.8));
        }
        // keep one present step per agent
        for a in 0..n {
            presence[a * steps + steps - 1] = true;
        }
        for (p, q) in positions.iter_mut().zip(&presence) {
            if !q {
                *p = [0.0, 0.0];
            }
        }
        ObservedTracks { n, steps, positions, presence }
    }

    fn perturb_omegas(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("omega")).collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }

    #[test]
    fn positional_examples() {
        let pe = positional_encoding(20, 4).unwrap();
        assert_eq!(&pe.data()[..4], &[0.0, 1.0, 0.0, 1.0]);
        let row1 = &pe.data()[4..8];
        let expect = [1f64.sin(), 1f64.cos(), 0.01f64.sin(), 0.01f64.cos()];
        for (a, b) in row1.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        for i in 0..20 {
            for j in i + 1..20 {
                assert_ne!(&pe.data()[i * 4..i * 4 + 4], &pe.data()[j * 4..j * 4 + 4]);
            }
        }
        assert!(positional_encoding(3, 5).is_err());
        let x = positional_encode(&Tensor::zeros(&[2, 4])).unwrap();
        assert_eq!(x.data(), &pe.data()[..8]);
    }

    #[test]
    fn spatial_mask_examples() {
        let p = [[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]];
        let m = build_spatial_mask(&p, &[true, true, true], 0.0, 0.0).unwrap();
        assert!(m.values.data().iter().all(|&v| v == 0.0));
        let m = build_spatial_mask(&p, &[true, true, true], 1.0, 0.0).unwrap();
        assert_eq!(m.values.get(&[0, 1]), 5.0);
        assert_eq!(m.values.get(&[2, 2]), 0.0);
        let m = build_spatial_mask(&p, &[true, true, false], 1.0, 0.0).unwrap();
        assert!((0..3).all(|i| m.is_hidden(i, 2)));
        assert!(!m.is_hidden(2, 0));
    }

    #[test]
    fn tape_mask_matches_plain_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = SpatialEncoder::new(&mut store, &mut rng, "s", &small_cfg()).unwrap();
        perturb_omegas(&mut store, &mut rng);
        let tracks = random_tracks(&mut rng, 4, 3);
        let plain = enc.masks(&store, &tracks).unwrap();
        let mut tape = Tape::new();
        let layer = &enc.layers[1];
        let m = bias_mask(
            &mut tape,
            &store,
            layer.omega,
            (3, 4),
            |t, i, j| dist(tracks.pos(i, t), tracks.pos(j, t)),
            |t, j| tracks.present(j, t),
        )
        .unwrap();
        for t in 0..3 {
            for k in 0..16 {
                let a = tape.value(m).data()[t * 16 + k];
                let b = plain[1][t].values.data()[k];
                assert!(a == b || (a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shapes_and_absent_slots() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cfg = small_cfg();
        let s = SpatialEncoder::new(&mut store, &mut rng, "s", &cfg).unwrap();
        let t = TemporalEncoder::new(&mut store, &mut rng, "t", &cfg).unwrap();
        let tracks = random_tracks(&mut rng, 3, 8);
        let mut tape = Tape::new();
        for out in [
            s.forward(&mut tape, &store, &tracks).unwrap(),
            t.forward(&mut tape, &store, &tracks).unwrap(),
        ] {
            assert_eq!(tape.shape(out), &[3, 8, 8]);
            for a in 0..3 {
                for st in 0..8 {
                    let row = &tape.value(out).data()[(a * 8 + st) * 8..(a * 8 + st + 1) * 8];
                    if !tracks.present(a, st) {
                        assert!(row.iter().all(|&v| v == 0.0));
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_agents_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let t = TemporalEncoder::new(&mut store, &mut rng, "t", &small_cfg()).unwrap();
        perturb_omegas(&mut store, &mut rng);
        let mut tracks = random_tracks(&mut rng, 3, 6);
        let same = tracks.positions[..6].to_vec();
        tracks.positions[6..12].copy_from_slice(&same);
        let pres = tracks.presence[..6].to_vec();
        tracks.presence[6..12].copy_from_slice(&pres);
        let mut tape = Tape::new();
        let y = t.forward(&mut tape, &store, &tracks).unwrap();
        let v = tape.value(y).data().to_vec();
        assert_eq!(&v[..48], &v[48..96]);

        let mut zeroed = tracks.clone();
        zeroed.positions[12..18].fill([0.0, 0.0]);
        let y2 = t.forward(&mut tape, &store, &zeroed).unwrap();
        assert_eq!(&tape.value(y2).data()[..96], &v[..96]);
    }

    #[test]
    fn lone_agent_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let s = SpatialEncoder::new(&mut store, &mut rng, "s", &small_cfg()).unwrap();
        let tracks = random_tracks(&mut rng, 1, 4);
        let mut tape = Tape::with_probes();
        s.forward(&mut tape, &store, &tracks).unwrap();
        let probes = tape.take_probes();
        assert_eq!(probes.len(), 8);
        for (name, w) in probes {
            assert!(name.starts_with("attn/spatial/"));
            if w.data().iter().any(|&v| v != 0.0) {
                assert!(w.data().iter().all(|&v| v == 1.0));
            }
        }
    }

    #[test]
    fn spatial_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let s = SpatialEncoder::new(&mut store, &mut rng, "s", &small_cfg()).unwrap();
        perturb_omegas(&mut store, &mut rng);
        let tracks = random_tracks(&mut rng, 3, 8);
        let probe = uniform(&mut rng, &[3, 8, 8], 1.0);
        let report = check_params(&store, &s.params(), 1e-5, |st, tape| {
            let y = s.forward(tape, st, &tracks)?;
            let p = tape.constant(probe.clone())?;
            let m = tape.mul(y, p)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }

    #[test]
    fn spatial_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let s = SpatialEncoder::new(&mut store, &mut rng, "s", &small_cfg()).unwrap();
        perturb_omegas(&mut store, &mut rng);
        let tracks = random_tracks(&mut rng, 4, 5);
        let perm = [2, 0, 3, 1];
        let mut tape = Tape::new();
        let y = s.forward(&mut tape, &store, &tracks).unwrap();
        let yp = s.forward(&mut tape, &store, &tracks.select(&perm)).unwrap();
        let (a, b) = (tape.value(y).data(), tape.value(yp).data());
        let w = 5 * 8;
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..w {
                assert!((a[old * w + k] - b[new * w + k]).abs() < 1e-8);
            }
        }
    }
}
