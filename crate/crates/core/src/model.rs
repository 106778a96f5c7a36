//! The assembled predictor: encoders, group branch, fusion and CVAE head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cvae::{sample_latent, CvaeConfig, CvaeError, CvaeHead, CvaeInput, FutureTrack, Loss, SampleMode};
use crate::data::{Horizon, TrajectoryWindow};
use crate::fusion::{Fusion, FusionConfig, ModalTokens};
use crate::hypergraph::{CovarianceMode, GroupBranch, Hypergraph};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::transformer::{EncoderConfig, ObservedTracks, SpatialEncoder, TemporalEncoder};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Cvae(#[from] CvaeError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub horizon: Horizon,
    pub d_model: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub layers: usize,
    pub scales: Vec<usize>,
    pub covariance: CovarianceMode,
    pub gcn_radius: f64,
    pub temporal_bias: bool,
    pub fusion_include_self: bool,
    pub d_z: usize,
    pub cvae_hidden: usize,
    pub sigma_prior: f64,
    pub kappa: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            horizon: Horizon::default(),
            d_model: 64,
            d_emb: 64,
            heads: 8,
            ffn_hidden: 256,
            layers: 2,
            scales: vec![2, 3, 4],
            covariance: CovarianceMode::Sample,
            gcn_radius: 5.0,
            temporal_bias: true,
            fusion_include_self: false,
            d_z: 32,
            cvae_hidden: 128,
            sigma_prior: 1.0,
            kappa: [1.0, 0.1, 0.1, 0.5],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        let positive = [
            ("obs_len", self.horizon.obs),
            ("pred_len", self.horizon.pred),
            ("d_model", self.d_model),
            ("d_emb", self.d_emb),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("layers", self.layers),
            ("d_z", self.d_z),
            ("cvae_hidden", self.cvae_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return err(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !self.d_model.is_multiple_of(2) {
            return err(format!("d_model must be even, got {}", self.d_model));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return err("scales must be a non-empty list of positive integers".into());
        }
        if !(self.sigma_prior > 0.0) || !(self.gcn_radius > 0.0) {
            return err("sigma_prior and gcn_radius must be positive".into());
        }
        if self.kappa.iter().any(|k| !(*k >= 0.0) || !k.is_finite()) {
            return err("kappa weights must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            layers: self.layers,
            gcn_radius: self.gcn_radius,
            temporal_bias: self.temporal_bias,
        }
    }

    pub fn fusion(&self) -> FusionConfig {
        FusionConfig {
            d_model: self.d_model,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            include_self: self.fusion_include_self,
        }
    }

    pub fn cvae(&self) -> CvaeConfig {
        CvaeConfig {
            d_model: self.d_model,
            d_z: self.d_z,
            hidden: self.cvae_hidden,
            obs_steps: self.horizon.obs,
            pred_steps: self.horizon.pred,
            sigma_prior: self.sigma_prior,
            kappa: self.kappa,
        }
    }
}

/// Window split into the constant inputs of one forward pass.
#[derive(Clone, Debug)]
pub struct PreparedWindow {
    pub tracks: ObservedTracks,
    pub input: CvaeInput,
}

impl PreparedWindow {
    /// Uses the window as-is; callers normalise beforehand.
    pub fn new(w: &TrajectoryWindow) -> Self {
        let tracks = ObservedTracks::from_window(w);
        let (obs, pred) = (w.horizon.obs, w.horizon.pred);
        let mut positions = Vec::with_capacity(w.n_agents() * pred);
        let mut presence = Vec::with_capacity(w.n_agents() * pred);
        for a in 0..w.n_agents() {
            for t in obs..obs + pred {
                positions.push(w.pos(a, t));
                presence.push(w.present(a, t));
            }
        }
        let future = FutureTrack { steps: pred, positions, presence };
        let input = CvaeInput::new(&tracks, Some(future));
        Self { tracks, input }
    }

    pub fn n_agents(&self) -> usize {
        self.tracks.n
    }
}

/// Conditioning shared by every decoded sample of a window.
pub struct Backbone {
    /// `Ŷ_M`, `[N, d_model]`.
    pub fused: Var,
    /// `[N, cvae_hidden]`
    pub obs_emb: Var,
    pub hypergraphs: Vec<Hypergraph>,
}

#[derive(Clone, Debug)]
pub struct HyperSttn {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub spatial: SpatialEncoder,
    pub temporal: TemporalEncoder,
    pub group: GroupBranch,
    pub fusion: Fusion,
    pub head: CvaeHead,
}

impl HyperSttn {
    /// Builds the model with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = config.encoder();
        let spatial = SpatialEncoder::new(&mut params, &mut rng, "spatial", &enc)?;
        let temporal = TemporalEncoder::new(&mut params, &mut rng, "temporal", &enc)?;
        let group = GroupBranch::new(
            &mut params,
            &mut rng,
            "group",
            2 * config.horizon.obs,
            config.d_emb,
            config.d_model,
            &config.scales,
            config.covariance,
        );
        let fusion = Fusion::new(&mut params, &mut rng, "fusion", &config.fusion())?;
        let head = CvaeHead::new(&mut params, &mut rng, "cvae", &config.cvae());
        Ok(Self {
            config: config.clone(),
            params,
            spatial,
            temporal,
            group,
            fusion,
            head,
        })
    }

    /// Every trainable parameter in construction order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.params.ids().collect()
    }

    fn check_window(&self, w: &PreparedWindow) -> Result<()> {
        let h = self.config.horizon;
        let fut_steps = w.input.future.as_ref().map_or(h.pred, |f| f.steps);
        if w.tracks.steps != h.obs || fut_steps != h.pred || w.tracks.n == 0 {
            return Err(ModelError::Config(format!(
                "window has {} agents, {}+{} steps; model expects {}+{}",
                w.tracks.n, w.tracks.steps, fut_steps, h.obs, h.pred
            )));
        }
        Ok(())
    }

    /// Runs both encoders, the group branch and fusion.
    pub fn backbone(&self, tape: &mut Tape, store: &ParamStore, w: &PreparedWindow) -> Result<Backbone> {
        self.check_window(w)?;
        let ys = self.spatial.forward(tape, store, &w.tracks)?;
        let yt = self.temporal.forward(tape, store, &w.tracks)?;
        let obs_flat = tape.constant(w.input.obs_positions.clone())?;
        let group = self.group.forward(tape, store, obs_flat)?;
        if tape.probing() {
            let records: Vec<(String, Tensor)> = group
                .hypergraphs
                .iter()
                .map(|g| {
                    let h = &g.incidence;
                    let t = Tensor::from_fn(&[h.nrows(), h.ncols()], |k| h[(k / h.ncols(), k % h.ncols())]);
                    (format!("hypergraph/{}", g.scale), t)
                })
                .collect();
            for (name, t) in records {
                tape.record_probe(name, t);
            }
        }
        let tokens = ModalTokens {
            spatial: ys,
            temporal: yt,
            group: group.features,
            time_presence: w.tracks.presence.clone(),
        };
        let fused = self.fusion.forward(tape, store, &tokens)?;
        let obs_emb = self.head.observe(tape, store, &w.input)?;
        Ok(Backbone {
            fused,
            obs_emb,
            hypergraphs: group.hypergraphs,
        })
    }

    /// Training objective with one reparameterised posterior sample.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, w: &PreparedWindow, rng: &mut ChaCha8Rng) -> Result<Loss> {
        let b = self.backbone(tape, store, w)?;
        let post = self.head.encode_posterior(tape, store, &w.input, b.obs_emb, b.fused)?;
        let z = sample_latent(tape, SampleMode::Train(&post), rng)?;
        let pred = self
            .head
            .decode_trajectories(tape, store, &w.input, z, b.obs_emb, b.fused)?;
        Ok(self.head.loss_total(tape, &w.input, pred, &post)?)
    }

    /// `k` prior samples of the future, each agent-major `[N * T_o]` in the
    /// window frame.
    pub fn sample_futures(&self, w: &PreparedWindow, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut tape = Tape::new();
        self.sample_on_tape(&mut tape, w, k, rng)
    }

    pub fn sample_on_tape(
        &self,
        tape: &mut Tape,
        w: &PreparedWindow,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec<[f64; 2]>>> {
        let b = self.backbone(tape, &self.params, w)?;
        let mode = SampleMode::Test {
            n: w.n_agents(),
            d_z: self.config.d_z,
            sigma_prior: self.config.sigma_prior,
        };
        (0..k)
            .map(|_| {
                let z = sample_latent(tape, mode, rng)?;
                let pred = self
                    .head
                    .decode_trajectories(tape, &self.params, &w.input, z, b.obs_emb, b.fused)?;
                Ok(tape.value(pred).data().chunks(2).map(|c| [c[0], c[1]]).collect())
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize_window, synth_generate, window_scene};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_emb: 8,
            heads: 2,
            ffn_hidden: 16,
            layers: 1,
            d_z: 4,
            cvae_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = ModelConfig { heads: 3, ..tiny_config() };
        assert!(HyperSttn::new(&bad, 0).is_err());
        let bad = ModelConfig { scales: vec![], ..tiny_config() };
        assert!(HyperSttn::new(&bad, 0).is_err());
    }

    #[test]
    fn forward_shapes() {
        let scenes = synth_generate(1, 1, (3, 5)).unwrap();
        let w = &window_scene(&scenes[0], Horizon::default(), 20)[0];
        let (w, _) = normalize_window(w);
        let model = HyperSttn::new(&tiny_config(), 0).unwrap();
        let p = PreparedWindow::new(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples = model.sample_futures(&p, 3, &mut rng).unwrap();
        assert_eq!(samples.len(), 3);
        assert!(samples.iter().all(|s| s.len() == w.n_agents() * 12));
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &model.params, &p, &mut rng).unwrap();
        assert!(tape.value(loss.total).item().is_finite());
    }
}
