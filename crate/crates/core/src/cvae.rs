//! CVAE head: posterior encoder, latent sampling, displacement decoder and
//! the training loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::transformer::ObservedTracks;

#[derive(Debug, Error)]
pub enum CvaeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("the posterior encoder needs the future segment")]
    MissingFuture,
    #[error("non-finite {0} loss")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, CvaeError>;

/// Numerical floor inside `sqrt(d² + ε) − sqrt(ε)` distances.
pub const DISTANCE_EPS: f64 = 1e-12;
/// Ground-truth vectors shorter than this are left out of the angle loss.
pub const ANGLE_MIN_NORM: f64 = 1e-6;

/// Observed-step features per agent: absolute position, position relative
/// to the anchor and a presence flag.
pub const OBS_FEATURES_PER_STEP: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct CvaeConfig {
    pub d_model: usize,
    pub d_z: usize,
    pub hidden: usize,
    pub obs_steps: usize,
    pub pred_steps: usize,
    pub sigma_prior: f64,
    /// `(κ₁, κ₂, κ₃, κ₄)`: distance, KL, angle and reconstruction weights.
    pub kappa: [f64; 4],
}

impl Default for CvaeConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_z: 32,
            hidden: 128,
            obs_steps: 8,
            pred_steps: 12,
            sigma_prior: 1.0,
            kappa: [1.0, 0.1, 0.1, 0.5],
        }
    }
}

/// Ground-truth future in the window frame, agent-major `[n * steps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FutureTrack {
    pub steps: usize,
    pub positions: Vec<[f64; 2]>,
    pub presence: Vec<bool>,
}

/// Constant per-window tensors consumed by the head.
#[derive(Clone, Debug)]
pub struct CvaeInput {
    pub n: usize,
    /// `[N, OBS_FEATURES_PER_STEP · T_i]`
    pub obs_features: Tensor,
    /// `[N, 2·T_i]`, zero where absent.
    pub obs_positions: Tensor,
    /// `[N, T_i]` presence as 0/1.
    pub obs_mask: Tensor,
    /// Last present observed position per agent.
    pub anchor: Vec<[f64; 2]>,
    pub future: Option<FutureTrack>,
}

impl CvaeInput {
    pub fn new(tracks: &ObservedTracks, future: Option<FutureTrack>) -> Self {
        let (n, steps) = (tracks.n, tracks.steps);
        let anchor: Vec<[f64; 2]> = (0..n)
            .map(|a| {
                (0..steps)
                    .rev()
                    .find(|&t| tracks.present(a, t))
                    .map_or([0.0, 0.0], |t| tracks.pos(a, t))
            })
            .collect();
        let f = OBS_FEATURES_PER_STEP;
        let obs_features = Tensor::from_fn(&[n, f * steps], |k| {
            let (a, t, c) = (k / (f * steps), (k / f) % steps, k % f);
            if !tracks.present(a, t) {
                return 0.0;
            }
            let p = tracks.pos(a, t);
            match c {
                0 | 1 => p[c],
                2 | 3 => p[c - 2] - anchor[a][c - 2],
                _ => 1.0,
            }
        });
        let obs_positions = Tensor::from_fn(&[n, 2 * steps], |k| tracks.positions[k / 2][k % 2]);
        let obs_mask = Tensor::from_fn(&[n, steps], |k| if tracks.presence[k] { 1.0 } else { 0.0 });
        Self {
            n,
            obs_features,
            obs_positions,
            obs_mask,
            anchor,
            future,
        }
    }

    /// Future positions relative to the anchor, `[N, 2·T_o]`, zero where absent.
    fn future_relative(&self) -> Result<Tensor> {
        let fut = self.future.as_ref().ok_or(CvaeError::MissingFuture)?;
        let s = fut.steps;
        Ok(Tensor::from_fn(&[self.n, 2 * s], |k| {
            let (a, c) = (k / (2 * s), k % 2);
            let idx = k / 2;
            if fut.presence[idx] {
                fut.positions[idx][c] - self.anchor[a][c]
            } else {
                0.0
            }
        }))
    }
}

/// Gaussian posterior `N(μ, σ²)` per agent plus the auxiliary
/// reconstruction of the observed track.
#[derive(Clone, Copy, Debug)]
pub struct LatentPosterior {
    /// `[N, d_z]`
    pub mu: Var,
    /// `[N, d_z]`
    pub log_sigma: Var,
    /// `[N, 2·T_i]`
    pub recon: Var,
}

#[derive(Clone, Copy, Debug)]
pub enum SampleMode<'a> {
    /// Reparameterised `μ + σ ⊙ ε`.
    Train(&'a LatentPosterior),
    /// Prior draw `N(0, σ_prior² I)`.
    Test { n: usize, d_z: usize, sigma_prior: f64 },
}

pub fn sample_latent(tape: &mut Tape, mode: SampleMode<'_>, rng: &mut ChaCha8Rng) -> Result<Var> {
    match mode {
        SampleMode::Train(post) => {
            let shape = tape.shape(post.mu).to_vec();
            let eps = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
            let eps = tape.constant(eps)?;
            let sigma = tape.exp(post.log_sigma)?;
            let noise = tape.mul(sigma, eps)?;
            Ok(tape.add(post.mu, noise)?)
        }
        SampleMode::Test { n, d_z, sigma_prior } => {
            let z = Tensor::from_fn(&[n, d_z], |_| sigma_prior * rng.sample::<f64, _>(StandardNormal));
            Ok(tape.constant(z)?)
        }
    }
}

/// Scalar loss values, already weighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub distance: f64,
    pub kl: f64,
    pub angle: f64,
    pub encoder: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.distance + self.kl + self.angle + self.encoder
    }

    pub fn add(&mut self, o: &LossComponents) {
        self.distance += o.distance;
        self.kl += o.kl;
        self.angle += o.angle;
        self.encoder += o.encoder;
    }

    pub fn scale(&mut self, c: f64) {
        self.distance *= c;
        self.kl *= c;
        self.angle *= c;
        self.encoder *= c;
    }
}

pub struct Loss {
    pub total: Var,
    pub components: LossComponents,
}

#[derive(Clone, Debug)]
pub struct CvaeHead {
    pub obs_embed: Linear,
    pub fut_embed: Linear,
    pub trunk: Linear,
    pub mu: Linear,
    pub log_sigma: Linear,
    pub recon: Linear,
    pub dec1: Linear,
    pub dec2: Linear,
    pub dec_out: Linear,
    /// Linear path from observed features straight to the increments.
    pub skip: Linear,
    pub cfg: CvaeConfig,
}

impl CvaeHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &CvaeConfig) -> Self {
        let h = cfg.hidden;
        let obs_dim = OBS_FEATURES_PER_STEP * cfg.obs_steps;
        let out = 2 * cfg.pred_steps;
        let mut lin = |part: &str, i, o| Linear::new(store, rng, &format!("{name}/{part}"), i, o);
        let obs_embed = lin("obs_embed", obs_dim, h);
        let fut_embed = lin("fut_embed", out, h);
        let trunk = lin("enc_trunk", 2 * h + cfg.d_model, h);
        let mu = lin("enc_mu", h, cfg.d_z);
        let log_sigma = lin("enc_log_sigma", h, cfg.d_z);
        let recon = lin("enc_recon", h, 2 * cfg.obs_steps);
        let dec1 = lin("dec1", cfg.d_z + h + cfg.d_model, h);
        let dec2 = lin("dec2", h, h);
        let dec_out = Linear::scaled(store, rng, &format!("{name}/dec_out"), h, out, 0.1);
        let skip = Linear::scaled(store, rng, &format!("{name}/skip"), obs_dim, out, 0.1);
        Self {
            obs_embed,
            fut_embed,
            trunk,
            mu,
            log_sigma,
            recon,
            dec1,
            dec2,
            dec_out,
            skip,
            cfg: cfg.clone(),
        }
    }

    /// Observed-track embedding `[N, hidden]`.
    pub fn observe(&self, tape: &mut Tape, store: &ParamStore, input: &CvaeInput) -> Result<Var> {
        let x = tape.constant(input.obs_features.clone())?;
        let e = self.obs_embed.forward(tape, store, x)?;
        Ok(tape.relu(e)?)
    }

    pub fn encode_posterior(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &CvaeInput,
        obs_emb: Var,
        fused: Var,
    ) -> Result<LatentPosterior> {
        let fut = tape.constant(input.future_relative()?)?;
        let fe = self.fut_embed.forward(tape, store, fut)?;
        let fe = tape.relu(fe)?;
        let cat = tape.concat(&[obs_emb, fe, fused], 1)?;
        let h = self.trunk.forward(tape, store, cat)?;
        let h = tape.relu(h)?;
        Ok(LatentPosterior {
            mu: self.mu.forward(tape, store, h)?,
            log_sigma: self.log_sigma.forward(tape, store, h)?,
            recon: self.recon.forward(tape, store, h)?,
        })
    }

    /// Per-step displacement increments `[N, 2·T_o]`.
    pub fn decode_increments(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &CvaeInput,
        z: Var,
        obs_emb: Var,
        fused: Var,
    ) -> Result<Var> {
        let cat = tape.concat(&[z, obs_emb, fused], 1)?;
        let h = self.dec1.forward(tape, store, cat)?;
        let h = tape.relu(h)?;
        let h = self.dec2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let inc = self.dec_out.forward(tape, store, h)?;
        let obs = tape.constant(input.obs_features.clone())?;
        let direct = self.skip.forward(tape, store, obs)?;
        Ok(tape.add(inc, direct)?)
    }

    /// Absolute future positions `[N, T_o, 2]`: anchor plus cumulative
    /// increments.
    pub fn decode_trajectories(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        input: &CvaeInput,
        z: Var,
        obs_emb: Var,
        fused: Var,
    ) -> Result<Var> {
        let (n, s) = (input.n, self.cfg.pred_steps);
        let inc = self.decode_increments(tape, store, input, z, obs_emb, fused)?;
        // C[(u, c), (t, c')] = 1 when u <= t and c == c'
        let cum = Tensor::from_fn(&[2 * s, 2 * s], |k| {
            let (r, col) = (k / (2 * s), k % (2 * s));
            if r % 2 == col % 2 && r / 2 <= col / 2 {
                1.0
            } else {
                0.0
            }
        });
        let cum = tape.constant(cum)?;
        let offsets = tape.matmul(inc, cum)?;
        let anchor = Tensor::from_fn(&[n, 2 * s], |k| input.anchor[k / (2 * s)][k % 2]);
        let anchor = tape.constant(anchor)?;
        let pos = tape.add(offsets, anchor)?;
        Ok(tape.reshape(pos, &[n, s, 2])?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [
            &self.obs_embed,
            &self.fut_embed,
            &self.trunk,
            &self.mu,
            &self.log_sigma,
            &self.recon,
            &self.dec1,
            &self.dec2,
            &self.dec_out,
            &self.skip,
        ]
        .iter()
        .flat_map(|l| l.params())
        .collect()
    }

    /// Weighted `L_dis + L_ang + L_enc`. `pred` is `[N, T_o, 2]`.
    pub fn loss_total(&self, tape: &mut Tape, input: &CvaeInput, pred: Var, post: &LatentPosterior) -> Result<Loss> {
        let fut = input.future.as_ref().ok_or(CvaeError::MissingFuture)?;
        let (n, s) = (input.n, fut.steps);
        let [k1, k2, k3, k4] = self.cfg.kappa;

        fn guard<T>(name: &'static str, r: std::result::Result<T, TensorError>) -> Result<T> {
            match r {
                Err(TensorError::NonFinite { .. }) => Err(CvaeError::NonFinite(name)),
                other => Ok(other?),
            }
        }

        let gt = Tensor::from_fn(&[n, s, 2], |k| fut.positions[k / 2][k % 2]);
        let mask = Tensor::from_fn(&[n, s], |k| if fut.presence[k] { 1.0 } else { 0.0 });
        let dis = guard("distance", masked_mean_distance(tape, pred, &gt, &mask))?;
        let dis = tape.scale(dis, k1)?;

        let kl = guard("kl", kl_divergence(tape, post, self.cfg.sigma_prior))?;
        let kl = tape.scale(kl, k2)?;

        let ang = guard("angle", angle_loss(tape, pred, fut))?;
        let ang = match ang {
            Some(a) => Some(tape.scale(a, k3)?),
            None => None,
        };

        let steps = self.cfg.obs_steps;
        let recon = tape.reshape(post.recon, &[n, steps, 2])?;
        let obs = input.obs_positions.clone().reshaped(&[n, steps, 2])?;
        let enc = guard("encoder", masked_mean_distance(tape, recon, &obs, &input.obs_mask))?;
        let enc = tape.scale(enc, k4)?;

        let components = LossComponents {
            distance: tape.value(dis).item(),
            kl: tape.value(kl).item(),
            angle: ang.map_or(0.0, |a| tape.value(a).item()),
            encoder: tape.value(enc).item(),
        };
        for (name, v) in [
            ("distance", components.distance),
            ("kl", components.kl),
            ("angle", components.angle),
            ("encoder", components.encoder),
        ] {
            if !v.is_finite() {
                return Err(CvaeError::NonFinite(name));
            }
        }
        let mut total = tape.add(dis, kl)?;
        if let Some(a) = ang {
            total = tape.add(total, a)?;
        }
        total = tape.add(total, enc)?;
        Ok(Loss { total, components })
    }
}

/// Mean over present `(agent, t)` of `sqrt(‖pred − gt‖² + ε) − sqrt(ε)`.
/// `pred` and `gt` are `[N, T, 2]`, `mask` is `[N, T]`.
pub fn masked_mean_distance(tape: &mut Tape, pred: Var, gt: &Tensor, mask: &Tensor) -> std::result::Result<Var, TensorError> {
    let count = mask.data().iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return tape.constant(Tensor::scalar(0.0));
    }
    let g = tape.constant(gt.clone())?;
    let d = tape.sub(pred, g)?;
    let sq = tape.mul(d, d)?;
    let sq = tape.sum_last(sq)?;
    let eps = tape.constant(Tensor::filled(mask.shape(), DISTANCE_EPS))?;
    let sq = tape.add(sq, eps)?;
    let r = tape.sqrt(sq)?;
    let floor = tape.constant(Tensor::filled(mask.shape(), DISTANCE_EPS.sqrt()))?;
    let r = tape.sub(r, floor)?;
    let m = tape.constant(mask.clone())?;
    let r = tape.mul(r, m)?;
    let total = tape.sum(r)?;
    tape.scale(total, 1.0 / count as f64)
}

/// `KL(N(μ, σ²) ‖ N(0, σ_p² I))` summed over latent dims, averaged over agents.
pub fn kl_divergence(tape: &mut Tape, post: &LatentPosterior, sigma_prior: f64) -> std::result::Result<Var, TensorError> {
    let shape = tape.shape(post.mu).to_vec();
    let n = shape[0] as f64;
    let two_ls = tape.scale(post.log_sigma, 2.0)?;
    let var = tape.exp(two_ls)?;
    let mu2 = tape.mul(post.mu, post.mu)?;
    let num = tape.add(var, mu2)?;
    let quad = tape.scale(num, 1.0 / (2.0 * sigma_prior * sigma_prior))?;
    let t = tape.sub(quad, post.log_sigma)?;
    let c = tape.constant(Tensor::filled(&shape, sigma_prior.ln() - 0.5))?;
    let t = tape.add(t, c)?;
    let s = tape.sum(t)?;
    tape.scale(s, 1.0 / n)
}

/// Angle between two position vectors.
pub fn vector_angle(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] * b[1] - a[1] * b[0]).abs().atan2(a[0] * b[0] + a[1] * b[1])
}

/// Mean over ordered step pairs `t < j` of `|∠(p̂_t, p̂_j) − ∠(p_t, p_j)|`.
/// Pairs with an absent or near-zero ground-truth vector are skipped;
/// `None` when no pair remains.
pub fn angle_loss(tape: &mut Tape, pred: Var, fut: &FutureTrack) -> std::result::Result<Option<Var>, TensorError> {
    let s = fut.steps;
    let n = fut.positions.len() / s;
    let usable = |k: usize| {
        let p = fut.positions[k];
        fut.presence[k] && p[0].hypot(p[1]) >= ANGLE_MIN_NORM
    };
    let (mut first, mut second, mut target) = (Vec::new(), Vec::new(), Vec::new());
    for a in 0..n {
        for t in 0..s {
            for j in t + 1..s {
                let (kt, kj) = (a * s + t, a * s + j);
                if usable(kt) && usable(kj) {
                    first.push(kt);
                    second.push(kj);
                    target.push(vector_angle(fut.positions[kt], fut.positions[kj]));
                }
            }
        }
    }
    if first.is_empty() {
        return Ok(None);
    }
    let p = target.len();
    let rows = tape.reshape(pred, &[n * s, 2])?;
    let a = tape.gather_rows(rows, &first)?;
    let b = tape.gather_rows(rows, &second)?;
    let ax = tape.slice(a, 1, 0, 1)?;
    let ay = tape.slice(a, 1, 1, 1)?;
    let bx = tape.slice(b, 1, 0, 1)?;
    let by = tape.slice(b, 1, 1, 1)?;
    let c1 = tape.mul(ax, by)?;
    let c2 = tape.mul(ay, bx)?;
    let cross = tape.sub(c1, c2)?;
    let cross = tape.abs(cross)?;
    let d1 = tape.mul(ax, bx)?;
    let d2 = tape.mul(ay, by)?;
    let dot = tape.add(d1, d2)?;
    let ang = tape.atan2(cross, dot)?;
    let gt = tape.constant(Tensor::new(vec![p, 1], target)?)?;
    let diff = tape.sub(ang, gt)?;
    let diff = tape.abs(diff)?;
    Ok(Some(tape.mean(diff)?))
}
