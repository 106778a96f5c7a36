//! Parameterised layers shared by the encoders, fusion and CVAE heads.

use rand_chacha::ChaCha8Rng;

use crate::params::{glorot, ParamId, ParamStore};
use crate::tensor::{fully_masked_rows, Result, Tape, Tensor, TensorError, Var};

/// Affine map over the last axis: `x·W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}/w"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}/b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    /// Like [`Linear::new`] with the weights scaled by `gain`.
    pub fn scaled(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
    ) -> Self {
        let l = Self::new(store, rng, name, fan_in, fan_out);
        store.get_mut(l.w).data_mut().iter_mut().for_each(|v| *v *= gain);
        l
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}/gain"), Tensor::filled(&[d], 1.0)),
            bias: store.add(format!("{name}/bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Two-layer position-wise MLP with a ReLU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            up: Linear::new(store, rng, &format!("{name}/up"), d, hidden),
            down: Linear::new(store, rng, &format!("{name}/down"), hidden, d),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.down.forward(tape, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    /// Key projection without bias: `q·b` is constant across keys and
    /// cancels in the softmax.
    pub k: ParamId,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_model: usize,
}

pub struct AttentionOutput {
    /// `[B, Lq, d_model]`
    pub out: Var,
    /// Post-softmax weights `[B, heads, Lq, Lk]`.
    pub weights: Var,
    /// Flat `b * Lq + q` indices of query rows with no visible key; their
    /// output rows are zero.
    pub fully_masked: Vec<usize>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("d_model {d_model} is not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}/q"), d_model, d_model),
            k: store.add(format!("{name}/k/w"), glorot(rng, d_model, d_model)),
            v: Linear::new(store, rng, &format!("{name}/v"), d_model, d_model),
            o: Linear::new(store, rng, &format!("{name}/o"), d_model, d_model),
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// `[B, L, d] -> [B, h, L, dh]`
    fn split_heads(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let r = tape.reshape(x, &[s[0], s[1], self.heads, self.head_dim()])?;
        tape.permute(r, &[0, 2, 1, 3])
    }

    /// Per head: `softmax(mask + Q Kᵀ / sqrt(dh)) V`, heads concatenated and
    /// mixed by the output projection. `mask` is `[B, Lq, Lk]` and may hold
    /// `-inf` for hidden keys.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        kv_in: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let qs = tape.shape(q_in).to_vec();
        let ks = tape.shape(kv_in).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(TensorError::Shape { op: "attention", lhs: qs, rhs: ks });
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let q = self.q.forward(tape, store, q_in)?;
        let wk = tape.param(store, self.k);
        let k = tape.matmul(kv_in, wk)?;
        let v = self.v.forward(tape, store, kv_in)?;
        let q = self.split_heads(tape, q)?;
        let v = self.split_heads(tape, v)?;
        let kr = tape.reshape(k, &[b, lk, self.heads, self.head_dim()])?;
        let kt = tape.permute(kr, &[0, 2, 3, 1])?;
        let scores = tape.matmul(q, kt)?;
        let mut logits = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt())?;
        let mut fully_masked = Vec::new();
        if let Some(m) = mask {
            if tape.shape(m) != [b, lq, lk] {
                return Err(TensorError::Shape {
                    op: "attention mask",
                    lhs: tape.shape(m).to_vec(),
                    rhs: vec![b, lq, lk],
                });
            }
            fully_masked = fully_masked_rows(tape.value(m));
            let m4 = tape.reshape(m, &[b, 1, lq, lk])?;
            let tiled = if self.heads == 1 {
                m4
            } else {
                tape.concat(&vec![m4; self.heads], 1)?
            };
            logits = tape.add(logits, tiled)?;
        }
        let weights = tape.softmax_rows(logits)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, lq, self.d_model])?;
        let mut out = self.o.forward(tape, store, ctx)?;
        if !fully_masked.is_empty() {
            let mut keep = Tensor::filled(&[b, lq, self.d_model], 1.0);
            for &r in &fully_masked {
                keep.data_mut()[r * self.d_model..(r + 1) * self.d_model].fill(0.0);
            }
            let keep = tape.constant(keep)?;
            out = tape.mul(out, keep)?;
        }
        Ok(AttentionOutput { out, weights, fully_masked })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.q.params().to_vec();
        p.push(self.k);
        p.extend(self.v.params());
        p.extend(self.o.params());
        p
    }
}

/// Constant `[rows, cols]` tensor repeated along a new leading axis.
pub fn tile_leading(t: &Tensor, times: usize) -> Tensor {
    let mut shape = vec![times];
    shape.extend_from_slice(t.shape());
    let data = t.data().repeat(times);
    Tensor::new(shape, data).expect("tiled shape is consistent")
}
