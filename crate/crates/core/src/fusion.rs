//! Cross-modal alignment of group-wise and pair-wise features.
//!
//! Fusion works per agent. Each modality's tokens attend over the tokens of
//! the other modalities, the three results are concatenated along the token
//! axis, mixed by self-attention and mean-pooled over present tokens.

use rand_chacha::ChaCha8Rng;

use crate::nn::{FeedForward, MultiHeadAttention, Norm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::transformer::record_attention;

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    /// Cross-attend each modality over all three instead of the other two.
    pub include_self: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 8,
            ffn_hidden: 256,
            include_self: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Spatial,
    Temporal,
    Group,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Spatial, Modality::Temporal, Modality::Group];

    pub fn label(self) -> &'static str {
        match self {
            Modality::Spatial => "spatial",
            Modality::Temporal => "temporal",
            Modality::Group => "group",
        }
    }
}

/// Per-modality token sets, all `[N, L_U, d_model]`.
#[derive(Clone, Debug)]
pub struct ModalTokens {
    pub spatial: Var,
    pub temporal: Var,
    pub group: Var,
    /// `[N * T_i]` presence of the time tokens shared by spatial and temporal.
    pub time_presence: Vec<bool>,
}

impl ModalTokens {
    pub fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Spatial => self.spatial,
            Modality::Temporal => self.temporal,
            Modality::Group => self.group,
        }
    }
}

/// Token-level visibility of one modality: `[N * L]`.
fn visibility(tape: &Tape, tokens: &ModalTokens, m: Modality) -> Vec<bool> {
    match m {
        Modality::Group => vec![true; tape.shape(tokens.group)[0] * tape.shape(tokens.group)[1]],
        _ => tokens.time_presence.clone(),
    }
}

fn concat_visibility(n: usize, parts: &[(usize, Vec<bool>)]) -> (usize, Vec<bool>) {
    let total: usize = parts.iter().map(|p| p.0).sum();
    let mut out = Vec::with_capacity(n * total);
    for a in 0..n {
        for (l, v) in parts {
            out.extend_from_slice(&v[a * l..(a + 1) * l]);
        }
    }
    (total, out)
}

/// `[N, lq, lk]` mask hiding invisible keys.
fn key_mask(n: usize, lq: usize, lk: usize, visible: &[bool]) -> Tensor {
    Tensor::from_fn(&[n, lq, lk], |k| {
        let a = k / (lq * lk);
        if visible[a * lk + k % lk] {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Pre-norm attention block whose keys may come from a different sequence.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_q: Norm,
    pub norm_kv: Norm,
    pub attn: MultiHeadAttention,
    pub norm_ff: Norm,
    pub ffn: FeedForward,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &FusionConfig) -> Result<Self> {
        Ok(Self {
            norm_q: Norm::new(store, &format!("{name}/norm_q"), cfg.d_model),
            norm_kv: Norm::new(store, &format!("{name}/norm_kv"), cfg.d_model),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}/attn"), cfg.d_model, cfg.heads)?,
            norm_ff: Norm::new(store, &format!("{name}/norm_ff"), cfg.d_model),
            ffn: FeedForward::new(store, rng, &format!("{name}/ffn"), cfg.d_model, cfg.ffn_hidden),
        })
    }

    /// `x = target + MHA(LN target, LN source)`, then `x + FFN(LN x)`.
    /// Returns the block output and the attention weights.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        target: Var,
        source: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let q = self.norm_q.forward(tape, store, target)?;
        let kv = self.norm_kv.forward(tape, store, source)?;
        let att = self.attn.forward(tape, store, q, kv, mask)?;
        let x = tape.add(target, att.out)?;
        let h = self.norm_ff.forward(tape, store, x)?;
        let f = self.ffn.forward(tape, store, h)?;
        Ok((tape.add(x, f)?, att.weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.norm_q.gain, self.norm_q.bias, self.norm_kv.gain, self.norm_kv.bias];
        p.extend(self.attn.params());
        p.extend([self.norm_ff.gain, self.norm_ff.bias]);
        p.extend(self.ffn.up.params());
        p.extend(self.ffn.down.params());
        p
    }
}

#[derive(Clone, Debug)]
pub struct Fusion {
    /// Cross blocks indexed like [`Modality::ALL`].
    pub cross: Vec<AttentionBlock>,
    pub mix: AttentionBlock,
    pub d_model: usize,
    pub include_self: bool,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &FusionConfig) -> Result<Self> {
        let cross = Modality::ALL
            .iter()
            .map(|m| AttentionBlock::new(store, rng, &format!("{name}/cross_{}", m.label()), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            cross,
            mix: AttentionBlock::new(store, rng, &format!("{name}/self"), cfg)?,
            d_model: cfg.d_model,
            include_self: cfg.include_self,
        })
    }

    fn check(&self, tape: &Tape, tokens: &ModalTokens) -> Result<usize> {
        let n = tape.shape(tokens.spatial)[0];
        for m in Modality::ALL {
            let s = tape.shape(tokens.get(m));
            if s.len() != 3 || s[0] != n || s[2] != self.d_model {
                return Err(TensorError::Shape {
                    op: "fusion",
                    lhs: s.to_vec(),
                    rhs: vec![n, 0, self.d_model],
                });
            }
        }
        if tape.shape(tokens.spatial) != tape.shape(tokens.temporal)
            || tokens.time_presence.len() != n * tape.shape(tokens.spatial)[1]
        {
            return Err(TensorError::Shape {
                op: "fusion",
                lhs: tape.shape(tokens.spatial).to_vec(),
                rhs: tape.shape(tokens.temporal).to_vec(),
            });
        }
        Ok(n)
    }

    /// Cross-modal attention with `target` as queries. Output keeps the
    /// target's token count.
    pub fn cross_modal_attention(&self, tape: &mut Tape, store: &ParamStore, tokens: &ModalTokens, target: Modality) -> Result<Var> {
        let n = self.check(tape, tokens)?;
        let sources: Vec<Modality> = Modality::ALL
            .into_iter()
            .filter(|&m| self.include_self || m != target)
            .collect();
        let parts: Vec<Var> = sources.iter().map(|&m| tokens.get(m)).collect();
        let vis: Vec<(usize, Vec<bool>)> = sources
            .iter()
            .map(|&m| (tape.shape(tokens.get(m))[1], visibility(tape, tokens, m)))
            .collect();
        let (lk, visible) = concat_visibility(n, &vis);
        let source = if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 1)? };
        let tv = tokens.get(target);
        let lq = tape.shape(tv)[1];
        let mask = tape.constant(key_mask(n, lq, lk, &visible))?;
        let idx = Modality::ALL.iter().position(|&m| m == target).expect("known modality");
        let (out, weights) = self.cross[idx].forward(tape, store, tv, source, Some(mask))?;
        record_attention(tape, &format!("attn/fusion/cross_{}", target.label()), weights);
        Ok(out)
    }

    /// `Ŷ_M` of shape `[N, d_model]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: &ModalTokens) -> Result<Var> {
        let n = self.check(tape, tokens)?;
        let mut parts = Vec::with_capacity(3);
        let mut vis = Vec::with_capacity(3);
        for m in Modality::ALL {
            parts.push(self.cross_modal_attention(tape, store, tokens, m)?);
            vis.push((tape.shape(tokens.get(m))[1], visibility(tape, tokens, m)));
        }
        let seq = tape.concat(&parts, 1)?;
        let (l, visible) = concat_visibility(n, &vis);
        let mask = tape.constant(key_mask(n, l, l, &visible))?;
        let (mixed, weights) = self.mix.forward(tape, store, seq, seq, Some(mask))?;
        record_attention(tape, "attn/fusion/self", weights);
        // mean over visible tokens as a [N, 1, L] · [N, L, d] product
        let pool = Tensor::from_fn(&[n, 1, l], |k| {
            let a = k / l;
            let count = visible[a * l..(a + 1) * l].iter().filter(|&&v| v).count();
            if visible[k] {
                1.0 / count as f64
            } else {
                0.0
            }
        });
        let pool = tape.constant(pool)?;
        let pooled = tape.matmul(pool, mixed)?;
        tape.reshape(pooled, &[n, self.d_model])
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.cross.iter().flat_map(|b| b.params()).collect();
        p.extend(self.mix.params());
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::params::uniform;
    use rand::{Rng, SeedableRng};

    fn cfg() -> FusionConfig {
        FusionConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            include_self: false,
        }
    }

    fn tokens(tape: &mut Tape, rng: &mut ChaCha8Rng, n: usize, t: usize, h: usize) -> ModalTokens {
        let presence: Vec<bool> = (0..n * t).map(|k| k % t == t - 1 || rng.random_bool(0.7)).collect();
        let mut s = uniform(rng, &[n, t, 8], 1.0);
        let mut tt = uniform(rng, &[n, t, 8], 1.0);
        for (k, &p) in presence.iter().enumerate() {
            if !p {
                s.data_mut()[k * 8..(k + 1) * 8].fill(0.0);
                tt.data_mut()[k * 8..(k + 1) * 8].fill(0.0);
            }
        }
        ModalTokens {
            spatial: tape.constant(s).unwrap(),
            temporal: tape.constant(tt).unwrap(),
            group: tape.constant(uniform(rng, &[n, h, 8], 1.0)).unwrap(),
            time_presence: presence,
        }
    }

    #[test]
    fn shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &mut rng, "f", &FusionConfig::default()).unwrap();
        let mut tape = Tape::new();
        let z = |tape: &mut Tape, l| tape.constant(Tensor::zeros(&[5, l, 64])).unwrap();
        let tok = ModalTokens {
            spatial: z(&mut tape, 8),
            temporal: z(&mut tape, 8),
            group: z(&mut tape, 3),
            time_presence: vec![true; 40],
        };
        let y = f.forward(&mut tape, &store, &tok).unwrap();
        assert_eq!(tape.shape(y), &[5, 64]);
        let c = f.cross_modal_attention(&mut tape, &store, &tok, Modality::Group).unwrap();
        assert_eq!(tape.shape(c), &[5, 3, 64]);

        let wide = tape.constant(Tensor::zeros(&[5, 3, 128])).unwrap();
        let bad = ModalTokens { group: wide, ..tok };
        assert!(f.forward(&mut tape, &store, &bad).is_err());
    }

    #[test]
    fn zero_inputs_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &mut rng, "f", &cfg()).unwrap();
        let mut tape = Tape::new();
        let z = |tape: &mut Tape, l| tape.constant(Tensor::zeros(&[1, l, 8])).unwrap();
        let tok = ModalTokens {
            spatial: z(&mut tape, 4),
            temporal: z(&mut tape, 4),
            group: z(&mut tape, 2),
            time_presence: vec![true; 4],
        };
        let y = f.forward(&mut tape, &store, &tok).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &mut rng, "f", &cfg()).unwrap();
        let mut tape = Tape::new();
        let tok = tokens(&mut tape, &mut rng, 3, 4, 2);
        let y = f.forward(&mut tape, &store, &tok).unwrap();
        let perm = [2, 0, 1];
        let spatial = tape.gather_rows(tok.spatial, &perm).unwrap();
        let temporal = tape.gather_rows(tok.temporal, &perm).unwrap();
        let group = tape.gather_rows(tok.group, &perm).unwrap();
        let time_presence = perm.iter().flat_map(|&a| tok.time_presence[a * 4..a * 4 + 4].to_vec()).collect();
        let ptok = ModalTokens { spatial, temporal, group, time_presence };
        let yp = f.forward(&mut tape, &store, &ptok).unwrap();
        let (a, b) = (tape.value(y).data(), tape.value(yp).data());
        for (new, &old) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((a[old * 8 + k] - b[new * 8 + k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fusion_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, &mut rng, "f", &cfg()).unwrap();
        let mut scratch = Tape::new();
        let tok = tokens(&mut scratch, &mut rng, 2, 3, 2);
        let vals: Vec<Tensor> = Modality::ALL.iter().map(|&m| scratch.value(tok.get(m)).clone()).collect();
        let probe = uniform(&mut rng, &[2, 8], 1.0);
        let report = check_params(&store, &f.params(), 1e-5, |s, tape| {
            let t = ModalTokens {
                spatial: tape.constant(vals[0].clone())?,
                temporal: tape.constant(vals[1].clone())?,
                group: tape.constant(vals[2].clone())?,
                time_presence: tok.time_presence.clone(),
            };
            let y = f.forward(tape, s, &t)?;
            let p = tape.constant(probe.clone())?;
            let m = tape.mul(y, p)?;
            tape.sum(m)
        })
        .unwrap();
        assert!(report.passes(1e-3), "{report:?}");
    }
}
