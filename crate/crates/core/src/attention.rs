//! Self-attention with activation-mask modulation and the pre-norm block around it.
//!
//! The mask is a per-token scalar that row-scales any of Q, K, V before the
//! attention product. With the default V-only targets the attention
//! distribution is untouched and only the aggregated values are gated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;

/// Which projections the activation mask multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskTargets {
    pub q: bool,
    pub k: bool,
    pub v: bool,
}

impl MaskTargets {
    pub const NONE: MaskTargets = MaskTargets {
        q: false,
        k: false,
        v: false,
    };
    pub const V_ONLY: MaskTargets = MaskTargets {
        q: false,
        k: false,
        v: true,
    };
}

impl Default for MaskTargets {
    fn default() -> Self {
        Self::V_ONLY
    }
}

impl fmt::Display for MaskTargets {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if *self == Self::NONE {
            return f.write_str("none");
        }
        for (on, c) in [(self.q, 'q'), (self.k, 'k'), (self.v, 'v')] {
            if on {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for MaskTargets {
    type Err = Error;

    /// Parses any subset of `q`, `k`, `v` (e.g. `qk`, `v`), or `none`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(Self::NONE);
        }
        let mut t = Self::NONE;
        for c in s.chars() {
            let slot = match c {
                'q' => &mut t.q,
                'k' => &mut t.k,
                'v' => &mut t.v,
                _ => return Err(Error::Config(format!("bad mask targets `{s}`"))),
            };
            if *slot {
                return Err(Error::Config(format!("repeated target in `{s}`")));
            }
            *slot = true;
        }
        if t == Self::NONE {
            return Err(Error::Config("empty mask targets".into()));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng);
        Self { weight, bias }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<'p>(&self, tape: &mut Tape<'p>, store: &'p ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng),
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, rng),
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng),
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng),
            heads,
            d_model,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Attention output plus the per-head attention distributions.
pub struct TbamOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

/// Masked multi-head self-attention.
///
/// `tokens: n×d_model`, `mask: n×1`. Flagged projections are row-scaled by the
/// mask, then `softmax(QKᵀ/√d)·V′` per head, concatenated and projected.
pub fn tbam<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    tokens: Var,
    mask: Var,
    params: &AttentionParams,
    targets: MaskTargets,
) -> Result<TbamOutput> {
    let n = tape.shape(tokens)[0];
    if tape.value(mask).numel() != n {
        return Err(Error::LengthMismatch(tape.value(mask).numel(), n));
    }
    let mask = if tape.shape(mask) == [n, 1] {
        mask
    } else {
        tape.reshape(mask, &[n, 1])?
    };
    let project = |lin: &Linear, on: bool, tape: &mut Tape<'p>| -> Result<Var> {
        let y = lin.forward(tape, store, tokens)?;
        if on {
            tape.mul(y, mask)
        } else {
            Ok(y)
        }
    };
    let q = project(&params.query, targets.q, tape)?;
    let k = project(&params.key, targets.k, tape)?;
    let v = project(&params.value, targets.v, tape)?;

    let dh = params.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut weights = Vec::with_capacity(params.heads);
    for h in 0..params.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let attn = tape.softmax(logits);
        heads.push(tape.matmul(attn, vh)?);
        weights.push(attn);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let output = params.output.forward(tape, store, merged)?;
    Ok(TbamOutput { output, weights })
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl BlockParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = d_model * MLP_RATIO;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            attention: AttentionParams::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
            mlp_in: Linear::new(store, &format!("{name}.mlp.fc1"), d_model, hidden, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, d_model, rng),
        })
    }
}

/// Pre-norm residual block: `x + tbam(norm1(x))`, then `+ mlp(norm2(·))`.
pub fn transformer_block<'p>(
    tape: &mut Tape<'p>,
    store: &'p ParamStore,
    tokens: Var,
    mask: Var,
    params: &BlockParams,
    targets: MaskTargets,
) -> Result<Var> {
    let h = params.norm1.forward(tape, store, tokens)?;
    let attn = tbam(tape, store, h, mask, &params.attention, targets)?.output;
    let x = tape.add(tokens, attn)?;
    let h = params.norm2.forward(tape, store, x)?;
    let h = params.mlp_in.forward(tape, store, h)?;
    let h = tape.gelu(h);
    let h = params.mlp_out.forward(tape, store, h)?;
    tape.add(x, h)
}
