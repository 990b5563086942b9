//! Pre-norm transformer encoder shared by every classifier.

use rand::Rng;

use super::{NetError, Result};
use crate::tensor::{multi_head_attention, AttentionWeights, Graph, ParamInit, ParameterSet, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Rows of the positional table, cls included.
    pub token_budget: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(NetError::Config("encoder needs at least one layer".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(NetError::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_dim == 0 || self.token_budget == 0 {
            return Err(NetError::Config("empty feed-forward or positional table".into()));
        }
        Ok(())
    }

    /// Entries declared by [`declare_encoder`].
    pub fn param_count(&self, with_cls: bool) -> usize {
        let d = self.dim;
        let per_layer = 2 * 2 * d // two layer norms
            + 4 * d * d + 3 * d // q, k, v, o projections; no key bias
            + self.ffn_dim * d + self.ffn_dim + d * self.ffn_dim + d;
        let cls = if with_cls { d } else { 0 };
        cls + self.token_budget * d + self.layers * per_layer + 2 * d
    }
}

pub(crate) fn linear_init(params: &mut ParameterSet, name: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    params.declare(
        format!("{name}.w"),
        &[out, inp],
        ParamInit::Xavier {
            fan_in: inp,
            fan_out: out,
        },
        rng,
    );
    params.declare(format!("{name}.b"), &[out], ParamInit::Zeros, rng);
}

fn layer_norm_init(params: &mut ParameterSet, name: &str, d: usize, rng: &mut impl Rng) {
    params.declare(format!("{name}.g"), &[d], ParamInit::Ones, rng);
    params.declare(format!("{name}.b"), &[d], ParamInit::Zeros, rng);
}

pub fn declare_encoder(params: &mut ParameterSet, prefix: &str, cfg: &EncoderConfig, with_cls: bool, rng: &mut impl Rng) {
    let d = cfg.dim;
    if with_cls {
        params.declare(format!("{prefix}.cls"), &[d], ParamInit::Normal { std: 0.02 }, rng);
    }
    params.declare(format!("{prefix}.pos"), &[cfg.token_budget, d], ParamInit::Zeros, rng);
    for l in 0..cfg.layers {
        let p = format!("{prefix}.layers.{l}");
        layer_norm_init(params, &format!("{p}.ln1"), d, rng);
        for m in ["wq", "wk", "wv", "wo"] {
            params.declare(
                format!("{p}.attn.{m}"),
                &[d, d],
                ParamInit::Xavier { fan_in: d, fan_out: d },
                rng,
            );
        }
        for b in ["bq", "bv", "bo"] {
            params.declare(format!("{p}.attn.{b}"), &[d], ParamInit::Zeros, rng);
        }
        layer_norm_init(params, &format!("{p}.ln2"), d, rng);
        linear_init(params, &format!("{p}.ffn.fc1"), cfg.ffn_dim, d, rng);
        linear_init(params, &format!("{p}.ffn.fc2"), d, cfg.ffn_dim, rng);
    }
    layer_norm_init(params, &format!("{prefix}.ln"), d, rng);
}

pub(crate) fn linear(g: &mut Graph, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(params, &format!("{name}.w"))?;
    let b = g.param(params, &format!("{name}.b"))?;
    Ok(g.linear(x, w, Some(b))?)
}

fn layer_norm(g: &mut Graph, params: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let gain = g.param(params, &format!("{name}.g"))?;
    let bias = g.param(params, &format!("{name}.b"))?;
    Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
}

/// Output of [`encoder_forward`].
pub struct EncoderOutput {
    /// `[B, d]`, position 0 of the final sequence; absent without a cls token.
    pub cls: Option<Var>,
    /// `[B, N(+1), d]` after the final layer norm.
    pub tokens: Var,
}

/// Runs `tokens [B, N, d]` through the encoder at `prefix`.
///
/// With `with_cls` a learned token is prepended. Learned positions are
/// added to every token before the first block.
pub fn encoder_forward(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    cfg: &EncoderConfig,
    tokens: Var,
    with_cls: bool,
) -> Result<EncoderOutput> {
    cfg.validate()?;
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 3 || shape[2] != cfg.dim {
        return Err(NetError::Input(format!(
            "encoder {prefix} expects [B, N, {}] tokens, got {shape:?}",
            cfg.dim
        )));
    }
    let (batch, n) = (shape[0], shape[1]);
    let seq = n + usize::from(with_cls);
    if seq > cfg.token_budget {
        return Err(NetError::Input(format!(
            "{seq} tokens exceed the positional table of {} at {prefix}",
            cfg.token_budget
        )));
    }
    let mut x = if with_cls {
        let cls = g.param(params, &format!("{prefix}.cls"))?;
        let cls = g.expand(cls, &[batch, 1])?;
        g.concat(&[cls, tokens], 1)?
    } else {
        tokens
    };
    let pos = g.param(params, &format!("{prefix}.pos"))?;
    let pos = g.narrow(pos, 0, 0, seq)?;
    x = g.add_bcast(x, pos)?;

    for l in 0..cfg.layers {
        let p = format!("{prefix}.layers.{l}");
        let h = layer_norm(g, params, &format!("{p}.ln1"), x)?;
        let w = AttentionWeights {
            wq: g.param(params, &format!("{p}.attn.wq"))?,
            bq: Some(g.param(params, &format!("{p}.attn.bq"))?),
            wk: g.param(params, &format!("{p}.attn.wk"))?,
            bk: None,
            wv: g.param(params, &format!("{p}.attn.wv"))?,
            bv: Some(g.param(params, &format!("{p}.attn.bv"))?),
            wo: g.param(params, &format!("{p}.attn.wo"))?,
            bo: Some(g.param(params, &format!("{p}.attn.bo"))?),
        };
        let a = multi_head_attention(g, h, h, h, cfg.heads, &w)?;
        x = g.add(x, a)?;
        let h = layer_norm(g, params, &format!("{p}.ln2"), x)?;
        let h = linear(g, params, &format!("{p}.ffn.fc1"), h)?;
        let h = g.gelu(h)?;
        let h = linear(g, params, &format!("{p}.ffn.fc2"), h)?;
        x = g.add(x, h)?;
    }
    let out = layer_norm(g, params, &format!("{prefix}.ln"), x)?;
    let cls = if with_cls {
        let c = g.narrow(out, 1, 0, 1)?;
        Some(g.reshape(c, &[batch, cfg.dim])?)
    } else {
        None
    };
    Ok(EncoderOutput { cls, tokens: out })
}
