//! Parameter layout and batched forward passes of the four classifiers.

use rand::Rng;

use super::encoder::{declare_encoder, encoder_forward, linear, linear_init, EncoderConfig};
use super::features::{self, Media};
use super::mstcn::{declare_mstcn, mstcn_forward};
use super::{ModelKind, NetConfig, Result};
use crate::dsp::VIDEO_FRAMES;
use crate::tensor::{Graph, ParamInit, ParameterSet, Var};

const TUBELET_DIM: usize = 256;
const AUDIO_PATCH_DIM: usize = 256;
const AUDIO_TOKENS: usize = 25;
const SEGMENTS: usize = VIDEO_FRAMES / features::SEGMENT_LEN;
const SEGMENT_TOKENS: usize = 16;
const STACKED_AUDIO_DIM: usize = 104;
/// Spatial side of the lip crop after two stride-2 blocks.
const LIP_FEATURE_SIDE: usize = 4;

pub(crate) fn encoder_cfg(cfg: &NetConfig, token_budget: usize) -> EncoderConfig {
    EncoderConfig {
        dim: cfg.dim,
        heads: cfg.heads,
        layers: cfg.layers,
        ffn_dim: cfg.ffn_dim,
        token_budget,
    }
}

fn declare_vn_branch(p: &mut ParameterSet, prefix: &str, cfg: &NetConfig, rng: &mut impl Rng) {
    linear_init(p, &format!("{prefix}.embed"), cfg.dim, TUBELET_DIM, rng);
    declare_encoder(p, &format!("{prefix}.spatial"), &encoder_cfg(cfg, SEGMENT_TOKENS + 1), true, rng);
    declare_encoder(p, &format!("{prefix}.temporal"), &encoder_cfg(cfg, SEGMENTS + 1), true, rng);
}

fn declare_an_branch(p: &mut ParameterSet, prefix: &str, cfg: &NetConfig, rng: &mut impl Rng) {
    linear_init(p, &format!("{prefix}.embed"), cfg.dim, AUDIO_PATCH_DIM, rng);
    declare_encoder(p, &format!("{prefix}.encoder"), &encoder_cfg(cfg, AUDIO_TOKENS + 1), true, rng);
}

fn declare_conv(p: &mut ParameterSet, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) {
    p.declare(
        format!("{name}.w"),
        &[c_out, c_in, k, k],
        ParamInit::Xavier {
            fan_in: c_in * k * k,
            fan_out: c_out * k * k,
        },
        rng,
    );
    p.declare(format!("{name}.b"), &[c_out], ParamInit::Zeros, rng);
}

fn declare_fused(p: &mut ParameterSet, prefix: &str, cfg: &NetConfig, rng: &mut impl Rng) {
    let half = cfg.dim / 2;
    let [c1, c2] = cfg.conv_channels;
    for (i, (cin, cout)) in [(1, c1), (c1, c2)].into_iter().enumerate() {
        let b = format!("{prefix}.visual.block{i}");
        declare_conv(p, &format!("{b}.conv1"), cout, cin, 3, rng);
        declare_conv(p, &format!("{b}.conv2"), cout, cout, 3, rng);
        declare_conv(p, &format!("{b}.shortcut"), cout, cin, 1, rng);
    }
    let flat = c2 * LIP_FEATURE_SIDE * LIP_FEATURE_SIDE;
    linear_init(p, &format!("{prefix}.visual.proj"), half, flat, rng);
    linear_init(p, &format!("{prefix}.audio.fc1"), cfg.dim, STACKED_AUDIO_DIM, rng);
    linear_init(p, &format!("{prefix}.audio.fc2"), half, cfg.dim, rng);
    declare_encoder(p, &format!("{prefix}.encoder"), &encoder_cfg(cfg, VIDEO_FRAMES), false, rng);
    let tcn = cfg.tcn();
    linear_init(p, &format!("{prefix}.tcn.in"), tcn.channels, cfg.dim, rng);
    declare_mstcn(p, &format!("{prefix}.tcn"), &tcn, rng);
    linear_init(p, &format!("{prefix}.tcn.out"), cfg.dim, tcn.channels, rng);
}

pub(crate) fn declare(kind: ModelKind, cfg: &NetConfig, rng: &mut impl Rng) -> ParameterSet {
    let mut p = ParameterSet::new();
    let prefix = kind.prefix();
    match kind {
        ModelKind::Vn => declare_vn_branch(&mut p, prefix, cfg, rng),
        ModelKind::An => declare_an_branch(&mut p, prefix, cfg, rng),
        ModelKind::AvnFused => declare_fused(&mut p, prefix, cfg, rng),
        ModelKind::AvnConcat => {
            declare_an_branch(&mut p, &format!("{prefix}.an"), cfg, rng);
            declare_vn_branch(&mut p, &format!("{prefix}.vn"), cfg, rng);
        }
    }
    linear_init(&mut p, &format!("{prefix}.head"), 2, kind.embedding_dim(cfg), rng);
    p
}

fn vn_embedding(g: &mut Graph, p: &ParameterSet, prefix: &str, cfg: &NetConfig, batch: &[&Media]) -> Result<Var> {
    let tubes = batch
        .iter()
        .map(|m| features::video_tubelets(&m.video))
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len();
    let x = g.constant(features::stack(&tubes)?.reshape(&[b * SEGMENTS, SEGMENT_TOKENS, TUBELET_DIM])?);
    let x = linear(g, p, &format!("{prefix}.embed"), x)?;
    let spatial = encoder_forward(g, p, &format!("{prefix}.spatial"), &encoder_cfg(cfg, SEGMENT_TOKENS + 1), x, true)?;
    let seg = g.reshape(spatial.cls.expect("cls requested"), &[b, SEGMENTS, cfg.dim])?;
    let temporal = encoder_forward(g, p, &format!("{prefix}.temporal"), &encoder_cfg(cfg, SEGMENTS + 1), seg, true)?;
    Ok(temporal.cls.expect("cls requested"))
}

fn an_embedding(g: &mut Graph, p: &ParameterSet, prefix: &str, cfg: &NetConfig, batch: &[&Media]) -> Result<Var> {
    let patches = batch
        .iter()
        .map(|m| features::audio_patches(&m.audio))
        .collect::<Result<Vec<_>>>()?;
    let x = g.constant(features::stack(&patches)?);
    let x = linear(g, p, &format!("{prefix}.embed"), x)?;
    let out = encoder_forward(g, p, &format!("{prefix}.encoder"), &encoder_cfg(cfg, AUDIO_TOKENS + 1), x, true)?;
    Ok(out.cls.expect("cls requested"))
}

fn conv(g: &mut Graph, p: &ParameterSet, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    Ok(g.conv2d(x, w, Some(b), stride, pad)?)
}

/// Two convolutions plus a strided 1×1 shortcut, rectified after the sum.
fn residual_block(g: &mut Graph, p: &ParameterSet, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, p, &format!("{name}.conv1"), x, 2, 1)?;
    let h = g.relu(h)?;
    let h = conv(g, p, &format!("{name}.conv2"), h, 1, 1)?;
    let s = conv(g, p, &format!("{name}.shortcut"), x, 2, 0)?;
    let y = g.add(h, s)?;
    Ok(g.relu(y)?)
}

/// Fused tokens `[B, 16, d]`: per-frame visual features then audio features.
pub(crate) fn fused_tokens(g: &mut Graph, p: &ParameterSet, prefix: &str, cfg: &NetConfig, batch: &[&Media]) -> Result<Var> {
    let b = batch.len();
    let half = cfg.dim / 2;
    let lips = batch
        .iter()
        .map(|m| features::lip_frames(&m.video, m.lip_box))
        .collect::<Result<Vec<_>>>()?;
    let lips = features::stack(&lips)?;
    let side = lips.shape()[3];
    let x = g.constant(lips.reshape(&[b * VIDEO_FRAMES, 1, side, side])?);
    let h = residual_block(g, p, &format!("{prefix}.visual.block0"), x)?;
    let h = residual_block(g, p, &format!("{prefix}.visual.block1"), h)?;
    let flat: usize = g.shape(h)[1..].iter().product();
    let h = g.reshape(h, &[b, VIDEO_FRAMES, flat])?;
    let visual = linear(g, p, &format!("{prefix}.visual.proj"), h)?;

    let frames = batch
        .iter()
        .map(|m| features::audio_frames(&m.audio))
        .collect::<Result<Vec<_>>>()?;
    let a = g.constant(features::stack(&frames)?);
    let a = linear(g, p, &format!("{prefix}.audio.fc1"), a)?;
    let a = g.gelu(a)?;
    let audio = linear(g, p, &format!("{prefix}.audio.fc2"), a)?;
    debug_assert_eq!(g.shape(audio), &[b, VIDEO_FRAMES, half]);
    Ok(g.concat(&[visual, audio], 2)?)
}

/// Temporal back end of the fused network on `[B, 16, d]` tokens.
pub(crate) fn fused_pool(g: &mut Graph, p: &ParameterSet, prefix: &str, cfg: &NetConfig, tokens: Var) -> Result<Var> {
    let enc = encoder_forward(g, p, &format!("{prefix}.encoder"), &encoder_cfg(cfg, VIDEO_FRAMES), tokens, false)?;
    let h = linear(g, p, &format!("{prefix}.tcn.in"), enc.tokens)?;
    let h = mstcn_forward(g, p, &format!("{prefix}.tcn"), &cfg.tcn(), h)?;
    let h = linear(g, p, &format!("{prefix}.tcn.out"), h)?;
    Ok(g.mean_axis(h, 1)?)
}

/// Penultimate embedding `[B, E]` of a batch.
pub(crate) fn embedding(g: &mut Graph, kind: ModelKind, cfg: &NetConfig, p: &ParameterSet, batch: &[&Media]) -> Result<Var> {
    let prefix = kind.prefix();
    match kind {
        ModelKind::Vn => vn_embedding(g, p, prefix, cfg, batch),
        ModelKind::An => an_embedding(g, p, prefix, cfg, batch),
        ModelKind::AvnFused => {
            let tokens = fused_tokens(g, p, prefix, cfg, batch)?;
            fused_pool(g, p, prefix, cfg, tokens)
        }
        ModelKind::AvnConcat => {
            let a = an_embedding(g, p, &format!("{prefix}.an"), cfg, batch)?;
            let v = vn_embedding(g, p, &format!("{prefix}.vn"), cfg, batch)?;
            Ok(g.concat(&[a, v], 1)?)
        }
    }
}

pub(crate) fn head(g: &mut Graph, kind: ModelKind, p: &ParameterSet, e: Var) -> Result<Var> {
    linear(g, p, &format!("{}.head", kind.prefix()), e)
}
