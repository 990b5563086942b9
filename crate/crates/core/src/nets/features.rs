//! Turns a clip into the input tensors of each network.

use super::{NetError, Result};
use crate::dsp::{
    crop_lip, log_filterbank, patchify_2d, stack_audio_frames, tubelet_patchify, FrameStack, LipBox, StftParams,
    Tubelet, Waveform, LIP_SIZE, LOG_FLOOR, N_FILTERBANK, N_MELS, TARGET_FRAMES, VIDEO_FRAMES,
};
use crate::tensor::Tensor;

/// Frames per video segment.
pub const SEGMENT_LEN: usize = 4;
pub const TUBELET: Tubelet = Tubelet { t: 4, h: 8, w: 8 };
pub const AUDIO_PATCH: usize = 16;
pub const AUDIO_STRIDE: usize = 10;

/// Log-mel values are standardised with these fixed statistics.
pub const LOG_MEL_MEAN: f64 = -2.0;
pub const LOG_MEL_STD: f64 = 4.0;

/// One audio-visual clip with its mouth box.
#[derive(Clone, Debug, PartialEq)]
pub struct Media {
    pub audio: Waveform,
    pub video: FrameStack,
    pub lip_box: LipBox,
}

fn check_audio(a: &Waveform) -> Result<()> {
    if !a.is_canonical() {
        return Err(NetError::Input(format!(
            "audio must be {} samples at {} Hz, got {} at {}",
            crate::dsp::CLIP_SAMPLES,
            crate::dsp::SAMPLE_RATE,
            a.len(),
            a.sample_rate
        )));
    }
    Ok(())
}

fn check_video(v: &FrameStack) -> Result<()> {
    if !v.is_canonical() {
        return Err(NetError::Input(format!(
            "video must be {VIDEO_FRAMES}×{0}×{0}, got {1}×{2}×{3}",
            crate::dsp::FRAME_SIZE,
            v.frames,
            v.height,
            v.width
        )));
    }
    Ok(())
}

fn standardise(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| (v - LOG_MEL_MEAN) / LOG_MEL_STD).collect()
}

/// Pixels in [0, 1] mapped to [-1, 1].
fn centre_pixels(values: &[f64]) -> Vec<f64> {
    values.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// `[25, 256]` log-mel patches, padded to 64 frames first.
pub fn audio_patches(a: &Waveform) -> Result<Tensor> {
    check_audio(a)?;
    let mut mel = log_filterbank(a, N_MELS, StftParams::default(), LOG_FLOOR, TARGET_FRAMES)?;
    mel.values = standardise(&mel.values);
    Ok(patchify_2d(&mel, AUDIO_PATCH, AUDIO_STRIDE)?.tokens)
}

/// `[4, 16, 256]`: tubelet tokens of every segment.
pub fn video_tubelets(v: &FrameStack) -> Result<Tensor> {
    check_video(v)?;
    let centred = FrameStack::new(v.frames, v.height, v.width, centre_pixels(&v.data))?;
    let segs = tubelet_patchify(&centred, SEGMENT_LEN, TUBELET)?;
    let (n, dim) = (segs[0].len(), segs[0].dim());
    let data: Vec<f64> = segs.into_iter().flat_map(|s| s.tokens.into_data()).collect();
    Ok(Tensor::new(vec![VIDEO_FRAMES / SEGMENT_LEN, n, dim], data)?)
}

/// `[16, 104]`: four filterbank frames stacked per video frame.
pub fn audio_frames(a: &Waveform) -> Result<Tensor> {
    check_audio(a)?;
    let mut fb = log_filterbank(a, N_FILTERBANK, StftParams::default(), LOG_FLOOR, TARGET_FRAMES)?;
    fb.values = standardise(&fb.values);
    Ok(stack_audio_frames(&fb, VIDEO_FRAMES)?)
}

/// `[16, 1, h, w]` mouth crops.
pub fn lip_frames(v: &FrameStack, b: LipBox) -> Result<Tensor> {
    check_video(v)?;
    if b.height != LIP_SIZE || b.width != LIP_SIZE {
        return Err(NetError::Input(format!(
            "mouth box must be {LIP_SIZE}×{LIP_SIZE}, got {}×{}",
            b.height, b.width
        )));
    }
    let lips = crop_lip(v, b)?;
    Ok(Tensor::new(
        vec![lips.frames, 1, lips.height, lips.width],
        centre_pixels(&lips.data),
    )?)
}

/// Stacks per-sample tensors of equal shape along a new leading axis.
pub fn stack(items: &[Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| NetError::Input("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(NetError::Input(format!(
                "batch mixes shapes {:?} and {:?}",
                first.shape(),
                t.shape()
            )));
        }
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::new(shape, data)?)
}
