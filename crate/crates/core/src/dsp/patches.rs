use serde::{Deserialize, Serialize};

use super::{DspError, FrameStack, Result, Spectrogram};
use crate::tensor::Tensor;

/// Flattened patches, one per row of `tokens`.
///
/// `grid` records the extents the tokens were enumerated over, row-major:
/// (frequency, time) for spectrogram patches and (time, rows·cols) for
/// tubelets.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Square patches of side `patch` taken every `stride` bins/frames.
pub fn patchify_2d(s: &Spectrogram, patch: usize, stride: usize) -> Result<PatchSequence> {
    if patch == 0 || stride == 0 {
        return Err(DspError::Invalid("patch and stride must be positive".into()));
    }
    if s.bins < patch || s.frames < patch {
        return Err(DspError::Geometry(format!(
            "{}×{} spectrogram is smaller than a {patch}×{patch} patch",
            s.bins, s.frames
        )));
    }
    let rows = (s.bins - patch) / stride + 1;
    let cols = (s.frames - patch) / stride + 1;
    let dim = patch * patch;
    let mut data = Vec::with_capacity(rows * cols * dim);
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..patch {
                let start = (r * stride + i) * s.frames + c * stride;
                data.extend_from_slice(&s.values[start..start + patch]);
            }
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::new(vec![rows * cols, dim], data).expect("patch geometry"),
        grid: (rows, cols),
    })
}

/// Extent of one spatio-temporal patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tubelet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

/// Splits the clip into segments of `segment_len` frames and each segment
/// into non-overlapping tubelets, ordered (time, row, col).
pub fn tubelet_patchify(v: &FrameStack, segment_len: usize, tube: Tubelet) -> Result<Vec<PatchSequence>> {
    if segment_len == 0 || tube.t == 0 || tube.h == 0 || tube.w == 0 {
        return Err(DspError::Invalid("tubelet extents must be positive".into()));
    }
    if !v.frames.is_multiple_of(segment_len)
        || !segment_len.is_multiple_of(tube.t)
        || !v.height.is_multiple_of(tube.h)
        || !v.width.is_multiple_of(tube.w)
    {
        return Err(DspError::Geometry(format!(
            "{}×{}×{} clip does not divide into {segment_len}-frame segments of {}×{}×{} tubelets",
            v.frames, v.height, v.width, tube.t, tube.h, tube.w
        )));
    }
    let (nt, ny, nx) = (segment_len / tube.t, v.height / tube.h, v.width / tube.w);
    let dim = tube.t * tube.h * tube.w;
    let segments = (0..v.frames / segment_len)
        .map(|s| {
            let mut data = Vec::with_capacity(nt * ny * nx * dim);
            for ti in 0..nt {
                for yi in 0..ny {
                    for xi in 0..nx {
                        for dt in 0..tube.t {
                            let t = s * segment_len + ti * tube.t + dt;
                            for dy in 0..tube.h {
                                let y = yi * tube.h + dy;
                                let start = (t * v.height + y) * v.width + xi * tube.w;
                                data.extend_from_slice(&v.data[start..start + tube.w]);
                            }
                        }
                    }
                }
            }
            PatchSequence {
                tokens: Tensor::new(vec![nt * ny * nx, dim], data).expect("tubelet geometry"),
                grid: (nt, ny * nx),
            }
        })
        .collect();
    Ok(segments)
}

/// Mouth region of every frame, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LipBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl LipBox {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

pub fn crop_lip(v: &FrameStack, b: LipBox) -> Result<FrameStack> {
    if b.height == 0 || b.width == 0 || b.top + b.height > v.height || b.left + b.width > v.width {
        return Err(DspError::Geometry(format!(
            "box {b:?} outside {}×{} frames",
            v.height, v.width
        )));
    }
    let mut data = Vec::with_capacity(v.frames * b.height * b.width);
    for t in 0..v.frames {
        for y in b.top..b.top + b.height {
            let start = (t * v.height + y) * v.width + b.left;
            data.extend_from_slice(&v.data[start..start + b.width]);
        }
    }
    FrameStack::new(v.frames, b.height, b.width, data)
}

/// Concatenates each run of `frames / video_frames` consecutive audio frames
/// into one row per video frame: `video_frames × (bins · ratio)`.
pub fn stack_audio_frames(fb: &Spectrogram, video_frames: usize) -> Result<Tensor> {
    if video_frames == 0 || !fb.frames.is_multiple_of(video_frames) || fb.frames / video_frames != super::AUDIO_FRAMES_PER_VIDEO_FRAME {
        return Err(DspError::Geometry(format!(
            "{} audio frames do not align with {video_frames} video frames at {} per frame",
            fb.frames,
            super::AUDIO_FRAMES_PER_VIDEO_FRAME
        )));
    }
    let ratio = fb.frames / video_frames;
    let mut data = Vec::with_capacity(fb.values.len());
    for t in 0..video_frames {
        for j in 0..ratio {
            let f = t * ratio + j;
            data.extend((0..fb.bins).map(|b| fb.get(b, f)));
        }
    }
    Ok(Tensor::new(vec![video_frames, fb.bins * ratio], data).expect("stack geometry"))
}
