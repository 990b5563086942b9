//! Media front end: spectral features, patch extraction and media files.
//!
//! Every function here is pure: the same input always gives bit-identical
//! output.

mod io;
mod patches;
mod spectral;

pub use io::{read_pgm, read_wav, write_pgm, write_wav};
pub use patches::{crop_lip, patchify_2d, stack_audio_frames, tubelet_patchify, LipBox, PatchSequence, Tubelet};
pub use spectral::{hz_to_mel, log_filterbank, mel_filterbank, mel_spectrogram, mel_to_hz, stft_magnitude, StftParams};

use thiserror::Error;

/// Audio sample rate of canonical clips.
pub const SAMPLE_RATE: u32 = 16_000;
/// 0.64 s at 16 kHz.
pub const CLIP_SAMPLES: usize = 10_240;
pub const VIDEO_FRAMES: usize = 16;
pub const FRAME_SIZE: usize = 32;
pub const LIP_SIZE: usize = 16;
/// Audio feature frames per video frame.
pub const AUDIO_FRAMES_PER_VIDEO_FRAME: usize = 4;
pub const N_MELS: usize = 64;
pub const N_FILTERBANK: usize = 26;
/// Padded audio feature frames per clip (4 per video frame).
pub const TARGET_FRAMES: usize = VIDEO_FRAMES * AUDIO_FRAMES_PER_VIDEO_FRAME;
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("signal of {len} samples is shorter than one {win}-sample window")]
    TooShort { len: usize, win: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad media file {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Mono audio with samples in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(DspError::Invalid("empty waveform".into()));
        }
        if sample_rate == 0 {
            return Err(DspError::Invalid("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_canonical(&self) -> bool {
        self.sample_rate == SAMPLE_RATE && self.samples.len() == CLIP_SAMPLES
    }
}

/// Time-frequency matrix stored bins × frames, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn new(bins: usize, frames: usize, values: Vec<f64>) -> Result<Self> {
        if bins == 0 || frames == 0 || values.len() != bins * frames {
            return Err(DspError::Geometry(format!(
                "{bins}×{frames} spectrogram with {} values",
                values.len()
            )));
        }
        Ok(Self {
            bins,
            frames,
            values,
        })
    }

    pub fn get(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Mean over time for every bin.
    pub fn bin_means(&self) -> Vec<f64> {
        self.values
            .chunks(self.frames)
            .map(|row| row.iter().sum::<f64>() / self.frames as f64)
            .collect()
    }
}

/// Grayscale frames in [0, 1], stored T × H × W.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameStack {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FrameStack {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 || data.len() != frames * height * width {
            return Err(DspError::Geometry(format!(
                "{frames}×{height}×{width} frame stack with {} values",
                data.len()
            )));
        }
        Ok(Self {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn get(&self, t: usize, y: usize, x: usize) -> f64 {
        self.data[(t * self.height + y) * self.width + x]
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[t * n..(t + 1) * n]
    }

    pub fn is_canonical(&self) -> bool {
        self.frames == VIDEO_FRAMES && self.height == FRAME_SIZE && self.width == FRAME_SIZE
    }
}
