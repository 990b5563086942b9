//! Deterministic synthetic audio-visual corpus.
//!
//! Every clip is a talking-face analogue: a subject-specific harmonic voice
//! whose loudness envelope also drives the mouth region of a face blob.
//! Audio manipulation injects an inharmonic partial and re-phases the
//! envelope; visual manipulation decouples the mouth from the voice and
//! swaps the skin texture for a checkerboard grain.
//!
//! Seeds: the clip at position `index` uses
//! `sample_seed(global, index) = splitmix64(splitmix64(global) ^ index)`.
//! Scene, audio manipulation, video manipulation and the two noise sources
//! draw from separate ChaCha8 streams of that seed, so a manipulated clip
//! and its clean counterpart share everything the manipulation leaves alone.

mod corpus;
mod scene;

pub use corpus::{
    build_training_set, generate_corpus, load_clip, sha256_hex, tree_digest, CategoryCounts, CorpusConfig, Manifest,
    SampleRecord, TrainingItem, TrainingSet, DEFAULT_TRAIN_PER_CATEGORY, EXTRA_INDEX_BASE, MANIFEST_FILE, SUBSETS,
};
pub use scene::{generate_sample, subject_traits, AvSample, Clip, SubjectTraits};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::nets::ModelKind;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Media(#[from] DspError),
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: String, reason: String },
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("output directory {0} is not empty (use --force to overwrite)")]
    NotEmpty(String),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Stafford's mix13 finaliser over a golden-ratio increment.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sample_seed(global_seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(global_seed) ^ index)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    RvRa,
    RvFa,
    FvRa,
    FvFa,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::RvRa, Category::RvFa, Category::FvRa, Category::FvFa];

    pub fn from_flags(visual_fake: bool, audio_fake: bool) -> Self {
        match (visual_fake, audio_fake) {
            (false, false) => Category::RvRa,
            (false, true) => Category::RvFa,
            (true, false) => Category::FvRa,
            (true, true) => Category::FvFa,
        }
    }

    pub fn visual_fake(self) -> bool {
        matches!(self, Category::FvRa | Category::FvFa)
    }

    pub fn audio_fake(self) -> bool {
        matches!(self, Category::RvFa | Category::FvFa)
    }

    pub fn is_real(self) -> bool {
        self == Category::RvRa
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::RvRa => "RvRa",
            Category::RvFa => "RvFa",
            Category::FvRa => "FvRa",
            Category::FvFa => "FvFa",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| SynthError::Config(format!("unknown category {s}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamLabel {
    Real,
    Fake,
}

impl StreamLabel {
    pub fn from_fake(fake: bool) -> Self {
        if fake {
            StreamLabel::Fake
        } else {
            StreamLabel::Real
        }
    }
}

/// Which training-data selection a network uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkKind {
    Vn,
    An,
    Avn,
}

impl NetworkKind {
    /// Categories forming the fake class.
    pub fn is_fake(self, c: Category) -> bool {
        match self {
            NetworkKind::Vn => c.visual_fake(),
            NetworkKind::An => c.audio_fake(),
            NetworkKind::Avn => !c.is_real(),
        }
    }
}

impl From<ModelKind> for NetworkKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Vn => NetworkKind::Vn,
            ModelKind::An => NetworkKind::An,
            ModelKind::AvnFused | ModelKind::AvnConcat => NetworkKind::Avn,
        }
    }
}
