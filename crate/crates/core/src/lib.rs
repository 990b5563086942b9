//! Audio-visual transformer ensemble for detecting manipulated video.

pub mod dsp;
pub mod ensemble;
pub mod harness;
pub mod nets;
pub mod par;
pub mod synthdata;
pub mod tensor;
