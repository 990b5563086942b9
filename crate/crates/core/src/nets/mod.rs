//! The video (VN), audio (AN) and audio-visual (AVN) classifiers.
//!
//! Every classifier ends in a two-logit head ordered `[real, fake]`. The
//! score of a clip is the softmax probability of the fake logit and the
//! embedding is the vector the head reads.

mod classifiers;
mod encoder;
pub mod features;
mod mstcn;
mod verify;

pub use encoder::{declare_encoder, encoder_forward, EncoderConfig, EncoderOutput, LN_EPS};
pub use features::Media;
pub use mstcn::{declare_mstcn, mstcn_forward, MsTcnConfig};
pub use verify::grad_check_classifier;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::DspError;
use crate::tensor::{Graph, ParameterSet, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint does not match: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vn,
    An,
    AvnFused,
    AvnConcat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Vn, ModelKind::An, ModelKind::AvnFused, ModelKind::AvnConcat];

    /// Name prefix of every tensor the network owns.
    pub fn prefix(self) -> &'static str {
        match self {
            ModelKind::Vn => "vn",
            ModelKind::An => "an",
            ModelKind::AvnFused => "avn_fused",
            ModelKind::AvnConcat => "avn_concat",
        }
    }

    pub fn embedding_dim(self, cfg: &NetConfig) -> usize {
        match self {
            ModelKind::AvnConcat => 2 * cfg.dim,
            _ => cfg.dim,
        }
    }

    /// Either audio-visual network.
    pub fn is_audio_visual(self) -> bool {
        matches!(self, ModelKind::AvnFused | ModelKind::AvnConcat)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

impl FromStr for ModelKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vn" => Ok(ModelKind::Vn),
            "an" => Ok(ModelKind::An),
            "avn" | "avn_fused" => Ok(ModelKind::AvnFused),
            "avn_concat" => Ok(ModelKind::AvnConcat),
            other => Err(NetError::Config(format!("unknown model {other}"))),
        }
    }
}

/// Sizes shared by all encoders plus the fused network's extras.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    /// Channels of the two residual blocks of the lip extractor.
    pub conv_channels: [usize; 2],
    pub tcn_blocks: usize,
    pub tcn_kernels: Vec<usize>,
    pub tcn_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            ffn_dim: 128,
            conv_channels: [8, 16],
            tcn_blocks: 2,
            tcn_kernels: vec![3, 5, 7],
            tcn_channels: 66,
        }
    }
}

impl NetConfig {
    /// Tiny sizes for gradient checks and fast tests.
    pub fn toy() -> Self {
        Self {
            dim: 8,
            heads: 2,
            layers: 1,
            ffn_dim: 12,
            conv_channels: [2, 3],
            tcn_blocks: 1,
            tcn_kernels: vec![3, 5, 7],
            tcn_channels: 6,
        }
    }

    pub fn tcn(&self) -> MsTcnConfig {
        MsTcnConfig {
            blocks: self.tcn_blocks,
            kernel_sizes: self.tcn_kernels.clone(),
            channels: self.tcn_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        classifiers::encoder_cfg(self, 1).validate()?;
        if !self.dim.is_multiple_of(2) {
            return Err(NetError::Config(format!("model dim {} must be even", self.dim)));
        }
        if self.conv_channels.contains(&0) {
            return Err(NetError::Config("lip extractor channels must be positive".into()));
        }
        self.tcn().validate()
    }

    /// Parameter count of `kind` computed from the layer sizes alone.
    pub fn param_count(&self, kind: ModelKind) -> usize {
        let d = self.dim;
        let half = d / 2;
        let enc = |budget: usize, cls: bool| classifiers::encoder_cfg(self, budget).param_count(cls);
        let vn = d * 256 + d + enc(17, true) + enc(5, true);
        let an = d * 256 + d + enc(26, true);
        let body = match kind {
            ModelKind::Vn => vn,
            ModelKind::An => an,
            ModelKind::AvnConcat => vn + an,
            ModelKind::AvnFused => {
                let [c1, c2] = self.conv_channels;
                let block = |cin: usize, cout: usize| (cout * cin * 9 + cout) + (cout * cout * 9 + cout) + (cout * cin + cout);
                let c = self.tcn_channels;
                block(1, c1)
                    + block(c1, c2)
                    + half * c2 * 16
                    + half
                    + d * 104
                    + d
                    + half * d
                    + half
                    + enc(16, false)
                    + c * d
                    + c
                    + self.tcn().param_count()
                    + d * c
                    + d
            }
        };
        body + 2 * kind.embedding_dim(self) + 2
    }

    fn to_meta(&self) -> Tensor {
        let mut v = vec![
            self.dim,
            self.heads,
            self.layers,
            self.ffn_dim,
            self.conv_channels[0],
            self.conv_channels[1],
            self.tcn_blocks,
            self.tcn_channels,
        ];
        v.extend(&self.tcn_kernels);
        Tensor::vector(v.into_iter().map(|x| x as f64).collect())
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        let d = t.data();
        let ok = d.len() > 8 && d.iter().all(|&x| x >= 0.0 && x.fract() == 0.0 && x < 1e9);
        if !ok {
            return Err(NetError::Checkpoint("malformed config record".into()));
        }
        let u: Vec<usize> = d.iter().map(|&x| x as usize).collect();
        let cfg = Self {
            dim: u[0],
            heads: u[1],
            layers: u[2],
            ffn_dim: u[3],
            conv_channels: [u[4], u[5]],
            tcn_blocks: u[6],
            tcn_channels: u[7],
            tcn_kernels: u[8..].to_vec(),
        };
        cfg.validate()
            .map_err(|e| NetError::Checkpoint(format!("stored config is invalid: {e}")))?;
        Ok(cfg)
    }
}

/// Head output for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutput {
    /// `[real, fake]`.
    pub logits: [f64; 2],
    /// Softmax probability of the fake logit.
    pub score_fake: f64,
    pub embedding: Vec<f64>,
}

impl ClassifierOutput {
    pub fn p_real(&self) -> f64 {
        1.0 - self.score_fake
    }
}

/// Graph nodes of one batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, E]`.
    pub embedding: Var,
    /// `[B, 2]`.
    pub logits: Var,
    /// `[B, 2]`.
    pub probs: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    kind: ModelKind,
    config: NetConfig,
    params: ParameterSet,
}

impl Classifier {
    pub fn new(kind: ModelKind, config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = classifiers::declare(kind, &config, &mut rng);
        Ok(Self { kind, config, params })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Batched forward pass reading weights from `params`, which must share
    /// this network's layout.
    pub fn forward_with(&self, g: &mut Graph, params: &ParameterSet, batch: &[&Media]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(NetError::Input("empty batch".into()));
        }
        let embedding = classifiers::embedding(g, self.kind, &self.config, params, batch)?;
        let logits = classifiers::head(g, self.kind, params, embedding)?;
        let probs = g.softmax(logits, 1)?;
        Ok(Forward {
            embedding,
            logits,
            probs,
        })
    }

    pub fn forward(&self, g: &mut Graph, batch: &[&Media]) -> Result<Forward> {
        self.forward_with(g, &self.params, batch)
    }

    /// Mean cross-entropy of P(real) against `real_labels` (1 real, 0 fake).
    pub fn loss_with(&self, g: &mut Graph, params: &ParameterSet, batch: &[&Media], real_labels: &[f64]) -> Result<Var> {
        let f = self.forward_with(g, params, batch)?;
        let p_real = g.narrow(f.probs, 1, 0, 1)?;
        let p_real = g.reshape(p_real, &[batch.len()])?;
        Ok(g.bce(p_real, real_labels)?)
    }

    /// Inference on a frozen graph.
    pub fn predict(&self, batch: &[&Media]) -> Result<Vec<ClassifierOutput>> {
        let mut g = Graph::frozen();
        let f = self.forward(&mut g, batch)?;
        Ok(read_outputs(&g, f))
    }

    pub fn predict_one(&self, m: &Media) -> Result<ClassifierOutput> {
        Ok(self.predict(&[m])?.remove(0))
    }

    /// Name of the tensor holding the network's sizes in a checkpoint.
    pub fn meta_name(kind: ModelKind) -> String {
        format!("{}.meta", kind.prefix())
    }

    /// Weights plus a config record, ready for the checkpoint writer.
    pub fn to_checkpoint(&self) -> ParameterSet {
        let mut out = self.params.clone();
        out.insert(Self::meta_name(self.kind), self.config.to_meta());
        out
    }

    /// Rebuilds a network, checking that every expected tensor is present
    /// with the expected shape and nothing else is.
    pub fn from_checkpoint(mut stored: ParameterSet) -> Result<Self> {
        let kind = ModelKind::ALL
            .into_iter()
            .find(|k| stored.contains(&Self::meta_name(*k)))
            .ok_or_else(|| NetError::Checkpoint("no network config record".into()))?;
        let meta = stored.remove(&Self::meta_name(kind)).expect("found above");
        let config = NetConfig::from_meta(&meta)?;
        let template = Self::new(kind, config, 0)?;
        for (name, t) in template.params.iter() {
            match stored.get(name) {
                None => return Err(NetError::Checkpoint(format!("missing tensor {name}"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(NetError::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        s.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if let Some(extra) = stored.names().find(|n| !template.params.contains(n)) {
            return Err(NetError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            kind,
            config: template.config,
            params: stored,
        })
    }

    /// Every parameter tensor with its shape, in name order.
    pub fn describe(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }
}

/// Copies per-sample outputs out of a finished forward pass.
pub fn read_outputs(g: &Graph, f: Forward) -> Vec<ClassifierOutput> {
    let logits = g.value(f.logits).data();
    let probs = g.value(f.probs).data();
    let emb = g.value(f.embedding);
    let e = emb.shape()[1];
    (0..emb.shape()[0])
        .map(|i| ClassifierOutput {
            logits: [logits[2 * i], logits[2 * i + 1]],
            score_fake: probs[2 * i + 1],
            embedding: emb.data()[i * e..(i + 1) * e].to_vec(),
        })
        .collect()
}
