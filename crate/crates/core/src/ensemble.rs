//! Decision module combining VN, AN and AVN.
//!
//! Labels here use 1 = fake. Majority voting and score averaging need no
//! training; the score-fusion and feature-fusion heads are single linear
//! layers over the component scores or embeddings.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nets::ClassifierOutput;
use crate::tensor::{Graph, ParamInit, ParameterSet, Tensor, TensorError, Var};

/// Threshold turning a component score into a vote.
pub const TAU_BIN: f64 = 0.5;
/// Threshold on the mean score for score averaging.
pub const TAU: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("score {0} outside [0, 1]")]
    ScoreRange(f64),
    #[error("strategy {0} has no trainable head")]
    NothingToTrain(Strategy),
    #[error("head is for {head}, not {wanted}")]
    WrongHead { head: Strategy, wanted: Strategy },
    #[error("feature fusion needs {expected} embedding values, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("invalid fusion head: {0}")]
    Head(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EnsembleError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Mv,
    Asf,
    Sf,
    Ff,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Mv, Strategy::Asf, Strategy::Sf, Strategy::Ff];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mv => "mv",
            Strategy::Asf => "asf",
            Strategy::Sf => "sf",
            Strategy::Ff => "ff",
        }
    }

    pub fn trainable(self) -> bool {
        matches!(self, Strategy::Sf | Strategy::Ff)
    }

    fn prefix(self) -> String {
        format!("dm.{}", self.name())
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| EnsembleError::Head(format!("unknown strategy {s}")))
    }
}

/// What the three components said about one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentOutputs {
    /// Fake scores of VN, AN and AVN.
    pub scores: [f64; 3],
    /// Embeddings of VN, AN and AVN; empty when not collected.
    pub embeddings: [Vec<f64>; 3],
}

impl ComponentOutputs {
    pub fn new(v: &ClassifierOutput, a: &ClassifierOutput, av: &ClassifierOutput) -> Self {
        Self {
            scores: [v.score_fake, a.score_fake, av.score_fake],
            embeddings: [v.embedding.clone(), a.embedding.clone(), av.embedding.clone()],
        }
    }

    pub fn from_scores(scores: [f64; 3]) -> Self {
        Self {
            scores,
            embeddings: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    pub fn votes(&self) -> [bool; 3] {
        self.scores.map(|s| s >= TAU_BIN)
    }

    /// `E_v ++ E_a ++ E_av`.
    pub fn feature_vector(&self) -> Vec<f64> {
        self.embeddings.concat()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    /// 1 = fake.
    pub label: u8,
    pub fused_score: f64,
    pub strategy: Strategy,
    pub scores: [f64; 3],
    pub votes: [bool; 3],
}

/// Fake when at least two of the three votes say fake.
pub fn majority_vote(p_v: bool, p_a: bool, p_av: bool) -> bool {
    u8::from(p_v) + u8::from(p_a) + u8::from(p_av) >= 2
}

fn check_scores(s: &[f64; 3]) -> Result<()> {
    match s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(&bad) => Err(EnsembleError::ScoreRange(bad)),
        None => Ok(()),
    }
}

fn decision(strategy: Strategy, label: bool, fused_score: f64, s: [f64; 3]) -> EnsembleDecision {
    EnsembleDecision {
        label: u8::from(label),
        fused_score,
        strategy,
        scores: s,
        votes: s.map(|v| v >= TAU_BIN),
    }
}

pub fn average_score_fuse(s: [f64; 3], tau: f64) -> Result<EnsembleDecision> {
    check_scores(&s)?;
    let mean = (s[0] + s[1] + s[2]) / 3.0;
    Ok(decision(Strategy::Asf, mean >= tau, mean, s))
}

/// Trained parameters of a decision module.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionHead {
    strategy: Strategy,
    /// `[2, input]`, rows ordered `[real, fake]`.
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    tau: f64,
}

impl FusionHead {
    pub fn majority() -> Self {
        Self {
            strategy: Strategy::Mv,
            weight: None,
            bias: None,
            tau: TAU_BIN,
        }
    }

    pub fn average(tau: f64) -> Self {
        Self {
            strategy: Strategy::Asf,
            weight: None,
            bias: None,
            tau,
        }
    }

    /// A linear head; `weight` is `[2, n]` and `bias` `[2]`.
    pub fn linear(strategy: Strategy, weight: Tensor, bias: Tensor) -> Result<Self> {
        if !strategy.trainable() {
            return Err(EnsembleError::NothingToTrain(strategy));
        }
        if weight.rank() != 2 || weight.shape()[0] != 2 || bias.shape() != [2] {
            return Err(EnsembleError::Head(format!(
                "weight {:?} and bias {:?}",
                weight.shape(),
                bias.shape()
            )));
        }
        if strategy == Strategy::Sf && weight.shape()[1] != 3 {
            return Err(EnsembleError::Head("score fusion takes three scores".into()));
        }
        if !weight.all_finite() || !bias.all_finite() {
            return Err(EnsembleError::Head("non-finite weights".into()));
        }
        Ok(Self {
            strategy,
            weight: Some(weight),
            bias: Some(bias),
            tau: TAU_BIN,
        })
    }

    /// Xavier-initialised head over `input` features.
    pub fn init(strategy: Strategy, input: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = ParamInit::Xavier {
            fan_in: input,
            fan_out: 2,
        }
        .sample(&[2, input], &mut rng);
        Self::linear(strategy, w, Tensor::zeros(&[2]))
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.weight.as_ref().map(|w| w.shape()[1])
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    /// Fake decision and softmax fake probability of the linear head.
    fn apply(&self, x: &[f64]) -> Result<(bool, f64)> {
        let (w, b) = match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(EnsembleError::Head("linear head without weights".into())),
        };
        let n = w.shape()[1];
        if x.len() != n {
            return Err(EnsembleError::Dim {
                expected: n,
                got: x.len(),
            });
        }
        let row = |r: usize| b.data()[r] + w.data()[r * n..(r + 1) * n].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        let (real, fake) = (row(0), row(1));
        let p_fake = 1.0 / (1.0 + (real - fake).exp());
        // ties go to fake
        Ok((fake >= real, p_fake))
    }

    pub fn params(&self) -> ParameterSet {
        let mut p = ParameterSet::new();
        let prefix = self.strategy.prefix();
        match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => {
                p.insert(format!("{prefix}.w"), w.clone());
                p.insert(format!("{prefix}.b"), b.clone());
            }
            _ => {
                p.insert(format!("{prefix}.tau"), Tensor::scalar(self.tau));
            }
        }
        p
    }

    pub fn from_params(p: &ParameterSet) -> Result<Self> {
        for s in Strategy::ALL {
            let prefix = s.prefix();
            if let (Some(w), Some(b)) = (p.get(&format!("{prefix}.w")), p.get(&format!("{prefix}.b"))) {
                if p.len() != 2 {
                    return Err(EnsembleError::Head("unexpected tensors next to the head".into()));
                }
                return Self::linear(s, w.clone(), b.clone());
            }
            if let Some(t) = p.get(&format!("{prefix}.tau")) {
                let tau = t.data()[0];
                return Ok(match s {
                    Strategy::Mv => Self::majority(),
                    Strategy::Asf => Self::average(tau),
                    _ => return Err(EnsembleError::Head(format!("{s} head without weights"))),
                });
            }
        }
        Err(EnsembleError::Head("no decision module tensors".into()))
    }
}

pub fn score_fuse(s: [f64; 3], head: &FusionHead) -> Result<EnsembleDecision> {
    if head.strategy != Strategy::Sf {
        return Err(EnsembleError::WrongHead {
            head: head.strategy,
            wanted: Strategy::Sf,
        });
    }
    check_scores(&s)?;
    let (fake, p) = head.apply(&s)?;
    Ok(decision(Strategy::Sf, fake, p, s))
}

pub fn feature_fuse(e_v: &[f64], e_a: &[f64], e_av: &[f64], head: &FusionHead) -> Result<EnsembleDecision> {
    feature_fuse_scored(e_v, e_a, e_av, head, [0.0; 3])
}

fn feature_fuse_scored(e_v: &[f64], e_a: &[f64], e_av: &[f64], head: &FusionHead, s: [f64; 3]) -> Result<EnsembleDecision> {
    if head.strategy != Strategy::Ff {
        return Err(EnsembleError::WrongHead {
            head: head.strategy,
            wanted: Strategy::Ff,
        });
    }
    let x: Vec<f64> = [e_v, e_a, e_av].concat();
    let (fake, p) = head.apply(&x)?;
    Ok(decision(Strategy::Ff, fake, p, s))
}

/// Dispatches on the head's strategy.
pub fn dm(outputs: &ComponentOutputs, head: &FusionHead) -> Result<EnsembleDecision> {
    let s = outputs.scores;
    match head.strategy {
        Strategy::Mv => {
            check_scores(&s)?;
            let [v, a, av] = outputs.votes();
            let votes = s.iter().filter(|&&x| x >= TAU_BIN).count();
            Ok(decision(Strategy::Mv, majority_vote(v, a, av), votes as f64 / 3.0, s))
        }
        Strategy::Asf => average_score_fuse(s, head.tau),
        Strategy::Sf => score_fuse(s, head),
        Strategy::Ff => {
            let [v, a, av] = &outputs.embeddings;
            if v.is_empty() || a.is_empty() || av.is_empty() {
                return Err(EnsembleError::Head("feature fusion needs all three embeddings".into()));
            }
            check_scores(&s)?;
            feature_fuse_scored(v, a, av, head, s)
        }
    }
}

/// Fusion-head input for one clip.
pub fn head_input(strategy: Strategy, outputs: &ComponentOutputs) -> Result<Vec<f64>> {
    match strategy {
        Strategy::Sf => Ok(outputs.scores.to_vec()),
        Strategy::Ff => Ok(outputs.feature_vector()),
        other => Err(EnsembleError::NothingToTrain(other)),
    }
}

/// Mean cross-entropy of the head's P(real) on a batch of inputs.
pub fn head_loss(g: &mut Graph, params: &ParameterSet, strategy: Strategy, inputs: &[&[f64]], real_labels: &[f64]) -> Result<Var> {
    let n = inputs[0].len();
    let x = Tensor::new(vec![inputs.len(), n], inputs.concat())?;
    let x = g.constant(x);
    let prefix = strategy.prefix();
    let w = g.param(params, &format!("{prefix}.w"))?;
    let b = g.param(params, &format!("{prefix}.b"))?;
    let logits = g.linear(x, w, Some(b))?;
    let probs = g.softmax(logits, 1)?;
    let p_real = g.narrow(probs, 1, 0, 1)?;
    let p_real = g.reshape(p_real, &[inputs.len()])?;
    Ok(g.bce(p_real, real_labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn majority_truth_table() {
        for bits in 0u8..8 {
            let (v, a, av) = (bits & 1 == 1, bits & 2 == 2, bits & 4 == 4);
            assert_eq!(majority_vote(v, a, av), bits.count_ones() >= 2);
        }
        assert!(majority_vote(true, true, false));
        assert!(!majority_vote(false, false, true));
    }

    #[test]
    fn averaging() {
        let d = average_score_fuse([0.9, 0.9, 0.0], TAU).unwrap();
        assert!((d.fused_score - 0.6).abs() < 1e-15);
        assert_eq!(d.label, 1);
        assert_eq!(average_score_fuse([0.0; 3], TAU).unwrap().label, 0);
        assert_eq!(average_score_fuse([0.5; 3], TAU).unwrap().label, 1);
        assert_eq!(average_score_fuse([0.2; 3], TAU).unwrap().label, 0);
        assert!(average_score_fuse([1.2, 0.0, 0.0], TAU).is_err());
    }

    #[test]
    fn score_fusion_examples() {
        let zero = FusionHead::linear(Strategy::Sf, Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])).unwrap();
        let d = score_fuse([0.3, 0.8, 0.1], &zero).unwrap();
        assert_eq!((d.fused_score, d.label), (0.5, 1));
        let w = Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let h = FusionHead::linear(Strategy::Sf, w, Tensor::zeros(&[2])).unwrap();
        let d = score_fuse([1.0; 3], &h).unwrap();
        let e3 = 3f64.exp();
        assert!((d.fused_score - e3 / (1.0 + e3)).abs() < 1e-15);
        assert!((d.fused_score - 0.9526).abs() < 1e-4);
        assert!(score_fuse([1.0; 3], &FusionHead::majority()).is_err());
    }

    #[test]
    fn feature_fusion_reads_only_weighted_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = vec![0.0; 2 * 192];
        for r in 0..2 {
            for c in 0..64 {
                w[r * 192 + c] = rng.random_range(-1.0..1.0);
            }
        }
        let h = FusionHead::linear(Strategy::Ff, Tensor::new(vec![2, 192], w).unwrap(), Tensor::vector(vec![0.1, -0.2])).unwrap();
        let ev: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let other: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zero = vec![0.0; 64];
        let a = feature_fuse(&ev, &zero, &zero, &h).unwrap();
        let b = feature_fuse(&ev, &other, &other, &h).unwrap();
        assert_eq!(a, b);
        assert!(feature_fuse(&ev, &zero, &zero[..10], &h).is_err());
        let flat = FusionHead::linear(Strategy::Ff, Tensor::zeros(&[2, 192]), Tensor::zeros(&[2])).unwrap();
        assert_eq!(feature_fuse(&ev, &other, &other, &flat).unwrap().fused_score, 0.5);
    }

    #[test]
    fn dispatch() {
        let all_fake = ComponentOutputs::from_scores([0.9, 0.8, 0.7]);
        assert_eq!(dm(&all_fake, &FusionHead::majority()).unwrap().label, 1);
        let low = ComponentOutputs::from_scores([0.2; 3]);
        assert_eq!(dm(&low, &FusionHead::average(TAU)).unwrap().label, 0);
        let ff = FusionHead::init(Strategy::Ff, 192, 1).unwrap();
        assert!(dm(&low, &ff).is_err());
    }

    #[test]
    fn head_checkpoint_round_trip() {
        for h in [
            FusionHead::init(Strategy::Sf, 3, 2).unwrap(),
            FusionHead::init(Strategy::Ff, 192, 2).unwrap(),
            FusionHead::average(0.4),
            FusionHead::majority(),
        ] {
            assert_eq!(FusionHead::from_params(&h.params()).unwrap(), h);
        }
        assert!(FusionHead::init(Strategy::Mv, 3, 0).is_err());
        assert!(FusionHead::from_params(&ParameterSet::new()).is_err());
    }

    #[test]
    fn shift_invariance_of_linear_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let w: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let c = rng.random_range(-5.0..5.0);
            let h = FusionHead::linear(Strategy::Sf, Tensor::new(vec![2, 3], w.clone()).unwrap(), Tensor::vector(b.clone())).unwrap();
            let shifted = FusionHead::linear(
                Strategy::Sf,
                Tensor::new(vec![2, 3], w).unwrap(),
                Tensor::vector(vec![b[0] + c, b[1] + c]),
            )
            .unwrap();
            let s = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            assert_eq!(score_fuse(s, &h).unwrap().label, score_fuse(s, &shifted).unwrap().label);
        }
    }
}
