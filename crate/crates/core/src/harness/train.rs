use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{HarnessError, Result};
use crate::ensemble::{head_input, head_loss, ComponentOutputs, FusionHead, Strategy};
use crate::nets::{Classifier, Media, ModelKind, NetConfig};
use crate::par::map_ordered;
use crate::synthdata::{build_training_set, Clip, Manifest, NetworkKind};
use crate::tensor::{bce_value, Adam, AdamConfig, Graph, ParameterSet, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Defaults for a fusion head.
    pub fn fusion() -> Self {
        Self {
            lr: 2e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(HarnessError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy of P(real) against labels (1 = real).
pub fn bce_loss(pred_real: &[f64], labels: &[f64]) -> Result<f64> {
    if pred_real.is_empty() {
        return Err(HarnessError::Input("empty batch".into()));
    }
    if pred_real.len() != labels.len() {
        return Err(HarnessError::Input(format!(
            "{} predictions for {} labels",
            pred_real.len(),
            labels.len()
        )));
    }
    Ok(bce_value(pred_real, labels))
}

/// Minibatch Adam over `n` examples.
///
/// `loss` builds the mean loss of the given example indices. Returns the
/// loss trajectory: entry 0 is the loss of the initial parameters over the
/// whole set, entry `k` the mean training loss during epoch `k`. `log` sees
/// each entry as it is produced.
pub fn fit<F>(params: &mut ParameterSet, n: usize, cfg: &TrainConfig, mut loss: F, log: &mut dyn FnMut(usize, f64)) -> Result<Vec<f64>>
where
    F: FnMut(&mut Graph, &ParameterSet, &[usize]) -> Result<Var>,
{
    cfg.validate()?;
    if n == 0 {
        return Err(HarnessError::EmptyTrainingSet);
    }
    let order: Vec<usize> = (0..n).collect();
    let mut initial = 0.0;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let mut g = Graph::frozen();
        let l = loss(&mut g, params, chunk)?;
        let v = g.value(l).data()[0];
        if !v.is_finite() {
            return Err(HarnessError::NonFinite { epoch: 0, batch: b, loss: v });
        }
        initial += v * chunk.len() as f64;
    }
    let mut history = vec![initial / n as f64];
    log(0, history[0]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut order = order;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let l = loss(&mut g, params, chunk)?;
            let v = g.value(l).data()[0];
            if !v.is_finite() {
                return Err(HarnessError::NonFinite { epoch, batch: b, loss: v });
            }
            let grads = g.backward(l)?.for_params(params);
            adam.step(params, &grads)?;
            total += v * chunk.len() as f64;
        }
        history.push(total / n as f64);
        log(epoch, history[epoch]);
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: T,
    pub losses: Vec<f64>,
}

fn media_of(clips: &[Clip], idx: &[usize]) -> Vec<Media> {
    idx.iter().map(|&i| clips[i].to_media()).collect()
}

/// Trains one classifier from scratch on its training selection.
pub fn train_network(
    kind: ModelKind,
    net: &NetConfig,
    manifest: &Manifest,
    cfg: &TrainConfig,
    jobs: usize,
    log: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome<Classifier>> {
    cfg.validate()?;
    let set = build_training_set(manifest, kind.into());
    if set.is_empty() {
        return Err(HarnessError::EmptyTrainingSet);
    }
    let clips = set.load_clips(manifest, jobs)?;
    let labels = set.labels();
    let mut model = Classifier::new(kind, net.clone(), cfg.seed)?;
    let mut params = std::mem::take(model.params_mut());
    let losses = fit(
        &mut params,
        clips.len(),
        cfg,
        |g, p, idx| {
            let media = media_of(&clips, idx);
            let refs: Vec<&Media> = media.iter().collect();
            let y: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
            Ok(model.loss_with(g, p, &refs, &y)?)
        },
        log,
    )?;
    *model.params_mut() = params;
    Ok(TrainOutcome { model, losses })
}

/// Runs the three frozen components over `clips` in batches.
pub fn component_outputs(components: [&Classifier; 3], clips: &[Clip], batch: usize, jobs: usize) -> Result<Vec<ComponentOutputs>> {
    check_components(components)?;
    let idx: Vec<usize> = (0..clips.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(batch.max(1)).collect();
    let per_chunk = map_ordered(jobs, &chunks, |chunk| -> Result<Vec<ComponentOutputs>> {
        let media = media_of(clips, chunk);
        let refs: Vec<&Media> = media.iter().collect();
        let [v, a, av] = components.map(|c| c.predict(&refs));
        let (v, a, av) = (v?, a?, av?);
        Ok((0..chunk.len()).map(|i| ComponentOutputs::new(&v[i], &a[i], &av[i])).collect())
    })?;
    Ok(per_chunk.into_iter().flatten().collect())
}

pub(crate) fn check_components(c: [&Classifier; 3]) -> Result<()> {
    let kinds = c.map(|m| m.kind());
    if kinds[0] != ModelKind::Vn || kinds[1] != ModelKind::An || !kinds[2].is_audio_visual() {
        return Err(HarnessError::Mismatch(format!(
            "components must be VN, AN and an AVN, got {}, {}, {}",
            kinds[0], kinds[1], kinds[2]
        )));
    }
    Ok(())
}

/// Trains a linear fusion head on precomputed component outputs.
pub fn fit_fusion_head(
    strategy: Strategy,
    outputs: &[ComponentOutputs],
    real_labels: &[f64],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome<FusionHead>> {
    if !strategy.trainable() {
        return Err(crate::ensemble::EnsembleError::NothingToTrain(strategy).into());
    }
    if outputs.is_empty() {
        return Err(HarnessError::EmptyTrainingSet);
    }
    let inputs = outputs
        .iter()
        .map(|o| head_input(strategy, o))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let head = FusionHead::init(strategy, inputs[0].len(), cfg.seed)?;
    let mut params = head.params();
    let losses = fit(
        &mut params,
        inputs.len(),
        cfg,
        |g, p, idx| {
            let x: Vec<&[f64]> = idx.iter().map(|&i| inputs[i].as_slice()).collect();
            let y: Vec<f64> = idx.iter().map(|&i| real_labels[i]).collect();
            Ok(head_loss(g, p, strategy, &x, &y)?)
        },
        log,
    )?;
    Ok(TrainOutcome {
        model: FusionHead::from_params(&params)?,
        losses,
    })
}

/// Trains a fusion head on the audio-visual training selection, with the
/// components only ever run for inference.
pub fn train_fusion_head(
    strategy: Strategy,
    components: [&Classifier; 3],
    manifest: &Manifest,
    cfg: &TrainConfig,
    jobs: usize,
    log: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome<FusionHead>> {
    if !strategy.trainable() {
        return Err(crate::ensemble::EnsembleError::NothingToTrain(strategy).into());
    }
    cfg.validate()?;
    check_components(components)?;
    let set = build_training_set(manifest, NetworkKind::Avn);
    if set.is_empty() {
        return Err(HarnessError::EmptyTrainingSet);
    }
    let clips = set.load_clips(manifest, jobs)?;
    let outputs = component_outputs(components, &clips, cfg.batch_size, jobs)?;
    fit_fusion_head(strategy, &outputs, &set.labels(), cfg, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0 - 1e-12], &[1.0]).unwrap() < 1e-11);
        assert!((bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.8], &[1.0]).unwrap() - 0.223144).abs() < 1e-6);
        assert!(bce_loss(&[], &[]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }

    fn toy_scores(n: usize) -> (Vec<ComponentOutputs>, Vec<f64>) {
        // fakes score high on all three components
        let mut out = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let t = i as f64 / n as f64;
            let fake = i % 2 == 0;
            let s = if fake { 0.6 + 0.4 * t } else { 0.4 * t };
            out.push(ComponentOutputs::from_scores([s, 1.0 - (1.0 - s) * 0.9, s * 0.8]));
            y.push(if fake { 0.0 } else { 1.0 });
        }
        (out, y)
    }

    #[test]
    fn score_head_separates_toy_scores() {
        let (x, y) = toy_scores(64);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.05,
            ..TrainConfig::fusion()
        };
        let out = fit_fusion_head(Strategy::Sf, &x, &y, &cfg, &mut |_, _| {}).unwrap();
        assert!(out.losses.last().unwrap() < &out.losses[0]);
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(o, &yr)| crate::ensemble::dm(o, &out.model).unwrap().label == u8::from(yr == 0.0))
            .count();
        assert_eq!(correct, x.len());
    }

    #[test]
    fn zero_epochs_keep_the_initial_head() {
        let (x, y) = toy_scores(8);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::fusion() };
        let out = fit_fusion_head(Strategy::Sf, &x, &y, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(out.model, FusionHead::init(Strategy::Sf, 3, cfg.seed).unwrap());
        assert_eq!(out.losses.len(), 1);
        assert!(matches!(
            fit_fusion_head(Strategy::Mv, &x, &y, &cfg, &mut |_, _| {}),
            Err(HarnessError::Ensemble(_))
        ));
    }

    #[test]
    fn fit_reports_divergence_and_empty_sets() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![1.0]));
        let cfg = TrainConfig::default();
        let nan = fit(
            &mut p,
            4,
            &cfg,
            |g, params, _| {
                let w = g.param(params, "w")?;
                Ok(g.scale(w, f64::NAN)?)
            },
            &mut |_, _| {},
        );
        assert!(matches!(nan, Err(HarnessError::NonFinite { epoch: 0, .. })));
        assert!(matches!(
            fit(&mut p, 0, &cfg, |g, _, _| Ok(g.constant(Tensor::scalar(0.0))), &mut |_, _| {}),
            Err(HarnessError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn fit_decreases_a_quadratic() {
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![3.0, -2.0]));
        let cfg = TrainConfig {
            lr: 0.1,
            epochs: 50,
            batch_size: 1,
            seed: 1,
        };
        let mut logged = Vec::new();
        let losses = fit(
            &mut p,
            2,
            &cfg,
            |g, params, _| {
                let w = g.param(params, "w")?;
                let sq = g.mul(w, w)?;
                Ok(g.sum(sq)?)
            },
            &mut |e, l| logged.push((e, l)),
        )
        .unwrap();
        assert_eq!(losses[0], 13.0);
        assert!(losses[50] < 0.1);
        assert_eq!(logged.len(), 51);
    }
}
