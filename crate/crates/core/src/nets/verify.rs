use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Classifier, Media, ModelKind, NetConfig, NetError, Result};
use crate::synthdata::{generate_sample, Category};
use crate::tensor::{grad_check_with, GradCheckOptions, GradCheckReport, TensorError};

/// Finite-difference check of a toy-sized classifier's loss gradient on two
/// synthetic clips, one genuine and one fully manipulated.
pub fn grad_check_classifier(kind: ModelKind, seed: u64, sabotage: bool) -> Result<GradCheckReport> {
    let batch: Vec<Media> = [(0, Category::RvRa), (1, Category::FvFa)]
        .into_iter()
        .map(|(i, c)| generate_sample(seed, i, i as u32, c).clip.to_media())
        .collect();
    let refs: Vec<&Media> = batch.iter().collect();
    let labels = [1.0, 0.0];
    let mut m = Classifier::new(kind, NetConfig::toy(), seed)?;
    // zero-initialised biases put rectifier inputs exactly on the kink
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37);
    for (_, t) in m.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let opts = GradCheckOptions {
        per_tensor: 3,
        seed,
        // large enough that roundoff on tiny gradients stays negligible;
        // probes that straddle a rectifier kink are shrunk
        eps: 1e-5,
        min_eps: 1e-8,
        sabotage,
    };
    let report = grad_check_with(
        |g, p| m.loss_with(g, p, &refs, &labels).map_err(|e| TensorError::Invalid(e.to_string())),
        m.params(),
        &opts,
    )
    .map_err(NetError::from)?;
    Ok(report)
}
