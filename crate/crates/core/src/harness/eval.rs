use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{auc, confusion, metrics, ClassMetrics, ConfusionCounts};
use super::train::check_components;
use super::{HarnessError, Result};
use crate::ensemble::{dm, ComponentOutputs, FusionHead, Strategy};
use crate::nets::{Classifier, Media, ModelKind};
use crate::par::map_ordered;
use crate::synthdata::{load_clip, Category, Manifest, SampleRecord};
use crate::tensor::{ParameterSet, Tensor};

const EVAL_BATCH: usize = 16;

/// What is being evaluated.
#[derive(Clone, Copy, Debug)]
pub enum Evaluator<'a> {
    Model(&'a Classifier),
    /// Components in the order VN, AN, AVN.
    Ensemble {
        components: [&'a Classifier; 3],
        head: &'a FusionHead,
    },
}

impl Evaluator<'_> {
    pub fn name(&self) -> String {
        match self {
            Evaluator::Model(m) => m.kind().to_string(),
            Evaluator::Ensemble { head, .. } => format!("avtenet_{}", head.strategy()),
        }
    }

    pub fn strategy(&self) -> Option<Strategy> {
        match self {
            Evaluator::Model(_) => None,
            Evaluator::Ensemble { head, .. } => Some(head.strategy()),
        }
    }

    fn check(&self) -> Result<()> {
        if let Evaluator::Ensemble { components, head } = self {
            check_components(*components)?;
            if head.strategy() == Strategy::Ff {
                let want: usize = components.iter().map(|c| c.kind().embedding_dim(c.config())).sum();
                if head.input_dim() != Some(want) {
                    return Err(HarnessError::Mismatch(format!(
                        "feature-fusion head takes {:?} inputs but the components produce {want}",
                        head.input_dim()
                    )));
                }
            }
        }
        Ok(())
    }
}

fn embedding_name(kind: ModelKind) -> &'static str {
    match kind {
        ModelKind::Vn => "E_v",
        ModelKind::An => "E_a",
        ModelKind::AvnFused | ModelKind::AvnConcat => "E_av",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub id: String,
    pub category: Category,
    pub truth_fake: bool,
    pub pred_fake: bool,
    pub score_fake: f64,
    pub embeddings: Vec<(&'static str, Vec<f64>)>,
}

fn predict_batch(ev: &Evaluator, records: &[&SampleRecord], media: &[Media]) -> Result<Vec<SamplePrediction>> {
    let refs: Vec<&Media> = media.iter().collect();
    let mut out = Vec::with_capacity(records.len());
    match ev {
        Evaluator::Model(m) => {
            for (r, o) in records.iter().zip(m.predict(&refs)?) {
                out.push(SamplePrediction {
                    id: r.id.clone(),
                    category: r.category,
                    truth_fake: !r.category.is_real(),
                    pred_fake: o.score_fake >= crate::ensemble::TAU_BIN,
                    score_fake: o.score_fake,
                    embeddings: vec![(embedding_name(m.kind()), o.embedding)],
                });
            }
        }
        Evaluator::Ensemble { components, head } => {
            let [v, a, av] = components.map(|c| c.predict(&refs));
            let (v, a, av) = (v?, a?, av?);
            for (i, r) in records.iter().enumerate() {
                let c = ComponentOutputs::new(&v[i], &a[i], &av[i]);
                let d = dm(&c, head)?;
                let mut embeddings: Vec<(&'static str, Vec<f64>)> =
                    ["E_v", "E_a", "E_av"].into_iter().zip(c.embeddings.iter().cloned()).collect();
                embeddings.push(("E_ff", c.feature_vector()));
                out.push(SamplePrediction {
                    id: r.id.clone(),
                    category: r.category,
                    truth_fake: !r.category.is_real(),
                    pred_fake: d.label == 1,
                    score_fake: d.fused_score,
                    embeddings,
                });
            }
        }
    }
    Ok(out)
}

/// Predictions for `records`, returned in sample-id order.
pub fn predict_records(ev: &Evaluator, manifest: &Manifest, records: &[&SampleRecord], jobs: usize) -> Result<Vec<SamplePrediction>> {
    ev.check()?;
    let mut sorted: Vec<&SampleRecord> = records.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    sorted.dedup_by(|a, b| a.id == b.id);
    let chunks: Vec<&[&SampleRecord]> = sorted.chunks(EVAL_BATCH).collect();
    let parts = map_ordered(jobs, &chunks, |chunk| -> Result<Vec<SamplePrediction>> {
        let media = chunk
            .iter()
            .map(|r| Ok(load_clip(&manifest.dir, r)?.to_media()))
            .collect::<Result<Vec<_>>>()?;
        predict_batch(ev, chunk, &media)
    })?;
    Ok(parts.into_iter().flatten().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub real: ClassMetrics,
    pub fake: ClassMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub subset: String,
    /// Digest of the corpus configuration.
    pub digest: String,
    pub samples: usize,
    pub counts: ConfusionCounts,
    pub per_class: PerClass,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

impl EvalReport {
    pub fn from_predictions(
        model: String,
        strategy: Option<Strategy>,
        subset: &str,
        digest: &str,
        preds: &[SamplePrediction],
    ) -> Result<Self> {
        let mut sorted: Vec<&SamplePrediction> = preds.iter().collect();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let pred: Vec<bool> = sorted.iter().map(|p| p.pred_fake).collect();
        let truth: Vec<bool> = sorted.iter().map(|p| p.truth_fake).collect();
        let scores: Vec<f64> = sorted.iter().map(|p| p.score_fake).collect();
        let counts = confusion(&pred, &truth)?;
        let m = metrics(&counts)?;
        let both = truth.iter().any(|&t| t) && truth.iter().any(|&t| !t);
        Ok(Self {
            model,
            strategy,
            subset: subset.to_string(),
            digest: digest.to_string(),
            samples: sorted.len(),
            counts,
            per_class: PerClass {
                real: m.real,
                fake: m.fake,
            },
            accuracy: m.accuracy,
            auc: if both { Some(auc(&scores, &truth)?) } else { None },
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "### {} on {} ({} samples)\n", self.model, self.subset, self.samples);
        s.push_str("| Class | Precision | Recall | F1-Score | Accuracy |\n");
        s.push_str("|-------|-----------|--------|----------|----------|\n");
        for (name, c) in [("Real", &self.per_class.real), ("Fake", &self.per_class.fake)] {
            let _ = writeln!(
                s,
                "| {name} | {:.4} | {:.4} | {:.4} | {:.4} |",
                c.precision, c.recall, c.f1, self.accuracy
            );
        }
        if let Some(a) = self.auc {
            let _ = writeln!(s, "\nAUC {a:.4}");
        }
        s
    }
}

/// Evaluates on a named subset of `manifest`.
pub fn evaluate(ev: &Evaluator, manifest: &Manifest, subset: &str, jobs: usize) -> Result<(EvalReport, Vec<SamplePrediction>)> {
    let records = manifest
        .subset(subset)
        .ok_or_else(|| HarnessError::UnknownSubset(subset.to_string()))?;
    if records.is_empty() {
        return Err(HarnessError::UnknownSubset(format!("{subset} (no samples)")));
    }
    let preds = predict_records(ev, manifest, &records, jobs)?;
    let report = EvalReport::from_predictions(ev.name(), ev.strategy(), subset, &manifest.digest, &preds)?;
    Ok((report, preds))
}

/// Per-sample embeddings as named vectors, `<id>.<E_x>`.
pub fn embedding_dump(preds: &[SamplePrediction]) -> ParameterSet {
    let mut out = ParameterSet::new();
    for p in preds {
        for (name, e) in &p.embeddings {
            out.insert(format!("{}.{name}", p.id), Tensor::vector(e.clone()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pred(id: &str, truth: bool, pred: bool, score: f64) -> SamplePrediction {
        SamplePrediction {
            id: id.into(),
            category: if truth { Category::FvFa } else { Category::RvRa },
            truth_fake: truth,
            pred_fake: pred,
            score_fake: score,
            embeddings: vec![("E_v", vec![score, 1.0])],
        }
    }

    #[test]
    fn report_ignores_prediction_order() {
        let preds = vec![
            pred("clip-000003", true, true, 0.9),
            pred("clip-000001", false, false, 0.1),
            pred("clip-000002", true, false, 0.4),
            pred("clip-000004", false, true, 0.6),
        ];
        let mut rev = preds.clone();
        rev.reverse();
        let a = EvalReport::from_predictions("vn".into(), None, "mixed-II", "d", &preds).unwrap();
        let b = EvalReport::from_predictions("vn".into(), None, "mixed-II", "d", &rev).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.accuracy, 0.5);
        assert_eq!(a.auc, Some(0.75));
        let back: EvalReport = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn oracle_predictions_give_perfect_rows() {
        let preds = vec![pred("a", true, true, 0.9), pred("b", false, false, 0.1)];
        let r = EvalReport::from_predictions("oracle".into(), Some(Strategy::Ff), "full", "d", &preds).unwrap();
        let md = r.to_markdown();
        assert!(md.contains("| Real | 1.0000 | 1.0000 | 1.0000 | 1.0000 |"));
        assert!(md.contains("| Fake | 1.0000 | 1.0000 | 1.0000 | 1.0000 |"));
        assert!(r.to_json().contains("\"strategy\": \"ff\""));
        assert!(r.to_json().contains("\"fn\": 0"));
    }

    #[test]
    fn single_class_subset_has_no_auc() {
        let preds = vec![pred("a", true, true, 0.9), pred("b", true, false, 0.2)];
        let r = EvalReport::from_predictions("an".into(), None, "x", "d", &preds).unwrap();
        assert_eq!(r.auc, None);
        assert!(!r.to_json().contains("auc"));
    }

    #[test]
    fn dump_names_vectors_by_sample() {
        let dump = embedding_dump(&[pred("clip-000007", true, true, 0.5)]);
        assert_eq!(dump.get("clip-000007.E_v").unwrap().data(), &[0.5, 1.0]);
    }
}
