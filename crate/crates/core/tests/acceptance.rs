//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use avtenet::ensemble::{
    average_score_fuse, feature_fuse, majority_vote, score_fuse, FusionHead, Strategy, TAU,
};
use avtenet::harness::{
    confusion, evaluate, fit_fusion_head, component_outputs, metrics, train_fusion_head, train_network,
    ConfusionCounts, EvalReport, Evaluator, TrainConfig,
};
use avtenet::nets::{grad_check_classifier, Classifier, ModelKind, NetConfig};
use avtenet::synthdata::{
    build_training_set, generate_corpus, generate_sample, load_clip, tree_digest, CategoryCounts, CorpusConfig,
    Manifest, NetworkKind, SUBSETS,
};
use avtenet::tensor::{decode_checkpoint, encode_checkpoint, primitive_suite, ParameterSet, Tensor};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut worst_prim = 0.0f64;
    let mut worst_net = 0.0f64;
    for seed in 1..=3 {
        for (name, r) in primitive_suite(seed).map_err(err)? {
            check(r.max_rel_err <= 1e-6, format!("{name} seed {seed}: {:.3e}", r.max_rel_err))?;
            worst_prim = worst_prim.max(r.max_rel_err);
        }
        for kind in ModelKind::ALL {
            let r = grad_check_classifier(kind, seed, false).map_err(err)?;
            check(r.max_rel_err <= 1e-4, format!("{kind} seed {seed}: {:.3e}", r.max_rel_err))?;
            worst_net = worst_net.max(r.max_rel_err);
        }
    }
    let took = start.elapsed();
    check(took <= Duration::from_secs(120), format!("took {took:.1?}"))?;
    Ok(format!(
        "primitives {worst_prim:.2e}, classifiers {worst_net:.2e}, {:.1}s",
        took.as_secs_f64()
    ))
}

fn fusion_oracle() -> Outcome {
    for bits in 0u8..8 {
        let votes = [bits & 1 == 1, bits & 2 == 2, bits & 4 == 4];
        let count = votes.iter().filter(|&&v| v).count();
        check(
            majority_vote(votes[0], votes[1], votes[2]) == (count >= 2),
            format!("majority vote on {votes:?}"),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let s: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let d = average_score_fuse(s, TAU).map_err(err)?;
        let mean = (s[0] + s[1] + s[2]) / 3.0;
        worst = worst.max((d.fused_score - mean).abs());
        check(d.label == u8::from(mean >= TAU), "average label")?;

        // two-class softmax written out independently of the library
        let oracle = |w: &[f64], b: &[f64], x: &[f64]| {
            let n = x.len();
            let mut z = [b[0], b[1]];
            for r in 0..2 {
                for c in 0..n {
                    z[r] += w[r * n + c] * x[c];
                }
            }
            let m = z[0].max(z[1]);
            let (e0, e1) = ((z[0] - m).exp(), (z[1] - m).exp());
            (e1 / (e0 + e1), z[1] >= z[0])
        };

        let w: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = FusionHead::linear(Strategy::Sf, Tensor::new(vec![2, 3], w.clone()).unwrap(), Tensor::vector(b.clone()))
            .map_err(err)?;
        let d = score_fuse(s, &head).map_err(err)?;
        let (p, fake) = oracle(&w, &b, &s);
        worst = worst.max((d.fused_score - p).abs());
        check(d.label == u8::from(fake), "score fusion label")?;

        let w: Vec<f64> = (0..2 * 192).map(|_| rng.random_range(-0.2..0.2)).collect();
        let e: Vec<f64> = (0..192).map(|_| rng.random_range(-1.0..1.0)).collect();
        let head = FusionHead::linear(Strategy::Ff, Tensor::new(vec![2, 192], w.clone()).unwrap(), Tensor::vector(b.clone()))
            .map_err(err)?;
        let d = feature_fuse(&e[..64], &e[64..128], &e[128..], &head).map_err(err)?;
        let (p, fake) = oracle(&w, &b, &e);
        worst = worst.max((d.fused_score - p).abs());
        check(d.label == u8::from(fake), "feature fusion label")?;
    }
    check(worst <= 1e-12, format!("max deviation {worst:.3e}"))?;
    Ok(format!("8/8 vote cases, 300 fused scores within {worst:.1e}"))
}

fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.random_range(1..60);
        let pred: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let truth: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let c = confusion(&pred, &truth).map_err(err)?;
        let count = |p: bool, t: bool| pred.iter().zip(&truth).filter(|&(&a, &b)| a == p && b == t).count();
        let (tp, tn, fp, fnn) = (count(true, true), count(false, false), count(true, false), count(false, true));
        check(c == ConfusionCounts { tp, tn, fp, fn_: fnn }, "confusion counts")?;
        let m = metrics(&c).map_err(err)?;
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let (pf, rf) = (div(tp, tp + fp), div(tp, tp + fnn));
        let (pr, rr) = (div(tn, tn + fnn), div(tn, tn + fp));
        check(m.accuracy == div(tp + tn, n), "accuracy")?;
        check(m.fake.precision == pf && m.fake.recall == rf && m.fake.f1 == f1(pf, rf), "fake row")?;
        check(m.real.precision == pr && m.real.recall == rr && m.real.f1 == f1(pr, rr), "real row")?;
    }
    let m = metrics(&ConfusionCounts { tp: 3, tn: 2, fp: 1, fn_: 2 }).map_err(err)?;
    let hand = [(m.accuracy, 0.625), (m.precision(), 0.75), (m.recall(), 0.6), (m.f1(), 0.6667)];
    check(hand.iter().all(|(a, b)| (a - b).abs() <= 1e-4), format!("hand case {hand:?}"))?;
    Ok("1000 random label sets exact; hand case 0.625/0.75/0.6/0.6667".into())
}

struct Trained {
    test: Manifest,
    vn: Classifier,
    an: Classifier,
    avn: Classifier,
}

fn train_default(dir: &Path) -> Result<(Trained, Manifest, Duration), String> {
    let start = Instant::now();
    let (train, test) = generate_corpus(&CorpusConfig::default(), dir, jobs(), false).map_err(err)?;
    let cfg = TrainConfig::default();
    let net = NetConfig::default();
    let fit = |kind| -> Result<Classifier, String> {
        let out = train_network(kind, &net, &train, &cfg, jobs(), &mut |_, _| {}).map_err(err)?;
        check(
            out.losses.last().unwrap() < &out.losses[0],
            format!("{kind} loss went from {} to {}", out.losses[0], out.losses.last().unwrap()),
        )?;
        Ok(out.model)
    };
    let vn = fit(ModelKind::Vn)?;
    let an = fit(ModelKind::An)?;
    let took = start.elapsed();
    let avn = fit(ModelKind::AvnFused)?;
    Ok((Trained { test, vn, an, avn }, train, took))
}

fn accuracy(ev: &Evaluator, m: &Manifest, subset: &str) -> Result<f64, String> {
    Ok(evaluate(ev, m, subset, jobs()).map_err(err)?.0.accuracy)
}

fn blind_spots(t: &Trained, took: Duration) -> Outcome {
    let vn = Evaluator::Model(&t.vn);
    let an = Evaluator::Model(&t.an);
    let mut line = Vec::new();
    for s in ["visual-only", "both"] {
        let a = accuracy(&vn, &t.test, s)?;
        check(a >= 0.90, format!("VN on {s}: {a:.3}"))?;
        line.push(format!("VN {s} {a:.3}"));
    }
    let a = accuracy(&vn, &t.test, "audio-only")?;
    check(a <= 0.65, format!("VN on audio-only: {a:.3}"))?;
    line.push(format!("VN audio-only {a:.3}"));
    for s in ["audio-only", "both"] {
        let a = accuracy(&an, &t.test, s)?;
        check(a >= 0.90, format!("AN on {s}: {a:.3}"))?;
        line.push(format!("AN {s} {a:.3}"));
    }
    let a = accuracy(&an, &t.test, "visual-only")?;
    check(a <= 0.65, format!("AN on visual-only: {a:.3}"))?;
    line.push(format!("AN visual-only {a:.3}"));
    check(took <= Duration::from_secs(1800), format!("took {took:.0?}"))?;
    line.push(format!("{:.0}s", took.as_secs_f64()));
    Ok(line.join(", "))
}

fn ensemble_superiority(t: &Trained, train: &Manifest) -> Outcome {
    let comps = [&t.vn, &t.an, &t.avn];
    let set = build_training_set(train, NetworkKind::Avn);
    let clips = set.load_clips(train, jobs()).map_err(err)?;
    let outputs = component_outputs(comps, &clips, 16, jobs()).map_err(err)?;
    let cfg = TrainConfig::fusion();
    let sf = fit_fusion_head(Strategy::Sf, &outputs, &set.labels(), &cfg, &mut |_, _| {}).map_err(err)?.model;
    let ff = fit_fusion_head(Strategy::Ff, &outputs, &set.labels(), &cfg, &mut |_, _| {}).map_err(err)?.model;
    let heads = [FusionHead::majority(), FusionHead::average(TAU), sf, ff];
    let mut acc = Vec::new();
    for h in &heads {
        let ev = Evaluator::Ensemble { components: comps, head: h };
        let (r, _) = evaluate(&ev, &t.test, "mixed-II", jobs()).map_err(err)?;
        check(!r.to_markdown().is_empty() && !r.to_json().is_empty(), "empty report")?;
        acc.push(r.accuracy);
    }
    let single = [
        accuracy(&Evaluator::Model(&t.vn), &t.test, "mixed-II")?,
        accuracy(&Evaluator::Model(&t.an), &t.test, "mixed-II")?,
        accuracy(&Evaluator::Model(&t.avn), &t.test, "mixed-II")?,
    ];
    let ff = acc[3];
    check(single.iter().all(|&s| ff >= s), format!("ff {ff:.3} vs VN/AN/AVN {single:?}"))?;
    check(ff >= 0.90, format!("ff {ff:.3}"))?;
    check(ff >= acc[2], format!("ff {ff:.3} < sf {:.3}", acc[2]))?;
    Ok(format!(
        "mixed-II: VN {:.3} AN {:.3} AVN {:.3} | mv {:.3} asf {:.3} sf {:.3} ff {:.3}",
        single[0], single[1], single[2], acc[0], acc[1], acc[2], acc[3]
    ))
}

fn small_corpus() -> CorpusConfig {
    CorpusConfig {
        train: CategoryCounts::uniform(16),
        test_reals: 12,
        test_fakes: 12,
        ..CorpusConfig::default()
    }
}

struct Run {
    tree: String,
    manifests: Vec<String>,
    checkpoints: Vec<Vec<u8>>,
    reports: Vec<String>,
    frozen: bool,
}

fn pipeline(dir: &Path) -> Result<Run, String> {
    let (train, test) = generate_corpus(&small_corpus(), dir, 1, false).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let net = NetConfig::toy();
    let mut models = Vec::new();
    let mut checkpoints = Vec::new();
    for kind in [ModelKind::Vn, ModelKind::An, ModelKind::AvnFused] {
        let m = train_network(kind, &net, &train, &cfg, 1, &mut |_, _| {}).map_err(err)?.model;
        checkpoints.push(encode_checkpoint(&m.to_checkpoint()).map_err(err)?);
        models.push(m);
    }
    let comps = [&models[0], &models[1], &models[2]];
    let mut heads = vec![FusionHead::majority(), FusionHead::average(TAU)];
    for s in [Strategy::Sf, Strategy::Ff] {
        let h = train_fusion_head(s, comps, &train, &TrainConfig::fusion(), 1, &mut |_, _| {}).map_err(err)?.model;
        checkpoints.push(encode_checkpoint(&h.params()).map_err(err)?);
        heads.push(h);
    }
    let frozen = models
        .iter()
        .zip(&checkpoints)
        .all(|(m, bytes)| encode_checkpoint(&m.to_checkpoint()).map(|b| &b == bytes).unwrap_or(false));
    let mut reports = Vec::new();
    for subset in SUBSETS {
        for m in &models {
            reports.push(evaluate(&Evaluator::Model(m), &test, subset, 1).map_err(err)?.0.to_json());
        }
        for h in &heads {
            let ev = Evaluator::Ensemble { components: comps, head: h };
            let (r, _): (EvalReport, _) = evaluate(&ev, &test, subset, 1).map_err(err)?;
            reports.push(r.to_json() + &r.to_markdown());
        }
    }
    Ok(Run {
        tree: tree_digest(dir).map_err(err)?,
        manifests: vec![train.to_jsonl(), test.to_jsonl()],
        checkpoints,
        reports,
        frozen,
    })
}

fn freezing_and_determinism(root: &Path) -> Outcome {
    let a = pipeline(&root.join("a"))?;
    let b = pipeline(&root.join("b"))?;
    check(a.frozen && b.frozen, "component weights changed during fusion training")?;
    check(a.tree == b.tree, "corpus trees differ")?;
    check(a.manifests == b.manifests, "manifests differ")?;
    check(a.checkpoints == b.checkpoints, "checkpoints differ")?;
    check(a.reports == b.reports, "reports differ")?;
    Ok(format!(
        "{} checkpoints, {} reports and the corpus tree byte-identical across reruns",
        a.checkpoints.len(),
        a.reports.len()
    ))
}

fn round_trips(root: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParameterSet::new();
    p.insert("a.w", Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap());
    p.insert(
        "b",
        Tensor::vector(vec![-0.0, f64::MIN_POSITIVE / 2.0, f64::MAX, f64::INFINITY, 1.0 / 3.0]),
    );
    p.insert("s", Tensor::scalar(std::f64::consts::PI));
    let bytes = encode_checkpoint(&p).map_err(err)?;
    let back = decode_checkpoint(&bytes).map_err(err)?;
    let bits = |q: &ParameterSet| -> Vec<u64> { q.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect() };
    check(bits(&back) == bits(&p), "checkpoint values")?;
    check(encode_checkpoint(&back).map_err(err)? == bytes, "checkpoint bytes")?;
    let model = Classifier::new(ModelKind::AvnConcat, NetConfig::toy(), 5).map_err(err)?;
    let restored = Classifier::from_checkpoint(decode_checkpoint(&encode_checkpoint(&model.to_checkpoint()).map_err(err)?).map_err(err)?)
        .map_err(err)?;
    check(restored == model, "classifier checkpoint")?;

    let cfg = small_corpus();
    let (train, test) = generate_corpus(&cfg, &root.join("rt"), 1, false).map_err(err)?;
    let mut clips = 0;
    for m in [&train, &test] {
        let again = Manifest::load(&m.dir).map_err(err)?;
        check(&again == m, format!("{} manifest", m.split))?;
        check(again.to_jsonl() == m.to_jsonl(), "manifest text")?;
        for r in &m.records {
            let index: u64 = r.id.trim_start_matches("clip-").parse().map_err(err)?;
            let fresh = generate_sample(cfg.seed, index, r.subject_id, r.category).clip;
            let disk = load_clip(&m.dir, r).map_err(err)?;
            check(disk == fresh, format!("{} re-ingest", r.id))?;
            check(disk.to_media() == fresh.to_media(), format!("{} tensors", r.id))?;
            clips += 1;
        }
    }
    Ok(format!("checkpoints bit-exact; 2 manifests and {clips} clips re-ingest identically"))
}

fn report(n: usize, name: &str, out: Outcome, failed: &mut bool) {
    match out {
        Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
        Err(why) => {
            *failed = true;
            println!("criterion {n} {name}: FAIL ({why})");
        }
    }
}

fn main() -> ExitCode {
    // a harness-less target still receives libtest flags; listing finds no tests
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = false;
    report(1, "gradient fidelity", gradient_fidelity(), &mut failed);
    report(2, "fusion oracle", fusion_oracle(), &mut failed);
    report(3, "metrics oracle", metrics_oracle(), &mut failed);
    match train_default(&root.path().join("default")) {
        Ok((trained, train, took)) => {
            report(4, "blind-spot pattern", blind_spots(&trained, took), &mut failed);
            report(5, "ensemble superiority", ensemble_superiority(&trained, &train), &mut failed);
        }
        Err(e) => {
            report(4, "blind-spot pattern", Err(e.clone()), &mut failed);
            report(5, "ensemble superiority", Err(e), &mut failed);
        }
    }
    report(6, "freezing and determinism", freezing_and_determinism(&root.path().join("det")), &mut failed);
    report(7, "format round-trips", round_trips(root.path()), &mut failed);
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
