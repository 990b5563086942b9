use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use avtenet::ensemble::{FusionHead, Strategy, TAU};
use avtenet::harness::{
    embedding_dump, evaluate, train_fusion_head, train_network, Evaluator, TrainConfig,
};
use avtenet::nets::{grad_check_classifier, Classifier, ModelKind, NetConfig};
use avtenet::synthdata::{generate_corpus, sha256_hex, CategoryCounts, CorpusConfig, Manifest, MANIFEST_FILE};
use avtenet::tensor::{read_checkpoint, write_checkpoint, ParameterSet};

use crate::overlay::Overlay;
use crate::{exit, DescribeArgs, EvalArgs, Failure, GenDataArgs, GradcheckArgs, TrainArgs, TrainEnsembleArgs};

const GRAD_TOLERANCE: f64 = 1e-4;

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn write_params(path: &Path, p: &ParameterSet) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    Ok(write_checkpoint(path, p)?)
}

/// `dir` itself if it holds a manifest, else `dir/<split>`.
fn split_dir(dir: &Path, split: &str) -> PathBuf {
    if dir.join(MANIFEST_FILE).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(split)
    }
}

fn load_manifest(dir: &Path, split: &str) -> Result<Manifest, Failure> {
    Ok(Manifest::load(&split_dir(dir, split))?)
}

fn file_hash(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn load_classifier(path: &Path) -> Result<Classifier, Failure> {
    let stored = read_checkpoint(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Classifier::from_checkpoint(stored).map_err(|e| Failure::mismatch(format!("{}: {e}", path.display())))
}

fn train_config(lr: Option<f64>, epochs: Option<usize>, batch: Option<usize>, seed: Option<u64>, base: TrainConfig, o: &Overlay) -> Result<TrainConfig, Failure> {
    let cfg = TrainConfig {
        lr: o.pick(lr, "lr")?.unwrap_or(base.lr),
        epochs: o.pick(epochs, "epochs")?.unwrap_or(base.epochs),
        batch_size: o.pick(batch, "batch")?.unwrap_or(base.batch_size),
        seed: o.seed(seed)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_epoch(epoch: usize, loss: f64) {
    println!("epoch {epoch} loss {loss:.6}");
}

pub fn gen_data(a: GenDataArgs, o: &Overlay, jobs: usize) -> Result<(), Failure> {
    let base = CorpusConfig::default();
    let train = match o.pick(a.counts, "counts")? {
        Some(spec) => CategoryCounts::parse(&spec, base.train)?,
        None => base.train,
    };
    let cfg = CorpusConfig {
        seed: o.seed(a.seed)?,
        train,
        test_reals: o.pick(a.test_reals, "test_reals")?.unwrap_or(base.test_reals),
        test_fakes: o.pick(a.test_fakes, "test_fakes")?.unwrap_or(base.test_fakes),
        ..base
    };
    let (train, test) = generate_corpus(&cfg, &a.out, jobs, a.force)?;
    println!("train: {} records in {}", train.records.len(), train.dir.display());
    println!("test: {} records in {}", test.records.len(), test.dir.display());
    println!("manifest digest {}", train.digest);
    Ok(())
}

pub fn train(a: TrainArgs, o: &Overlay, jobs: usize) -> Result<(), Failure> {
    let cfg = train_config(a.lr, a.epochs, a.batch, a.seed, TrainConfig::default(), o)?;
    let manifest = load_manifest(&a.data, "train")?;
    let outcome = train_network(a.network, &NetConfig::default(), &manifest, &cfg, jobs, &mut print_epoch)?;
    write_params(&a.out, &outcome.model.to_checkpoint())?;
    println!("wrote {} ({})", a.out.display(), a.network);
    Ok(())
}

pub fn train_ensemble(a: TrainEnsembleArgs, o: &Overlay, jobs: usize) -> Result<(), Failure> {
    if !a.strategy.trainable() {
        return Err(Failure::usage(format!(
            "{} needs no training: it combines the components' votes or scores directly",
            a.strategy
        )));
    }
    let cfg = train_config(a.lr, a.epochs, a.batch, a.seed, TrainConfig::fusion(), o)?;
    let before = a.components.iter().map(|p| file_hash(p)).collect::<Result<Vec<_>, _>>()?;
    let models = a.components.iter().map(|p| load_classifier(p)).collect::<Result<Vec<_>, _>>()?;
    let manifest = load_manifest(&a.data, "train")?;
    let outcome = train_fusion_head(
        a.strategy,
        [&models[0], &models[1], &models[2]],
        &manifest,
        &cfg,
        jobs,
        &mut print_epoch,
    )?;
    write_params(&a.out, &outcome.model.params())?;
    for ((path, old), m) in a.components.iter().zip(&before).zip(&models) {
        let now = file_hash(path)?;
        if &now != old {
            return Err(Failure::new(exit::VERIFY, format!("{} changed during fusion training", path.display())));
        }
        println!("component {} {} sha256 {now} unchanged", m.kind(), path.display());
    }
    println!("wrote {} ({})", a.out.display(), a.strategy);
    Ok(())
}

fn load_head(strategy: Strategy, path: Option<&Path>) -> Result<FusionHead, Failure> {
    let Some(path) = path else {
        return match strategy {
            Strategy::Mv => Ok(FusionHead::majority()),
            Strategy::Asf => Ok(FusionHead::average(TAU)),
            s => Err(Failure::usage(format!("--ensemble {s} needs --head from train-ensemble"))),
        };
    };
    let stored = read_checkpoint(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let head = FusionHead::from_params(&stored).map_err(|e| Failure::mismatch(format!("{}: {e}", path.display())))?;
    if head.strategy() != strategy {
        return Err(Failure::mismatch(format!(
            "{} holds a {} head, not {strategy}",
            path.display(),
            head.strategy()
        )));
    }
    Ok(head)
}

pub fn eval(a: EvalArgs, o: &Overlay, jobs: usize) -> Result<(), Failure> {
    let subset = o
        .pick(a.subset, "subset")?
        .ok_or_else(|| Failure::usage("--subset is required"))?;
    let manifest = load_manifest(&a.data, "test")?;
    if manifest.subset(&subset).is_none() {
        return Err(Failure::usage(format!("unknown subset {subset}")));
    }
    let models = a.ckpt.iter().map(|p| load_classifier(p)).collect::<Result<Vec<_>, _>>()?;
    let head;
    let ev = match (a.model, a.ensemble) {
        (Some(kind), None) => {
            if models.len() != 1 {
                return Err(Failure::usage("--model takes exactly one --ckpt"));
            }
            if models[0].kind() != kind {
                return Err(Failure::mismatch(format!(
                    "{} holds a {} network, not {kind}",
                    a.ckpt[0].display(),
                    models[0].kind()
                )));
            }
            Evaluator::Model(&models[0])
        }
        (None, Some(strategy)) => {
            if models.len() != 3 {
                return Err(Failure::usage("--ensemble takes VN, AN and AVN checkpoints"));
            }
            head = load_head(strategy, a.head.as_deref())?;
            Evaluator::Ensemble {
                components: [&models[0], &models[1], &models[2]],
                head: &head,
            }
        }
        _ => return Err(Failure::usage("give exactly one of --model and --ensemble")),
    };
    let (report, preds) = evaluate(&ev, &manifest, &subset, jobs)?;
    let md = report.to_markdown();
    print!("{md}");
    if let Some(p) = &a.json {
        write_file(p, report.to_json().as_bytes())?;
    }
    if let Some(p) = &a.md {
        write_file(p, md.as_bytes())?;
    }
    if let Some(p) = &a.dump_embeddings {
        write_params(p, &embedding_dump(&preds))?;
        println!("embeddings of {} samples written to {}", preds.len(), p.display());
    }
    Ok(())
}

/// Groups tensor names by their first two dotted segments.
fn group_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

pub fn describe(a: DescribeArgs) -> Result<(), Failure> {
    let stored = read_checkpoint(&a.ckpt).map_err(|e| Failure::io(format!("{}: {e}", a.ckpt.display())))?;
    let meta: Vec<String> = ModelKind::ALL.iter().map(|&k| Classifier::meta_name(k)).collect();
    if let Some(kind) = ModelKind::ALL.into_iter().find(|&k| stored.contains(&Classifier::meta_name(k))) {
        println!("network {kind}");
    }
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0;
    for (name, t) in stored.iter() {
        if meta.contains(name) {
            continue;
        }
        *groups.entry(group_of(name)).or_default() += t.len();
        total += t.len();
    }
    for (g, n) in &groups {
        println!("{g} {n}");
    }
    println!("total {total}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs, o: &Overlay) -> Result<(), Failure> {
    let seed = o.seed(a.seed)?;
    let report = grad_check_classifier(a.network, seed, a.sabotage_grad)?;
    println!(
        "{} seed {seed}: max_rel_err {:.3e} over {} entries",
        a.network, report.max_rel_err, report.checked
    );
    if report.max_rel_err <= GRAD_TOLERANCE {
        println!("max_rel_err <= {GRAD_TOLERANCE:e}: ok");
        Ok(())
    } else {
        let worst = report.worst.map(|(n, i)| format!(" at {n}[{i}]")).unwrap_or_default();
        Err(Failure::new(
            exit::VERIFY,
            format!("max_rel_err {:.3e} exceeds {GRAD_TOLERANCE:e}{worst}", report.max_rel_err),
        ))
    }
}
