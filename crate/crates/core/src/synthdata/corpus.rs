use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::scene::{generate_sample, quantise_pixel, quantise_sample, AvSample, Clip};
use super::{io_err, splitmix64, Category, NetworkKind, Result, StreamLabel, SynthError};
use crate::dsp::{read_pgm, read_wav, write_pgm, write_wav, FrameStack, LipBox, Waveform, FRAME_SIZE, VIDEO_FRAMES};
use crate::par::map_ordered;

pub const DEFAULT_TRAIN_PER_CATEGORY: usize = 500;
/// Positions of class-balancing clips start here so they never collide
/// with manifest clips.
pub const EXTRA_INDEX_BASE: u64 = 1 << 40;
/// Named test subsets; `full` additionally selects the whole test split.
pub const SUBSETS: [&str; 5] = ["visual-only", "audio-only", "both", "mixed-I", "mixed-II"];
const SUBJECT_PICK_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    #[serde(rename = "RvRa")]
    pub rvra: usize,
    #[serde(rename = "RvFa")]
    pub rvfa: usize,
    #[serde(rename = "FvRa")]
    pub fvra: usize,
    #[serde(rename = "FvFa")]
    pub fvfa: usize,
}

impl CategoryCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            rvra: n,
            rvfa: n,
            fvra: n,
            fvfa: n,
        }
    }

    pub fn get(&self, c: Category) -> usize {
        match c {
            Category::RvRa => self.rvra,
            Category::RvFa => self.rvfa,
            Category::FvRa => self.fvra,
            Category::FvFa => self.fvfa,
        }
    }

    fn slot(&mut self, c: Category) -> &mut usize {
        match c {
            Category::RvRa => &mut self.rvra,
            Category::RvFa => &mut self.rvfa,
            Category::FvRa => &mut self.fvra,
            Category::FvFa => &mut self.fvfa,
        }
    }

    pub fn total(&self) -> usize {
        Category::ALL.iter().map(|&c| self.get(c)).sum()
    }

    /// Parses `RvRa=10,RvFa=10,...`; unnamed categories keep `base`.
    pub fn parse(spec: &str, base: CategoryCounts) -> Result<Self> {
        let mut out = base;
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, n) = part
                .split_once('=')
                .ok_or_else(|| SynthError::Config(format!("expected CATEGORY=N, got {part}")))?;
            let c: Category = name.trim().parse()?;
            *out.slot(c) = n
                .trim()
                .parse()
                .map_err(|_| SynthError::Config(format!("bad count {n} for {name}")))?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub train: CategoryCounts,
    /// Genuine clips shared by every test subset.
    pub test_reals: usize,
    /// Fake clips in each test subset.
    pub test_fakes: usize,
    /// Half-open subject id ranges.
    pub train_subjects: [u32; 2],
    pub test_subjects: [u32; 2],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            train: CategoryCounts::uniform(DEFAULT_TRAIN_PER_CATEGORY),
            test_reals: 60,
            test_fakes: 60,
            train_subjects: [0, 430],
            test_subjects: [430, 500],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.train_subjects;
        let [c, d] = self.test_subjects;
        if a >= b || c >= d {
            return Err(SynthError::Config("empty subject pool".into()));
        }
        if a < d && c < b {
            return Err(SynthError::Config(format!(
                "train subjects {a}..{b} overlap test subjects {c}..{d}"
            )));
        }
        if self.test_reals == 0 || self.test_fakes == 0 {
            return Err(SynthError::Config("test subsets need reals and fakes".into()));
        }
        if !self.test_fakes.is_multiple_of(6) {
            return Err(SynthError::Config(format!(
                "{} fakes per test subset cannot be split 2:1:3 and 1:1:1",
                self.test_fakes
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the config's JSON form.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    fn subject_for(&self, pool: [u32; 2], seed: u64) -> u32 {
        pool[0] + (splitmix64(seed ^ SUBJECT_PICK_SALT) % (pool[1] - pool[0]) as u64) as u32
    }

    /// Fake composition of a test subset, as (category, count).
    fn subset_fakes(&self, subset: &str) -> Vec<(Category, usize)> {
        let f = self.test_fakes;
        match subset {
            "visual-only" => vec![(Category::FvRa, f)],
            "audio-only" => vec![(Category::RvFa, f)],
            "both" => vec![(Category::FvFa, f)],
            // one share per manipulation method: two visual-only methods,
            // one audio-only, three that touch both streams
            "mixed-I" => vec![(Category::FvRa, f / 3), (Category::RvFa, f / 6), (Category::FvFa, f / 2)],
            "mixed-II" => vec![(Category::RvFa, f / 3), (Category::FvRa, f / 3), (Category::FvFa, f / 3)],
            _ => Vec::new(),
        }
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub subject_id: u32,
    pub category: Category,
    pub visual_label: StreamLabel,
    pub audio_label: StreamLabel,
    /// Relative to the manifest's directory.
    pub wav_path: String,
    pub frames_dir: String,
    /// `[top, left, height, width]`.
    pub lip_box: [usize; 4],
    pub seed: u64,
    pub split: String,
    pub subsets: Vec<String>,
    /// 1 for an untouched clip, 0 otherwise.
    pub y: u8,
}

impl SampleRecord {
    pub fn lip_box(&self) -> LipBox {
        let [top, left, height, width] = self.lip_box;
        LipBox {
            top,
            left,
            height,
            width,
        }
    }

    fn consistent(&self) -> bool {
        self.visual_label == StreamLabel::from_fake(self.category.visual_fake())
            && self.audio_label == StreamLabel::from_fake(self.category.audio_fake())
            && self.y == u8::from(self.category.is_real())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    digest: String,
    config: CorpusConfig,
    split: String,
}

/// One split of the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub digest: String,
    pub config: CorpusConfig,
    pub split: String,
    pub records: Vec<SampleRecord>,
}

struct Planned {
    index: u64,
    category: Category,
    subsets: Vec<String>,
}

fn plan_train(cfg: &CorpusConfig) -> Vec<Planned> {
    let mut out = Vec::new();
    for c in Category::ALL {
        for _ in 0..cfg.train.get(c) {
            out.push(Planned {
                index: out.len() as u64,
                category: c,
                subsets: Vec::new(),
            });
        }
    }
    out
}

fn plan_test(cfg: &CorpusConfig) -> Vec<Planned> {
    let base = cfg.train.total() as u64;
    let mut out: Vec<Planned> = Vec::new();
    let push = |category: Category, subsets: Vec<String>, out: &mut Vec<Planned>| {
        let index = base + out.len() as u64;
        out.push(Planned {
            index,
            category,
            subsets,
        });
    };
    for _ in 0..cfg.test_reals {
        push(Category::RvRa, SUBSETS.iter().map(|s| s.to_string()).collect(), &mut out);
    }
    for subset in SUBSETS {
        for (c, n) in cfg.subset_fakes(subset) {
            for _ in 0..n {
                push(c, vec![subset.to_string()], &mut out);
            }
        }
    }
    out
}

fn clip_id(index: u64) -> String {
    format!("clip-{index:06}")
}

fn frame_path(frames_dir: &Path, t: usize) -> PathBuf {
    frames_dir.join(format!("frame_{t:02}.pgm"))
}

fn write_clip(split_dir: &Path, rec: &SampleRecord, clip: &Clip) -> Result<()> {
    let wav = split_dir.join(&rec.wav_path);
    let frames = split_dir.join(&rec.frames_dir);
    fs::create_dir_all(&frames).map_err(|e| io_err(&frames, e))?;
    let m = clip.to_media();
    write_wav(&wav, &m.audio)?;
    for t in 0..VIDEO_FRAMES {
        write_pgm(&frame_path(&frames, t), FRAME_SIZE, FRAME_SIZE, m.video.frame(t))?;
    }
    Ok(())
}

/// Reads a clip's media back from disk.
pub fn load_clip(split_dir: &Path, rec: &SampleRecord) -> Result<Clip> {
    let audio: Waveform = read_wav(&split_dir.join(&rec.wav_path))?;
    let frames_dir = split_dir.join(&rec.frames_dir);
    let mut data = Vec::with_capacity(VIDEO_FRAMES * FRAME_SIZE * FRAME_SIZE);
    for t in 0..VIDEO_FRAMES {
        let (h, w, values) = read_pgm(&frame_path(&frames_dir, t))?;
        if (h, w) != (FRAME_SIZE, FRAME_SIZE) {
            return Err(SynthError::Manifest {
                path: frames_dir.display().to_string(),
                reason: format!("frame {t} is {h}×{w}"),
            });
        }
        data.extend(values);
    }
    let video = FrameStack::new(VIDEO_FRAMES, FRAME_SIZE, FRAME_SIZE, data)?;
    if !audio.is_canonical() {
        return Err(SynthError::Manifest {
            path: rec.wav_path.clone(),
            reason: format!("{} samples at {} Hz", audio.len(), audio.sample_rate),
        });
    }
    Ok(Clip {
        audio: audio.samples.iter().map(|&s| quantise_sample(s)).collect(),
        frames: video.data.iter().map(|&v| quantise_pixel(v)).collect(),
        lip_box: rec.lip_box(),
    })
}

fn record_for(sample: &AvSample, split: &str, subsets: Vec<String>) -> SampleRecord {
    let id = clip_id(sample.index);
    let b = sample.clip.lip_box;
    SampleRecord {
        wav_path: format!("media/{id}/audio.wav"),
        frames_dir: format!("media/{id}/frames"),
        id,
        subject_id: sample.subject_id,
        category: sample.category,
        visual_label: StreamLabel::from_fake(sample.category.visual_fake()),
        audio_label: StreamLabel::from_fake(sample.category.audio_fake()),
        lip_box: [b.top, b.left, b.height, b.width],
        seed: sample.seed,
        split: split.to_string(),
        subsets,
        y: u8::from(sample.category.is_real()),
    }
}

fn generate_split(cfg: &CorpusConfig, dir: &Path, split: &str, plan: Vec<Planned>, jobs: usize) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let pool = if split == "train" { cfg.train_subjects } else { cfg.test_subjects };
    let records = map_ordered(jobs, &plan, |p| {
        let seed = super::sample_seed(cfg.seed, p.index);
        let subject = cfg.subject_for(pool, seed);
        let sample = generate_sample(cfg.seed, p.index, subject, p.category);
        let rec = record_for(&sample, split, p.subsets.clone());
        write_clip(dir, &rec, &sample.clip)?;
        Ok::<_, SynthError>(rec)
    })?;
    let m = Manifest {
        dir: dir.to_path_buf(),
        digest: cfg.digest(),
        config: cfg.clone(),
        split: split.to_string(),
        records,
    };
    m.write()?;
    Ok(m)
}

/// Writes `out/train` and `out/test` with their manifests and media.
///
/// A non-empty `out` is refused unless `force`, in which case only the two
/// split directories are replaced.
pub fn generate_corpus(cfg: &CorpusConfig, out: &Path, jobs: usize, force: bool) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| io_err(out, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(SynthError::NotEmpty(out.display().to_string()));
            }
            for split in ["train", "test"] {
                let d = out.join(split);
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| io_err(&d, e))?;
                }
            }
        }
    }
    let train = generate_split(cfg, &out.join("train"), "train", plan_train(cfg), jobs)?;
    let test = generate_split(cfg, &out.join("test"), "test", plan_test(cfg), jobs)?;
    Ok((train, test))
}

impl Manifest {
    fn malformed(&self, reason: impl Into<String>) -> SynthError {
        SynthError::Manifest {
            path: self.dir.join(MANIFEST_FILE).display().to_string(),
            reason: reason.into(),
        }
    }

    /// The manifest text: a header line, then one record per line.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            digest: self.digest.clone(),
            config: self.config.clone(),
            split: self.split.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serialises"));
            out.push('\n');
        }
        out
    }

    pub fn parse_jsonl(dir: &Path, text: &str) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE).display().to_string();
        let bad = |reason: String| SynthError::Manifest {
            path: path.clone(),
            reason,
        };
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(lines.next().ok_or_else(|| bad("empty manifest".into()))?)
            .map_err(|e| bad(format!("header: {e}")))?;
        let records = lines
            .enumerate()
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("record {}: {e}", i + 1))))
            .collect::<Result<Vec<SampleRecord>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            digest: header.digest,
            config: header.config,
            split: header.split,
            records,
        })
    }

    pub fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| io_err(&path, e))
    }

    /// Reads and validates `dir/manifest.jsonl`.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let m = Self::parse_jsonl(dir, &text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.digest != self.config.digest() {
            return Err(self.malformed("config digest does not match"));
        }
        self.config
            .validate()
            .map_err(|e| self.malformed(e.to_string()))?;
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(self.malformed(format!("duplicate id {}", r.id)));
            }
            if !r.consistent() {
                return Err(self.malformed(format!("labels of {} disagree with {}", r.id, r.category)));
            }
            let pool = if self.split == "train" {
                self.config.train_subjects
            } else {
                self.config.test_subjects
            };
            if r.subject_id < pool[0] || r.subject_id >= pool[1] {
                return Err(self.malformed(format!("{} has subject {} outside the {} pool", r.id, r.subject_id, self.split)));
            }
            if !self.dir.join(&r.wav_path).is_file() {
                return Err(self.malformed(format!("missing {}", r.wav_path)));
            }
            let frames = self.dir.join(&r.frames_dir);
            if (0..VIDEO_FRAMES).any(|t| !frame_path(&frames, t).is_file()) {
                return Err(self.malformed(format!("missing frames under {}", r.frames_dir)));
            }
        }
        match self.split.as_str() {
            "train" => {
                for c in Category::ALL {
                    let n = self.records.iter().filter(|r| r.category == c).count();
                    if n != self.config.train.get(c) {
                        return Err(self.malformed(format!("{n} {c} records, config says {}", self.config.train.get(c))));
                    }
                }
            }
            "test" => {
                let reals = self.records.iter().filter(|r| r.category.is_real()).count();
                if reals != self.config.test_reals {
                    return Err(self.malformed(format!("{reals} genuine test records")));
                }
                for subset in SUBSETS {
                    for (c, n) in self.config.subset_fakes(subset) {
                        let got = self
                            .records
                            .iter()
                            .filter(|r| r.category == c && r.subsets.iter().any(|s| s == subset))
                            .count();
                        if got != n {
                            return Err(self.malformed(format!("subset {subset} has {got} {c}, expected {n}")));
                        }
                    }
                }
            }
            other => return Err(self.malformed(format!("unknown split {other}"))),
        }
        Ok(())
    }

    /// Records of a named subset; `full` selects every record.
    pub fn subset(&self, name: &str) -> Option<Vec<&SampleRecord>> {
        if name == "full" {
            return Some(self.records.iter().collect());
        }
        if !SUBSETS.contains(&name) {
            return None;
        }
        Some(self.records.iter().filter(|r| r.subsets.iter().any(|s| s == name)).collect())
    }

    pub fn category_counts(&self) -> BTreeMap<Category, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.category).or_insert(0) += 1;
        }
        out
    }

    pub fn load_clips(&self, records: &[&SampleRecord], jobs: usize) -> Result<Vec<Clip>> {
        map_ordered(jobs, records, |r| load_clip(&self.dir, r))
    }
}

/// Where a training clip comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingItem {
    /// Position in the manifest's record list.
    Record(usize),
    /// Generated on demand as a genuine clip.
    Extra { index: u64, subject_id: u32 },
}

/// Labelled training selection; `y` is 1 for the real class.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    pub kind: NetworkKind,
    pub items: Vec<(TrainingItem, f64)>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// (real, fake) class sizes.
    pub fn class_counts(&self) -> (usize, usize) {
        let real = self.items.iter().filter(|(_, y)| *y == 1.0).count();
        (real, self.items.len() - real)
    }

    /// Loads or synthesises every clip, in item order.
    pub fn load_clips(&self, m: &Manifest, jobs: usize) -> Result<Vec<Clip>> {
        map_ordered(jobs, &self.items, |(item, _)| match *item {
            TrainingItem::Record(i) => load_clip(&m.dir, &m.records[i]),
            TrainingItem::Extra { index, subject_id } => {
                Ok(generate_sample(m.config.seed, index, subject_id, Category::RvRa).clip)
            }
        })
    }

    pub fn labels(&self) -> Vec<f64> {
        self.items.iter().map(|(_, y)| *y).collect()
    }
}

/// Selects and labels training clips for `kind`, topping up the real class
/// with freshly generated genuine clips until the classes are equal.
pub fn build_training_set(m: &Manifest, kind: NetworkKind) -> TrainingSet {
    let mut items: Vec<(TrainingItem, f64)> = m
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (TrainingItem::Record(i), if kind.is_fake(r.category) { 0.0 } else { 1.0 }))
        .collect();
    let fake = items.iter().filter(|(_, y)| *y == 0.0).count();
    let real = items.len() - fake;
    for k in 0..fake.saturating_sub(real) as u64 {
        let index = EXTRA_INDEX_BASE + k;
        let seed = super::sample_seed(m.config.seed, index);
        let subject_id = m.config.subject_for(m.config.train_subjects, seed);
        items.push((TrainingItem::Extra { index, subject_id }, 1.0));
    }
    TrainingSet { kind, items }
}

/// Hex SHA-256 over every file below `dir`: relative path, length and bytes,
/// in sorted path order.
pub fn tree_digest(dir: &Path) -> Result<String> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
            let p = entry.map_err(|e| io_err(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                out.push(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(dir.join(&f)).map_err(|e| io_err(&f, e))?;
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            train: CategoryCounts::uniform(3),
            test_reals: 4,
            test_fakes: 6,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn counts_parse() {
        let c = CategoryCounts::parse("RvRa=10, RvFa=11,FvRa=12,FvFa=13", CategoryCounts::uniform(0)).unwrap();
        assert_eq!((c.rvra, c.rvfa, c.fvra, c.fvfa), (10, 11, 12, 13));
        assert_eq!(c.total(), 46);
        let partial = CategoryCounts::parse("FvFa=2", CategoryCounts::uniform(5)).unwrap();
        assert_eq!(partial.total(), 17);
        assert!(CategoryCounts::parse("XvXa=1", CategoryCounts::uniform(0)).is_err());
        assert!(CategoryCounts::parse("RvRa", CategoryCounts::uniform(0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CorpusConfig::default().validate().is_ok());
        let overlap = CorpusConfig {
            test_subjects: [400, 500],
            ..CorpusConfig::default()
        };
        assert!(overlap.validate().is_err());
        // an empty training split is allowed; training on it is what fails
        let zero = CorpusConfig {
            train: CategoryCounts::uniform(0),
            ..CorpusConfig::default()
        };
        assert!(zero.validate().is_ok());
        let no_reals = CorpusConfig {
            test_reals: 0,
            ..CorpusConfig::default()
        };
        assert!(no_reals.validate().is_err());
        let odd = CorpusConfig {
            test_fakes: 50,
            ..CorpusConfig::default()
        };
        assert!(odd.validate().is_err());
    }

    #[test]
    fn test_plan_composition() {
        let cfg = CorpusConfig::default();
        let plan = plan_test(&cfg);
        let count = |subset: &str, c: Category| {
            plan.iter()
                .filter(|p| p.category == c && p.subsets.iter().any(|s| s == subset))
                .count()
        };
        assert_eq!(
            [count("mixed-II", Category::RvFa), count("mixed-II", Category::FvRa), count("mixed-II", Category::FvFa)],
            [20, 20, 20]
        );
        assert_eq!(
            [count("mixed-I", Category::FvRa), count("mixed-I", Category::RvFa), count("mixed-I", Category::FvFa)],
            [20, 10, 30]
        );
        assert_eq!(count("audio-only", Category::RvFa), 60);
        for s in SUBSETS {
            assert_eq!(count(s, Category::RvRa), 60);
        }
        let train = plan_train(&cfg);
        assert_eq!(train.len(), 2000);
        let test_indices: HashSet<u64> = plan.iter().map(|p| p.index).collect();
        assert!(train.iter().all(|p| !test_indices.contains(&p.index)));
    }

    #[test]
    fn corpus_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let (train, test) = generate_corpus(&cfg, dir.path(), 2, false).unwrap();
        assert_eq!(train.records.len(), 12);
        assert_eq!(test.records.len(), 4 + 5 * 6);
        assert_eq!(Manifest::load(&dir.path().join("train")).unwrap(), train);
        assert_eq!(Manifest::load(&dir.path().join("test")).unwrap(), test);

        let audio_only = test.subset("audio-only").unwrap();
        assert!(audio_only
            .iter()
            .filter(|r| r.y == 0)
            .all(|r| r.visual_label == StreamLabel::Real));
        assert_eq!(test.subset("full").unwrap().len(), test.records.len());
        assert!(test.subset("nope").is_none());

        let train_subjects: HashSet<u32> = train.records.iter().map(|r| r.subject_id).collect();
        assert!(test.records.iter().all(|r| !train_subjects.contains(&r.subject_id)));

        for r in &train.records {
            let expected = generate_sample(cfg.seed, r.id[5..].parse().unwrap(), r.subject_id, r.category);
            assert_eq!(load_clip(&train.dir, r).unwrap(), expected.clip);
        }

        assert!(matches!(
            generate_corpus(&cfg, dir.path(), 1, false),
            Err(SynthError::NotEmpty(_))
        ));
        let before = tree_digest(dir.path()).unwrap();
        generate_corpus(&cfg, dir.path(), 1, true).unwrap();
        assert_eq!(tree_digest(dir.path()).unwrap(), before);
    }

    #[test]
    fn validation_catches_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_corpus(&small(), dir.path(), 1, false).unwrap();
        let mut dup = train.clone();
        dup.records[1].id = dup.records[0].id.clone();
        assert!(dup.validate().is_err());
        let mut relabel = train.clone();
        relabel.records[0].y = 0;
        assert!(relabel.validate().is_err());
        let mut short = train.clone();
        short.records.pop();
        assert!(short.validate().is_err());
        fs::remove_file(train.dir.join(&train.records[2].wav_path)).unwrap();
        assert!(train.validate().is_err());
    }

    #[test]
    fn manifest_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_corpus(&small(), dir.path(), 1, false).unwrap();
        let text = train.to_jsonl();
        let back = Manifest::parse_jsonl(&train.dir, &text).unwrap();
        assert_eq!(back, train);
        assert_eq!(back.to_jsonl(), text);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["digest"], train.config.digest());
    }

    fn fake_manifest(counts: CategoryCounts) -> Manifest {
        let cfg = CorpusConfig {
            train: counts,
            ..CorpusConfig::default()
        };
        let records = plan_train(&cfg)
            .iter()
            .map(|p| record_for(&generate_sample(cfg.seed, p.index, 0, p.category), "train", Vec::new()))
            .collect();
        Manifest {
            dir: PathBuf::new(),
            digest: cfg.digest(),
            config: cfg,
            split: "train".into(),
            records,
        }
    }

    #[test]
    fn training_sets_follow_class_table_and_balance() {
        let m = fake_manifest(CategoryCounts::uniform(2));
        let label_of = |set: &TrainingSet, c: Category| {
            set.items
                .iter()
                .find_map(|(it, y)| match it {
                    TrainingItem::Record(i) if m.records[*i].category == c => Some(*y),
                    _ => None,
                })
                .unwrap()
        };
        let vn = build_training_set(&m, NetworkKind::Vn);
        let an = build_training_set(&m, NetworkKind::An);
        let avn = build_training_set(&m, NetworkKind::Avn);
        assert_eq!(label_of(&vn, Category::FvRa), 0.0);
        assert_eq!(label_of(&vn, Category::RvFa), 1.0);
        assert_eq!(label_of(&an, Category::FvRa), 1.0);
        assert_eq!(label_of(&an, Category::RvFa), 0.0);
        assert_eq!(label_of(&avn, Category::RvFa), 0.0);
        assert_eq!(label_of(&avn, Category::RvRa), 1.0);
        assert_eq!(vn.class_counts(), (4, 4));
        assert_eq!(an.class_counts(), (4, 4));
        assert_eq!(avn.class_counts(), (6, 6));
        let extras = avn
            .items
            .iter()
            .filter(|(it, _)| matches!(it, TrainingItem::Extra { .. }))
            .count();
        assert_eq!(extras, 4);
    }
}
