//! `key=value` config files layered under command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::Failure;

pub const KEYS: [&str; 9] = [
    "seed",
    "jobs",
    "counts",
    "test_reals",
    "test_fakes",
    "lr",
    "epochs",
    "batch",
    "subset",
];

pub const SEED_ENV: &str = "AVTENET_SEED";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Overlay {
    values: BTreeMap<String, String>,
}

impl Overlay {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key=value", n + 1))?;
            let k = k.trim().replace('-', "_");
            if !KEYS.contains(&k.as_str()) {
                return Err(format!("line {}: unknown key {k}", n + 1));
            }
            values.insert(k, v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    /// The flag if given, else the file's value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Failure::usage(format!("config value {key}={v} is not valid"))),
        }
    }

    /// Flag, then config file, then `AVTENET_SEED`, then the default.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, Failure> {
        if let Some(s) = self.pick(flag, "seed")? {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| Failure::usage(format!("{SEED_ENV}={v} is not a seed"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }
}
