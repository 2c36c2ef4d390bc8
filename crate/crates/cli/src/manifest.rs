//! Run manifests: which command produced which files, with SHA-256 hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "hjcert-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigRef {
    /// `preset:<name>` or the path given on the command line.
    pub source: String,
    /// Effective configuration written into the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub command: String,
    pub config: ConfigRef,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
    /// Files read, relative to the run directory, with their hashes at read time.
    pub inputs: BTreeMap<String, String>,
    /// Files written, relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    /// One record per command; rerunning a command replaces its record.
    pub commands: Vec<CommandRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            commands: Vec::new(),
        }
    }
}

#[derive(Debug, PartialEq)]
pub enum Problem {
    Missing(String),
    Mismatch { path: String, expected: String, found: String },
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Problem::Missing(p) => write!(f, "{p}: missing"),
            Problem::Mismatch { path, expected, found } => {
                write!(f, "{path}: hash mismatch (expected {expected}, found {found})")
            }
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// `SOURCE_DATE_EPOCH`, when set; wall-clock time is never recorded.
pub fn timestamp() -> Result<Option<u64>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("bad SOURCE_DATE_EPOCH {v:?}"))?)),
        Err(_) => Ok(None),
    }
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            bail!("{}: unsupported manifest {} v{}", path.display(), m.format, m.version);
        }
        Ok(m)
    }

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        if dir.join(MANIFEST_FILE).exists() {
            Self::load(dir)
        } else {
            Ok(Self::default())
        }
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn record(&mut self, rec: CommandRecord) {
        match self.commands.iter_mut().find(|r| r.command == rec.command) {
            Some(r) => *r = rec,
            None => self.commands.push(rec),
        }
    }

    /// Newest recorded hash per artifact path.
    pub fn artifacts(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for r in &self.commands {
            for (p, h) in &r.artifacts {
                out.insert(p.clone(), h.clone());
            }
        }
        out
    }

    /// Rehashes every artifact under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<Vec<Problem>> {
        let mut problems = Vec::new();
        for (p, expected) in self.artifacts() {
            let path = dir.join(&p);
            if !path.exists() {
                problems.push(Problem::Missing(p));
                continue;
            }
            let found = sha256_file(&path)?;
            if found != expected {
                problems.push(Problem::Mismatch { path: p, expected, found });
            }
        }
        Ok(problems)
    }
}
