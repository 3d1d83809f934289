use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bag::Bag;
use crate::error::{domain_err, Error, Result};

use super::bagfile::read_bag_file;
use super::io::{read_file, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub core_id: String,
    /// Bag file location relative to the manifest's directory.
    pub path: String,
    pub label: u32,
    pub split: Split,
    pub tma_id: String,
}

/// Dataset index: which bag file holds which core, its class and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub dataset_id: String,
    pub d: u32,
    pub k: u32,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.k as usize {
            return Err(domain_err!(
                "manifest declares K={} but names {} classes",
                self.k,
                self.class_names.len()
            ));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.core_id.as_str()) {
                return Err(domain_err!("duplicate core_id {}", e.core_id));
            }
            if e.label >= self.k {
                return Err(domain_err!("core {} has label {} >= K={}", e.core_id, e.label, self.k));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Domain(format!("manifest serialization: {e}")))
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("invalid manifest JSON (line {}, column {}): {e}", e.line(), e.column()),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.utf8_error().valid_up_to() as u64,
            message: "manifest is not UTF-8".into(),
        })?;
        Self::from_json(&text, path)
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = self.to_json()?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Per-class core counts, optionally restricted to one split.
    pub fn class_counts(&self, split: Option<Split>) -> Vec<usize> {
        let mut counts = vec![0; self.k as usize];
        for e in &self.entries {
            if split.is_none_or(|s| s == e.split) {
                counts[e.label as usize] += 1;
            }
        }
        counts
    }

    pub fn resolve(base: &Path, entry: &ManifestEntry) -> PathBuf {
        base.join(&entry.path)
    }

    /// Checks every entry's bag file exists.
    pub fn check_paths(&self, base: &Path) -> Result<()> {
        for e in &self.entries {
            let p = Self::resolve(base, e);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, format!("bag for core {} missing", e.core_id)),
                ));
            }
        }
        Ok(())
    }

    /// Reads the bags of one split, checking them against the manifest.
    pub fn load_bags(&self, base: &Path, split: Split) -> Result<Vec<Bag>> {
        self.entries_in(split)
            .map(|e| {
                let path = Self::resolve(base, e);
                let (header, bag) = read_bag_file(&path)?;
                if header.d != self.d || header.k != self.k {
                    return Err(domain_err!(
                        "{}: header d={} K={} disagrees with manifest d={} K={}",
                        path.display(),
                        header.d,
                        header.k,
                        self.d,
                        self.k
                    ));
                }
                if bag.label != e.label || bag.core_id != e.core_id {
                    return Err(domain_err!(
                        "{}: holds core {} label {}, manifest says core {} label {}",
                        path.display(),
                        bag.core_id,
                        bag.label,
                        e.core_id,
                        e.label
                    ));
                }
                Ok(bag)
            })
            .collect()
    }
}

/// Accepts either a manifest file or a directory containing `manifest.json`.
pub fn manifest_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}
