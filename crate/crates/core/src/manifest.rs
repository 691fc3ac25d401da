//! Run manifests written next to every output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;
use crate::io::sha256_file;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub version: String,
    /// Arguments after the program name, as given.
    pub command: Vec<String>,
    /// Working directory the command ran in; relative paths resolve here.
    pub cwd: PathBuf,
    /// Config file in effect, from `--config` or the environment.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_path: Option<PathBuf>,
    /// Every setting the command used, after defaults and overrides.
    pub config: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// SHA-256 of each input file.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of each output file.
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub fn digests<'a>(paths: impl IntoIterator<Item = &'a Path>) -> Result<BTreeMap<String, String>> {
    paths
        .into_iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// `<out>.manifest.json` for file outputs, `<dir>/manifest.json` for a
/// directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(MANIFEST_SUFFIX);
        PathBuf::from(s)
    }
}

/// A file whose current digest differs from the recorded one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DigestMismatch {
    pub path: String,
    pub expected: String,
    pub actual: Option<String>,
}

impl RunManifest {
    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_relative() {
            self.cwd.join(p)
        } else {
            p.to_path_buf()
        }
    }

    fn check(&self, files: &BTreeMap<String, String>) -> Vec<DigestMismatch> {
        files
            .iter()
            .filter_map(|(p, expected)| {
                let actual = sha256_file(&self.resolve(p)).ok();
                (actual.as_ref() != Some(expected)).then(|| DigestMismatch {
                    path: p.clone(),
                    expected: expected.clone(),
                    actual,
                })
            })
            .collect()
    }

    pub fn check_inputs(&self) -> Vec<DigestMismatch> {
        self.check(&self.inputs)
    }

    pub fn check_outputs(&self) -> Vec<DigestMismatch> {
        self.check(&self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_paths() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(manifest_path(dir.path()), dir.path().join("manifest.json"));
        assert_eq!(
            manifest_path(&dir.path().join("r.json")),
            dir.path().join("r.json.manifest.json")
        );
    }

    #[test]
    fn digest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("in.txt");
        std::fs::write(&f, "x").unwrap();
        let m = RunManifest {
            schema_version: 1,
            tool: "parp".into(),
            version: "0".into(),
            command: vec![],
            cwd: dir.path().to_path_buf(),
            config_path: None,
            config: Value::Null,
            seed: None,
            inputs: digests([Path::new("in.txt")].map(|p| dir.path().join(p)).iter().map(PathBuf::as_path)).unwrap(),
            outputs: BTreeMap::new(),
            started_unix_ms: 0,
            finished_unix_ms: 0,
        };
        assert!(m.check_inputs().is_empty());
        std::fs::write(&f, "y").unwrap();
        assert_eq!(m.check_inputs().len(), 1);
        let back: RunManifest = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
