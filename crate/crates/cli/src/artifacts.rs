//! Content-addressed artifact bookkeeping: every artifact file name embeds
//! the hash of the configuration that produced it, and `manifest.json` maps
//! logical names to the current files. A command consuming an artifact
//! recomputes the expected hash from its own configuration, so stale or
//! mismatched inputs are refused rather than silently used.

use crate::error::{CliError, CliResult};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub struct RunDir {
    pub dir: PathBuf,
}

impl RunDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    pub fn file_name(stem: &str, hash: &str, ext: &str) -> String {
        format!("{stem}-{}.{ext}", &hash[..8])
    }

    pub fn path_for(&self, stem: &str, hash: &str, ext: &str) -> PathBuf {
        self.dir.join(Self::file_name(stem, hash, ext))
    }

    /// Resolve an input artifact. Errors distinguish "never produced" from
    /// "produced under a different configuration".
    pub fn resolve(
        &self,
        stem: &str,
        hash: &str,
        ext: &str,
        producer: &str,
    ) -> CliResult<PathBuf> {
        let want = self.path_for(stem, hash, ext);
        if want.exists() {
            return Ok(want);
        }
        let mut others = Vec::new();
        if let Ok(entries) = std::fs::read_dir(&self.dir) {
            for entry in entries.flatten() {
                let name = entry.file_name().to_string_lossy().to_string();
                if name.starts_with(&format!("{stem}-")) && name.ends_with(&format!(".{ext}")) {
                    others.push(name);
                }
            }
        }
        if others.is_empty() {
            Err(CliError::dependency(format!(
                "missing {stem} artifact: run `saft {producer}` with this config first"
            )))
        } else {
            others.sort();
            Err(CliError::dependency(format!(
                "stale {stem} artifact: expected {}, found {}; rerun `saft {producer}` \
                 with the current config",
                want.file_name().unwrap().to_string_lossy(),
                others.join(", ")
            )))
        }
    }

    fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn read_manifest(&self) -> BTreeMap<String, String> {
        std::fs::read_to_string(self.manifest_path())
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    /// Merge entries into manifest.json (logical name → file name).
    pub fn record(&self, entries: &[(&str, String)]) -> CliResult<()> {
        let mut manifest = self.read_manifest();
        for (k, v) in entries {
            manifest.insert(k.to_string(), v.clone());
        }
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::io(e.to_string()))?;
        std::fs::write(self.manifest_path(), json)
            .map_err(|e| CliError::io(format!("cannot write manifest: {e}")))?;
        Ok(())
    }
}
