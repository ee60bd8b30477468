//! Run manifests tie a run log to the exact inputs that produced it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use icsm_core::digest::sha256_hex;
use icsm_core::experiment::{log_content_digest, RoundRecord};
use serde::{Deserialize, Serialize};

use crate::{io_err, CliError, Result};

pub const TOOL_VERSION: &str = concat!("icsm ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), sha256: sha256_hex(bytes) })
    }

    fn check(&self) -> Result<()> {
        let current = Self::of(&self.path)?;
        if current.sha256 != self.sha256 {
            return Err(CliError::Input(format!(
                "{} changed since the run (digest {} expected {})",
                self.path.display(),
                current.sha256,
                self.sha256
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub config_digest: String,
    pub cohorts: BTreeMap<String, FileDigest>,
    pub run_log: PathBuf,
    /// Content digest of the log with timestamps excluded.
    pub log_digest: String,
    #[serde(default)]
    pub reports: BTreeMap<String, String>,
    pub tool_version: String,
}

/// The fields that identify a run's inputs and outputs. Paths and reports
/// are left out so identical runs in different directories agree.
#[derive(Serialize)]
struct Identity<'a> {
    experiment_id: &'a str,
    config_digest: &'a str,
    cohorts: BTreeMap<&'a str, &'a str>,
    log_digest: &'a str,
    tool_version: &'a str,
}

impl RunManifest {
    pub fn path_for(log: &Path) -> PathBuf {
        let mut name = log.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn digest(&self) -> String {
        let identity = Identity {
            experiment_id: &self.experiment_id,
            config_digest: &self.config_digest,
            cohorts: self.cohorts.iter().map(|(s, f)| (s.as_str(), f.sha256.as_str())).collect(),
            log_digest: &self.log_digest,
            tool_version: &self.tool_version,
        };
        sha256_hex(serde_json::to_vec(&identity).expect("identity serializes"))
    }

    /// Checks that the log and every cohort file still match their digests.
    pub fn verify(&self, records: &[RoundRecord]) -> Result<()> {
        let digest = log_content_digest(records);
        if digest != self.log_digest {
            return Err(CliError::Input(format!(
                "{} no longer matches its manifest (log digest {digest}, manifest {})",
                self.run_log.display(),
                self.log_digest
            )));
        }
        self.cohorts.values().try_for_each(FileDigest::check)
    }
}

/// Provenance base of a log: its manifest digest when one exists (after
/// verification), otherwise the log's own content digest.
pub fn log_provenance(log: &Path, records: &[RoundRecord]) -> Result<(String, Option<RunManifest>)> {
    let path = RunManifest::path_for(log);
    if !path.exists() {
        return Ok((sha256_hex(format!("log\0{}", log_content_digest(records))), None));
    }
    let manifest = RunManifest::load(&path)?;
    manifest.verify(records)?;
    Ok((manifest.digest(), Some(manifest)))
}

/// Records written reports in the log's manifest, if it has one.
pub fn register_reports(log: &Path, manifest: Option<RunManifest>, written: &[PathBuf]) -> Result<()> {
    let Some(mut manifest) = manifest else { return Ok(()) };
    for path in written {
        let digest = FileDigest::of(path)?;
        manifest.reports.insert(path.display().to_string(), digest.sha256);
    }
    manifest.save(&RunManifest::path_for(log))
}
