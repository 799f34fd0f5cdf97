use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::store::write_atomic;
use crate::seed::sha256_hex;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Profiles,
    Relations,
    Scenarios,
    Dialogues,
    Sheets,
    Scores,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Profiles,
        Stage::Relations,
        Stage::Scenarios,
        Stage::Dialogues,
        Stage::Sheets,
        Stage::Scores,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Profiles => "profiles",
            Stage::Relations => "relations",
            Stage::Scenarios => "scenarios",
            Stage::Dialogues => "dialogues",
            Stage::Sheets => "sheets",
            Stage::Scores => "scores",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        let i = Stage::ALL.iter().position(|s| *s == self).expect("stage listed");
        &Stage::ALL[..i]
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    pub units_done: usize,
    pub units_total: usize,
    /// Hashes of everything the stage read: upstream artifacts and settings.
    pub inputs: BTreeMap<String, String>,
    /// Relative artifact path to SHA-256 of its content.
    pub artifacts: BTreeMap<String, String>,
    pub updated_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: u32,
    /// Hash of the generation settings and input file contents.
    pub config_hash: String,
    pub config: RunConfig,
    /// Input file content hashes (questionnaire, names, markers).
    pub input_hashes: BTreeMap<String, String>,
    pub stages: BTreeMap<Stage, StageRecord>,
    pub created_at: u64,
    pub updated_at: u64,
}

pub fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn hash_file(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

impl RunManifest {
    pub fn new(config: RunConfig, config_hash: String, input_hashes: BTreeMap<String, String>) -> Self {
        let t = now();
        RunManifest {
            format: FORMAT,
            config_hash,
            config,
            input_hashes,
            stages: BTreeMap::new(),
            created_at: t,
            updated_at: t,
        }
    }

    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: RunManifest =
            serde_json::from_slice(&bytes).map_err(|source| Error::Json { path: path.clone(), source })?;
        if m.format != FORMAT {
            return Err(Error::RefuseResume(format!(
                "{} has format {}, this build writes {FORMAT}",
                path.display(),
                m.format
            )));
        }
        Ok(Some(m))
    }

    pub fn save(&mut self, root: &Path) -> Result<()> {
        self.updated_at = now();
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&root.join(MANIFEST_FILE), &bytes)
    }

    /// True when the stage finished and every artifact still hash-verifies.
    pub fn verified(&self, root: &Path, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| {
            r.status == StageStatus::Complete
                && r.artifacts
                    .iter()
                    .all(|(rel, hash)| hash_file(&root.join(rel)).as_deref() == Some(hash.as_str()))
        })
    }
}
