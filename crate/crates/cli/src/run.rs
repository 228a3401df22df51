//! Content-addressed run directories and their manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use astra_tda::seed::derive;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

/// Environment variable naming the default run root.
pub const RUN_ROOT_ENV: &str = "ASTRA_TDA_RUN_ROOT";
pub const MANIFEST: &str = "manifest.json";
pub const CONFIG_COPY: &str = "config.ini";
/// Hex digits of the config hash used as the directory name.
pub const HASH_PREFIX: usize = 12;

/// Seeds shared by every model of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub data: u64,
    pub split: u64,
    pub corrupt: u64,
    pub masks: u64,
    pub ground_truth: u64,
    pub null: u64,
}

impl Seeds {
    pub fn new(master: u64) -> Self {
        Seeds {
            master,
            data: derive(master, &[1]),
            split: derive(master, &[2]),
            corrupt: derive(master, &[3]),
            masks: derive(master, &[8]),
            ground_truth: derive(master, &[9]),
            null: derive(master, &[10]),
        }
    }
}

/// Seeds of one trained model. Member 0 is the primary model; ensemble
/// members 1.. draw from independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSeeds {
    pub init: u64,
    pub batch: u64,
    pub ekfac: u64,
    pub solver: u64,
    pub source: u64,
}

impl ModelSeeds {
    pub fn member(master: u64, k: usize) -> Self {
        let base = if k == 0 {
            master
        } else {
            derive(master, &[100, k as u64])
        };
        ModelSeeds {
            init: derive(base, &[4]),
            batch: derive(base, &[5]),
            ekfac: derive(base, &[6]),
            solver: derive(base, &[7]),
            source: derive(base, &[11]),
        }
    }
}

/// Method tag and seeds of a stored score matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub method: String,
    pub seeds: Vec<u64>,
    pub ensemble_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seeds: Seeds,
    /// Seeds of every model trained so far, keyed `m000`, `m001`, ...
    pub models: BTreeMap<String, ModelSeeds>,
    /// Damping used for static influence, per model.
    pub dampings: BTreeMap<String, f64>,
    /// Artifact name to path relative to the run directory.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub scores: BTreeMap<String, ScoreMeta>,
}

pub fn member_key(k: usize) -> String {
    format!("m{k:03}")
}

/// A run directory bound to one configuration.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Opens or creates the run directory for `config`. An explicit `dir`
    /// overrides the hash-named default under the run root. A directory
    /// created for a different config is refused.
    pub fn open(config: &ExperimentConfig, dir: Option<&Path>) -> Result<Self> {
        let hash = config.hash();
        let root = match dir {
            Some(d) => d.to_path_buf(),
            None => {
                let base = std::env::var_os(RUN_ROOT_ENV)
                    .map_or_else(|| PathBuf::from("runs"), PathBuf::from);
                base.join(&hash[..HASH_PREFIX])
            }
        };
        let manifest_path = root.join(MANIFEST);
        if manifest_path.exists() {
            let text =
                fs::read_to_string(&manifest_path).map_err(|e| CliError::io(&manifest_path, e))?;
            let manifest: Manifest = serde_json::from_str(&text)?;
            if manifest.config_hash != hash {
                return Err(CliError::config(
                    "--run-dir",
                    format!(
                        "{} was created for config hash {}, this config hashes to {hash}",
                        root.display(),
                        manifest.config_hash
                    ),
                ));
            }
            return Ok(RunDir { root, manifest });
        }
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let copy = root.join(CONFIG_COPY);
        fs::write(&copy, config.to_ini()).map_err(|e| CliError::io(&copy, e))?;
        let manifest = Manifest {
            config_hash: hash,
            seeds: Seeds::new(config.seed),
            models: BTreeMap::new(),
            dampings: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            scores: BTreeMap::new(),
        };
        let run = RunDir { root, manifest };
        run.save()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn seeds(&self) -> Seeds {
        self.manifest.seeds
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Creates the parent directory of `rel` and returns the full path.
    pub fn output(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        Ok(p)
    }

    /// Full path of an upstream artifact, or a missing-artifact error
    /// suggesting the command that produces it.
    pub fn require(&self, rel: impl AsRef<Path>, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::missing(p, format!("run `{producer}` first")))
        }
    }

    fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&self.manifest)?)
            .map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))
    }

    /// Records artifacts and persists the manifest.
    pub fn record(&mut self, artifacts: &[(String, PathBuf)]) -> Result<()> {
        for (name, rel) in artifacts {
            self.manifest.artifacts.insert(name.clone(), rel.clone());
        }
        self.save()
    }

    pub fn record_model(&mut self, k: usize, seeds: ModelSeeds) -> Result<()> {
        self.manifest.models.insert(member_key(k), seeds);
        self.save()
    }

    pub fn record_damping(&mut self, k: usize, damping: f64) -> Result<()> {
        self.manifest.dampings.insert(member_key(k), damping);
        self.save()
    }

    pub fn record_scores(&mut self, name: &str, meta: ScoreMeta) -> Result<()> {
        self.manifest.scores.insert(name.to_string(), meta);
        self.save()
    }
}
