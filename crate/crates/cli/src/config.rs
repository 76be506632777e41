//! Run configuration: a JSON file whose sections overlay the profile
//! defaults, with command-line flags taking precedence over both.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tamperloc::datasynth::CorpusConfig;
use tamperloc::network::{NetworkConfig, Profile};
use tamperloc::training::TrainConfig;
use tamperloc::{Error, Result};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub paths: Paths,
    /// Field overrides for the respective structs.
    pub network: Option<Value>,
    pub train: Option<Value>,
    pub synth: Option<Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub sources: Option<PathBuf>,
    pub objects: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Everything a subcommand needs, after overlays.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub paths: Paths,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: CorpusConfig,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub profile: Option<Profile>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, flags: Overrides) -> Result<Self> {
        let cfg: ConfigFile = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Format(format!("config {}: {e}", p.display())))?
            }
            None => ConfigFile::default(),
        };
        let profile = flags.profile.or(cfg.profile).unwrap_or_default();
        let seed = flags.seed.or(cfg.seed).unwrap_or(0);
        let mut paths = cfg.paths;
        if flags.checkpoint.is_some() {
            paths.checkpoint = flags.checkpoint;
        }
        if flags.out.is_some() {
            paths.out = flags.out;
        }
        let network = overlay(NetworkConfig::for_profile(profile), cfg.network.as_ref(), "network")?;
        network.validate()?;
        let mut train = overlay(TrainConfig::for_profile(profile), cfg.train.as_ref(), "train")?;
        train.seed = seed;
        train.validate()?;
        let mut synth = overlay(CorpusConfig::default(), cfg.synth.as_ref(), "synth")?;
        synth.seed = seed;
        let jobs = flags.jobs.or(cfg.jobs);
        if jobs == Some(0) {
            return Err(Error::Argument("--jobs must be at least 1".into()));
        }
        Ok(RunConfig {
            profile,
            seed,
            jobs,
            paths,
            network,
            train,
            synth,
        })
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| Error::Argument("an output directory is required (--out)".into()))
    }
}

/// Replaces the fields of `base` named in `patch`, recursing into nested
/// objects. Unknown field names are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: T, patch: Option<&Value>, section: &str) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut value = serde_json::to_value(base)?;
    merge(&mut value, patch, section)?;
    serde_json::from_value(value).map_err(|e| Error::Format(format!("config section `{section}`: {e}")))
}

fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    let (Value::Object(dst), Value::Object(src)) = (&mut *base, patch) else {
        *base = patch.clone();
        return Ok(());
    };
    for (k, v) in src {
        let field = format!("{path}.{k}");
        match dst.get_mut(k) {
            Some(slot) => merge(slot, v, &field)?,
            None => return Err(Error::Format(format!("unknown config field `{field}`"))),
        }
    }
    Ok(())
}
