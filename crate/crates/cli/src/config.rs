//! Run settings: TOML file sections mirrored by command-line flags, and the
//! manifest written into every output directory.
//!
//! A manifest is itself a valid config file, so `--config <out>/manifest.toml`
//! replays a run.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub model: Option<String>,
    pub alpha: Option<f64>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub schedule_burnin: Option<usize>,
    pub schedule_exp: Option<f64>,
    pub replicates: Option<usize>,
    pub alpha_grid: Option<Vec<f64>>,
    pub thin: Option<usize>,
    /// Keep wall-clock columns in the fit trace.
    pub timing: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSection {
    /// Dataset file for `fit`; absent means simulate from the seed.
    pub data: Option<String>,
    pub n: Option<usize>,
    pub q: Option<usize>,
    pub m: Option<usize>,
    pub j: Option<usize>,
    /// Generating parameter vector.
    pub theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub theta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub epochs: Option<usize>,
    pub sizes: Option<Vec<usize>>,
    pub steps: Option<usize>,
    pub warmup: Option<usize>,
    pub gap: Option<usize>,
    pub draws: Option<usize>,
    pub window: Option<usize>,
    pub windows: Option<usize>,
}

/// Everything that determines the output of a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub run: RunSection,
    pub design: DesignSection,
    pub init: InitSection,
    pub experiment: ExperimentSection,
}

impl Settings {
    /// SHA-256 of the TOML serialization, hex encoded.
    pub fn checksum(&self) -> Result<String, CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Data(format!("cannot serialize settings: {e}")))?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub experiment: String,
    pub model: Option<String>,
    pub out: String,
    pub checksum: String,
}

/// On-disk layout shared by config files and manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub manifest: Option<ManifestHeader>,
    pub run: RunSection,
    pub design: DesignSection,
    pub init: InitSection,
    pub experiment: ExperimentSection,
}

impl ConfigFile {
    pub fn settings(&self) -> Settings {
        Settings {
            run: self.run.clone(),
            design: self.design.clone(),
            init: self.init.clone(),
            experiment: self.experiment.clone(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("invalid config: {e}")))
    }

    /// Read a config or manifest; a manifest must carry a matching checksum
    /// and come from the same experiment.
    pub fn load(path: &Path, experiment: &str) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text)?;
        if let Some(h) = &cfg.manifest {
            if h.experiment != experiment {
                return Err(CliError::usage(format!(
                    "manifest {} belongs to `{}`, not `{experiment}`",
                    path.display(),
                    h.experiment
                )));
            }
            let sum = cfg.settings().checksum()?;
            if sum != h.checksum {
                return Err(CliError::usage(format!(
                    "manifest {} checksum mismatch (recorded {}, computed {sum})",
                    path.display(),
                    h.checksum
                )));
            }
        }
        Ok(cfg)
    }
}

/// The manifest of a resolved run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub experiment: String,
    pub model: Option<String>,
    pub out: String,
    pub settings: Settings,
}

impl RunManifest {
    pub fn to_toml(&self) -> Result<String, CliError> {
        let file = ConfigFile {
            manifest: Some(ManifestHeader {
                experiment: self.experiment.clone(),
                model: self.model.clone(),
                out: self.out.clone(),
                checksum: self.settings.checksum()?,
            }),
            run: self.settings.run.clone(),
            design: self.settings.design.clone(),
            init: self.settings.init.clone(),
            experiment: self.settings.experiment.clone(),
        };
        toml::to_string(&file).map_err(|e| CliError::Data(format!("cannot serialize manifest: {e}")))
    }
}

pub fn pick<T>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Settings {
        Settings {
            run: RunSection {
                model: Some("sbm".into()),
                alpha: Some(0.5),
                seed: Some(3),
                alpha_grid: Some(vec![0.1, 1.0]),
                ..RunSection::default()
            },
            design: DesignSection {
                n: Some(50),
                ..DesignSection::default()
            },
            ..Settings::default()
        }
    }

    #[test]
    fn manifest_round_trips_and_verifies() {
        let m = RunManifest {
            experiment: "fit".into(),
            model: Some("sbm".into()),
            out: "o".into(),
            settings: sample(),
        };
        let text = m.to_toml().unwrap();
        let back = ConfigFile::parse(&text).unwrap();
        assert_eq!(back.settings(), sample());
        assert_eq!(back.manifest.unwrap().checksum, sample().checksum().unwrap());
    }

    #[test]
    fn checksum_tracks_content() {
        let mut other = sample();
        other.run.seed = Some(4);
        assert_ne!(sample().checksum().unwrap(), other.checksum().unwrap());
        assert_eq!(sample().checksum().unwrap().len(), 64);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(ConfigFile::parse("[run]\nalpah = 0.5\n"), Err(CliError::Usage(_))));
    }

    #[test]
    fn sections_parse() {
        let cfg = ConfigFile::parse("[run]\nalpha = 0.3\nalpha_grid = [0.1, 0.5]\n[design]\nn = 20\n").unwrap();
        assert_eq!(cfg.run.alpha, Some(0.3));
        assert_eq!(cfg.run.alpha_grid, Some(vec![0.1, 0.5]));
        assert_eq!(cfg.design.n, Some(20));
        assert!(cfg.manifest.is_none());
    }

    #[test]
    fn flags_override_file() {
        assert_eq!(pick(Some(1), Some(2)), Some(1));
        assert_eq!(pick(None, Some(2)), Some(2));
        assert_eq!(pick::<u8>(None, None), None);
    }
}
