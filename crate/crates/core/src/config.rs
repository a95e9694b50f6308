//! Run configuration: one TOML document, validated before any provider call.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::catalog::EntityCatalog;
use crate::curation::{policy_by_name, RemovalPolicy};
use crate::image::ImageGenParams;
use crate::providers::registry::ProvidersConfig;
use crate::providers::{ProviderRegistry, Role};
use crate::report::ReportSettings;
use crate::sampler::SamplerConfig;
use crate::similarity::ScreenConfig;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Wall-clock timestamps.
    #[default]
    System,
    /// Timestamps derived from the draw index, for byte-reproducible manifests.
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub catalog: PathBuf,
    pub n_target: u64,
    pub output_dir: PathBuf,
    pub workers: usize,
    /// Removal policy used by `audit`.
    pub policy: String,
    /// Acceptance gate for generated images.
    pub image_policy: String,
    pub image_max_retries: u32,
    /// Abandoned draws in a row before the run gives up.
    pub max_consecutive_failures: u32,
    /// Accepted records between ledger checkpoints.
    pub checkpoint_every: u64,
    pub clock: ClockMode,
    pub sampler: SamplerConfig,
    pub screen: ScreenConfig,
    pub image: ImageGenParams,
    pub report: ReportSettings,
    pub providers: ProvidersConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            catalog: PathBuf::from("catalog.tsv"),
            n_target: 1000,
            output_dir: PathBuf::from("run"),
            workers: 1,
            policy: "all_no".into(),
            image_policy: "all_yes".into(),
            image_max_retries: 10,
            max_consecutive_failures: 100,
            checkpoint_every: 100,
            clock: ClockMode::System,
            sampler: SamplerConfig::default(),
            screen: ScreenConfig::default(),
            image: ImageGenParams::default(),
            report: ReportSettings::default(),
            providers: ProvidersConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(e: impl ToString) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl RunConfig {
    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(source)?)
    }

    /// Loads a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let source = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&source)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.catalog = base.join(&cfg.catalog);
        cfg.output_dir = base.join(&cfg.output_dir);
        if let Some(bank) = &cfg.screen.bad_bank {
            cfg.screen.bad_bank = Some(base.join(bank));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.sampler.validate().map_err(invalid)?;
        self.screen.validate().map_err(invalid)?;
        self.image.validate().map_err(invalid)?;
        self.report.validate().map_err(invalid)?;
        self.providers.mock.validate().map_err(invalid)?;
        self.removal_policy()?;
        self.image_gate()?;
        if self.workers == 0 {
            return Err(invalid("workers must be at least 1"));
        }
        if self.image_max_retries == 0 {
            return Err(invalid("image_max_retries must be at least 1"));
        }
        if self.max_consecutive_failures == 0 {
            return Err(invalid("max_consecutive_failures must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(invalid("checkpoint_every must be at least 1"));
        }
        let registry = ProviderRegistry::default();
        let known: Vec<&str> = registry.names().collect();
        for role in Role::ALL {
            let rc = self.providers.role(role);
            if !known.contains(&rc.backend.as_str()) {
                return Err(invalid(format!("{role}: unknown backend `{}`", rc.backend)));
            }
            if rc.backend == "http" {
                rc.endpoint(role).validate().map_err(invalid)?;
            }
            if rc.backend == "mock"
                && role == Role::ImageEmbed
                && self.providers.mock.embedding_dim != self.screen.embedding_dim
            {
                return Err(invalid(format!(
                    "mock embedding_dim {} differs from screen.embedding_dim {}",
                    self.providers.mock.embedding_dim, self.screen.embedding_dim
                )));
            }
        }
        Ok(())
    }

    pub fn removal_policy(&self) -> Result<Arc<dyn RemovalPolicy>, ConfigError> {
        policy_by_name(&self.policy).map_err(invalid)
    }

    pub fn image_gate(&self) -> Result<Arc<dyn RemovalPolicy>, ConfigError> {
        policy_by_name(&self.image_policy).map_err(invalid)
    }

    /// Hash over everything that determines the generated content. Run size,
    /// output location, connection details and the cap relaxation are excluded,
    /// so a finished run can be extended or resumed from another host.
    pub fn config_hash(&self, catalog: &EntityCatalog) -> String {
        let backends: Vec<(&str, &str)> = Role::ALL
            .iter()
            .map(|r| (r.key(), self.providers.role(*r).backend.as_str()))
            .collect();
        let bank_digest = self
            .screen
            .bad_bank
            .as_ref()
            .and_then(|p| fs::read(p).ok())
            .map(|b| hex::encode(Sha256::digest(b)));
        let view = serde_json::json!({
            "catalog": hex::encode(Sha256::digest(catalog.to_tsv().as_bytes())),
            "sampler": self.sampler,
            "screen": {
                "delta": self.screen.delta,
                "embedding_dim": self.screen.embedding_dim,
                "bad_bank": bank_digest,
            },
            "image": self.image,
            "report": self.report,
            "backends": backends,
            "mock": self.providers.mock,
            "workers": self.workers,
            "image_policy": self.image_gate().map(|p| p.name()).unwrap_or_default(),
            "image_max_retries": self.image_max_retries,
            "clock": self.clock,
        });
        hex::encode(Sha256::digest(view.to_string().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::{Category, Entity};

    fn catalog() -> EntityCatalog {
        EntityCatalog::from_entities([Entity::new("edema", Category::Abnormality).unwrap()])
            .unwrap()
            .0
    }

    #[test]
    fn defaults_hold_the_reference_constants() {
        let c = RunConfig::default();
        assert_eq!((c.sampler.k, c.sampler.m, c.sampler.tau_max), (9, 3, 15));
        assert_eq!(c.screen.delta, 0.5);
        assert_eq!((c.image.guidance_scale, c.image.steps), (4.0, 50));
        assert_eq!(c.removal_policy().unwrap().name(), "all_no");
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c =
            RunConfig::from_toml("n_target = 5\n[sampler]\nk = 4\nm = 1\ntau_max = 15\nentity_ratio = 1.0\nseed = 3\n")
                .unwrap();
        assert_eq!((c.n_target, c.sampler.k), (5, 4));
        assert_eq!(c.workers, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("n_targte = 5").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let mut c = RunConfig::default();
        c.sampler.k = 0;
        c.sampler.m = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.providers.text_gen.backend = "grpc".into();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.providers.text_gen.backend = "http".into();
        assert!(c.validate().is_err());
        let c = RunConfig {
            policy: "quorum:9".into(),
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_content_not_size() {
        let cat = catalog();
        let base = RunConfig::default();
        let mut bigger = base.clone();
        bigger.n_target = 10;
        bigger.output_dir = "elsewhere".into();
        assert_eq!(base.config_hash(&cat), bigger.config_hash(&cat));
        let mut other_k = base.clone();
        other_k.sampler.k = 8;
        assert_ne!(base.config_hash(&cat), other_k.config_hash(&cat));
    }
}
