//! Name-keyed registry of provider backends.
//!
//! Each role in the run configuration names a backend (`mock`, `http`, or
//! anything registered by the embedding application). The registry turns
//! that selection into trait objects at startup.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mock::{MockEntityExtractor, MockImageEmbedder, MockImageGenerator, MockQualityJudge, MockTextGenerator};
use super::remote::RemoteProvider;
use super::{
    EntityExtractor, EntityMatcher, ImageEmbedder, ImageGenerator, MockPolicy, ProviderEndpoint, ProviderError,
    Providers, QualityJudge, Role, TextGenerator,
};
use crate::catalog::EntityCatalog;

/// Per-role backend selection and connection settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoleConfig {
    pub backend: String,
    pub base_url: Option<String>,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub auth_token: Option<String>,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for RoleConfig {
    fn default() -> Self {
        RoleConfig {
            backend: "mock".into(),
            base_url: None,
            timeout_secs: 120.0,
            max_concurrent: 4,
            auth_token: None,
            max_retries: 3,
            backoff_base_ms: 200,
        }
    }
}

impl RoleConfig {
    pub fn endpoint(&self, role: Role) -> ProviderEndpoint {
        ProviderEndpoint {
            role,
            base_url: self.base_url.clone().unwrap_or_default(),
            timeout_secs: self.timeout_secs,
            max_concurrent: self.max_concurrent,
            auth_token: self.auth_token.clone(),
            max_retries: self.max_retries,
            backoff_base_ms: self.backoff_base_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProvidersConfig {
    pub mock: MockPolicy,
    pub text_gen: RoleConfig,
    pub entity_extract: RoleConfig,
    pub image_gen: RoleConfig,
    pub quality_judge: RoleConfig,
    pub image_embed: RoleConfig,
}

impl ProvidersConfig {
    pub fn role(&self, role: Role) -> &RoleConfig {
        match role {
            Role::TextGen => &self.text_gen,
            Role::EntityExtract => &self.entity_extract,
            Role::ImageGen => &self.image_gen,
            Role::QualityJudge => &self.quality_judge,
            Role::ImageEmbed => &self.image_embed,
        }
    }

    pub fn role_mut(&mut self, role: Role) -> &mut RoleConfig {
        match role {
            Role::TextGen => &mut self.text_gen,
            Role::EntityExtract => &mut self.entity_extract,
            Role::ImageGen => &mut self.image_gen,
            Role::QualityJudge => &mut self.quality_judge,
            Role::ImageEmbed => &mut self.image_embed,
        }
    }

    /// Points every role at the mock backend.
    pub fn all_mock(&mut self) {
        for role in Role::ALL {
            self.role_mut(role).backend = "mock".into();
        }
    }
}

/// What a backend gets to build a provider.
pub struct BackendContext<'a> {
    pub catalog: Arc<EntityCatalog>,
    pub mock: &'a MockPolicy,
    pub endpoint: ProviderEndpoint,
}

pub trait ProviderBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn text_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn TextGenerator>, ProviderError>;
    fn entity_extractor(&self, ctx: &BackendContext) -> Result<Arc<dyn EntityExtractor>, ProviderError>;
    fn image_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageGenerator>, ProviderError>;
    fn quality_judge(&self, ctx: &BackendContext) -> Result<Arc<dyn QualityJudge>, ProviderError>;
    fn image_embedder(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageEmbedder>, ProviderError>;
}

pub struct MockBackend;

impl ProviderBackend for MockBackend {
    fn name(&self) -> &'static str {
        "mock"
    }

    fn text_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn TextGenerator>, ProviderError> {
        let matcher = Arc::new(EntityMatcher::new(&ctx.catalog));
        Ok(Arc::new(MockTextGenerator::new(
            ctx.mock.clone(),
            ctx.catalog.clone(),
            matcher,
        )))
    }

    fn entity_extractor(&self, ctx: &BackendContext) -> Result<Arc<dyn EntityExtractor>, ProviderError> {
        let matcher = Arc::new(EntityMatcher::new(&ctx.catalog));
        Ok(Arc::new(MockEntityExtractor::new(ctx.mock.clone(), matcher)))
    }

    fn image_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageGenerator>, ProviderError> {
        Ok(Arc::new(MockImageGenerator::new(ctx.mock.clone())))
    }

    fn quality_judge(&self, ctx: &BackendContext) -> Result<Arc<dyn QualityJudge>, ProviderError> {
        Ok(Arc::new(MockQualityJudge::new(ctx.mock.clone())))
    }

    fn image_embedder(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageEmbedder>, ProviderError> {
        Ok(Arc::new(MockImageEmbedder::new(ctx.mock.clone())))
    }
}

pub struct HttpBackend;

impl HttpBackend {
    fn client(ctx: &BackendContext) -> Result<Arc<RemoteProvider>, ProviderError> {
        Ok(Arc::new(RemoteProvider::new(ctx.endpoint.clone())?))
    }
}

impl ProviderBackend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn text_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn TextGenerator>, ProviderError> {
        Ok(Self::client(ctx)?)
    }

    fn entity_extractor(&self, ctx: &BackendContext) -> Result<Arc<dyn EntityExtractor>, ProviderError> {
        Ok(Self::client(ctx)?)
    }

    fn image_generator(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageGenerator>, ProviderError> {
        Ok(Self::client(ctx)?)
    }

    fn quality_judge(&self, ctx: &BackendContext) -> Result<Arc<dyn QualityJudge>, ProviderError> {
        Ok(Self::client(ctx)?)
    }

    fn image_embedder(&self, ctx: &BackendContext) -> Result<Arc<dyn ImageEmbedder>, ProviderError> {
        Ok(Self::client(ctx)?)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RegistryError {
    #[error("no provider backend named `{name}` (role {role})")]
    UnknownBackend { role: Role, name: String },
    #[error("building {role} provider: {source}")]
    Build { role: Role, source: ProviderError },
}

pub struct ProviderRegistry {
    backends: BTreeMap<String, Box<dyn ProviderBackend>>,
}

impl Default for ProviderRegistry {
    fn default() -> Self {
        let mut registry = ProviderRegistry {
            backends: BTreeMap::new(),
        };
        registry.register(Box::new(MockBackend));
        registry.register(Box::new(HttpBackend));
        registry
    }
}

impl ProviderRegistry {
    pub fn register(&mut self, backend: Box<dyn ProviderBackend>) {
        self.backends.insert(backend.name().to_string(), backend);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.backends.keys().map(String::as_str)
    }

    fn backend(&self, cfg: &ProvidersConfig, role: Role) -> Result<&dyn ProviderBackend, RegistryError> {
        let name = &cfg.role(role).backend;
        self.backends
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| RegistryError::UnknownBackend {
                role,
                name: name.clone(),
            })
    }

    pub fn build(&self, cfg: &ProvidersConfig, catalog: Arc<EntityCatalog>) -> Result<Providers, RegistryError> {
        let ctx = |role: Role| BackendContext {
            catalog: catalog.clone(),
            mock: &cfg.mock,
            endpoint: cfg.role(role).endpoint(role),
        };
        let wrap = |role| move |source| RegistryError::Build { role, source };
        Ok(Providers {
            text: self
                .backend(cfg, Role::TextGen)?
                .text_generator(&ctx(Role::TextGen))
                .map_err(wrap(Role::TextGen))?,
            extractor: self
                .backend(cfg, Role::EntityExtract)?
                .entity_extractor(&ctx(Role::EntityExtract))
                .map_err(wrap(Role::EntityExtract))?,
            image: self
                .backend(cfg, Role::ImageGen)?
                .image_generator(&ctx(Role::ImageGen))
                .map_err(wrap(Role::ImageGen))?,
            judge: self
                .backend(cfg, Role::QualityJudge)?
                .quality_judge(&ctx(Role::QualityJudge))
                .map_err(wrap(Role::QualityJudge))?,
            embedder: self
                .backend(cfg, Role::ImageEmbed)?
                .image_embedder(&ctx(Role::ImageEmbed))
                .map_err(wrap(Role::ImageEmbed))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Arc<EntityCatalog> {
        Arc::new(EntityCatalog::parse("edema\tABNORMALITY\n").unwrap().catalog)
    }

    #[test]
    fn defaults_build_mocks() {
        let registry = ProviderRegistry::default();
        assert_eq!(registry.names().collect::<Vec<_>>(), vec!["http", "mock"]);
        registry.build(&ProvidersConfig::default(), catalog()).unwrap();
    }

    #[test]
    fn unknown_backend_named() {
        let mut cfg = ProvidersConfig::default();
        cfg.image_embed.backend = "onnx".into();
        let err = ProviderRegistry::default().build(&cfg, catalog()).unwrap_err();
        assert_eq!(
            err,
            RegistryError::UnknownBackend {
                role: Role::ImageEmbed,
                name: "onnx".into()
            }
        );
    }

    #[test]
    fn http_requires_url() {
        let mut cfg = ProvidersConfig::default();
        cfg.text_gen.backend = "http".into();
        let err = ProviderRegistry::default().build(&cfg, catalog()).unwrap_err();
        assert!(matches!(
            err,
            RegistryError::Build {
                role: Role::TextGen,
                ..
            }
        ));
    }
}
