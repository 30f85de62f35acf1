//! Configuration file (TOML or JSON) shared by all subcommands.
//!
//! API keys are never read from this file; provider sections only name the
//! environment variable that holds the key.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use archseek_core::embedding::ProviderKind;
use archseek_core::{
    EmbeddingGateway, EmbeddingProviderConfig, EngineConfig, Manifest, Space, VisionModel,
    VlmConfig,
};
use serde::Deserialize;

pub const CONFIG_ENV: &str = "ARCHSEEK_CONFIG";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_MOCK_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProvidersConfig {
    pub text: EmbeddingProviderConfig,
    pub crossmodal: EmbeddingProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub database: Option<PathBuf>,
    pub bind: Option<String>,
    /// Base seed for random-start sessions and the random baseline.
    pub seed: u64,
    pub ui_dir: Option<PathBuf>,
    pub snapshot_dir: Option<PathBuf>,
    pub session_ttl_secs: u64,
    pub max_upload_bytes: usize,
    /// Cards per response; all cases when unset.
    pub result_limit: Option<usize>,
    pub providers: Option<ProvidersConfig>,
    pub vlm: Option<VlmConfig>,
    pub engine: EngineConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            database: None,
            bind: None,
            seed: 0,
            ui_dir: None,
            snapshot_dir: None,
            session_ttl_secs: 3600,
            max_upload_bytes: 10 * 1024 * 1024,
            result_limit: None,
            providers: None,
            vlm: None,
            engine: EngineConfig::default(),
        }
    }
}

impl AppConfig {
    pub fn parse(text: &str, json: bool) -> anyhow::Result<Self> {
        let cfg: AppConfig = if json {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text)?
        };
        if let Some(p) = &cfg.providers {
            p.text.validate()?;
            p.crossmodal.validate()?;
        }
        cfg.engine.fusion.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Explicit path first, then `ARCHSEEK_CONFIG`, else defaults.
    pub fn load(explicit: Option<&Path>) -> anyhow::Result<Self> {
        match explicit {
            Some(p) => Self::from_file(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::from_file(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    /// Gateway for building a new database: configured providers, else mocks.
    pub fn ingest_gateway(&self) -> anyhow::Result<EmbeddingGateway> {
        match &self.providers {
            Some(p) => Ok(EmbeddingGateway::from_configs(
                p.text.clone(),
                p.crossmodal.clone(),
            )?),
            None => Ok(EmbeddingGateway::mock(DEFAULT_MOCK_DIM, DEFAULT_MOCK_DIM)),
        }
    }

    /// Gateway for querying an existing database. Without a providers
    /// section, a mock-built database gets matching mocks back.
    pub fn query_gateway(&self, manifest: &Manifest) -> anyhow::Result<EmbeddingGateway> {
        if let Some(p) = &self.providers {
            return Ok(EmbeddingGateway::from_configs(
                p.text.clone(),
                p.crossmodal.clone(),
            )?);
        }
        let (t, c) = (
            manifest.provider(Space::Text),
            manifest.provider(Space::Crossmodal),
        );
        if t.provider_kind != ProviderKind::DeterministicMock
            || c.provider_kind != ProviderKind::DeterministicMock
        {
            bail!("database was built with remote providers; configure [providers] to query it");
        }
        Ok(EmbeddingGateway::mock(t.dim, c.dim))
    }

    /// `replay` overrides the configured vision model.
    pub fn vision_model(
        &self,
        replay: Option<&Path>,
    ) -> anyhow::Result<Option<Arc<dyn VisionModel>>> {
        let cfg = match (replay, &self.vlm) {
            (Some(dir), _) => VlmConfig::replay(dir),
            (None, Some(v)) => v.clone(),
            (None, None) => return Ok(None),
        };
        Ok(Some(Arc::from(cfg.build()?)))
    }
}
