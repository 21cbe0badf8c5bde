//! Run configuration: a JSON file, overridden by command-line flags.
//!
//! Relative paths inside the file resolve against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sniffer_core::backend::{
    CachedBackend, CompletionBackend, EmbeddingBackend, HashedBagOfWords, HttpBackend, HttpBackendConfig,
    HttpEmbeddingBackend, ResponseCache, ScriptedBackend,
};
use sniffer_core::evidence::{EntityClient, ScriptedEntityClient, VisionEntityClient};
use sniffer_core::pipeline::{ComposeMode, EntitySource, PipelineConfig};

use crate::Flags;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    /// Scripted responses from a JSON rules file.
    Mock { script: PathBuf },
    Http(HttpBackendConfig),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbeddingConfig {
    Hashed {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Http {
        id: String,
        endpoint: String,
        model: String,
        #[serde(default = "default_auth_header")]
        auth_header: String,
        #[serde(default)]
        token_env: Option<String>,
        #[serde(default)]
        response_path: Option<String>,
    },
}

fn default_dim() -> usize {
    HashedBagOfWords::DEFAULT_DIM
}

fn default_auth_header() -> String {
    "Authorization".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EntityConfig {
    /// Fixed entity lists keyed by image reference.
    Mock {
        #[serde(default)]
        default: Vec<String>,
        #[serde(default)]
        images: BTreeMap<String, Vec<String>>,
    },
    Vision {
        #[serde(default)]
        endpoint: Option<String>,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

/// Everything a command may need. All fields are optional in the file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub claims: Option<PathBuf>,
    pub evidence: Option<PathBuf>,
    pub golds: Option<PathBuf>,
    pub fakes: Option<PathBuf>,
    pub results: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_pages: Option<usize>,
    pub max_chars_per_page: Option<usize>,
    pub entity_source: Option<EntitySource>,
    pub compose_mode: Option<ComposeMode>,
    pub concurrency: Option<usize>,
    pub subset_fractions: Option<Vec<f64>>,
    pub keep_going: Option<bool>,
    pub vision: Option<BackendConfig>,
    pub chat: Option<BackendConfig>,
    pub embedding: Option<EmbeddingConfig>,
    pub entities: Option<EntityConfig>,
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.claims,
            &mut cfg.evidence,
            &mut cfg.golds,
            &mut cfg.fakes,
            &mut cfg.results,
            &mut cfg.cache_dir,
            &mut cfg.out_dir,
        ] {
            rebase(base, p);
        }
        for backend in [&mut cfg.vision, &mut cfg.chat].into_iter().flatten() {
            if let BackendConfig::Mock { script } = backend {
                if script.is_relative() {
                    *script = base.join(&*script);
                }
            }
        }
        Ok(cfg)
    }

    /// Flags win over the file.
    pub fn apply(&mut self, flags: &Flags) {
        macro_rules! take {
            ($($field:ident <- $flag:ident),* $(,)?) => {
                $(if let Some(v) = &flags.$flag { self.$field = Some(v.clone()); })*
            };
        }
        take!(
            claims <- claims,
            evidence <- evidence,
            golds <- golds,
            fakes <- fakes,
            results <- results,
            cache_dir <- cache,
            out_dir <- out,
            seed <- seed,
            max_pages <- max_pages,
            concurrency <- concurrency,
            entity_source <- entity_source,
            compose_mode <- compose_mode,
        );
        if !flags.subset_fraction.is_empty() {
            self.subset_fractions = Some(flags.subset_fraction.clone());
        }
        if flags.keep_going {
            self.keep_going = Some(true);
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let d = PipelineConfig::default();
        let cfg = PipelineConfig {
            max_pages: self.max_pages.unwrap_or(d.max_pages),
            max_chars_per_page: self.max_chars_per_page.unwrap_or(d.max_chars_per_page),
            entity_source: self.entity_source.unwrap_or(d.entity_source),
            compose_mode: self.compose_mode.unwrap_or(d.compose_mode),
            concurrency: self.concurrency.unwrap_or(d.concurrency),
        };
        if cfg.concurrency == 0 {
            bail!("concurrency must be at least 1");
        }
        Ok(cfg)
    }

    fn cache(&self) -> Option<ResponseCache> {
        self.cache_dir.as_ref().map(ResponseCache::new)
    }

    /// Completion backend for `role`, wrapped in the response cache when a
    /// cache directory is configured.
    pub fn completion_backend(&self, role: &str) -> Result<Arc<dyn CompletionBackend>> {
        let cfg = match role {
            "vision" => &self.vision,
            _ => &self.chat,
        };
        let Some(cfg) = cfg else { bail!("no {role} backend configured") };
        let backend: Arc<dyn CompletionBackend> = match cfg {
            BackendConfig::Mock { script } => Arc::new(
                ScriptedBackend::from_file(script).with_context(|| format!("loading mock script {}", script.display()))?,
            ),
            BackendConfig::Http(http) => Arc::new(HttpBackend::new(http.clone())?),
        };
        Ok(match self.cache() {
            Some(cache) => Arc::new(CachedBackend::new(backend, cache)),
            None => backend,
        })
    }

    pub fn embedding_backend(&self) -> Result<Arc<dyn EmbeddingBackend>> {
        Ok(match &self.embedding {
            None => Arc::new(HashedBagOfWords::default()),
            Some(EmbeddingConfig::Hashed { dim }) => {
                if *dim == 0 {
                    bail!("embedding dim must be positive");
                }
                Arc::new(HashedBagOfWords::new(*dim))
            }
            Some(EmbeddingConfig::Http { id, endpoint, model, auth_header, token_env, response_path }) => {
                let mut b = HttpEmbeddingBackend::new(id, endpoint, model, auth_header, token_env.as_deref())?;
                if let Some(p) = response_path {
                    b = b.with_response_path(p);
                }
                Arc::new(b)
            }
        })
    }

    pub fn entity_client(&self) -> Result<Option<Arc<dyn EntityClient>>> {
        Ok(match &self.entities {
            None => None,
            Some(EntityConfig::Mock { default, images }) => {
                let mut client = ScriptedEntityClient::new(default.clone());
                for (image, names) in images {
                    client = client.with_image(image, names.clone());
                }
                Some(Arc::new(client))
            }
            Some(EntityConfig::Vision { endpoint, api_key_env }) => {
                let endpoint = endpoint.as_deref().unwrap_or(VisionEntityClient::DEFAULT_ENDPOINT);
                Some(Arc::new(VisionEntityClient::new(endpoint, api_key_env.as_deref())?))
            }
        })
    }
}
