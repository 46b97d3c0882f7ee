//! TOML run configuration.
//!
//! ```toml
//! methods = ["celebrity-match"]
//! # relevance = 16.0               # MAP relevance override; must match training
//!
//! [server]
//! host = "127.0.0.1"
//! port = 8080
//! k = 5
//! max_body_bytes = 10485760
//! workers = 4            # identifications running at once; others queue
//! scoring_threads = 4    # rayon threads shared by all identifications
//! static_dir = "web/dist"
//! # spool_dir = "/tmp/voicerank"   # stage uploads on disk; removed before replying
//!
//! [models]
//! container = "models.vrk1"
//! # gallery = "gallery.jsonl"      # overrides the gallery stored in the container
//!
//! [limits]
//! min_s = 1.0
//! max_s = 60.0
//!
//! # [features]                     # front-end/VAD override; must match training
//! # vad_threshold_db = 30.0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use voicerank_core::features::FeatureConfig;
use voicerank_core::pipeline::DurationLimits;

pub const CONFIG_ENV: &str = "VOICERANK_CONFIG";
pub const CELEBRITY_MATCH: &str = "celebrity-match";
pub const KNOWN_METHODS: [&str; 1] = [CELEBRITY_MATCH];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub methods: Vec<String>,
    pub relevance: Option<f64>,
    pub server: ServerConfig,
    pub models: ModelsConfig,
    pub limits: DurationLimits,
    pub features: Option<FeatureConfig>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            methods: vec![CELEBRITY_MATCH.into()],
            relevance: None,
            server: ServerConfig::default(),
            models: ModelsConfig::default(),
            limits: DurationLimits::default(),
            features: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub k: usize,
    pub max_body_bytes: usize,
    pub workers: usize,
    pub scoring_threads: usize,
    pub static_dir: Option<PathBuf>,
    pub spool_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            k: 5,
            max_body_bytes: 10 * 1024 * 1024,
            workers: 4,
            scoring_threads: 4,
            static_dir: None,
            spool_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelsConfig {
    pub container: PathBuf,
    /// Metadata for every enrolled utterance; replaces the container's gallery.
    pub gallery: Option<PathBuf>,
}

impl ServiceConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads the file named by `VOICERANK_CONFIG`, else `path`.
    /// Relative paths inside the file resolve against its directory.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let Some(path) = env.as_deref().or(path) else {
            bail!("no configuration file given and {CONFIG_ENV} is unset");
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.models.container);
        if let Some(p) = self.models.gallery.as_mut() {
            fix(p);
        }
        if let Some(p) = self.server.static_dir.as_mut() {
            fix(p);
        }
        if let Some(p) = self.server.spool_dir.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let s = &self.server;
        if s.k == 0 {
            bail!("server.k must be positive");
        }
        if s.workers == 0 || s.scoring_threads == 0 {
            bail!("server.workers and server.scoring_threads must be positive");
        }
        if s.max_body_bytes == 0 {
            bail!("server.max_body_bytes must be positive");
        }
        if !(self.limits.min_s >= 0.0 && self.limits.max_s > self.limits.min_s) {
            bail!("limits must satisfy 0 <= min_s < max_s");
        }
        if self.methods.is_empty() {
            bail!("at least one method must be enabled");
        }
        for m in &self.methods {
            if !KNOWN_METHODS.contains(&m.as_str()) {
                bail!("unknown method {m:?}; known: {KNOWN_METHODS:?}");
            }
        }
        if let Some(r) = self.relevance {
            if !(r > 0.0) {
                bail!("relevance must be positive");
            }
        }
        if let Some(f) = &self.features {
            f.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_from_empty_file() {
        let cfg = ServiceConfig::parse("").unwrap();
        assert_eq!(cfg, ServiceConfig::default());
        assert_eq!(cfg.server.max_body_bytes, 10 * 1024 * 1024);
        assert_eq!(cfg.server.k, 5);
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"
methods = ["celebrity-match"]
relevance = 12.0

[server]
port = 9000
workers = 2
spool_dir = "spool"

[models]
container = "m.vrk1"
gallery = "g.jsonl"

[limits]
max_s = 30.0

[features]
vad_threshold_db = 25.0
"#;
        let mut cfg = ServiceConfig::parse(text).unwrap();
        cfg.resolve_paths(Path::new("/srv"));
        assert_eq!(cfg.server.port, 9000);
        assert_eq!(cfg.models.container, PathBuf::from("/srv/m.vrk1"));
        assert_eq!(cfg.server.spool_dir, Some(PathBuf::from("/srv/spool")));
        assert_eq!(cfg.limits.max_s, 30.0);
        assert_eq!(cfg.limits.min_s, 1.0);
        assert_eq!(cfg.features.unwrap().vad_threshold_db, 25.0);
        assert_eq!(cfg.relevance, Some(12.0));
    }

    #[test]
    fn rejects_unknown_methods_and_keys() {
        assert!(ServiceConfig::parse("methods = [\"karaoke\"]").is_err());
        assert!(ServiceConfig::parse("[server]\nprot = 1").is_err());
        assert!(ServiceConfig::parse("[server]\nk = 0").is_err());
    }
}
