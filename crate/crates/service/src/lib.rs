//! HTTP front end: WAV in, ranked speakers and stage timings out.
//!
//! Uploads live in memory (or, with `spool_dir`, in a temporary file) only for
//! the duration of a request.

pub mod config;
mod routes;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use tokio::net::TcpListener;
use tokio::sync::Semaphore;
use tracing::{error, info};
use voicerank_core::container::{ModelBundle, VERSION};
use voicerank_core::gallery::{ingest_metadata, SelectionRule};
use voicerank_core::pipeline::Engine;

pub use config::ServiceConfig;
pub use routes::{router, ErrorBody, Health, IdentifyResponse, ResultItem};

/// Static description of the loaded models, reported by the health endpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelInfo {
    pub format: String,
    pub seed: u64,
    pub ubm_components: usize,
    pub ivector_dim: usize,
    pub speaker_dim: usize,
    pub index_precision: String,
}

impl ModelInfo {
    fn of(engine: &Engine) -> Self {
        let e = engine.embedder();
        Self {
            format: format!("VRK1 v{VERSION}"),
            seed: e.meta().seed,
            ubm_components: e.ubm().num_components(),
            ivector_dim: e.ppca().ivector_dim(),
            speaker_dim: engine.plda().speaker_dim(),
            index_precision: format!("{:?}", engine.index().precision()).to_lowercase(),
        }
    }
}

#[derive(Debug)]
enum Models {
    Loading,
    Ready { engine: Arc<Engine>, info: ModelInfo },
    Failed(String),
}

/// Shared per-process state.
#[derive(Debug)]
pub struct AppState {
    config: ServiceConfig,
    models: RwLock<Models>,
    started: Instant,
    permits: Arc<Semaphore>,
    requests: AtomicU64,
}

impl AppState {
    /// State with no models yet; identify requests get 503 until [`AppState::install`].
    pub fn loading(config: ServiceConfig) -> Arc<Self> {
        let permits = Arc::new(Semaphore::new(config.server.workers));
        Arc::new(Self {
            config,
            models: RwLock::new(Models::Loading),
            started: Instant::now(),
            permits,
            requests: AtomicU64::new(0),
        })
    }

    pub fn install(&self, engine: Engine) {
        let info = ModelInfo::of(&engine);
        *self.models.write().expect("state lock") = Models::Ready {
            engine: Arc::new(engine),
            info,
        };
    }

    pub fn fail(&self, message: String) {
        *self.models.write().expect("state lock") = Models::Failed(message);
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn engine(&self) -> Option<Arc<Engine>> {
        match &*self.models.read().expect("state lock") {
            Models::Ready { engine, .. } => Some(engine.clone()),
            _ => None,
        }
    }

    fn next_request_id(&self) -> String {
        let n = self.requests.fetch_add(1, Ordering::Relaxed);
        format!("{:08x}-{n:06}", std::process::id())
    }
}

/// Loads the container and optional gallery override into a ready engine.
pub fn load_engine(config: &ServiceConfig) -> anyhow::Result<Engine> {
    let path = &config.models.container;
    let mut bundle = ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(features) = &config.features {
        bundle.meta.features = features.clone();
    }
    if let Some(r) = config.relevance {
        bundle.meta.relevance = r;
    }
    let gallery = match &config.models.gallery {
        Some(p) => Some(
            ingest_metadata(p, &SelectionRule::disabled()).with_context(|| format!("reading {}", p.display()))?,
        ),
        None => None,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.server.scoring_threads)
        .thread_name(|i| format!("voicerank-score-{i}"))
        .build()?;
    Ok(Engine::new(bundle, gallery)?
        .with_limits(config.limits)
        .with_pool(Arc::new(pool)))
}

/// Binds, loads models in the background and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> anyhow::Result<()> {
    config.validate()?;
    if let Some(dir) = &config.server.spool_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let addr: SocketAddr = format!("{}:{}", config.server.host, config.server.port)
        .parse()
        .context("server.host/port")?;
    let listener = TcpListener::bind(addr).await?;
    let state = AppState::loading(config);
    spawn_load(state.clone());
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

/// Loads models on the blocking pool and installs them into `state`.
pub fn spawn_load(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || {
        let t = Instant::now();
        match load_engine(&state.config) {
            Ok(engine) => {
                info!(
                    rows = engine.index().len(),
                    speakers = engine.gallery().len(),
                    seconds = t.elapsed().as_secs_f64(),
                    "models loaded"
                );
                state.install(engine);
            }
            Err(e) => {
                error!("model load failed: {e:#}");
                state.fail(format!("{e:#}"));
            }
        }
    })
}
