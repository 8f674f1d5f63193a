//! HTTP facade over the story pipeline: subjects, runs, artifacts and the
//! human review queue. See `docs/api.md` for the request and response shapes.

mod error;
mod ledger;
mod registry;
mod reviews;

use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::{oneshot, Semaphore};

use storyagent_core::checkpoint::{load_base, load_customization_for};
use storyagent_core::denoiser::{DenoiserConfig, DenoiserWeights, PLACEHOLDER};
use storyagent_core::diffusion::{make_schedule, NoiseSchedule, SamplerMode};
use storyagent_core::imaging::{Image, Mask};
use storyagent_core::lora_be::ReferenceClip;
use storyagent_core::orchestrator::{
    run_pipeline, system_clock, ArtifactStore, DesignerBackend, DirStore, Event, HumanReviewer, ObserverSpec, PipelineContext,
    ReviewDecision, RunArtifacts, RunConfig, RunState, Verdict,
};
use storyagent_core::storyboard::{Sprite, SubjectProfile};

pub use error::{ErrorBody, Result, ServiceError};
pub use ledger::{Ledger, INTERRUPTED};
pub use registry::{valid_subject_id, ClipRecord, Registry, SubjectRecord};
pub use reviews::{review_id, PendingReview, ReviewQueue};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    /// `host:port` to listen on.
    pub bind: String,
    /// Root directory for artifacts, run logs and subjects.
    pub store_path: PathBuf,
    /// Runs executing or waiting for review at once; more get 429.
    pub max_concurrent_runs: usize,
    pub review_timeout_secs: u64,
    /// Base denoiser checkpoint. Without one a seeded, untrained
    /// initialisation of `model` is used (useful for plumbing tests only).
    pub base_checkpoint: Option<PathBuf>,
    pub model: DenoiserConfig,
    pub model_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".to_string(),
            store_path: PathBuf::from("storyagent-data"),
            max_concurrent_runs: 2,
            review_timeout_secs: 600,
            base_checkpoint: None,
            model: DenoiserConfig::default(),
            model_seed: 0,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<SocketAddr> {
        let addr: SocketAddr = self
            .bind
            .parse()
            .map_err(|e| ServiceError::BadRequest(format!("bind address '{}': {e}", self.bind)))?;
        if self.max_concurrent_runs == 0 {
            return Err(ServiceError::BadRequest("max_concurrent_runs must be positive".into()));
        }
        Ok(addr)
    }

    /// The configured base checkpoint, or a seeded untrained initialisation
    /// of `model` when none is set.
    pub fn base_weights(&self) -> Result<DenoiserWeights> {
        match &self.base_checkpoint {
            Some(path) => {
                let bytes = std::fs::read(path)
                    .map_err(|e| std::io::Error::new(e.kind(), format!("base checkpoint {}: {e}", path.display())))?;
                Ok(load_base(&bytes)?)
            }
            None => {
                tracing::warn!("no base checkpoint configured; using an untrained initialisation");
                Ok(DenoiserWeights::init(&self.model, self.model_seed)?)
            }
        }
    }
}

/// Shared service state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    weights: Arc<DenoiserWeights>,
    sched: Arc<NoiseSchedule>,
    store: Arc<DirStore>,
    registry: Registry,
    ledger: Arc<Ledger>,
    reviews: Arc<ReviewQueue>,
    slots: Arc<Semaphore>,
}

impl AppState {
    /// Opens (or creates) the data directory and replays the run ledger.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        let weights = config.base_weights()?;
        let sched = make_schedule(weights.config.timesteps, 1e-4, 0.02)?;
        let store = Arc::new(DirStore::open(config.store_path.join("artifacts"))?);
        let registry = Registry::open(&config.store_path, Arc::clone(&store), &weights)?;
        let ledger = Arc::new(Ledger::open(&config.store_path)?);
        let slots = Arc::new(Semaphore::new(config.max_concurrent_runs));
        Ok(Self {
            inner: Arc::new(Inner {
                config,
                weights: Arc::new(weights),
                sched: Arc::new(sched),
                store,
                registry,
                ledger,
                reviews: Arc::new(ReviewQueue::new()),
                slots,
            }),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.inner.ledger
    }

    pub fn registry(&self) -> &Registry {
        &self.inner.registry
    }

    pub fn reviews(&self) -> &ReviewQueue {
        &self.inner.reviews
    }

    /// Releases waiting reviews and waits until every run has finished.
    pub async fn drain(&self) {
        self.inner.reviews.shutdown();
        let all = self.inner.config.max_concurrent_runs as u32;
        if let Ok(permits) = self.inner.slots.acquire_many(all).await {
            drop(permits);
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/subjects", get(list_subjects).post(add_subject))
        .route("/runs", get(list_runs).post(create_run))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/events", get(run_events))
        .route("/runs/{id}/artifacts", get(run_artifacts))
        .route("/artifacts/{hash}", get(get_artifact))
        .route("/reviews/pending", get(pending_reviews))
        .route("/reviews/{id}", post(decide_review))
        .fallback(|| async { ServiceError::NotFound("no such endpoint".into()) })
        .with_state(state)
}

/// Binds, serves until `shutdown` resolves, then drains running pipelines.
pub async fn serve(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<()> {
    let addr = config.validate()?;
    let state = AppState::open(config)?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| std::io::Error::new(e.kind(), format!("cannot listen on {addr}: {e}")))?;
    tracing::info!(%addr, "serving");
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    state.drain().await;
    Ok(())
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ServiceError::BadRequest(format!("invalid request body at '{path}': {}", e.into_inner()))
    })
}

async fn list_subjects(State(app): State<AppState>) -> Json<Vec<SubjectRecord>> {
    Json(app.inner.registry.list())
}

#[derive(Default)]
struct ClipParts {
    prompt: Option<String>,
    frames: Vec<(usize, Image)>,
    masks: Vec<(usize, Mask)>,
}

/// `clip<k>_frame<f>` / `clip<k>_mask<f>` / `clip<k>_prompt` → (k, kind, f).
fn clip_field(name: &str) -> Option<(usize, &str, usize)> {
    let (clip, rest) = name.strip_prefix("clip")?.split_once('_')?;
    let k = clip.parse().ok()?;
    if rest == "prompt" {
        return Some((k, "prompt", 0));
    }
    for kind in ["frame", "mask"] {
        if let Some(f) = rest.strip_prefix(kind).and_then(|f| f.parse().ok()) {
            return Some((k, kind, f));
        }
    }
    None
}

async fn add_subject(State(app): State<AppState>, mut form: Multipart) -> Result<(StatusCode, Json<SubjectRecord>)> {
    let bad = |m: String| ServiceError::BadRequest(m);
    let mut id = None;
    let mut sprite = None;
    let mut synthesize = None;
    let mut seed = 0u64;
    let mut customization = None;
    let mut clips: std::collections::BTreeMap<usize, ClipParts> = Default::default();
    while let Some(field) = form.next_field().await.map_err(|e| bad(format!("multipart: {e}")))? {
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| bad(format!("multipart field {name}: {e}")))?;
        let text = || String::from_utf8(data.to_vec()).map_err(|_| bad(format!("field {name} must be UTF-8 text")));
        match name.as_str() {
            "id" => id = Some(text()?.trim().to_string()),
            "sprite" => sprite = Some(Sprite::decode_png(&data)?),
            "synthesize" => synthesize = Some(text()?.trim().parse::<usize>().map_err(|e| bad(format!("synthesize: {e}")))?),
            "seed" => seed = text()?.trim().parse().map_err(|e| bad(format!("seed: {e}")))?,
            "customization" => customization = Some(load_customization_for(&data, &app.inner.weights)?),
            other => match clip_field(other) {
                Some((k, "prompt", _)) => clips.entry(k).or_default().prompt = Some(text()?),
                Some((k, "frame", f)) => clips.entry(k).or_default().frames.push((f, Image::decode_png(&data)?)),
                Some((k, _, f)) => clips.entry(k).or_default().masks.push((f, Mask::decode_pgm(&data)?)),
                None => return Err(bad(format!("unexpected multipart field '{other}'"))),
            },
        }
    }
    let id = id.ok_or_else(|| bad("missing field 'id'".into()))?;
    let sprite = sprite.ok_or_else(|| bad("missing field 'sprite'".into()))?;
    let profile = match (clips.is_empty(), synthesize) {
        (true, Some(n)) if n > 0 => {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            SubjectProfile::synthesize(id, sprite, n, app.inner.weights.config.frames, &mut rng)?
        }
        (false, None) => {
            let mut out = Vec::with_capacity(clips.len());
            for (k, mut parts) in clips {
                parts.frames.sort_by_key(|(f, _)| *f);
                parts.masks.sort_by_key(|(f, _)| *f);
                let prompt = parts.prompt.unwrap_or_else(|| PLACEHOLDER.to_string());
                let clip = ReferenceClip::new(
                    parts.frames.into_iter().map(|(_, i)| i).collect(),
                    parts.masks.into_iter().map(|(_, m)| m).collect(),
                    prompt,
                )
                .map_err(|e| bad(format!("clip {k}: {e}")))?;
                out.push(clip);
            }
            SubjectProfile::new(id, sprite, out)?
        }
        _ => return Err(bad("give either reference clip fields or a positive 'synthesize' count".into())),
    };
    let app2 = app.clone();
    let record = tokio::task::spawn_blocking(move || app2.inner.registry.add(profile, customization))
        .await
        .map_err(|e| ServiceError::Io(std::io::Error::other(e)))??;
    Ok((StatusCode::CREATED, Json(record)))
}

/// Body of `POST /runs`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub prompt: String,
    pub subject_id: String,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub observer: ObserverSpec,
    #[serde(default)]
    pub seed: u64,
    pub max_rounds: Option<usize>,
    pub sample_steps: Option<usize>,
    pub sampler: Option<SamplerMode>,
    pub designer: Option<DesignerBackend>,
}

fn default_shots() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCreated {
    pub run_id: String,
}

async fn create_run(State(app): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<RunCreated>)> {
    let req: RunRequest = parse_json(&body)?;
    let defaults = RunConfig::default();
    let observer = match req.observer {
        // The service-wide review timeout governs human reviews.
        ObserverSpec::HumanQueue { .. } => ObserverSpec::HumanQueue {
            timeout_secs: app.inner.config.review_timeout_secs,
        },
        other => other,
    };
    let cfg = RunConfig {
        shots: req.shots,
        seed: req.seed,
        max_rounds: req.max_rounds.unwrap_or(defaults.max_rounds),
        designer: req.designer.unwrap_or(defaults.designer),
        observer,
        sample_steps: req.sample_steps.unwrap_or(defaults.sample_steps),
        sampler: req.sampler.unwrap_or(defaults.sampler),
    };
    cfg.validate()?;
    let permit = Arc::clone(&app.inner.slots)
        .try_acquire_owned()
        .map_err(|_| ServiceError::Busy(format!("{} runs already active", app.inner.config.max_concurrent_runs)))?;
    let run_id = app.inner.ledger.allocate_id();
    let (started_tx, started_rx) = oneshot::channel::<std::result::Result<(), String>>();
    let worker_app = app.clone();
    let worker_id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let inner = &worker_app.inner;
        let subjects = inner.registry.snapshot();
        let human: Arc<dyn HumanReviewer> = inner.reviews.clone();
        let ctx = PipelineContext {
            weights: &inner.weights,
            sched: &inner.sched,
            subjects: &subjects,
            store: inner.store.as_ref(),
            human: Some(human),
            chooser: None,
            clock: &system_clock,
        };
        let mut started = Some(started_tx);
        let mut sink = |e: &Event| {
            let outcome = inner.ledger.append(&worker_id, e).map_err(|err| err.to_string());
            if let Err(err) = &outcome {
                tracing::error!(run = %worker_id, error = %err, "could not persist event");
            }
            if let Some(tx) = started.take() {
                let _ = tx.send(outcome);
            }
        };
        match run_pipeline(&worker_id, &req.prompt, &req.subject_id, &cfg, &ctx, &mut sink) {
            Ok(state) => tracing::info!(run = %worker_id, phase = ?state.phase, "run finished"),
            Err(e) => {
                tracing::error!(run = %worker_id, error = %e, "run did not start");
                if let Some(tx) = started.take() {
                    let _ = tx.send(Err(e.to_string()));
                }
            }
        }
    });
    match started_rx.await {
        Ok(Ok(())) => Ok((StatusCode::CREATED, Json(RunCreated { run_id }))),
        Ok(Err(message)) => Err(ServiceError::BadRequest(message)),
        Err(_) => Err(ServiceError::Io(std::io::Error::other("run worker stopped unexpectedly"))),
    }
}

fn find_run(app: &AppState, id: &str) -> Result<RunState> {
    app.inner
        .ledger
        .get(id)
        .ok_or_else(|| ServiceError::NotFound(format!("no run '{id}'")))
}

async fn list_runs(State(app): State<AppState>) -> Json<Vec<String>> {
    Json(app.inner.ledger.ids())
}

async fn get_run(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunState>> {
    Ok(Json(find_run(&app, &id)?))
}

async fn run_events(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<Vec<Event>>> {
    Ok(Json(find_run(&app, &id)?.events))
}

async fn run_artifacts(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<RunArtifacts>> {
    Ok(Json(find_run(&app, &id)?.artifacts))
}

async fn get_artifact(State(app): State<AppState>, Path(hash): Path<String>) -> Result<Response> {
    let (bytes, media_type) = app
        .inner
        .store
        .get(&hash)?
        .ok_or_else(|| ServiceError::NotFound(format!("no artifact '{hash}'")))?;
    Ok(([(header::CONTENT_TYPE, media_type)], bytes).into_response())
}

async fn pending_reviews(State(app): State<AppState>) -> Json<Vec<PendingReview>> {
    Json(app.inner.reviews.pending())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    Approve,
    Feedback,
}

/// Body of `POST /reviews/{id}`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub verdict: DecisionKind,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub reviewer: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionAck {
    pub review_id: String,
    pub accepted: bool,
}

async fn decide_review(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<DecisionAck>> {
    let req: DecisionRequest = parse_json(&body)?;
    let verdict = match req.verdict {
        DecisionKind::Approve => Verdict::Approve,
        DecisionKind::Feedback => Verdict::Feedback(req.note),
    };
    let reviewer = req.reviewer.unwrap_or_else(|| "console".to_string());
    let decision = ReviewDecision::new(verdict, reviewer)?;
    app.inner.reviews.decide(&id, decision)?;
    Ok(Json(DecisionAck {
        review_id: id,
        accepted: true,
    }))
}
