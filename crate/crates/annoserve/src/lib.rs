//! Sequential annotation service for extracted instance crops.
//!
//! Instances are presented in ascending `(image, id)` order. Labels go to an
//! append-only log ([`store::LabelStore`]) that is replayed on start, so a
//! restarted service resumes at the first unlabeled instance.

pub mod render;
pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aop3d_core::instances::{geometric_features, read_crops, BoundingBox, InstanceCrop};
use aop3d_core::semisup::SeedFile;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;
use tower_http::services::ServeDir;

use render::{render_slice, ViewMode};
use store::{LabelRecord, LabelStore};

#[derive(Debug, thiserror::Error)]
pub enum AnnoError {
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("corrupt label log: {0}")]
    Corrupt(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot load crops: {0}")]
    Crops(#[from] aop3d_core::Error),
    #[error("cannot bind {0}: {1}")]
    Bind(SocketAddr, #[source] std::io::Error),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("unknown class {0}")]
    UnknownClass(u32),
    #[error("rendering failed: {0}")]
    Render(String),
}

impl IntoResponse for AnnoError {
    fn into_response(self) -> Response {
        let status = match &self {
            AnnoError::NotFound(_) => StatusCode::NOT_FOUND,
            AnnoError::BadRequest(_) => StatusCode::BAD_REQUEST,
            AnnoError::UnknownClass(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (
            status,
            Json(serde_json::json!({ "error": self.to_string() })),
        )
            .into_response()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct InstanceKey {
    pub image: String,
    pub id: u32,
}

impl std::fmt::Display for InstanceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.image, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: u32,
    pub name: String,
    pub hotkey: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ClassEntry {
    Name(String),
    Full {
        id: u32,
        name: String,
        hotkey: Option<String>,
    },
}

/// Parses a class list: either `["Schwann", "Myotube", …]` (ids from 0,
/// hotkeys from "1") or `[{"id":0,"name":"…","hotkey":"1"}, …]`.
pub fn parse_classes(json: &str) -> Result<Vec<ClassDef>, AnnoError> {
    let entries: Vec<ClassEntry> =
        serde_json::from_str(json).map_err(|e| AnnoError::Config(format!("class list: {e}")))?;
    let classes: Vec<ClassDef> = entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| match e {
            ClassEntry::Name(name) => ClassDef {
                id: i as u32,
                name,
                hotkey: (i + 1).to_string(),
            },
            ClassEntry::Full { id, name, hotkey } => ClassDef {
                id,
                name,
                hotkey: hotkey.unwrap_or_else(|| (i + 1).to_string()),
            },
        })
        .collect();
    if classes.is_empty() {
        return Err(AnnoError::Config("class list is empty".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in &classes {
        if !seen.insert(c.id) {
            return Err(AnnoError::Config(format!("duplicate class id {}", c.id)));
        }
    }
    Ok(classes)
}

pub fn load_classes(path: &Path) -> Result<Vec<ClassDef>, AnnoError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnoError::Io(path.to_owned(), e))?;
    parse_classes(&text)
}

#[derive(Clone, Debug, Serialize)]
pub struct FeatureSummary {
    pub volume: f64,
    pub surface_faces: f64,
    pub sphericity: f64,
    pub elongation: f64,
    pub axis_lengths: [f64; 3],
}

#[derive(Clone, Debug, Serialize)]
pub struct InstanceInfo {
    pub image: String,
    pub id: u32,
    pub index: usize,
    pub bbox: BoundingBox,
    pub tight: BoundingBox,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub features: FeatureSummary,
    pub label: Option<u32>,
}

struct Entry {
    key: InstanceKey,
    crop: InstanceCrop,
    features: FeatureSummary,
}

/// Catalog, classes and label store of one annotation session.
pub struct Session {
    entries: Vec<Entry>,
    index: BTreeMap<InstanceKey, usize>,
    classes: Vec<ClassDef>,
    store: Mutex<LabelStore>,
}

impl Session {
    /// Builds a session from crops and an opened store; replayed labels must
    /// reference known instances and classes.
    pub fn new(
        mut crops: Vec<InstanceCrop>,
        classes: Vec<ClassDef>,
        store: LabelStore,
    ) -> Result<Self, AnnoError> {
        if classes.is_empty() {
            return Err(AnnoError::Config("class list is empty".into()));
        }
        crops.sort_by(|a, b| (&a.meta.image, a.meta.id).cmp(&(&b.meta.image, b.meta.id)));
        let mut entries = Vec::with_capacity(crops.len());
        for crop in crops {
            let f = geometric_features(&crop)?;
            let key = InstanceKey {
                image: crop.meta.image.clone(),
                id: crop.meta.id,
            };
            let features = FeatureSummary {
                volume: f.volume,
                surface_faces: f.surface_faces,
                sphericity: f.sphericity,
                elongation: f.elongation,
                axis_lengths: f.axis_lengths,
            };
            entries.push(Entry {
                key,
                crop,
                features,
            });
        }
        let index: BTreeMap<InstanceKey, usize> = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.key.clone(), i))
            .collect();
        if index.len() != entries.len() {
            return Err(AnnoError::Config(
                "duplicate instance in crop catalog".into(),
            ));
        }
        for rec in store.active().values() {
            if !index.contains_key(&rec.key()) {
                return Err(AnnoError::Corrupt(format!(
                    "label for unknown instance {}",
                    rec.key()
                )));
            }
            if !classes.iter().any(|c| c.id == rec.class) {
                return Err(AnnoError::Corrupt(format!(
                    "label for {} uses unknown class {}",
                    rec.key(),
                    rec.class
                )));
            }
        }
        Ok(Self {
            entries,
            index,
            classes,
            store: Mutex::new(store),
        })
    }

    /// Loads crops from `<crops_root>/crops` and replays `labels`.
    pub fn open(
        crops_root: &Path,
        classes: Vec<ClassDef>,
        labels: &Path,
    ) -> Result<Self, AnnoError> {
        let crops = read_crops(crops_root)?;
        Self::new(crops, classes, LabelStore::open(labels)?)
    }

    fn info(&self, i: usize, labels: &BTreeMap<InstanceKey, LabelRecord>) -> InstanceInfo {
        let e = &self.entries[i];
        let (depth, height, width) = e.crop.mask.dim();
        InstanceInfo {
            image: e.key.image.clone(),
            id: e.key.id,
            index: i,
            bbox: e.crop.meta.bbox,
            tight: e.crop.meta.tight,
            depth,
            height,
            width,
            features: e.features.clone(),
            label: labels.get(&e.key).map(|r| r.class),
        }
    }

    fn lookup(&self, image: &str, id: u32) -> Result<usize, AnnoError> {
        self.index
            .get(&InstanceKey {
                image: image.to_owned(),
                id,
            })
            .copied()
            .ok_or_else(|| AnnoError::NotFound(format!("instance {image}/{id}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Current labels as a seeds file for label spreading.
    pub async fn seeds(&self) -> SeedFile {
        let store = self.store.lock().await;
        SeedFile {
            labels: store
                .active()
                .iter()
                .map(|(k, r)| (k.to_string(), r.class as usize))
                .collect(),
        }
    }
}

#[derive(Serialize)]
struct NextResponse {
    done: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    instance: Option<InstanceInfo>,
}

#[derive(Serialize)]
struct Progress {
    labeled: usize,
    total: usize,
    /// Counts keyed by class id.
    per_class: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct LabelBody {
    class: u32,
    #[serde(default)]
    note: Option<String>,
}

#[derive(Deserialize)]
struct SliceQuery {
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    sigma: Option<f64>,
}

type Shared = Arc<Session>;

async fn classes(State(s): State<Shared>) -> Json<Vec<ClassDef>> {
    Json(s.classes.clone())
}

async fn next(State(s): State<Shared>) -> Json<NextResponse> {
    let store = s.store.lock().await;
    let labels = store.active();
    let pos = s.entries.iter().position(|e| !labels.contains_key(&e.key));
    Json(NextResponse {
        done: pos.is_none(),
        instance: pos.map(|i| s.info(i, labels)),
    })
}

async fn instance(
    State(s): State<Shared>,
    UrlPath((image, id)): UrlPath<(String, u32)>,
) -> Result<Json<InstanceInfo>, AnnoError> {
    let i = s.lookup(&image, id)?;
    let store = s.store.lock().await;
    Ok(Json(s.info(i, store.active())))
}

async fn slice(
    State(s): State<Shared>,
    UrlPath((image, id, z)): UrlPath<(String, u32, usize)>,
    Query(q): Query<SliceQuery>,
) -> Result<Response, AnnoError> {
    let i = s.lookup(&image, id)?;
    let mode: ViewMode = q.mode.as_deref().unwrap_or("raw").parse()?;
    let png = render_slice(&s.entries[i].crop, z, mode, q.sigma.unwrap_or(1.0))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn label(
    State(s): State<Shared>,
    UrlPath((image, id)): UrlPath<(String, u32)>,
    Json(body): Json<LabelBody>,
) -> Result<Json<LabelRecord>, AnnoError> {
    let i = s.lookup(&image, id)?;
    if !s.classes.iter().any(|c| c.id == body.class) {
        return Err(AnnoError::UnknownClass(body.class));
    }
    let mut store = s.store.lock().await;
    Ok(Json(store.append(
        &s.entries[i].key,
        body.class,
        body.note,
    )?))
}

async fn progress(State(s): State<Shared>) -> Json<Progress> {
    let store = s.store.lock().await;
    let mut per_class: BTreeMap<String, usize> =
        s.classes.iter().map(|c| (c.id.to_string(), 0)).collect();
    for r in store.active().values() {
        *per_class.entry(r.class.to_string()).or_default() += 1;
    }
    Json(Progress {
        labeled: store.active().len(),
        total: s.entries.len(),
        per_class,
    })
}

async fn seeds(State(s): State<Shared>) -> Json<SeedFile> {
    Json(s.seeds().await)
}

const PLACEHOLDER_PAGE: &str = "<!doctype html><title>aop3d annotation</title>\
<p>The annotation UI is not installed. Pass a static directory to serve it; the JSON API lives under <code>/api</code>.</p>";

/// API routes plus the UI: files from `static_dir` at `/` when given,
/// otherwise a short placeholder page.
pub fn router(session: Arc<Session>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/classes", get(classes))
        .route("/api/next", get(next))
        .route("/api/progress", get(progress))
        .route("/api/seeds", get(seeds))
        .route("/api/instances/{image}/{id}", get(instance))
        .route("/api/instances/{image}/{id}/slice/{z}", get(slice))
        .route("/api/instances/{image}/{id}/label", post(label))
        .with_state(session);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(PLACEHOLDER_PAGE) })),
    }
}

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub crops_root: PathBuf,
    pub classes: Vec<ClassDef>,
    pub labels_out: PathBuf,
    pub static_dir: Option<PathBuf>,
}

/// Loads the session, binds and serves until the process is stopped.
pub async fn serve(cfg: ServeConfig) -> Result<(), AnnoError> {
    if let Some(dir) = &cfg.static_dir {
        if !dir.is_dir() {
            return Err(AnnoError::Config(format!(
                "static directory {} does not exist",
                dir.display()
            )));
        }
    }
    let session = Arc::new(Session::open(
        &cfg.crops_root,
        cfg.classes,
        &cfg.labels_out,
    )?);
    let listener = tokio::net::TcpListener::bind(cfg.addr)
        .await
        .map_err(|e| AnnoError::Bind(cfg.addr, e))?;
    let app = router(session, cfg.static_dir.as_deref());
    axum::serve(listener, app)
        .await
        .map_err(|e| AnnoError::Io(PathBuf::from("<server>"), e))
}
