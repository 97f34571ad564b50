//! Datasets and sessions behind the HTTP API, persisted under a data
//! directory:
//!
//! ```text
//! <root>/datasets/<id>/dataset.jsonl   dataset file
//! <root>/datasets/<id>/params.json     pre-trained parameters
//! <root>/sessions/<id>.jsonl           append-only session event log
//! <root>/sessions/<id>.params.json     fine-tuned parameters
//! ```
//!
//! Every operation is synchronous; the HTTP layer moves the slow ones onto
//! blocking threads.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use gafl_core::encoder::{encode_all, pretrain};
use gafl_core::eval::retrieve_topk;
use gafl_core::finetune::FinetuneInputs;
use gafl_core::selection::select;
use gafl_core::{
    encode_gaf, finetune, generate_synthetic, Annotation, ClassEntry, Dataset, EncoderParams, FinetuneConfig, Gaf,
    MaskPattern, PretrainConfig, PretrainReport, SelectionConfig, Split, SyntheticConfig, VideoFeatures,
};
use serde::{Deserialize, Serialize};

use super::error::{ServiceError, ServiceResult};
use super::session::{CandidateScores, Event, JobRecord, Session, SessionState};
use crate::format::{dataset_header, load_dataset, parse_dataset, save_dataset, ParamsDocument};
use crate::import::{parse_features, ImportSchema};

/// Server-side defaults for requests that omit a config.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServiceDefaults {
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

/// Body of `POST /datasets`. Exactly one of `synthetic`, `dataset` and
/// `features` must be given.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetUpload {
    /// Overrides the id carried by the source.
    pub id: Option<String>,
    pub synthetic: Option<SyntheticConfig>,
    /// Dataset file contents.
    pub dataset: Option<String>,
    /// Feature records, read with `schema`.
    pub features: Option<String>,
    pub schema: Option<ImportSchema>,
    /// Pre-trained parameters; without them the encoder is pre-trained on
    /// the training split.
    pub params: Option<ParamsDocument>,
    pub pretrain: Option<PretrainConfig>,
    pub pretrain_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub id: String,
    pub split: Split,
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub id: String,
    #[serde(rename = "C")]
    pub dim: usize,
    #[serde(rename = "T")]
    pub frames: [usize; 2],
    #[serde(rename = "N")]
    pub persons: [usize; 2],
    pub video_count: usize,
    pub pool_size: usize,
    pub class_catalog: Vec<ClassEntry>,
    pub videos: Vec<VideoSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub dataset_id: String,
    pub query_ids: Vec<String>,
    pub selection_config: Option<SelectionConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionView {
    pub session_id: String,
    pub query_ids: Vec<String>,
    pub selected_ids: Vec<String>,
    /// Query-aware candidates with their per-query scores.
    pub candidates: Vec<CandidateScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub session_id: String,
    #[serde(flatten)]
    pub job: JobRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Pretrained,
    Finetuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedVideo {
    pub rank: usize,
    pub id: String,
    pub score: f64,
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalView {
    pub session_id: String,
    pub query: String,
    pub space: Space,
    pub k: usize,
    pub results: Vec<RankedVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schematic {
    pub id: String,
    pub dataset_id: String,
    pub split: Split,
    pub class: Option<String>,
    pub frames: usize,
    pub persons: usize,
    /// `T × N` court positions.
    pub positions: Vec<Vec<[f64; 2]>>,
}

/// A dataset with its pre-trained encoder and the embedded retrieval pool
/// (the training split).
#[derive(Debug)]
pub struct DatasetState {
    pub dataset: Dataset,
    pub params: EncoderParams,
    pub pretrain: Option<PretrainReport>,
    pub pool: Vec<usize>,
    pub pool_gafs: Vec<Gaf>,
}

impl DatasetState {
    pub fn new(dataset: Dataset, params: EncoderParams, pretrain: Option<PretrainReport>) -> ServiceResult<Self> {
        if params.dim() != dataset.dim {
            return Err(ServiceError::invalid(
                "params",
                format!("parameters are for C = {} but the dataset has C = {}", params.dim(), dataset.dim),
            ));
        }
        let pool: Vec<usize> =
            dataset.entries.iter().enumerate().filter(|(_, e)| e.split == Split::Train).map(|(k, _)| k).collect();
        let pool_gafs = encode_all(pool.iter().map(|&k| &dataset.entries[k].video), &params)
            .map_err(|e| ServiceError::from_core("params", e))?;
        Ok(Self { dataset, params, pretrain, pool, pool_gafs })
    }

    pub fn pool_video(&self, j: usize) -> &VideoFeatures {
        &self.dataset.entries[self.pool[j]].video
    }

    pub fn pool_ids(&self) -> Vec<&str> {
        self.pool.iter().map(|&k| self.dataset.entries[k].video.id.as_str()).collect()
    }

    pub fn info(&self, warnings: Vec<String>) -> DatasetInfo {
        let header = dataset_header(&self.dataset, None);
        DatasetInfo {
            id: self.dataset.id.clone(),
            dim: self.dataset.dim,
            frames: header.frames,
            persons: header.persons,
            video_count: self.dataset.len(),
            pool_size: self.pool.len(),
            class_catalog: self.dataset.class_catalog.clone(),
            videos: self
                .dataset
                .entries
                .iter()
                .map(|e| VideoSummary { id: e.video.id.clone(), split: e.split, class: e.video.class_label.clone() })
                .collect(),
            pretrain: self.pretrain.clone(),
            warnings,
        }
    }
}

struct Tuned {
    params: EncoderParams,
    pool_gafs: Vec<Gaf>,
}

struct SessionSlot {
    session: RwLock<Session>,
    tuned: Mutex<Option<Arc<Tuned>>>,
}

/// Work for one fine-tune job, handed out by [`Store::start_finetune`].
#[derive(Debug, Clone, PartialEq)]
pub struct JobTicket {
    pub session_id: String,
    pub job_id: String,
    pub config: FinetuneConfig,
}

pub struct Store {
    root: PathBuf,
    defaults: ServiceDefaults,
    datasets: RwLock<BTreeMap<String, Arc<DatasetState>>>,
    sessions: RwLock<BTreeMap<String, Arc<SessionSlot>>>,
    jobs: RwLock<BTreeMap<String, String>>,
    next_session: AtomicU64,
    /// Serializes dataset registration.
    dataset_writer: Mutex<()>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("root", &self.root).finish_non_exhaustive()
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ServiceError {
    ServiceError::internal(format!("{}: {e}", path.display()))
}

fn append_events(path: &Path, events: &[Event]) -> ServiceResult<()> {
    let mut buf = String::new();
    for e in events {
        buf.push_str(&serde_json::to_string(e).expect("events serialize"));
        buf.push('\n');
    }
    let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
    file.write_all(buf.as_bytes()).map_err(|e| io_err(path, e))?;
    file.sync_data().map_err(|e| io_err(path, e))
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

const INTERRUPTED: &str = "interrupted by a service restart";

impl Store {
    /// Opens the data directory, creating it when missing, and replays every
    /// stored session. Jobs that were running when the service stopped are
    /// recorded as failed.
    pub fn open(root: impl Into<PathBuf>, defaults: ServiceDefaults) -> ServiceResult<Self> {
        let root = root.into();
        for dir in [root.join("datasets"), root.join("sessions")] {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        }
        let store = Store {
            root,
            defaults,
            datasets: RwLock::new(BTreeMap::new()),
            sessions: RwLock::new(BTreeMap::new()),
            jobs: RwLock::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            dataset_writer: Mutex::new(()),
        };
        store.load_datasets()?;
        store.load_sessions()?;
        Ok(store)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dataset_dir(&self, id: &str) -> PathBuf {
        self.root.join("datasets").join(id)
    }

    fn session_log(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.jsonl"))
    }

    fn session_params(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.params.json"))
    }

    fn load_datasets(&self) -> ServiceResult<()> {
        let dir = self.root.join("datasets");
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("params.json").exists())
            .collect();
        names.sort();
        let mut map = self.datasets.write().unwrap();
        for path in names {
            let dataset = load_dataset(&path.join("dataset.jsonl")).map_err(|e| io_err(&path, e))?;
            let doc = crate::format::load_params_document(&path.join("params.json")).map_err(|e| io_err(&path, e))?;
            let params = doc.params().map_err(|e| io_err(&path, e))?;
            let state = DatasetState::new(dataset, params, doc.pretrain)?;
            map.insert(state.dataset.id.clone(), Arc::new(state));
        }
        Ok(())
    }

    fn load_sessions(&self) -> ServiceResult<()> {
        let dir = self.root.join("sessions");
        let mut logs: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        logs.sort();
        let mut max_seq = 0;
        for log in logs {
            let text = fs::read_to_string(&log).map_err(|e| io_err(&log, e))?;
            let mut lines: Vec<&str> = text.split_inclusive('\n').collect();
            // a line without its newline is a write torn by a crash
            if lines.last().is_some_and(|l| !l.ends_with('\n')) {
                log::warn!("{}: dropping a torn final event", log.display());
                lines.pop();
            }
            let events: Vec<Event> = lines
                .iter()
                .enumerate()
                .map(|(k, l)| serde_json::from_str(l).map_err(|e| io_err(&log, format!("event {}: {e}", k + 1))))
                .collect::<ServiceResult<_>>()?;
            let Some(first) = events.first() else { continue };
            let mut session = Session::from_event(first)?;
            for e in &events[1..] {
                session.apply(e).map_err(|err| io_err(&log, err))?;
            }
            if session.state == SessionState::Finetuning {
                let job_id = session.current_job().expect("fine-tuning has a job").job_id.clone();
                let failed = Event::FinetuneFailed { job_id, error: INTERRUPTED.into() };
                session.apply(&failed)?;
                append_events(&log, &[failed])?;
            }
            if let Some(seq) = session.id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_seq = max_seq.max(seq);
            }
            let mut jobs = self.jobs.write().unwrap();
            for j in &session.jobs {
                jobs.insert(j.job_id.clone(), session.id.clone());
            }
            let slot = SessionSlot { session: RwLock::new(session.clone()), tuned: Mutex::new(None) };
            self.sessions.write().unwrap().insert(session.id.clone(), Arc::new(slot));
        }
        self.next_session.store(max_seq + 1, Ordering::SeqCst);
        Ok(())
    }

    pub fn dataset(&self, id: &str) -> ServiceResult<Arc<DatasetState>> {
        self.datasets
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("unknown dataset {id}")).with_ids(vec![id.into()]))
    }

    pub fn dataset_ids(&self) -> Vec<String> {
        self.datasets.read().unwrap().keys().cloned().collect()
    }

    pub fn dataset_info(&self, id: &str) -> ServiceResult<DatasetInfo> {
        Ok(self.dataset(id)?.info(Vec::new()))
    }

    /// Registers a dataset, pre-training the encoder when no parameters are
    /// supplied.
    pub fn add_dataset(&self, upload: DatasetUpload) -> ServiceResult<DatasetInfo> {
        let sources = [upload.synthetic.is_some(), upload.dataset.is_some(), upload.features.is_some()];
        if sources.iter().filter(|&&b| b).count() != 1 {
            return Err(ServiceError::invalid("body", "give exactly one of `synthetic`, `dataset` and `features`"));
        }
        let mut warnings = Vec::new();
        let mut dataset = if let Some(cfg) = &upload.synthetic {
            generate_synthetic(cfg).map_err(|e| ServiceError::from_core("synthetic", e))?
        } else if let Some(text) = &upload.dataset {
            parse_dataset(text, Path::new("<upload>")).map_err(|e| ServiceError::invalid("dataset", e.to_string()))?.0
        } else {
            let schema = upload.schema.clone().unwrap_or_default();
            let imported = parse_features(upload.features.as_deref().unwrap_or_default(), &schema)
                .map_err(|e| ServiceError::invalid("features", e.to_string()))?;
            warnings = imported.warnings;
            imported.dataset
        };
        if let Some(id) = &upload.id {
            dataset.id = id.clone();
        }
        if !valid_id(&dataset.id) {
            return Err(ServiceError::invalid("id", format!("dataset id {:?} must match [A-Za-z0-9._-]+", dataset.id)));
        }
        if self.datasets.read().unwrap().contains_key(&dataset.id) {
            return Err(ServiceError::conflict(format!("dataset {} already exists", dataset.id)));
        }

        let (params, report) = match &upload.params {
            Some(doc) => (doc.params().map_err(|e| ServiceError::invalid("params", e.to_string()))?, doc.pretrain.clone()),
            None => {
                let cfg = upload.pretrain.clone().unwrap_or_else(|| self.defaults.pretrain.clone());
                let mut train = dataset.split(Split::Train);
                if train.is_empty() {
                    train = dataset.entries.iter().map(|e| &e.video).collect();
                }
                let (p, r) = pretrain(&train, &cfg, upload.pretrain_seed).map_err(|e| ServiceError::from_core("pretrain", e))?;
                (p, Some(r))
            }
        };
        let state = DatasetState::new(dataset, params, report)?;

        let _guard = self.dataset_writer.lock().unwrap();
        let id = state.dataset.id.clone();
        if self.datasets.read().unwrap().contains_key(&id) {
            return Err(ServiceError::conflict(format!("dataset {id} already exists")));
        }
        let dir = self.dataset_dir(&id);
        let staging = self.root.join("datasets").join(format!(".{id}.partial"));
        let _ = fs::remove_dir_all(&staging);
        fs::create_dir_all(&staging).map_err(|e| io_err(&staging, e))?;
        save_dataset(&state.dataset, &staging.join("dataset.jsonl")).map_err(|e| io_err(&staging, e))?;
        crate::format::save_params(&state.params, state.pretrain.as_ref(), None, &staging.join("params.json"))
            .map_err(|e| io_err(&staging, e))?;
        fs::rename(&staging, &dir).map_err(|e| io_err(&dir, e))?;
        let info = state.info(warnings);
        self.datasets.write().unwrap().insert(id, Arc::new(state));
        Ok(info)
    }

    fn slot(&self, id: &str) -> ServiceResult<Arc<SessionSlot>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("unknown session {id}")).with_ids(vec![id.into()]))
    }

    pub fn session(&self, id: &str) -> ServiceResult<Session> {
        Ok(self.slot(id)?.session.read().unwrap().clone())
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.read().unwrap().keys().cloned().collect()
    }

    fn insert_session(&self, event: Event) -> ServiceResult<Session> {
        let session = Session::from_event(&event)?;
        append_events(&self.session_log(&session.id), &[event])?;
        let slot = SessionSlot { session: RwLock::new(session.clone()), tuned: Mutex::new(None) };
        self.sessions.write().unwrap().insert(session.id.clone(), Arc::new(slot));
        Ok(session)
    }

    fn next_session_id(&self) -> String {
        format!("s{:06}", self.next_session.fetch_add(1, Ordering::SeqCst))
    }

    /// Creates a session and runs query-aware then core-set selection on the
    /// dataset's training pool.
    pub fn create_session(&self, req: CreateSession) -> ServiceResult<Session> {
        let ds = self.dataset(&req.dataset_id)?;
        if req.query_ids.is_empty() {
            return Err(ServiceError::invalid("query_ids", "at least one query id is required"));
        }
        let unknown: Vec<String> =
            req.query_ids.iter().filter(|id| ds.dataset.get(id).is_none()).cloned().collect();
        if !unknown.is_empty() {
            return Err(ServiceError::not_found(format!(
                "unknown video(s) in dataset {}: {}",
                req.dataset_id,
                unknown.join(", ")
            ))
            .with_ids(unknown));
        }
        let queries: Vec<&VideoFeatures> = req.query_ids.iter().map(|id| &ds.dataset.get(id).unwrap().video).collect();
        let cfg = req.selection_config.unwrap_or_default();
        let min_persons = queries.iter().map(|q| q.persons).min().unwrap_or(0);
        cfg.validate(queries.len(), min_persons, ds.pool.len())
            .map_err(|e| ServiceError::from_core("selection_config", e))?;
        let selection = select(&queries, &ds.pool_gafs, &ds.params, &cfg)
            .map_err(|e| ServiceError::from_core("selection_config", e))?;
        let ids = ds.pool_ids();
        let scores = &selection.query_aware.scores;
        let candidates = selection
            .query_aware
            .extra
            .iter()
            .map(|&j| CandidateScores {
                id: ids[j].to_string(),
                s: (0..queries.len()).map(|k| scores.s.get(k, j)).collect(),
                v: (0..queries.len()).map(|k| scores.v.get(k, j)).collect(),
                i: (0..queries.len()).map(|k| scores.i.get(k, j)).collect(),
            })
            .collect();
        self.insert_session(Event::Created {
            id: self.next_session_id(),
            dataset_id: req.dataset_id,
            query_ids: req.query_ids,
            selection_config: cfg,
            selected_ids: selection.selected.iter().map(|&j| ids[j].to_string()).collect(),
            candidates,
            cloned_from: None,
        })
    }

    pub fn selection(&self, id: &str) -> ServiceResult<SelectionView> {
        let s = self.session(id)?;
        Ok(SelectionView {
            session_id: s.id,
            query_ids: s.query_ids,
            selected_ids: s.selected_ids,
            candidates: s.candidates,
        })
    }

    /// Validates `event` against the session, appends it to the log and
    /// applies it, all under the session's write lock.
    fn commit(&self, slot: &SessionSlot, event: Event) -> ServiceResult<Session> {
        let mut session = slot.session.write().unwrap();
        let mut next = session.clone();
        next.apply(&event)?;
        append_events(&self.session_log(&next.id), &[event])?;
        *session = next;
        Ok(session.clone())
    }

    pub fn annotate(&self, id: &str, annotations: Vec<Annotation>) -> ServiceResult<Session> {
        let slot = self.slot(id)?;
        self.commit(&slot, Event::Annotated { annotations })
    }

    /// Moves the session to `finetuning` and returns the job to run. Only
    /// one job per session can be running.
    pub fn start_finetune(&self, id: &str, config: Option<FinetuneConfig>) -> ServiceResult<JobTicket> {
        let config = config.unwrap_or_else(|| self.defaults.finetune.clone());
        config.validate().map_err(|e| ServiceError::from_core("finetune", e))?;
        let slot = self.slot(id)?;
        let job_id = format!("{id}-ft{}", slot.session.read().unwrap().jobs.len() + 1);
        let session = self.commit(&slot, Event::FinetuneStarted { job_id: job_id.clone(), config: config.clone() })?;
        debug_assert_eq!(session.state, SessionState::Finetuning);
        self.jobs.write().unwrap().insert(job_id.clone(), id.to_string());
        Ok(JobTicket { session_id: id.to_string(), job_id, config })
    }

    /// Runs a started job to completion and records the outcome.
    pub fn run_job(&self, ticket: &JobTicket) -> ServiceResult<JobView> {
        let slot = self.slot(&ticket.session_id)?;
        let outcome = self.compute_finetune(&slot, ticket);
        let event = match outcome {
            Ok((tuned, report)) => {
                *slot.tuned.lock().unwrap() = Some(Arc::new(tuned));
                Event::FinetuneSucceeded { job_id: ticket.job_id.clone(), report }
            }
            Err(e) => {
                log::warn!("job {} failed: {}", ticket.job_id, e.message);
                Event::FinetuneFailed { job_id: ticket.job_id.clone(), error: e.message }
            }
        };
        self.commit(&slot, event)?;
        self.job(&ticket.job_id)
    }

    fn compute_finetune(&self, slot: &SessionSlot, ticket: &JobTicket) -> ServiceResult<(Tuned, gafl_core::LossReport)> {
        let session = slot.session.read().unwrap().clone();
        let ds = self.dataset(&session.dataset_id)?;
        let video = |id: &str| ds.dataset.video(id).map_err(|e| ServiceError::from_core("session", e));
        let queries = session.query_ids.iter().map(|q| video(q)).collect::<ServiceResult<Vec<_>>>()?;
        let mut selected = Vec::with_capacity(session.selected_ids.len());
        for id in &session.selected_ids {
            let label = *session.labels.get(id).ok_or_else(|| ServiceError::conflict(format!("{id} is unlabeled")))?;
            selected.push((video(id)?, label));
        }
        let inputs = FinetuneInputs { queries, selected };
        let (params, report) =
            finetune(&inputs, &ds.params, &ticket.config).map_err(|e| ServiceError::from_core("finetune", e))?;
        let path = self.session_params(&session.id);
        crate::format::save_params(&params, None, None, &path).map_err(|e| io_err(&path, e))?;
        let pool_gafs = encode_all(ds.pool.iter().map(|&k| &ds.dataset.entries[k].video), &params)
            .map_err(|e| ServiceError::from_core("finetune", e))?;
        Ok((Tuned { params, pool_gafs }, report))
    }

    pub fn job(&self, job_id: &str) -> ServiceResult<JobView> {
        let session_id = self
            .jobs
            .read()
            .unwrap()
            .get(job_id)
            .cloned()
            .ok_or_else(|| ServiceError::not_found(format!("unknown job {job_id}")).with_ids(vec![job_id.into()]))?;
        let session = self.session(&session_id)?;
        let job = session
            .jobs
            .into_iter()
            .find(|j| j.job_id == job_id)
            .ok_or_else(|| ServiceError::internal(format!("job {job_id} missing from session {session_id}")))?;
        Ok(JobView { session_id, job })
    }

    fn tuned(&self, slot: &SessionSlot, session: &Session, ds: &DatasetState) -> ServiceResult<Arc<Tuned>> {
        let mut cache = slot.tuned.lock().unwrap();
        if let Some(t) = cache.as_ref() {
            return Ok(t.clone());
        }
        let path = self.session_params(&session.id);
        let params = crate::format::load_params(&path).map_err(|e| io_err(&path, e))?;
        let pool_gafs = encode_all(ds.pool.iter().map(|&k| &ds.dataset.entries[k].video), &params)
            .map_err(|e| ServiceError::from_core("finetune", e))?;
        let t = Arc::new(Tuned { params, pool_gafs });
        *cache = Some(t.clone());
        Ok(t)
    }

    /// Fine-tuned parameters of a ready session.
    pub fn finetuned_params(&self, id: &str) -> ServiceResult<EncoderParams> {
        let slot = self.slot(id)?;
        let session = slot.session.read().unwrap().clone();
        if session.state != SessionState::Ready {
            return Err(ServiceError::conflict(format!("session {id} is {:?}, not ready", session.state)));
        }
        let ds = self.dataset(&session.dataset_id)?;
        Ok(self.tuned(&slot, &session, &ds)?.params.clone())
    }

    /// Top-`k` training-pool clips for `query` in the chosen space.
    pub fn retrieval(&self, id: &str, query: &str, k: usize, space: Space) -> ServiceResult<RetrievalView> {
        let slot = self.slot(id)?;
        let session = slot.session.read().unwrap().clone();
        let ds = self.dataset(&session.dataset_id)?;
        let video = ds
            .dataset
            .video(query)
            .map_err(|_| ServiceError::not_found(format!("unknown video {query}")).with_ids(vec![query.into()]))?;
        if k > ds.pool.len() {
            return Err(ServiceError::invalid("k", format!("k = {k} exceeds the pool size {}", ds.pool.len())));
        }
        let tuned;
        let (params, pool) = match space {
            Space::Pretrained => (&ds.params, &ds.pool_gafs),
            Space::Finetuned => {
                if session.state != SessionState::Ready {
                    return Err(ServiceError::conflict(format!(
                        "session {id} is {:?}; the fine-tuned space needs a ready session",
                        session.state
                    )));
                }
                tuned = self.tuned(&slot, &session, &ds)?;
                (&tuned.params, &tuned.pool_gafs)
            }
        };
        let q = encode_gaf(video, params, &MaskPattern::none()).map_err(|e| ServiceError::from_core("query", e))?;
        let ids = ds.pool_ids();
        let ranked = retrieve_topk(&q, &ids, pool, k).map_err(|e| ServiceError::from_core("k", e))?;
        let results = ranked
            .iter()
            .enumerate()
            .map(|(r, x)| RankedVideo {
                rank: r + 1,
                id: ids[x.index].to_string(),
                score: x.score,
                class: ds.pool_video(x.index).class_label.clone(),
            })
            .collect();
        Ok(RetrievalView { session_id: id.into(), query: query.into(), space, k, results })
    }

    /// Per-frame positions of a clip. `dataset` is required when the id
    /// exists in several datasets.
    pub fn schematic(&self, video_id: &str, dataset: Option<&str>) -> ServiceResult<Schematic> {
        let candidates: Vec<Arc<DatasetState>> = match dataset {
            Some(d) => vec![self.dataset(d)?],
            None => self.datasets.read().unwrap().values().filter(|d| d.dataset.get(video_id).is_some()).cloned().collect(),
        };
        let ds = match candidates.as_slice() {
            [one] => one,
            [] => return Err(ServiceError::not_found(format!("unknown video {video_id}")).with_ids(vec![video_id.into()])),
            _ => {
                return Err(ServiceError::invalid(
                    "dataset",
                    format!("video {video_id} exists in several datasets; pass ?dataset="),
                ))
            }
        };
        let entry = ds
            .dataset
            .get(video_id)
            .ok_or_else(|| ServiceError::not_found(format!("unknown video {video_id}")).with_ids(vec![video_id.into()]))?;
        let v = &entry.video;
        Ok(Schematic {
            id: v.id.clone(),
            dataset_id: ds.dataset.id.clone(),
            split: entry.split,
            class: v.class_label.clone(),
            frames: v.frames,
            persons: v.persons,
            positions: (0..v.frames).map(|t| (0..v.persons).map(|i| v.position_at(t, i)).collect()).collect(),
        })
    }

    /// A new session with the same queries, selection and votes, ready for
    /// further annotation.
    pub fn clone_session(&self, id: &str) -> ServiceResult<Session> {
        let source = self.session(id)?;
        let created = Event::Created {
            id: self.next_session_id(),
            dataset_id: source.dataset_id.clone(),
            query_ids: source.query_ids.clone(),
            selection_config: source.selection_config.clone(),
            selected_ids: source.selected_ids.clone(),
            candidates: source.candidates.clone(),
            cloned_from: Some(source.id.clone()),
        };
        let annotations = source.vote_annotations();
        let mut session = Session::from_event(&created)?;
        let mut events = vec![created];
        if !annotations.is_empty() {
            let ev = Event::Annotated { annotations };
            session.apply(&ev)?;
            events.push(ev);
        }
        append_events(&self.session_log(&session.id), &events)?;
        let slot = SessionSlot { session: RwLock::new(session.clone()), tuned: Mutex::new(None) };
        self.sessions.write().unwrap().insert(session.id.clone(), Arc::new(slot));
        Ok(session)
    }
}
