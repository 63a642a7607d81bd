//! Event-sourced study state. Each study owns an append-only JSONL log in
//! the data directory; every event is fsynced before the caller is
//! acknowledged, and state is rebuilt on startup by replaying the logs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use genclass::data::Annotation;
use genclass::evaluation::{confidence_confusion_matrix, majority_vote, pairwise_levels, turing_metrics, Judgment};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, ServiceError};
use crate::model::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    StudyCreated {
        spec: StudySpec,
    },
    SessionCreated {
        rater_id: String,
        #[serde(default)]
        seniority_years: Option<f64>,
    },
    Judgment {
        rater_id: String,
        record: AnnotationRecord,
        received_ms: u64,
    },
    StudyClosed,
}

#[derive(Debug, Clone, PartialEq)]
struct Session {
    order: Vec<usize>,
    answers: Vec<AnnotationRecord>,
    seniority_years: Option<f64>,
}

#[derive(Debug)]
struct StudyState {
    spec: StudySpec,
    index: HashMap<String, usize>,
    sessions: BTreeMap<String, Session>,
    closed: bool,
    log: File,
}

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    h.finalize().into()
}

/// Opaque session token for a (study, rater) pair.
pub fn session_token(study_id: &str, rater_id: &str) -> String {
    hex::encode(&digest(&["token", study_id, rater_id])[..16])
}

/// Item presentation order for a rater, reproducible from the ids.
pub fn item_order(study_id: &str, rater_id: &str, n: usize) -> Vec<usize> {
    let d = digest(&["order", study_id, rater_id]);
    let mut rng = ChaCha8Rng::from_seed(d);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.')
}

impl StudyState {
    fn new(spec: StudySpec, log: File) -> Self {
        let index = spec
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.item_id.clone(), i))
            .collect();
        Self {
            spec,
            index,
            sessions: BTreeMap::new(),
            closed: false,
            log,
        }
    }

    fn append(&mut self, ev: &Event) -> Result<()> {
        let mut line = serde_json::to_vec(ev)?;
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()?;
        Ok(())
    }

    /// Applies an event that has already been validated (live) or read
    /// from the log (replay).
    fn apply(&mut self, ev: Event) -> Result<()> {
        match ev {
            Event::StudyCreated { .. } => {
                return Err(ServiceError::Invalid("duplicate study_created event".into()));
            }
            Event::SessionCreated {
                rater_id,
                seniority_years,
            } => {
                let n = self.spec.items.len();
                let order = item_order(&self.spec.study_id, &rater_id, n);
                self.sessions.entry(rater_id).or_insert(Session {
                    order,
                    answers: Vec::new(),
                    seniority_years,
                });
            }
            Event::Judgment { rater_id, record, .. } => {
                let s = self
                    .sessions
                    .get_mut(&rater_id)
                    .ok_or_else(|| ServiceError::Invalid(format!("judgment for unknown rater {rater_id}")))?;
                s.answers.push(record);
            }
            Event::StudyClosed => self.closed = true,
        }
        Ok(())
    }

    fn validate_record(&self, rec: &AnnotationRecord) -> Result<()> {
        if !self.index.contains_key(&rec.item_id) {
            return Err(ServiceError::Invalid(format!("unknown item {:?}", rec.item_id)));
        }
        if !self.spec.classes.contains(&rec.guessed_class) {
            return Err(ServiceError::Invalid(format!("unknown class {:?}", rec.guessed_class)));
        }
        match self.spec.mode {
            StudyMode::Turing if rec.guessed_real.is_none() => {
                Err(ServiceError::Invalid("turing judgments need guessed_real".into()))
            }
            StudyMode::Labelling if rec.confidence.is_none() => {
                Err(ServiceError::Invalid("labelling judgments need a confidence level".into()))
            }
            _ => Ok(()),
        }
    }

    fn next(&self, rater_id: &str) -> NextItem {
        let s = &self.sessions[rater_id];
        let total = s.order.len();
        let position = s.answers.len();
        let item = s.order.get(position).map(|&i| self.spec.items[i].item_id.clone());
        NextItem {
            schema_version: SCHEMA_VERSION,
            done: item.is_none(),
            image_url: item.as_ref().map(|id| format!("/items/{id}/image")),
            item_id: item,
            mode: self.spec.mode,
            classes: self.spec.classes.clone(),
            position,
            total,
        }
    }

    fn report(&self) -> Result<StudyReportBody> {
        let n_records: usize = self.sessions.values().map(|s| s.answers.len()).sum();
        if n_records == 0 {
            return Err(ServiceError::NoRecords(self.spec.study_id.clone()));
        }
        match self.spec.mode {
            StudyMode::Turing => {
                let mut js = Vec::with_capacity(n_records);
                for (rater, s) in &self.sessions {
                    for rec in &s.answers {
                        let item = &self.spec.items[self.index[&rec.item_id]];
                        js.push(Judgment {
                            item_id: rec.item_id.clone(),
                            rater_id: Some(rater.clone()),
                            truth_is_real: Some(item.truth_is_real),
                            guessed_real: rec.guessed_real.unwrap_or(false),
                            intended_class: item.intended_class.clone(),
                            guessed_class: Some(rec.guessed_class.clone()),
                        });
                    }
                }
                Ok(StudyReportBody::Turing(turing_metrics(&js)?))
            }
            StudyMode::Labelling => {
                let mut per_item: BTreeMap<&str, Vec<(Annotation, f64)>> = BTreeMap::new();
                for (rater, s) in &self.sessions {
                    for rec in &s.answers {
                        per_item.entry(rec.item_id.as_str()).or_default().push((
                            Annotation {
                                rater_id: rater.clone(),
                                label: rec.guessed_class.clone(),
                                confidence: rec.confidence.expect("validated on submit"),
                            },
                            s.seniority_years.unwrap_or(0.0),
                        ));
                    }
                }
                let mut majority_votes = BTreeMap::new();
                let mut pairs = Vec::new();
                for (item, anns) in &per_item {
                    let labels: Vec<(String, f64)> = anns.iter().map(|(a, y)| (a.label.clone(), *y)).collect();
                    majority_votes.insert(item.to_string(), majority_vote(&labels)?);
                    let a: Vec<Annotation> = anns.iter().map(|(a, _)| a.clone()).collect();
                    pairs.extend(pairwise_levels(&a));
                }
                Ok(StudyReportBody::Labelling(LabellingReport {
                    n_records,
                    majority_votes,
                    confidence_matrix: confidence_confusion_matrix(&pairs),
                }))
            }
        }
    }
}

/// All studies, their sessions and the item image index.
#[derive(Debug)]
pub struct Store {
    data_dir: PathBuf,
    image_root: PathBuf,
    studies: RwLock<BTreeMap<String, Arc<Mutex<StudyState>>>>,
    tokens: RwLock<HashMap<String, (String, String)>>,
    images: RwLock<HashMap<String, PathBuf>>,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Reads a log, dropping (and truncating away) a torn final line.
fn read_log(path: &Path) -> Result<(Vec<Event>, File)> {
    let mut file = OpenOptions::new().read(true).append(true).open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete < bytes.len() {
        log::warn!(
            "{}: dropping torn trailing record ({} bytes)",
            path.display(),
            bytes.len() - complete
        );
        file.set_len(complete as u64)?;
        file.seek(SeekFrom::End(0))?;
        file.sync_data()?;
    }
    let mut events = Vec::new();
    for (i, line) in bytes[..complete].split(|&b| b == b'\n').enumerate() {
        if line.is_empty() {
            continue;
        }
        let ev = serde_json::from_slice(line).map_err(|e| ServiceError::CorruptLog {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(ev);
    }
    Ok((events, file))
}

impl Store {
    /// Opens (creating if needed) a data directory and replays every study
    /// log in it.
    pub fn open(data_dir: impl Into<PathBuf>, image_root: impl Into<PathBuf>) -> Result<Self> {
        let data_dir = data_dir.into();
        fs::create_dir_all(&data_dir)?;
        let store = Self {
            data_dir: data_dir.clone(),
            image_root: image_root.into(),
            studies: RwLock::new(BTreeMap::new()),
            tokens: RwLock::new(HashMap::new()),
            images: RwLock::new(HashMap::new()),
        };
        let mut paths: Vec<PathBuf> = fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let (events, file) = read_log(&path)?;
            let mut it = events.into_iter();
            let Some(Event::StudyCreated { spec }) = it.next() else {
                log::warn!("{}: no study_created header, skipping", path.display());
                continue;
            };
            let mut state = StudyState::new(spec, file);
            for ev in it {
                state.apply(ev)?;
            }
            store.register(state);
        }
        Ok(store)
    }

    fn register(&self, state: StudyState) {
        let id = state.spec.study_id.clone();
        {
            let mut tokens = self.tokens.write().expect("token index");
            for rater in state.sessions.keys() {
                tokens.insert(session_token(&id, rater), (id.clone(), rater.clone()));
            }
            let mut images = self.images.write().expect("image index");
            for it in &state.spec.items {
                images.insert(it.item_id.clone(), self.resolve(&it.image_path));
            }
        }
        self.studies
            .write()
            .expect("study index")
            .insert(id, Arc::new(Mutex::new(state)));
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.image_root.join(p)
        }
    }

    fn study(&self, id: &str) -> Result<Arc<Mutex<StudyState>>> {
        self.studies
            .read()
            .expect("study index")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("study {id}")))
    }

    fn session(&self, token: &str) -> Result<(String, String)> {
        self.tokens
            .read()
            .expect("token index")
            .get(token)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound("session".into()))
    }

    fn validate_spec(&self, spec: &StudySpec) -> Result<()> {
        let bad = |m: String| Err(ServiceError::Invalid(m));
        if !valid_id(&spec.study_id) {
            return bad(format!("invalid study_id {:?}", spec.study_id));
        }
        if spec.items.is_empty() {
            return bad("item pool is empty".into());
        }
        if spec.classes.is_empty() || spec.classes.iter().collect::<HashSet<_>>().len() != spec.classes.len() {
            return bad("classes must be non-empty and unique".into());
        }
        let mut ids = HashSet::new();
        let images = self.images.read().expect("image index");
        for it in &spec.items {
            if !valid_id(&it.item_id) {
                return bad(format!("invalid item_id {:?}", it.item_id));
            }
            if !ids.insert(it.item_id.as_str()) {
                return bad(format!("duplicate item_id {:?}", it.item_id));
            }
            if images.contains_key(&it.item_id) {
                return Err(ServiceError::Conflict(format!("item_id {:?} used by another study", it.item_id)));
            }
            if let Some(c) = &it.intended_class {
                if !spec.classes.contains(c) {
                    return bad(format!("intended_class {c:?} is not a study class"));
                }
            }
            if !self.resolve(&it.image_path).is_file() {
                return bad(format!("image for {:?} not found", it.item_id));
            }
        }
        if spec.mode == StudyMode::Turing {
            let real = spec.items.iter().filter(|i| i.truth_is_real).count();
            if 2 * real != spec.items.len() {
                return bad(format!(
                    "turing pools must be half real: {real} of {} items are real",
                    spec.items.len()
                ));
            }
        }
        Ok(())
    }

    /// Creates a study. Re-posting an identical spec is acknowledged without
    /// a new event; a different spec under the same id is a conflict.
    pub fn create_study(&self, spec: StudySpec) -> Result<StudyCreated> {
        let created = StudyCreated {
            schema_version: SCHEMA_VERSION,
            study_id: spec.study_id.clone(),
            n_items: spec.items.len(),
        };
        if let Ok(existing) = self.study(&spec.study_id) {
            return if lock(&existing).spec == spec {
                Ok(created)
            } else {
                Err(ServiceError::Conflict(format!("study {} exists with a different spec", spec.study_id)))
            };
        }
        self.validate_spec(&spec)?;
        let path = self.data_dir.join(format!("{}.jsonl", spec.study_id));
        let file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        let mut state = StudyState::new(spec.clone(), file);
        state.append(&Event::StudyCreated { spec })?;
        self.register(state);
        Ok(created)
    }

    /// Starts or resumes the session of `req.rater_id`.
    pub fn create_session(&self, study_id: &str, req: SessionRequest) -> Result<SessionInfo> {
        if !valid_id(&req.rater_id) {
            return Err(ServiceError::Invalid(format!("invalid rater_id {:?}", req.rater_id)));
        }
        if let Some(y) = req.seniority_years {
            if !(y.is_finite() && y >= 0.0) {
                return Err(ServiceError::Invalid("seniority_years must be non-negative".into()));
            }
        }
        let study = self.study(study_id)?;
        let mut st = lock(&study);
        if !st.sessions.contains_key(&req.rater_id) {
            if st.closed {
                return Err(ServiceError::StudyClosed(study_id.to_string()));
            }
            let ev = Event::SessionCreated {
                rater_id: req.rater_id.clone(),
                seniority_years: req.seniority_years,
            };
            st.append(&ev)?;
            st.apply(ev)?;
        }
        let token = session_token(study_id, &req.rater_id);
        self.tokens
            .write()
            .expect("token index")
            .insert(token.clone(), (study_id.to_string(), req.rater_id.clone()));
        let s = &st.sessions[&req.rater_id];
        Ok(SessionInfo {
            schema_version: SCHEMA_VERSION,
            token,
            study_id: study_id.to_string(),
            rater_id: req.rater_id.clone(),
            item_order: s.order.iter().map(|&i| st.spec.items[i].item_id.clone()).collect(),
            answered: s.answers.len(),
            total: s.order.len(),
        })
    }

    pub fn next_item(&self, token: &str) -> Result<NextItem> {
        let (study_id, rater) = self.session(token)?;
        let study = self.study(&study_id)?;
        let st = lock(&study);
        Ok(st.next(&rater))
    }

    /// Validates, persists and applies one judgment.
    pub fn submit(&self, token: &str, record: AnnotationRecord) -> Result<JudgmentAck> {
        let (study_id, rater) = self.session(token)?;
        let study = self.study(&study_id)?;
        let mut st = lock(&study);
        st.validate_record(&record)?;
        let (answered, total, expected) = {
            let s = &st.sessions[&rater];
            if let Some(prev) = s.answers.iter().find(|a| a.item_id == record.item_id) {
                return if prev.same_answer(&record) {
                    Ok(JudgmentAck {
                        schema_version: SCHEMA_VERSION,
                        status: AckStatus::Duplicate,
                        answered: s.answers.len(),
                        total: s.order.len(),
                    })
                } else {
                    Err(ServiceError::Conflict(format!(
                        "item {} already answered differently; revisions are not allowed",
                        record.item_id
                    )))
                };
            }
            let expected = s.order.get(s.answers.len()).map(|&i| st.spec.items[i].item_id.clone());
            (s.answers.len(), s.order.len(), expected)
        };
        if st.closed {
            return Err(ServiceError::StudyClosed(study_id));
        }
        match expected {
            Some(e) if e == record.item_id => {}
            Some(e) => {
                return Err(ServiceError::OutOfOrder {
                    expected: e,
                    got: record.item_id,
                })
            }
            None => return Err(ServiceError::Conflict("session already complete".into())),
        }
        let ev = Event::Judgment {
            rater_id: rater,
            record,
            received_ms: now_ms(),
        };
        st.append(&ev)?;
        st.apply(ev)?;
        Ok(JudgmentAck {
            schema_version: SCHEMA_VERSION,
            status: AckStatus::Stored,
            answered: answered + 1,
            total,
        })
    }

    pub fn close(&self, study_id: &str) -> Result<Closed> {
        let study = self.study(study_id)?;
        let mut st = lock(&study);
        if !st.closed {
            st.append(&Event::StudyClosed)?;
            st.apply(Event::StudyClosed)?;
        }
        Ok(Closed {
            schema_version: SCHEMA_VERSION,
            study_id: study_id.to_string(),
            closed: true,
        })
    }

    /// Study report; truth labels are only released once the study is closed.
    pub fn report(&self, study_id: &str) -> Result<StudyReport> {
        let study = self.study(study_id)?;
        let st = lock(&study);
        if !st.closed {
            return Err(ServiceError::StudyOpen(study_id.to_string()));
        }
        Ok(StudyReport {
            schema_version: SCHEMA_VERSION,
            study_id: study_id.to_string(),
            report: st.report()?,
        })
    }

    pub fn image_path(&self, item_id: &str) -> Result<PathBuf> {
        self.images
            .read()
            .expect("image index")
            .get(item_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("item {item_id}")))
    }

    /// Appends a raw event to a study log without touching in-memory state.
    /// Used to simulate a crash between a durable write and the reply.
    #[doc(hidden)]
    pub fn append_unacknowledged(&self, study_id: &str, ev: &Event) -> Result<()> {
        let study = self.study(study_id)?;
        let mut st = lock(&study);
        st.append(ev)
    }

    /// Answered records per rater, in submission order.
    pub fn records(&self, study_id: &str) -> Result<BTreeMap<String, Vec<AnnotationRecord>>> {
        let study = self.study(study_id)?;
        let st = lock(&study);
        Ok(st
            .sessions
            .iter()
            .map(|(r, s)| (r.clone(), s.answers.clone()))
            .collect())
    }

    pub fn log_path(&self, study_id: &str) -> PathBuf {
        self.data_dir.join(format!("{study_id}.jsonl"))
    }
}
