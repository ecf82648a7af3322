//! Append-only run store: one record file per stage, a resumable manifest,
//! a diagnostics log and a cache subdirectory.
//!
//! Record files are line-delimited JSON with a header line carrying the
//! schema version. Appends are atomic per batch and always newline-
//! terminated, so a reader treats a missing trailing newline as an
//! uncommitted partial record and skips it. Content-addressed record keys
//! make re-appending a completed stage a no-op.

use std::any::Any;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::TokenLedger;
use crate::model::{
    AnswerRecord, ClaimRecord, ContradictionRecord, CorrectnessLabel, EntailmentRecord,
    QuestionRecord, RunArtifacts, SampledResponse, ScoreVector, SupportRecord, TopicItem,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),
    #[error("corrupt record file {path}: {message}")]
    CorruptFile { path: String, message: String },
    #[error("run config mismatch on resume; pass the override flag to proceed ({0})")]
    ConfigMismatch(String),
    #[error("stage {0} has no records yet")]
    MissingStage(String),
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Record file kinds, one per stage output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordKind {
    Topics,
    Responses,
    Claims,
    Questions,
    Answers,
    Contradictions,
    Entailments,
    Supports,
    Labels,
    Scores,
}

impl RecordKind {
    pub fn file_name(&self) -> &'static str {
        match self {
            RecordKind::Topics => "topics.jsonl",
            RecordKind::Responses => "responses.jsonl",
            RecordKind::Claims => "claims.jsonl",
            RecordKind::Questions => "questions.jsonl",
            RecordKind::Answers => "answers.jsonl",
            RecordKind::Contradictions => "contradictions.jsonl",
            RecordKind::Entailments => "entailments.jsonl",
            RecordKind::Supports => "supports.jsonl",
            RecordKind::Labels => "labels.jsonl",
            RecordKind::Scores => "scores.jsonl",
        }
    }

    pub fn stage_name(&self) -> &'static str {
        match self {
            RecordKind::Topics => "topics",
            RecordKind::Responses => "responses",
            RecordKind::Claims => "claims",
            RecordKind::Questions => "questions",
            RecordKind::Answers => "answers",
            RecordKind::Contradictions => "contradictions",
            RecordKind::Entailments => "entailments",
            RecordKind::Supports => "supports",
            RecordKind::Labels => "labels",
            RecordKind::Scores => "scores",
        }
    }
}

/// A record type that knows its stage file and dedup key.
pub trait StoreRecord: Serialize + DeserializeOwned + Clone + Send + Sync + 'static {
    const KIND: RecordKind;
    fn store_key(&self) -> String;
}

impl StoreRecord for TopicItem {
    const KIND: RecordKind = RecordKind::Topics;
    fn store_key(&self) -> String {
        self.topic_id.clone()
    }
}

impl StoreRecord for SampledResponse {
    const KIND: RecordKind = RecordKind::Responses;
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoreRecord for ClaimRecord {
    const KIND: RecordKind = RecordKind::Claims;
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoreRecord for QuestionRecord {
    const KIND: RecordKind = RecordKind::Questions;
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoreRecord for AnswerRecord {
    const KIND: RecordKind = RecordKind::Answers;
    fn store_key(&self) -> String {
        self.id.clone()
    }
}

impl StoreRecord for ContradictionRecord {
    const KIND: RecordKind = RecordKind::Contradictions;
    fn store_key(&self) -> String {
        format!("{}|{}", self.answer_id, self.direction.as_str())
    }
}

impl StoreRecord for EntailmentRecord {
    const KIND: RecordKind = RecordKind::Entailments;
    fn store_key(&self) -> String {
        format!("{}|{}", self.claim_id, self.response_id)
    }
}

impl StoreRecord for SupportRecord {
    const KIND: RecordKind = RecordKind::Supports;
    fn store_key(&self) -> String {
        format!("{}|{}", self.claim_id, self.response_id)
    }
}

impl StoreRecord for CorrectnessLabel {
    const KIND: RecordKind = RecordKind::Labels;
    fn store_key(&self) -> String {
        self.claim_id.clone()
    }
}

impl StoreRecord for ScoreVector {
    const KIND: RecordKind = RecordKind::Scores;
    fn store_key(&self) -> String {
        self.claim_id.clone()
    }
}

/// Pipeline stages tracked by the manifest, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Generation,
    Decomposition,
    Questions,
    Answers,
    Contradiction,
    ContradictionRev,
    Entailment,
    Support,
    Labeling,
    Scoring,
}

impl PipelineStage {
    pub const ORDER: [PipelineStage; 10] = [
        PipelineStage::Generation,
        PipelineStage::Decomposition,
        PipelineStage::Questions,
        PipelineStage::Answers,
        PipelineStage::Contradiction,
        PipelineStage::ContradictionRev,
        PipelineStage::Entailment,
        PipelineStage::Support,
        PipelineStage::Labeling,
        PipelineStage::Scoring,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PipelineStage::Generation => "generation",
            PipelineStage::Decomposition => "decomposition",
            PipelineStage::Questions => "questions",
            PipelineStage::Answers => "answers",
            PipelineStage::Contradiction => "contradiction",
            PipelineStage::ContradictionRev => "contradiction-rev",
            PipelineStage::Entailment => "entailment",
            PipelineStage::Support => "support",
            PipelineStage::Labeling => "labeling",
            PipelineStage::Scoring => "scoring",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Complete,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TopicStatus {
    #[serde(default)]
    pub stages: BTreeMap<PipelineStage, StageStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Persisted, resumable record of a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub schema_version: u32,
    /// Opaque snapshot of the run configuration; resuming with a different
    /// snapshot is refused unless explicitly overridden.
    pub config: serde_json::Value,
    #[serde(default)]
    pub topics: BTreeMap<String, TopicStatus>,
    #[serde(default)]
    pub ledger: TokenLedger,
    /// Largest claim count seen in any single response (k is unbounded).
    #[serde(default)]
    pub max_claims_per_response: u32,
    pub created_unix: u64,
    pub updated_unix: u64,
}

impl RunManifest {
    pub fn status(&self, topic_id: &str, stage: PipelineStage) -> StageStatus {
        self.topics
            .get(topic_id)
            .and_then(|t| t.stages.get(&stage).copied())
            .unwrap_or(StageStatus::Pending)
    }

    pub fn set_status(&mut self, topic_id: &str, stage: PipelineStage, status: StageStatus) {
        self.topics
            .entry(topic_id.to_string())
            .or_default()
            .stages
            .insert(stage, status);
    }

    pub fn topic_skipped(&self, topic_id: &str) -> bool {
        self.topics
            .get(topic_id)
            .map(|t| t.stages.values().any(|s| *s == StageStatus::Skipped))
            .unwrap_or(false)
    }

    /// Manifest invariant: within the active stage list, a stage may be
    /// complete only if all prior stages are complete (or the topic skipped).
    pub fn check_stage_order(&self, active: &[PipelineStage]) -> Vec<String> {
        let mut problems = Vec::new();
        for (topic_id, status) in &self.topics {
            if self.topic_skipped(topic_id) {
                continue;
            }
            let mut prior_complete = true;
            for stage in active {
                let s = status.stages.get(stage).copied().unwrap_or(StageStatus::Pending);
                if s == StageStatus::Complete && !prior_complete {
                    problems.push(format!(
                        "topic {topic_id}: stage {} complete before an earlier stage",
                        stage.name()
                    ));
                }
                prior_complete &= s == StageStatus::Complete;
            }
        }
        problems
    }
}

fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    schema: String,
    version: u32,
    stage: String,
}

/// Handle to a run directory. Single writer per run; any number of
/// concurrent readers.
///
/// Parsed records are cached per kind; the cache stays coherent because
/// all writes go through this handle (single-writer contract). A crashed
/// process reopens the directory with a cold cache and re-reads the files.
pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    seen: HashMap<RecordKind, HashSet<String>>,
    records_cache: RwLock<HashMap<RecordKind, Box<dyn Any + Send + Sync>>>,
    diag_lock: Mutex<()>,
}

impl std::fmt::Debug for RunStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunStore")
            .field("dir", &self.dir)
            .field("run_id", &self.manifest.run_id)
            .finish()
    }
}

impl RunStore {
    /// Create a fresh run directory or resume an existing one.
    ///
    /// Resuming with a different config snapshot is refused unless
    /// `override_config` is set, in which case the stored snapshot is
    /// replaced and prior stage statuses are kept.
    pub fn open(
        dir: impl AsRef<Path>,
        run_id: &str,
        config: serde_json::Value,
        override_config: bool,
    ) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join("manifest.json");
        if manifest_path.exists() {
            let mut store = Self::resume(&dir)?;
            if store.manifest.config != config {
                if !override_config {
                    return Err(StoreError::ConfigMismatch(diff_summary(
                        &store.manifest.config,
                        &config,
                    )));
                }
                store.manifest.config = config;
                store.save_manifest()?;
            }
            Ok(store)
        } else {
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            fs::create_dir_all(dir.join("cache")).map_err(|e| io_err(&dir, e))?;
            let now = now_unix();
            let manifest = RunManifest {
                run_id: run_id.to_string(),
                schema_version: SCHEMA_VERSION,
                config,
                topics: BTreeMap::new(),
                ledger: TokenLedger::default(),
                max_claims_per_response: 0,
                created_unix: now,
                updated_unix: now,
            };
            let mut store = Self {
                dir,
                manifest,
                seen: HashMap::new(),
                records_cache: RwLock::new(HashMap::new()),
                diag_lock: Mutex::new(()),
            };
            store.save_manifest()?;
            Ok(store)
        }
    }

    /// Resume an existing run directory as-is.
    pub fn resume(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        let manifest_path = dir.join("manifest.json");
        let bytes = fs::read(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: RunManifest = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::CorruptManifest(describe_manifest_problem(&bytes, e)))?;
        Ok(Self {
            dir,
            manifest,
            seen: HashMap::new(),
            records_cache: RwLock::new(HashMap::new()),
            diag_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.dir.join("cache")
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    /// Persist the manifest atomically.
    pub fn save_manifest(&mut self) -> Result<(), StoreError> {
        self.manifest.updated_unix = now_unix();
        let path = self.dir.join("manifest.json");
        let tmp = self.dir.join("manifest.json.tmp");
        let bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| StoreError::CorruptManifest(e.to_string()))?;
        fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io_err(&path, e))?;
        Ok(())
    }

    /// Append a line to the diagnostics log.
    pub fn diagnostic(&self, context: &str, message: &str) {
        let _guard = self.diag_lock.lock().unwrap();
        let path = self.dir.join("diagnostics.log");
        if let Ok(mut file) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(file, "[{context}] {message}");
        }
    }

    fn record_path(&self, kind: RecordKind) -> PathBuf {
        self.dir.join(kind.file_name())
    }

    fn load_keys<R: StoreRecord>(&mut self) -> Result<(), StoreError> {
        if self.seen.contains_key(&R::KIND) {
            return Ok(());
        }
        let records: Vec<R> = self.read_quiet::<R>()?.0;
        let keys = records.iter().map(|r| r.store_key()).collect();
        self.seen.insert(R::KIND, keys);
        Ok(())
    }

    /// Append records, skipping any whose key is already present.
    ///
    /// The batch is written with a single write call and a trailing newline
    /// per record, so a crash can only ever lose the in-flight batch tail.
    /// Returns the number of records actually appended.
    pub fn append<R: StoreRecord>(&mut self, records: &[R]) -> Result<usize, StoreError> {
        if records.is_empty() {
            return Ok(0);
        }
        self.load_keys::<R>()?;
        let path = self.record_path(R::KIND);
        let mut buffer = String::new();
        if !path.exists() {
            let header = FileHeader {
                schema: "run-store".into(),
                version: SCHEMA_VERSION,
                stage: R::KIND.stage_name().into(),
            };
            buffer.push_str(&serde_json::to_string(&header).expect("header serializes"));
            buffer.push('\n');
        }
        let seen = self.seen.get_mut(&R::KIND).expect("keys loaded");
        let mut appended = 0;
        let mut fresh: Vec<R> = Vec::new();
        for record in records {
            let key = record.store_key();
            if !seen.insert(key) {
                continue;
            }
            let line = serde_json::to_string(record).map_err(|e| StoreError::CorruptFile {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            buffer.push_str(&line);
            buffer.push('\n');
            fresh.push(record.clone());
            appended += 1;
        }
        if !buffer.is_empty() {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            file.write_all(buffer.as_bytes()).map_err(|e| io_err(&path, e))?;
            file.flush().map_err(|e| io_err(&path, e))?;
        }
        if !fresh.is_empty() {
            if let Some(cached) = self.records_cache.write().unwrap().get_mut(&R::KIND) {
                if let Some(records) = cached.downcast_mut::<Vec<R>>() {
                    records.extend(fresh);
                }
            }
        }
        Ok(appended)
    }

    /// Read all records of a kind; a partial trailing line is skipped and
    /// logged to diagnostics.
    pub fn read<R: StoreRecord>(&self) -> Result<Vec<R>, StoreError> {
        let (records, partial) = self.read_quiet::<R>()?;
        if partial {
            self.diagnostic(
                R::KIND.stage_name(),
                "ignored partial trailing line (uncommitted batch tail)",
            );
        }
        Ok(records)
    }

    fn read_quiet<R: StoreRecord>(&self) -> Result<(Vec<R>, bool), StoreError> {
        if let Some(cached) = self.records_cache.read().unwrap().get(&R::KIND) {
            if let Some(records) = cached.downcast_ref::<Vec<R>>() {
                return Ok((records.clone(), false));
            }
        }
        let path = self.record_path(R::KIND);
        if !path.exists() {
            return Ok((Vec::new(), false));
        }
        let content = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let complete = content.ends_with('\n');
        let mut lines: Vec<&str> = content.lines().collect();
        let mut partial = false;
        if !complete && !lines.is_empty() {
            lines.pop();
            partial = true;
        }
        let mut iter = lines.into_iter();
        let header_line = iter.next().ok_or_else(|| StoreError::CorruptFile {
            path: path.display().to_string(),
            message: "missing header line".into(),
        })?;
        let header: FileHeader =
            serde_json::from_str(header_line).map_err(|e| StoreError::CorruptFile {
                path: path.display().to_string(),
                message: format!("bad header: {e}"),
            })?;
        if header.version != SCHEMA_VERSION {
            return Err(StoreError::CorruptFile {
                path: path.display().to_string(),
                message: format!("schema version {} != {}", header.version, SCHEMA_VERSION),
            });
        }
        let mut records = Vec::new();
        for (i, line) in iter.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: R = serde_json::from_str(line).map_err(|e| StoreError::CorruptFile {
                path: path.display().to_string(),
                message: format!("record line {}: {e}", i + 2),
            })?;
            records.push(record);
        }
        self.records_cache
            .write()
            .unwrap()
            .insert(R::KIND, Box::new(records.clone()));
        Ok((records, partial))
    }

    /// Read records filtered by a predicate.
    pub fn read_filtered<R: StoreRecord>(
        &self,
        predicate: impl Fn(&R) -> bool,
    ) -> Result<Vec<R>, StoreError> {
        Ok(self.read::<R>()?.into_iter().filter(|r| predicate(r)).collect())
    }

    /// Load every stage's records for validation or scoring.
    pub fn load_artifacts(&self) -> Result<RunArtifacts, StoreError> {
        Ok(RunArtifacts {
            topics: self.read()?,
            responses: self.read()?,
            claims: self.read()?,
            questions: self.read()?,
            answers: self.read()?,
            contradictions: self.read()?,
            entailments: self.read()?,
            supports: self.read()?,
            labels: self.read()?,
            scores: self.read()?,
        })
    }
}

/// Name which manifest fields are unreadable instead of echoing a bare
/// parser position.
fn describe_manifest_problem(bytes: &[u8], parse_err: serde_json::Error) -> String {
    let value: serde_json::Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => return format!("not valid json: {e}"),
    };
    let object = match value.as_object() {
        Some(o) => o,
        None => return "manifest is not a json object".to_string(),
    };
    let expect: [(&str, fn(&serde_json::Value) -> bool); 5] = [
        ("run_id", serde_json::Value::is_string),
        ("schema_version", serde_json::Value::is_u64),
        ("topics", serde_json::Value::is_object),
        ("created_unix", serde_json::Value::is_u64),
        ("updated_unix", serde_json::Value::is_u64),
    ];
    let mut bad = Vec::new();
    for (field, check) in expect {
        match object.get(field) {
            None => bad.push(format!("{field} (missing)")),
            Some(v) if !check(v) => bad.push(format!("{field} (wrong type)")),
            _ => {}
        }
    }
    if bad.is_empty() {
        format!("unreadable manifest: {parse_err}")
    } else {
        format!("unreadable fields: {}", bad.join(", "))
    }
}

fn diff_summary(old: &serde_json::Value, new: &serde_json::Value) -> String {
    if let (serde_json::Value::Object(a), serde_json::Value::Object(b)) = (old, new) {
        let mut diffs = Vec::new();
        for (key, old_value) in a {
            match b.get(key) {
                Some(new_value) if new_value != old_value => {
                    diffs.push(format!("{key}: {old_value} -> {new_value}"))
                }
                None => diffs.push(format!("{key}: removed")),
                _ => {}
            }
        }
        for key in b.keys() {
            if !a.contains_key(key) {
                diffs.push(format!("{key}: added"));
            }
        }
        if !diffs.is_empty() {
            return diffs.join(", ");
        }
    }
    "config differs".to_string()
}
