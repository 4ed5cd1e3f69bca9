//! One directory per project:
//!
//! ```text
//! <root>/<project_id>/config.json       schema version, name, settings, training config
//! <root>/<project_id>/corpus.jsonl      documents
//! <root>/<project_id>/annotations.json  codes, themes, annotations
//! <root>/<project_id>/model.json        latest published snapshot (absent before training)
//! ```
//!
//! A store opened with [`Storage::single`] is one project directory and
//! holds exactly that project.
//!
//! Every file is replaced by writing a sibling temporary file and renaming
//! it over the original, so a crash leaves either the old or the new file.

use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use themetopic_core::corpus::{ingest_jsonl, write_jsonl};
use themetopic_core::{AnnotationStore, Corpus, CorpusSettings, Snapshot, TrainConfig};

use crate::error::{Result, ServiceError};
use crate::project::ProjectData;

pub const SCHEMA_VERSION: u64 = 1;

const CONFIG: &str = "config.json";
const CORPUS: &str = "corpus.jsonl";
const ANNOTATIONS: &str = "annotations.json";
const MODEL: &str = "model.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigFile {
    schema_version: u64,
    project_id: String,
    name: String,
    #[serde(default)]
    settings: CorpusSettings,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Storage {
    root: PathBuf,
    /// Set when `root` is itself a project directory.
    single: Option<String>,
}

/// A whole project in one JSON document, for moving it between machines.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bundle {
    pub schema_version: u64,
    pub project_id: String,
    pub name: String,
    pub settings: CorpusSettings,
    pub config: TrainConfig,
    /// One raw record per document, as in the import format.
    pub documents: Vec<serde_json::Value>,
    pub annotations: serde_json::Value,
    pub model: Option<serde_json::Value>,
}

impl Bundle {
    pub fn export(project: &ProjectData) -> Result<Self> {
        let mut buf = Vec::new();
        write_jsonl(project.documents(), &mut buf)?;
        let documents = buf
            .split(|&b| b == b'\n')
            .filter(|l| !l.is_empty())
            .map(serde_json::from_slice)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| ServiceError::Storage(e.to_string()))?;
        let to_value = |json: String| {
            serde_json::from_str(&json).map_err(|e| ServiceError::Storage(e.to_string()))
        };
        Ok(Self {
            schema_version: SCHEMA_VERSION,
            project_id: project.project_id.clone(),
            name: project.name.clone(),
            settings: project.settings.clone(),
            config: project.config.clone(),
            documents,
            annotations: to_value(project.annotations.to_json())?,
            model: project.snapshot.as_ref().map(|s| to_value(s.to_json())).transpose()?,
        })
    }

    /// Rebuilds the project, under `project_id` if given.
    pub fn into_project(self, project_id: Option<String>) -> Result<ProjectData> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ServiceError::VersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut jsonl = String::new();
        for doc in &self.documents {
            jsonl.push_str(&doc.to_string());
            jsonl.push('\n');
        }
        let docs = ingest_jsonl(jsonl.as_bytes())?;
        let corpus = if docs.is_empty() {
            None
        } else {
            Some(Arc::new(Corpus::build(docs, self.settings.clone())?))
        };
        let annotations = AnnotationStore::from_json(&self.annotations.to_string())?;
        let snapshot = match self.model {
            Some(m) => Some(Arc::new(
                serde_json::from_value(m).map_err(|e| ServiceError::Validation(format!("model: {e}")))?,
            )),
            None => None,
        };
        Ok(ProjectData {
            project_id: project_id.unwrap_or(self.project_id),
            name: self.name,
            settings: self.settings,
            config: self.config,
            corpus,
            annotations,
            snapshot,
        })
    }
}

/// Ids double as directory names.
pub fn validate_project_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !id.starts_with('-');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::Validation(format!(
            "project id {id:?} must be 1-128 letters, digits, '-' or '_'"
        )))
    }
}

/// Lowercase ASCII letters and digits, other runs of characters as `-`.
pub fn slug(name: &str) -> String {
    let mut out = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let out = out.trim_matches('-');
    if out.is_empty() {
        "project".to_owned()
    } else {
        out.chars().take(128).collect()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)?;
    Ok(())
}

impl Storage {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root, single: None })
    }

    /// Treats `dir` as one project directory. The project id comes from the
    /// stored config, or from the directory name for a new project.
    pub fn single(dir: impl Into<PathBuf>) -> Result<Self> {
        let root = dir.into();
        fs::create_dir_all(&root)?;
        let config = root.join(CONFIG);
        let id = if config.is_file() {
            let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(&config)?)
                .map_err(|e| ServiceError::Storage(format!("{CONFIG}: {e}")))?;
            value
                .get("project_id")
                .and_then(|v| v.as_str())
                .map(str::to_owned)
                .ok_or_else(|| ServiceError::Storage(format!("{CONFIG}: missing project_id")))?
        } else {
            let name = root
                .canonicalize()?
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            slug(&name)
        };
        validate_project_id(&id)?;
        Ok(Self { root, single: Some(id) })
    }

    /// The project id of a single-project store.
    pub fn single_id(&self) -> Option<&str> {
        self.single.as_deref()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, project_id: &str) -> PathBuf {
        match &self.single {
            Some(_) => self.root.clone(),
            None => self.root.join(project_id),
        }
    }

    pub fn exists(&self, project_id: &str) -> bool {
        self.project_dir(project_id).join(CONFIG).is_file()
    }

    /// Ids of every stored project, sorted.
    pub fn list(&self) -> Result<Vec<String>> {
        if let Some(id) = &self.single {
            return Ok(if self.exists(id) { vec![id.clone()] } else { vec![] });
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            if entry.path().join(CONFIG).is_file() {
                if let Some(name) = entry.file_name().to_str() {
                    ids.push(name.to_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn dir(&self, project_id: &str) -> Result<PathBuf> {
        validate_project_id(project_id)?;
        self.check_single(project_id)?;
        let dir = self.project_dir(project_id);
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    pub fn save(&self, project: &ProjectData) -> Result<()> {
        self.save_corpus(project)?;
        self.save_annotations(project)?;
        match &project.snapshot {
            Some(s) => self.save_snapshot(&project.project_id, s)?,
            None => {
                let stale = self.project_dir(&project.project_id).join(MODEL);
                if stale.exists() {
                    fs::remove_file(stale)?;
                }
            }
        }
        // written last: a directory without config.json is not a project yet
        self.save_config(project)
    }

    pub fn save_config(&self, project: &ProjectData) -> Result<()> {
        let file = ConfigFile {
            schema_version: SCHEMA_VERSION,
            project_id: project.project_id.clone(),
            name: project.name.clone(),
            settings: project.settings.clone(),
            train: project.config.clone(),
        };
        let json = serde_json::to_vec_pretty(&file).map_err(|e| ServiceError::Storage(e.to_string()))?;
        write_atomic(&self.dir(&project.project_id)?.join(CONFIG), &json)
    }

    pub fn save_corpus(&self, project: &ProjectData) -> Result<()> {
        let mut buf = Vec::new();
        if let Some(c) = &project.corpus {
            write_jsonl(&c.documents, &mut buf)?;
        }
        write_atomic(&self.dir(&project.project_id)?.join(CORPUS), &buf)
    }

    pub fn save_annotations(&self, project: &ProjectData) -> Result<()> {
        let json = project.annotations.to_json();
        write_atomic(&self.dir(&project.project_id)?.join(ANNOTATIONS), json.as_bytes())
    }

    pub fn save_snapshot(&self, project_id: &str, snapshot: &Snapshot) -> Result<()> {
        write_atomic(&self.dir(project_id)?.join(MODEL), snapshot.to_json().as_bytes())
    }

    fn check_single(&self, project_id: &str) -> Result<()> {
        match &self.single {
            Some(id) if id != project_id => Err(ServiceError::Validation(format!(
                "{} holds only project {id}",
                self.root.display()
            ))),
            _ => Ok(()),
        }
    }

    pub fn load(&self, project_id: &str) -> Result<ProjectData> {
        validate_project_id(project_id)?;
        if self.single.as_deref().is_some_and(|id| id != project_id) {
            return Err(ServiceError::NotFound(format!("project {project_id}")));
        }
        let dir = self.project_dir(project_id);
        let config_path = dir.join(CONFIG);
        if !config_path.is_file() {
            return Err(ServiceError::NotFound(format!("project {project_id}")));
        }
        let raw = fs::read_to_string(&config_path)?;
        let value: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| ServiceError::Storage(format!("{CONFIG}: {e}")))?;
        let found = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .unwrap_or(0);
        if found != SCHEMA_VERSION {
            return Err(ServiceError::VersionMismatch {
                found,
                expected: SCHEMA_VERSION,
            });
        }
        let config: ConfigFile =
            serde_json::from_value(value).map_err(|e| ServiceError::Storage(format!("{CONFIG}: {e}")))?;

        let corpus_path = dir.join(CORPUS);
        let docs = if corpus_path.is_file() {
            let file = fs::File::open(&corpus_path)?;
            ingest_jsonl(BufReader::new(file)).map_err(|e| ServiceError::Storage(format!("{CORPUS}: {e}")))?
        } else {
            Vec::new()
        };
        let corpus = if docs.is_empty() {
            None
        } else {
            Some(Arc::new(
                Corpus::build(docs, config.settings.clone())
                    .map_err(|e| ServiceError::Storage(format!("{CORPUS}: {e}")))?,
            ))
        };

        let annotations_path = dir.join(ANNOTATIONS);
        let annotations = if annotations_path.is_file() {
            AnnotationStore::from_json(&fs::read_to_string(&annotations_path)?)
                .map_err(|e| ServiceError::Storage(format!("{ANNOTATIONS}: {e}")))?
        } else {
            AnnotationStore::new()
        };

        let model_path = dir.join(MODEL);
        let snapshot = if model_path.is_file() {
            let snap = Snapshot::from_json(&fs::read_to_string(&model_path)?)
                .map_err(|e| ServiceError::Storage(format!("{MODEL}: {e}")))?;
            Some(Arc::new(snap))
        } else {
            None
        };

        Ok(ProjectData {
            project_id: config.project_id,
            name: config.name,
            settings: config.settings,
            config: config.train,
            corpus,
            annotations,
            snapshot,
        })
    }
}
