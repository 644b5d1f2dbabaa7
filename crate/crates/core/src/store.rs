//! File-backed cohort store.
//!
//! Layout under the data root:
//!
//! ```text
//! studies/<study_id>/<rater_id>.ann
//! images/<study_id>.(tiff|tif|png)
//! ```
//!
//! Each stored annotation carries a `revision` counter. Writes go through
//! [`Store::put`], which checks the caller's expected revision under a
//! per-study lock and replaces the file atomically.

use std::collections::{BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::View;
use crate::dataset::{decode_record, encode_record, is_valid_id, AnnotationRecord, DatasetError};

const IMAGE_EXTENSIONS: [&str; 3] = ["tiff", "tif", "png"];

/// Lumbosacral crops of rater `R` are stored under rater id `R.ls`.
pub const LUMBOSACRAL_SUFFIX: &str = ".ls";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("data dir {0} is not a readable directory")]
    DataDir(PathBuf),
    #[error("study {0} not found")]
    StudyNotFound(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("revision conflict: expected {expected}, current {current}")]
    RevisionConflict { expected: u64, current: u64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRevision {
    pub revision: u64,
    pub record: AnnotationRecord,
}

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        if !root.is_dir() || fs::read_dir(&root).is_err() {
            return Err(StoreError::DataDir(root));
        }
        Ok(Store { root, locks: Mutex::new(HashMap::new()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn study_dir(&self, study: &str) -> PathBuf {
        self.root.join("studies").join(study)
    }

    fn annotation_path(&self, study: &str, rater: &str) -> PathBuf {
        self.study_dir(study).join(format!("{rater}.ann"))
    }

    fn check_id(id: &str) -> Result<(), StoreError> {
        if is_valid_id(id) {
            Ok(())
        } else {
            Err(StoreError::InvalidId(id.to_string()))
        }
    }

    /// Studies with an annotation directory or an image, sorted.
    pub fn study_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = BTreeSet::new();
        let studies = self.root.join("studies");
        if studies.is_dir() {
            for entry in fs::read_dir(&studies).map_err(io_err(&studies))? {
                let entry = entry.map_err(io_err(&studies))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if entry.path().is_dir() && is_valid_id(&name) {
                    ids.insert(name);
                }
            }
        }
        let images = self.root.join("images");
        if images.is_dir() {
            for entry in fs::read_dir(&images).map_err(io_err(&images))? {
                let path = entry.map_err(io_err(&images))?.path();
                let is_image = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
                if let (true, Some(stem)) = (is_image, path.file_stem()) {
                    let stem = stem.to_string_lossy().into_owned();
                    if is_valid_id(&stem) {
                        ids.insert(stem);
                    }
                }
            }
        }
        Ok(ids.into_iter().collect())
    }

    pub fn study_exists(&self, study: &str) -> bool {
        is_valid_id(study) && (self.study_dir(study).is_dir() || self.image_path(study).is_some())
    }

    pub fn image_path(&self, study: &str) -> Option<PathBuf> {
        if !is_valid_id(study) {
            return None;
        }
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.root.join("images").join(format!("{study}.{ext}")))
            .find(|p| p.is_file())
    }

    pub fn rater_ids(&self, study: &str) -> Result<Vec<String>, StoreError> {
        Self::check_id(study)?;
        let dir = self.study_dir(study);
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut raters = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.extension().is_some_and(|e| e == "ann") {
                if let Some(stem) = path.file_stem() {
                    raters.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        raters.sort();
        Ok(raters)
    }

    /// Current annotation for `(study, rater)`. Files written outside the
    /// store have no revision field and count as revision 1.
    pub fn load(&self, study: &str, rater: &str) -> Result<Option<AnnotationRevision>, StoreError> {
        Self::check_id(study)?;
        Self::check_id(rater)?;
        let path = self.annotation_path(study, rater);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path)(e)),
        };
        let (record, revision) = decode_record(&text, &path)?;
        Ok(Some(AnnotationRevision { revision: revision.unwrap_or(1), record }))
    }

    fn study_lock(&self, study: &str) -> Arc<Mutex<()>> {
        self.locks.lock().entry(study.to_string()).or_default().clone()
    }

    /// Writes `record` if the stored revision equals `expected_revision`
    /// (0 for a first write) and returns the new revision.
    pub fn put(
        &self,
        study: &str,
        rater: &str,
        record: &AnnotationRecord,
        expected_revision: u64,
    ) -> Result<u64, StoreError> {
        Self::check_id(study)?;
        Self::check_id(rater)?;
        if !self.study_exists(study) {
            return Err(StoreError::StudyNotFound(study.to_string()));
        }
        let mut failures = record.check();
        if record.study_id != study {
            failures.push(format!("study_id {:?} does not match path {study:?}", record.study_id));
        }
        let sibling = record.view() == View::Lumbosacral
            && rater.strip_suffix(LUMBOSACRAL_SUFFIX) == Some(record.rater_id.as_str());
        if record.rater_id != rater && !sibling {
            failures.push(format!("rater_id {:?} does not match path {rater:?}", record.rater_id));
        }
        if !failures.is_empty() {
            return Err(DatasetError::InvariantViolation(failures).into());
        }

        let lock = self.study_lock(study);
        let _guard = lock.lock();
        let current = self.load(study, rater)?.map_or(0, |r| r.revision);
        if current != expected_revision {
            return Err(StoreError::RevisionConflict { expected: expected_revision, current });
        }
        let next = current + 1;
        let dir = self.study_dir(study);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = self.annotation_path(study, rater);
        write_atomic(&path, encode_record(record, Some(next)).as_bytes())?;
        Ok(next)
    }

    /// Every stored annotation by `rater`, ordered by study id. Studies
    /// without one are skipped.
    pub fn cohort(&self, rater: &str) -> Result<Vec<AnnotationRecord>, StoreError> {
        let mut out = Vec::new();
        for study in self.study_ids()? {
            if let Some(rev) = self.load(&study, rater)? {
                out.push(rev.record);
            }
        }
        Ok(out)
    }

    /// `rater`'s annotations followed by its lumbosacral crops.
    pub fn cohort_with_lumbosacral(&self, rater: &str) -> Result<Vec<AnnotationRecord>, StoreError> {
        let mut out = self.cohort(rater)?;
        out.extend(self.cohort(&format!("{rater}{LUMBOSACRAL_SUFFIX}"))?);
        Ok(out)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("ann.tmp");
    {
        let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
        file.write_all(bytes).map_err(io_err(&tmp))?;
        file.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        if let Ok(dir) = File::open(parent) {
            let _ = dir.sync_all();
        }
    }
    Ok(())
}
