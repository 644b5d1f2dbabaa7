//! Annotation records, their on-disk form, cohort splits and the
//! lumbosacral crop.
//!
//! An annotation file is a pretty-printed JSON document with
//! `schema_version` `"1"`:
//!
//! ```text
//! {
//!   "schema_version": "1",
//!   "study_id": "S001",
//!   "rater_id": "R1",
//!   "source": "HUMAN",
//!   "view": "WHOLE_SPINE",
//!   "image": { "file_path": "images/S001.png", "width_px": 1400,
//!              "height_px": 3600, "pixel_spacing_px_per_mm": 3.73 },
//!   "keypoints": [ { "name": "C7", "x": 612.0, "y": 410.5, "visible": true }, ... ],
//!   "boxes": { "L1": { "x": .., "y": .., "w": .., "h": .. }, "S1": { ... } },
//!   "metadata": { "spinal_instrumentation": false, ... }
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Keypoint, KeypointSet, Landmark, Point, View};

pub const SCHEMA_VERSION: &str = "1";
pub const DEFAULT_CROP_MARGIN: f64 = 0.10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: unsupported schema_version {found:?} (expected \"1\")")]
    SchemaVersion { path: PathBuf, found: String },
    #[error("invariant violation: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
    #[error("duplicate ids: {}", .0.join(", "))]
    DuplicateIds(Vec<String>),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("missing landmark {0}")]
    MissingLandmark(Landmark),
    #[error("crop window is empty")]
    EmptyWindow,
    #[error("line {line}: unknown landmark {name:?}")]
    UnknownLandmark { line: usize, name: String },
    #[error("missing column {0:?}")]
    MissingColumn(String),
    #[error("line {line}: bad value for {field}: {message}")]
    Field { line: usize, field: String, message: String },
}

impl DatasetError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DatasetError::Io { path: path.to_path_buf(), source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            DatasetError::Io { .. } => "IoError",
            DatasetError::Parse { .. } | DatasetError::Field { .. } => "ParseError",
            DatasetError::SchemaVersion { .. } => "SchemaVersionError",
            DatasetError::InvariantViolation(_) => "InvariantViolation",
            DatasetError::DuplicateIds(_) => "DuplicateIds",
            DatasetError::InvalidFraction(_) => "InvalidFraction",
            DatasetError::MissingLandmark(_) => "MissingLandmark",
            DatasetError::EmptyWindow => "EmptyWindow",
            DatasetError::UnknownLandmark { .. } => "UnknownLandmark",
            DatasetError::MissingColumn(_) => "MissingColumn",
        }
    }
}

/// Axis-aligned rectangle in raster pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Rect {
    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x && p.x <= self.x + self.w && p.y >= self.y && p.y <= self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = (self.x + self.w).min(other.x + other.w);
        let y1 = (self.y + self.h).min(other.y + other.h);
        (x1 > x0 && y1 > y0).then_some(Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Rect {
        Rect { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BoxRegion {
    L1,
    S1,
}

impl BoxRegion {
    pub fn landmarks(self) -> &'static [Landmark] {
        match self {
            BoxRegion::L1 => &[Landmark::L1Ant, Landmark::L1Post, Landmark::L1Mid],
            BoxRegion::S1 => &[Landmark::S1Ant, Landmark::S1Post],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Source {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicalMetadata {
    #[serde(default)]
    pub spinal_instrumentation: bool,
    #[serde(default)]
    pub brace: bool,
    #[serde(default)]
    pub hip_arthroplasty: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels_instrumented: Option<u32>,
    #[serde(default)]
    pub transitional_anatomy: bool,
    #[serde(default)]
    pub diagnoses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRef {
    pub file_path: String,
    pub width_px: u32,
    pub height_px: u32,
    pub pixel_spacing_px_per_mm: f64,
    /// Window into the source image when this record was cropped from it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<Rect>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRecord {
    pub schema_version: String,
    pub study_id: String,
    pub rater_id: String,
    pub source: Source,
    pub image: ImageRef,
    pub keypoints: KeypointSet,
    pub boxes: Option<BTreeMap<BoxRegion, Rect>>,
    pub metadata: ClinicalMetadata,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    schema_version: String,
    study_id: String,
    rater_id: String,
    source: Source,
    view: View,
    image: ImageRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    revision: Option<u64>,
    keypoints: Vec<Keypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<BTreeMap<BoxRegion, Rect>>,
    metadata: ClinicalMetadata,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<serde_json::Value>,
}

/// Ids become file names in the store.
pub fn is_valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

impl AnnotationRecord {
    pub fn view(&self) -> View {
        self.keypoints.view()
    }

    /// Every failed invariant, in a stable order.
    pub fn check(&self) -> Vec<String> {
        let mut failures = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            failures.push(format!("schema_version {:?} is not \"1\"", self.schema_version));
        }
        for (field, id) in [("study_id", &self.study_id), ("rater_id", &self.rater_id)] {
            if !is_valid_id(id) {
                failures.push(format!("{field} {id:?} must be non-empty [A-Za-z0-9._-] not starting with '.'"));
            }
        }
        let (w, h) = (f64::from(self.image.width_px), f64::from(self.image.height_px));
        if self.image.width_px == 0 || self.image.height_px == 0 {
            failures.push("image dimensions must be positive".to_string());
        }
        let spacing = self.image.pixel_spacing_px_per_mm;
        if !(spacing.is_finite() && spacing > 0.0) {
            failures.push(format!("pixel spacing {spacing} must be positive and finite"));
        } else if spacing != self.keypoints.pixel_spacing() {
            failures.push("keypoint pixel spacing differs from image pixel spacing".to_string());
        }
        let bounds = Rect { x: 0.0, y: 0.0, w, h };
        for kp in self.keypoints.iter().filter(|k| k.visible) {
            if !bounds.contains(kp.point()) {
                failures.push(format!(
                    "keypoints.{}: ({}, {}) outside image {}x{}",
                    kp.name, kp.x_px, kp.y_px, self.image.width_px, self.image.height_px
                ));
            }
        }
        if let Some(boxes) = &self.boxes {
            for (region, rect) in boxes {
                if !(rect.w > 0.0 && rect.h > 0.0) {
                    failures.push(format!("boxes.{region:?}: width and height must be positive"));
                    continue;
                }
                if rect.x < 0.0 || rect.y < 0.0 || rect.x + rect.w > w || rect.y + rect.h > h {
                    failures.push(format!("boxes.{region:?}: extends outside the image"));
                }
                for &name in region.landmarks() {
                    if let Some(p) = self.keypoints.visible(name) {
                        if !rect.contains(p) {
                            failures.push(format!("boxes.{region:?}: does not contain {name}"));
                        }
                    }
                }
            }
        }
        if self.metadata.levels_instrumented.is_some() && !self.metadata.spinal_instrumentation {
            failures.push(
                "metadata.levels_instrumented requires spinal_instrumentation".to_string(),
            );
        }
        failures
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let failures = self.check();
        if failures.is_empty() {
            Ok(())
        } else {
            Err(DatasetError::InvariantViolation(failures))
        }
    }

    fn to_file(&self, revision: Option<u64>) -> RecordFile {
        RecordFile {
            schema_version: self.schema_version.clone(),
            study_id: self.study_id.clone(),
            rater_id: self.rater_id.clone(),
            source: self.source,
            view: self.view(),
            image: self.image.clone(),
            revision,
            keypoints: self.keypoints.iter().copied().collect(),
            boxes: self.boxes.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

impl Serialize for AnnotationRecord {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_file(None).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AnnotationRecord {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let file = RecordFile::deserialize(deserializer)?;
        record_from_file(file).map(|(r, _)| r).map_err(serde::de::Error::custom)
    }
}

fn record_from_file(file: RecordFile) -> Result<(AnnotationRecord, Option<u64>), GeometryError> {
    let keypoints =
        KeypointSet::new(file.keypoints, file.image.pixel_spacing_px_per_mm, file.view)?;
    Ok((
        AnnotationRecord {
            schema_version: file.schema_version,
            study_id: file.study_id,
            rater_id: file.rater_id,
            source: file.source,
            image: file.image,
            keypoints,
            boxes: file.boxes,
            metadata: file.metadata,
        },
        file.revision,
    ))
}

/// Serialized document for `rec`, optionally stamped with a store revision.
pub fn encode_record(rec: &AnnotationRecord, revision: Option<u64>) -> String {
    let mut text = serde_json::to_string_pretty(&rec.to_file(revision))
        .expect("record serialization is infallible");
    text.push('\n');
    text
}

/// Parses and validates a document; `path` is only used for messages.
pub fn decode_record(
    text: &str,
    path: &Path,
) -> Result<(AnnotationRecord, Option<u64>), DatasetError> {
    let parse_err = |e: serde_json::Error| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(parse_err)?;
    match probe.schema_version {
        Some(serde_json::Value::String(v)) if v == SCHEMA_VERSION => {}
        Some(other) => {
            let found = other.as_str().map_or_else(|| other.to_string(), str::to_string);
            return Err(DatasetError::SchemaVersion { path: path.to_path_buf(), found });
        }
        None => {
            return Err(DatasetError::SchemaVersion {
                path: path.to_path_buf(),
                found: String::new(),
            })
        }
    }
    let file: RecordFile = serde_json::from_str(text).map_err(parse_err)?;
    let (rec, revision) = record_from_file(file).map_err(|e| {
        DatasetError::InvariantViolation(vec![format!("keypoints: {e}")])
    })?;
    rec.validate()?;
    Ok((rec, revision))
}

pub fn load_record(path: impl AsRef<Path>) -> Result<AnnotationRecord, DatasetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| DatasetError::io(path, e))?;
    decode_record(&text, path).map(|(r, _)| r)
}

pub fn save_record(rec: &AnnotationRecord, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    rec.validate()?;
    fs::write(path, encode_record(rec, None)).map_err(|e| DatasetError::io(path, e))
}

/// All annotation files (`*.ann`) below `dir`, sorted by path.
pub fn find_annotation_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| DatasetError::io(&d, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| DatasetError::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "ann") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Sibling path for a cropped copy: `R1.ann` becomes `R1.ls.ann`.
pub fn lumbosacral_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|s| s.to_string_lossy().into_owned());
    let name = match ext {
        Some(ext) => format!("{stem}.ls.{ext}"),
        None => format!("{stem}.ls"),
    };
    path.with_file_name(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub fractions: SplitFractions,
}

pub fn make_split(
    ids: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    make_split_with_test(ids, &[], train_fraction, seed)
}

/// Shuffles `pool` under `seed` and keeps `round(train_fraction * n)` ids
/// for training. `test` ids are carried through untouched and must not
/// overlap the pool.
pub fn make_split_with_test(
    pool: &[String],
    test: &[String],
    train_fraction: f64,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DatasetError::InvalidFraction(train_fraction));
    }
    let mut seen = BTreeSet::new();
    let mut dups = BTreeSet::new();
    for id in pool.iter().chain(test) {
        if !seen.insert(id.as_str()) {
            dups.insert(id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(DatasetError::DuplicateIds(dups.into_iter().collect()));
    }

    let mut shuffled: Vec<String> = pool.to_vec();
    shuffled.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (train_fraction * shuffled.len() as f64).round() as usize;
    let mut val_ids = shuffled.split_off(n_train);
    let mut train_ids = shuffled;
    train_ids.sort();
    val_ids.sort();
    let mut test_ids = test.to_vec();
    test_ids.sort();
    Ok(SplitManifest {
        train_ids,
        val_ids,
        test_ids,
        seed,
        fractions: SplitFractions { train: train_fraction, val: 1.0 - train_fraction },
    })
}

const CROP_REQUIRED: [Landmark; 6] = [
    Landmark::L1Ant,
    Landmark::L1Post,
    Landmark::S1Ant,
    Landmark::S1Post,
    Landmark::FemL,
    Landmark::FemR,
];

/// Integer-aligned window around the L1, S1 and femoral keypoints, grown
/// by `margin_fraction` of its size on each side and clamped to the image.
pub fn lumbosacral_window(
    rec: &AnnotationRecord,
    margin_fraction: f64,
) -> Result<Rect, DatasetError> {
    let mut pts = Vec::with_capacity(7);
    for name in CROP_REQUIRED {
        pts.push(rec.keypoints.visible(name).ok_or(DatasetError::MissingLandmark(name))?);
    }
    pts.extend(rec.keypoints.visible(Landmark::L1Mid));

    let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
    let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    let margin = margin_fraction.max(0.0);
    let (mx, my) = ((x1 - x0) * margin, (y1 - y0) * margin);
    let (w, h) = (f64::from(rec.image.width_px), f64::from(rec.image.height_px));
    let x0 = (x0 - mx).floor().max(0.0);
    let y0 = (y0 - my).floor().max(0.0);
    let x1 = (x1 + mx).ceil().min(w);
    let y1 = (y1 + my).ceil().min(h);
    if !(x1 > x0 && y1 > y0) {
        return Err(DatasetError::EmptyWindow);
    }
    Ok(Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 })
}

/// Re-expresses `rec` inside `window` as a lumbosacral film. C7 and T1 are
/// hidden; everything else is translated by the window origin.
pub fn crop_to_window(rec: &AnnotationRecord, window: &Rect) -> AnnotationRecord {
    let (dx, dy) = (window.x, window.y);
    let mut keypoints = rec
        .keypoints
        .map_points(|p| Point::new(p.x - dx, p.y - dy))
        .with_view(View::Lumbosacral);
    keypoints.set_visible(Landmark::C7, false);
    keypoints.set_visible(Landmark::T1, false);

    let boxes = rec.boxes.as_ref().map(|boxes| {
        boxes
            .iter()
            .filter_map(|(&region, rect)| {
                rect.intersect(window).map(|r| (region, r.translated(-dx, -dy)))
            })
            .collect()
    });
    let crop = match rec.image.crop {
        Some(prev) => Rect { x: prev.x + dx, y: prev.y + dy, w: window.w, h: window.h },
        None => *window,
    };
    AnnotationRecord {
        image: ImageRef {
            width_px: window.w as u32,
            height_px: window.h as u32,
            crop: Some(crop),
            ..rec.image.clone()
        },
        keypoints,
        boxes,
        ..rec.clone()
    }
}

pub fn crop_lumbosacral(
    rec: &AnnotationRecord,
    margin_fraction: f64,
) -> Result<AnnotationRecord, DatasetError> {
    let window = lumbosacral_window(rec, margin_fraction)?;
    Ok(crop_to_window(rec, &window))
}

/// Header names for each logical column of a keypoint table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub study_id: String,
    pub rater_id: String,
    pub landmark: String,
    pub x: String,
    pub y: String,
    pub width: String,
    pub height: String,
    pub spacing: String,
    pub visible: Option<String>,
    pub view: Option<String>,
    pub file_path: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            study_id: "study_id".into(),
            rater_id: "rater_id".into(),
            landmark: "landmark".into(),
            x: "x".into(),
            y: "y".into(),
            width: "width_px".into(),
            height: "height_px".into(),
            spacing: "pixel_spacing_px_per_mm".into(),
            visible: Some("visible".into()),
            view: Some("view".into()),
            file_path: Some("file_path".into()),
        }
    }
}

struct Columns {
    study: usize,
    rater: usize,
    landmark: usize,
    x: usize,
    y: usize,
    width: usize,
    height: usize,
    spacing: usize,
    visible: Option<usize>,
    view: Option<usize>,
    file_path: Option<usize>,
}

struct Group {
    study_id: String,
    rater_id: String,
    header: (u32, u32, f64, View, Option<String>),
    first_line: usize,
    keypoints: Vec<Keypoint>,
    seen: HashMap<Landmark, usize>,
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Some(true),
        "0" | "false" | "no" | "n" => Some(false),
        _ => None,
    }
}

/// Reads a comma-delimited table with one row per record-landmark and
/// assembles validated records. Records appear in order of first row.
pub fn import_keypoint_table(
    path: impl AsRef<Path>,
    columns: &ColumnMap,
) -> Result<Vec<AnnotationRecord>, DatasetError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.into()));
    let optional = |name: &Option<String>| name.as_deref().and_then(find);
    let cols = Columns {
        study: require(&columns.study_id)?,
        rater: require(&columns.rater_id)?,
        landmark: require(&columns.landmark)?,
        x: require(&columns.x)?,
        y: require(&columns.y)?,
        width: require(&columns.width)?,
        height: require(&columns.height)?,
        spacing: require(&columns.spacing)?,
        visible: optional(&columns.visible),
        view: optional(&columns.view),
        file_path: optional(&columns.file_path),
    };

    let mut groups: Vec<Group> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(i + 2, |p| p.line() as usize);
        let field = |idx: usize| row.get(idx).unwrap_or("");
        let bad = |name: &str, message: String| DatasetError::Field {
            line,
            field: name.to_string(),
            message,
        };
        let num = |idx: usize, name: &str| -> Result<f64, DatasetError> {
            field(idx).parse::<f64>().map_err(|e| bad(name, e.to_string()))
        };
        let int = |idx: usize, name: &str| -> Result<u32, DatasetError> {
            field(idx).parse::<u32>().map_err(|e| bad(name, e.to_string()))
        };

        let name_str = field(cols.landmark);
        let name: Landmark = name_str.parse().map_err(|_| DatasetError::UnknownLandmark {
            line,
            name: name_str.to_string(),
        })?;
        let visible = match cols.visible.map(field) {
            None | Some("") => true,
            Some(v) => parse_bool(v).ok_or_else(|| bad("visible", format!("{v:?} is not a boolean")))?,
        };
        let view = match cols.view.map(field) {
            None | Some("") => View::WholeSpine,
            Some(v) => v.parse().map_err(|_| bad("view", format!("{v:?} is not a view")))?,
        };
        let header = (
            int(cols.width, &columns.width)?,
            int(cols.height, &columns.height)?,
            num(cols.spacing, &columns.spacing)?,
            view,
            cols.file_path.map(field).filter(|s| !s.is_empty()).map(str::to_string),
        );
        let kp = Keypoint {
            name,
            x_px: num(cols.x, &columns.x)?,
            y_px: num(cols.y, &columns.y)?,
            visible,
        };

        let key = (field(cols.study).to_string(), field(cols.rater).to_string());
        let gi = *index.entry(key.clone()).or_insert_with(|| {
            groups.push(Group {
                study_id: key.0.clone(),
                rater_id: key.1.clone(),
                header: header.clone(),
                first_line: line,
                keypoints: Vec::new(),
                seen: HashMap::new(),
            });
            groups.len() - 1
        });
        let group = &mut groups[gi];
        if group.header != header {
            return Err(bad(
                "record",
                format!(
                    "image fields differ from line {} for study {} rater {}",
                    group.first_line, group.study_id, group.rater_id
                ),
            ));
        }
        if let Some(prev) = group.seen.insert(name, line) {
            return Err(bad("landmark", format!("{name} already given on line {prev}")));
        }
        group.keypoints.push(kp);
    }

    groups
        .into_iter()
        .map(|g| {
            let (width_px, height_px, spacing, view, file_path) = g.header;
            let keypoints = KeypointSet::new(g.keypoints, spacing, view).map_err(|e| {
                DatasetError::InvariantViolation(vec![format!(
                    "study {} rater {}: {e}",
                    g.study_id, g.rater_id
                )])
            })?;
            let rec = AnnotationRecord {
                schema_version: SCHEMA_VERSION.to_string(),
                image: ImageRef {
                    file_path: file_path.unwrap_or_else(|| format!("images/{}.png", g.study_id)),
                    width_px,
                    height_px,
                    pixel_spacing_px_per_mm: spacing,
                    crop: None,
                },
                study_id: g.study_id,
                rater_id: g.rater_id,
                source: Source::Human,
                keypoints,
                boxes: None,
                metadata: ClinicalMetadata::default(),
            };
            rec.validate()?;
            Ok(rec)
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> DatasetError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DatasetError::io(path, io),
        other => DatasetError::Parse {
            path: path.to_path_buf(),
            line,
            column: 0,
            message: format!("{other:?}"),
        },
    }
}

impl fmt::Display for BoxRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}
