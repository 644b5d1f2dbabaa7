//! Fusion of the three region detectors into one keypoint set.
//!
//! Detectors plug in through an interchange file, one per study per
//! region, with `schema_version` `"1"`:
//!
//! ```text
//! {
//!   "schema_version": "1",
//!   "study_id": "S001",
//!   "region": "L1",
//!   "candidates": [
//!     { "score": 0.93, "box": { "x": 80, "y": 25, "w": 30, "h": 20 },
//!       "keypoints": [ { "name": "L1_ANT", "x": 105.0, "y": 30.0 }, ... ] }
//!   ]
//! }
//! ```
//!
//! `L1` and `S1` candidates need a box containing their keypoints. The
//! `GLOBAL` detector predicts keypoints directly, so any box it writes is
//! dropped.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Rect;
use crate::geometry::{GeometryError, Keypoint, KeypointSet, Landmark, View};

#[derive(Debug, Error)]
pub enum AggregateError {
    #[error("no detection for region {0}")]
    NoDetection(Region),
    #[error("landmark {0} produced by more than one region")]
    DuplicateLandmark(Landmark),
    #[error("region mismatch: expected {expected}, found {found}")]
    RegionMismatch { expected: Region, found: Region },
    #[error("invariant violation: {}", .0.join("; "))]
    InvariantViolation(Vec<String>),
    #[error("aggregate is missing {}", .0.iter().map(|l| l.as_str()).collect::<Vec<_>>().join(", "))]
    Incomplete(Vec<Landmark>),
    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Region {
    L1,
    S1,
    Global,
}

impl Region {
    pub fn landmarks(self) -> &'static [Landmark] {
        match self {
            Region::L1 => &[Landmark::L1Ant, Landmark::L1Post, Landmark::L1Mid],
            Region::S1 => &[Landmark::S1Ant, Landmark::S1Post],
            Region::Global => &[Landmark::C7, Landmark::T1, Landmark::FemL, Landmark::FemR],
        }
    }

    pub fn of(landmark: Landmark) -> Region {
        [Region::L1, Region::S1, Region::Global]
            .into_iter()
            .find(|r| r.landmarks().contains(&landmark))
            .expect("region subsets cover every landmark")
    }

    fn needs_box(self) -> bool {
        self != Region::Global
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::L1 => "L1",
            Region::S1 => "S1",
            Region::Global => "GLOBAL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCandidate {
    /// Optional in files; when present it must match the output's region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    pub score: f64,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Rect>,
    pub keypoints: Vec<Keypoint>,
}

impl DetectionCandidate {
    fn area(&self) -> f64 {
        self.bbox.map_or(0.0, |b| b.area())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOutput {
    #[serde(default = "schema_v1")]
    pub schema_version: String,
    pub study_id: String,
    pub region: Region,
    #[serde(default)]
    pub candidates: Vec<DetectionCandidate>,
}

fn schema_v1() -> String {
    crate::dataset::SCHEMA_VERSION.to_string()
}

impl DetectorOutput {
    /// Checks region tags, landmark subsets, scores and box containment.
    pub fn validate(&self) -> Result<(), AggregateError> {
        let mut failures = Vec::new();
        if self.schema_version != crate::dataset::SCHEMA_VERSION {
            failures.push(format!("schema_version {:?} is not \"1\"", self.schema_version));
        }
        for (i, c) in self.candidates.iter().enumerate() {
            if let Some(found) = c.region {
                if found != self.region {
                    return Err(AggregateError::RegionMismatch { expected: self.region, found });
                }
            }
            if !(0.0..=1.0).contains(&c.score) {
                failures.push(format!("candidate {i}: score {} outside [0, 1]", c.score));
            }
            for kp in &c.keypoints {
                if !self.region.landmarks().contains(&kp.name) {
                    return Err(AggregateError::RegionMismatch {
                        expected: self.region,
                        found: Region::of(kp.name),
                    });
                }
            }
            if self.region.needs_box() {
                match c.bbox {
                    None => failures.push(format!("candidate {i}: {} box required", self.region)),
                    Some(b) if !(b.w > 0.0 && b.h > 0.0) => {
                        failures.push(format!("candidate {i}: box must have positive size"))
                    }
                    Some(b) => {
                        for kp in c.keypoints.iter().filter(|k| k.visible) {
                            if !b.contains(kp.point()) {
                                failures.push(format!("candidate {i}: {} outside its box", kp.name));
                            }
                        }
                    }
                }
            }
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(AggregateError::InvariantViolation(failures))
        }
    }
}

/// Highest score wins; ties go to the larger box, then to the earlier
/// candidate.
pub fn select_candidate(out: &DetectorOutput) -> Result<&DetectionCandidate, AggregateError> {
    let mut best: Option<&DetectionCandidate> = None;
    for c in &out.candidates {
        best = match best {
            Some(b) if c.score > b.score || (c.score == b.score && c.area() > b.area()) => Some(c),
            Some(b) => Some(b),
            None => Some(c),
        };
    }
    best.ok_or(AggregateError::NoDetection(out.region))
}

/// Union of the selected candidates' keypoints. The global output may be
/// omitted for lumbosacral films.
pub fn aggregate(
    l1: Option<&DetectorOutput>,
    s1: Option<&DetectorOutput>,
    global: Option<&DetectorOutput>,
    pixel_spacing: f64,
    view: View,
) -> Result<KeypointSet, AggregateError> {
    let mut keypoints: Vec<Keypoint> = Vec::with_capacity(9);
    for (expected, output) in [(Region::L1, l1), (Region::S1, s1), (Region::Global, global)] {
        let Some(output) = output else {
            if expected == Region::Global && view == View::Lumbosacral {
                continue;
            }
            return Err(AggregateError::NoDetection(expected));
        };
        if output.region != expected {
            return Err(AggregateError::RegionMismatch { expected, found: output.region });
        }
        let chosen = match select_candidate(output) {
            Ok(c) => c,
            Err(_) if expected == Region::Global && view == View::Lumbosacral => continue,
            Err(e) => return Err(e),
        };
        for kp in &chosen.keypoints {
            if keypoints.iter().any(|k| k.name == kp.name) {
                return Err(AggregateError::DuplicateLandmark(kp.name));
            }
            keypoints.push(*kp);
        }
    }
    let set = KeypointSet::new(keypoints, pixel_spacing, view)?;
    let missing = set.missing();
    if !missing.is_empty() {
        return Err(AggregateError::Incomplete(missing));
    }
    Ok(set)
}

pub fn parse_detector_output(text: &str, path: &Path) -> Result<DetectorOutput, AggregateError> {
    let mut out: DetectorOutput =
        serde_json::from_str(text).map_err(|e| AggregateError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
    if out.region == Region::Global {
        for (i, c) in out.candidates.iter_mut().enumerate() {
            if c.bbox.take().is_some() {
                log::warn!("{}: ignoring box on GLOBAL candidate {i}", path.display());
            }
        }
    }
    out.validate()?;
    Ok(out)
}

pub fn load_detector_output(path: impl AsRef<Path>) -> Result<DetectorOutput, AggregateError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|source| AggregateError::Io { path: path.to_path_buf(), source })?;
    parse_detector_output(&text, path)
}

pub fn save_detector_output(
    out: &DetectorOutput,
    path: impl AsRef<Path>,
) -> Result<(), AggregateError> {
    let path = path.as_ref();
    out.validate()?;
    let mut text = serde_json::to_string_pretty(out).expect("detector output serializes");
    text.push('\n');
    fs::write(path, text).map_err(|source| AggregateError::Io { path: path.to_path_buf(), source })
}

/// Splits a keypoint set into one single-candidate output per region, as
/// a perfect detector would report it. Boxes are the tight hull of each
/// region's keypoints padded by `box_pad` pixels.
pub fn outputs_from_keypoints(
    study_id: &str,
    ks: &KeypointSet,
    box_pad: f64,
) -> [DetectorOutput; 3] {
    [Region::L1, Region::S1, Region::Global].map(|region| {
        let keypoints: Vec<Keypoint> = region
            .landmarks()
            .iter()
            .filter_map(|&l| ks.get(l).copied())
            .collect();
        let bbox = region.needs_box().then(|| {
            let visible: Vec<_> = keypoints.iter().filter(|k| k.visible).collect();
            let x0 = visible.iter().map(|k| k.x_px).fold(f64::INFINITY, f64::min) - box_pad;
            let y0 = visible.iter().map(|k| k.y_px).fold(f64::INFINITY, f64::min) - box_pad;
            let x1 = visible.iter().map(|k| k.x_px).fold(f64::NEG_INFINITY, f64::max) + box_pad;
            let y1 = visible.iter().map(|k| k.y_px).fold(f64::NEG_INFINITY, f64::max) + box_pad;
            Rect { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
        });
        let candidates = if keypoints.is_empty() {
            Vec::new()
        } else {
            vec![DetectionCandidate { region: None, score: 1.0, bbox, keypoints }]
        };
        DetectorOutput { schema_version: schema_v1(), study_id: study_id.to_string(), region, candidates }
    })
}
