//! Keypoint accuracy (PCK) and per-parameter error aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClinicalMetadata;
use crate::geometry::{KeypointSet, Landmark, Parameter, Point, SpinopelvicParameters};
use crate::stats::{descriptive, Descriptive};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("prediction and ground-truth cohorts differ in length ({preds} vs {gts})")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("image {index}: pixel spacing differs between prediction and ground truth")]
    SpacingMismatch { index: usize },
    #[error("missing landmark {0}")]
    MissingLandmark(Landmark),
    #[error("thresholds must be positive, finite and strictly ascending")]
    InvalidThresholds,
}

/// Landmarks as scored: the two femoral heads become one midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EvalLandmark {
    C7,
    T1,
    #[serde(rename = "L1_ANT")]
    L1Ant,
    #[serde(rename = "L1_POST")]
    L1Post,
    #[serde(rename = "L1_MID")]
    L1Mid,
    #[serde(rename = "S1_ANT")]
    S1Ant,
    #[serde(rename = "S1_POST")]
    S1Post,
    #[serde(rename = "FEM_MID")]
    FemMid,
}

impl EvalLandmark {
    pub const ALL: [EvalLandmark; 8] = [
        EvalLandmark::C7,
        EvalLandmark::T1,
        EvalLandmark::L1Ant,
        EvalLandmark::L1Post,
        EvalLandmark::L1Mid,
        EvalLandmark::S1Ant,
        EvalLandmark::S1Post,
        EvalLandmark::FemMid,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalLandmark::C7 => "C7",
            EvalLandmark::T1 => "T1",
            EvalLandmark::L1Ant => "L1_ANT",
            EvalLandmark::L1Post => "L1_POST",
            EvalLandmark::L1Mid => "L1_MID",
            EvalLandmark::S1Ant => "S1_ANT",
            EvalLandmark::S1Post => "S1_POST",
            EvalLandmark::FemMid => "FEM_MID",
        }
    }

    fn passthrough(self) -> Option<Landmark> {
        Some(match self {
            EvalLandmark::C7 => Landmark::C7,
            EvalLandmark::T1 => Landmark::T1,
            EvalLandmark::L1Ant => Landmark::L1Ant,
            EvalLandmark::L1Post => Landmark::L1Post,
            EvalLandmark::L1Mid => Landmark::L1Mid,
            EvalLandmark::S1Ant => Landmark::S1Ant,
            EvalLandmark::S1Post => Landmark::S1Post,
            EvalLandmark::FemMid => return None,
        })
    }
}

impl fmt::Display for EvalLandmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Visible landmarks in scoring form; `FEM_MID` only when both heads are
/// visible.
pub fn eval_points(ks: &KeypointSet) -> BTreeMap<EvalLandmark, Point> {
    let mut out = BTreeMap::new();
    for lm in EvalLandmark::ALL {
        let p = match lm.passthrough() {
            Some(name) => ks.visible(name),
            None => ks
                .visible(Landmark::FemL)
                .zip(ks.visible(Landmark::FemR))
                .map(|(l, r)| l.midpoint(r)),
        };
        if let Some(p) = p {
            out.insert(lm, p);
        }
    }
    out
}

pub fn merge_femoral(ks: &KeypointSet) -> Result<BTreeMap<EvalLandmark, Point>, EvalError> {
    for name in [Landmark::FemL, Landmark::FemR] {
        if ks.visible(name).is_none() {
            return Err(EvalError::MissingLandmark(name));
        }
    }
    Ok(eval_points(ks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PckCurve {
    pub thresholds_mm: Vec<f64>,
    /// Fraction within each threshold, for every landmark with at least
    /// one scored pair.
    pub per_landmark: BTreeMap<EvalLandmark, Vec<f64>>,
    /// Pooled over all landmark-image pairs.
    pub overall: Vec<f64>,
    /// Unweighted mean of the per-landmark fractions.
    pub mean_of_landmarks: Vec<f64>,
    pub n_images: usize,
    pub pairs_scored: BTreeMap<EvalLandmark, usize>,
    /// Images where the landmark was missing on either side.
    pub pairs_excluded: BTreeMap<EvalLandmark, usize>,
}

pub fn validate_thresholds(thresholds_mm: &[f64]) -> Result<(), EvalError> {
    let ok = !thresholds_mm.is_empty()
        && thresholds_mm.iter().all(|t| t.is_finite() && *t > 0.0)
        && thresholds_mm.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(EvalError::InvalidThresholds)
    }
}

/// Distances are Euclidean in pixels divided by the pixel spacing. A pair
/// counts as correct when its distance is at most the threshold.
pub fn pck(
    preds: &[KeypointSet],
    gts: &[KeypointSet],
    thresholds_mm: &[f64],
) -> Result<PckCurve, EvalError> {
    if preds.is_empty() && gts.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    validate_thresholds(thresholds_mm)?;

    let t = thresholds_mm.len();
    let mut hits: BTreeMap<EvalLandmark, Vec<usize>> = BTreeMap::new();
    let mut scored: BTreeMap<EvalLandmark, usize> = BTreeMap::new();
    let mut excluded: BTreeMap<EvalLandmark, usize> = BTreeMap::new();

    for (index, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if pred.pixel_spacing() != gt.pixel_spacing() {
            return Err(EvalError::SpacingMismatch { index });
        }
        let spacing = gt.pixel_spacing();
        let p = eval_points(pred);
        let g = eval_points(gt);
        for lm in EvalLandmark::ALL {
            match (p.get(&lm), g.get(&lm)) {
                (Some(&a), Some(&b)) => {
                    let dist_mm = a.distance(b) / spacing;
                    let counts = hits.entry(lm).or_insert_with(|| vec![0; t]);
                    for (c, &thr) in counts.iter_mut().zip(thresholds_mm) {
                        if dist_mm <= thr {
                            *c += 1;
                        }
                    }
                    *scored.entry(lm).or_default() += 1;
                }
                _ => *excluded.entry(lm).or_default() += 1,
            }
        }
    }

    let total: usize = scored.values().sum();
    let per_landmark: BTreeMap<EvalLandmark, Vec<f64>> = hits
        .iter()
        .map(|(lm, counts)| {
            let n = scored[lm] as f64;
            (*lm, counts.iter().map(|&c| c as f64 / n).collect())
        })
        .collect();
    let overall = (0..t)
        .map(|i| {
            if total == 0 {
                0.0
            } else {
                hits.values().map(|c| c[i]).sum::<usize>() as f64 / total as f64
            }
        })
        .collect();
    let mean_of_landmarks = (0..t)
        .map(|i| {
            if per_landmark.is_empty() {
                0.0
            } else {
                per_landmark.values().map(|f| f[i]).sum::<f64>() / per_landmark.len() as f64
            }
        })
        .collect();
    Ok(PckCurve {
        thresholds_mm: thresholds_mm.to_vec(),
        per_landmark,
        overall,
        mean_of_landmarks,
        n_images: gts.len(),
        pairs_scored: scored,
        pairs_excluded: excluded,
    })
}

/// Prediction and ground truth for one study.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPair {
    pub study_id: String,
    pub metadata: ClinicalMetadata,
    pub pred: SpinopelvicParameters,
    pub gt: SpinopelvicParameters,
}

/// A named two-way partition of the cohort.
pub struct Stratifier {
    pub name: String,
    pub true_label: String,
    pub false_label: String,
    predicate: Box<dyn Fn(&ClinicalMetadata) -> bool + Send + Sync>,
}

impl Stratifier {
    pub fn new(
        name: impl Into<String>,
        true_label: impl Into<String>,
        false_label: impl Into<String>,
        predicate: impl Fn(&ClinicalMetadata) -> bool + Send + Sync + 'static,
    ) -> Self {
        Stratifier {
            name: name.into(),
            true_label: true_label.into(),
            false_label: false_label.into(),
            predicate: Box::new(predicate),
        }
    }

    pub fn instrumentation() -> Self {
        Stratifier::new(
            "spinal_instrumentation",
            "With Instrumentation",
            "Without Instrumentation",
            |m| m.spinal_instrumentation,
        )
    }

    pub fn matches(&self, metadata: &ClinicalMetadata) -> bool {
        (self.predicate)(metadata)
    }
}

impl fmt::Debug for Stratifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stratifier").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Absolute-error statistics for one stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub stratum: Option<String>,
    pub n: usize,
    pub parameters: BTreeMap<Parameter, Descriptive>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub label: String,
    pub n: usize,
    /// `None` when the stratum is empty.
    pub summary: Option<ErrorSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorTable {
    pub overall: ErrorSummary,
    pub stratifier: Option<String>,
    pub strata: Vec<StratumSummary>,
}

fn summarize(pairs: &[&ParameterPair], label: Option<String>) -> ErrorSummary {
    let mut parameters = BTreeMap::new();
    for p in Parameter::ALL {
        let errors: Vec<f64> = pairs
            .iter()
            .filter_map(|pair| Some((pair.pred.get(p)? - pair.gt.get(p)?).abs()))
            .collect();
        if let Ok(d) = descriptive(&errors) {
            parameters.insert(p, d);
        }
    }
    ErrorSummary { stratum: label, n: pairs.len(), parameters }
}

pub fn error_summary(
    pairs: &[ParameterPair],
    stratifier: Option<&Stratifier>,
) -> Result<ErrorTable, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    let all: Vec<&ParameterPair> = pairs.iter().collect();
    let overall = summarize(&all, None);
    let strata = match stratifier {
        None => Vec::new(),
        Some(s) => {
            let (yes, no): (Vec<&ParameterPair>, Vec<&ParameterPair>) =
                pairs.iter().partition(|p| s.matches(&p.metadata));
            [(&s.true_label, yes), (&s.false_label, no)]
                .into_iter()
                .map(|(label, members)| StratumSummary {
                    label: label.clone(),
                    n: members.len(),
                    summary: (!members.is_empty())
                        .then(|| summarize(&members, Some(label.clone()))),
                })
                .collect()
        }
    };
    Ok(ErrorTable { overall, stratifier: stratifier.map(|s| s.name.clone()), strata })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarRecord {
    pub source: String,
    pub parameter: Parameter,
    pub median_error: f64,
}

/// Median absolute error of `preds` against `gts` per parameter.
pub fn median_errors(
    source: &str,
    preds: &[SpinopelvicParameters],
    gts: &[SpinopelvicParameters],
) -> Result<Vec<RadarRecord>, EvalError> {
    if gts.is_empty() {
        return Err(EvalError::EmptyCohort);
    }
    if preds.len() != gts.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    let mut out = Vec::new();
    for p in Parameter::ALL {
        let errors: Vec<f64> = preds
            .iter()
            .zip(gts)
            .filter_map(|(a, b)| Some((a.get(p)? - b.get(p)?).abs()))
            .collect();
        if let Ok(d) = descriptive(&errors) {
            out.push(RadarRecord { source: source.to_string(), parameter: p, median_error: d.median });
        }
    }
    Ok(out)
}

/// Radar-plot rows for two sources scored against the same ground truth:
/// all of source A, then all of source B.
pub fn compare_sources(
    a_label: &str,
    a_preds: &[SpinopelvicParameters],
    b_label: &str,
    b_preds: &[SpinopelvicParameters],
    gts: &[SpinopelvicParameters],
) -> Result<Vec<RadarRecord>, EvalError> {
    let mut rows = median_errors(a_label, a_preds, gts)?;
    rows.extend(median_errors(b_label, b_preds, gts)?);
    Ok(rows)
}
