//! Cohort evaluation report and its tabular renderings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::AnnotationRecord;
use crate::eval::{
    error_summary, median_errors, pck, ErrorTable, EvalError, EvalLandmark, ParameterPair,
    PckCurve, RadarRecord, Stratifier,
};
use crate::geometry::{compute_parameters, KeypointSet, Parameter, SpinopelvicParameters, View};
use crate::stats::{icc_matrix, wilcoxon_rank_sum, IccMatrix, IccModel, RankSumResult};

pub const QUARTILE_RULE: &str =
    "linear interpolation at 1-based rank p*(n-1)+1; IQR = Q3 - Q1";
pub const SD_RULE: &str = "sample standard deviation (n-1 denominator)";
pub const RANK_SUM_RULE: &str = "Wilcoxon rank-sum on predicted vs ground-truth values; exact \
     distribution when min(n1,n2) <= 8 and no ties, otherwise normal approximation with tie \
     correction and 0.5 continuity correction; two-sided";
pub const PCK_RULE: &str = "distance = Euclidean pixel distance / pixel spacing; correct when \
     distance <= threshold; femoral heads merged to FEM_MID; pairs missing on either side are \
     excluded from denominators";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("empty cohort")]
    EmptyCohort,
    #[error("unmatched study ids: {}", .0.join(", "))]
    Alignment(Vec<String>),
    #[error("duplicate annotation for {0}")]
    Duplicate(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub fn default_thresholds() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}

/// Accepts `a..b` (integer steps, inclusive) or a comma-separated list.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>, String> {
    let text = text.trim();
    let values: Vec<f64> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: i64 = lo.trim().parse().map_err(|_| format!("bad range start in {text:?}"))?;
        let hi: i64 = hi.trim().parse().map_err(|_| format!("bad range end in {text:?}"))?;
        (lo..=hi).map(|v| v as f64).collect()
    } else {
        text.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad threshold {t:?}")))
            .collect::<Result<_, _>>()?
    };
    crate::eval::validate_thresholds(&values)
        .map_err(|_| format!("thresholds {text:?} must be positive and strictly increasing"))?;
    Ok(values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub cohort_id: String,
    pub pred_label: String,
    pub gt_label: String,
    pub thresholds_mm: Vec<f64>,
    pub stratify_instrumentation: bool,
    pub seed: Option<u64>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            cohort_id: "cohort".into(),
            pred_label: "pred".into(),
            gt_label: "gt".into(),
            thresholds_mm: default_thresholds(),
            stratify_instrumentation: true,
            seed: None,
        }
    }
}

/// `study_id` plus view; one study may appear in both views.
pub type StudyKey = (String, View);

fn key_label(key: &StudyKey) -> String {
    match key.1 {
        View::WholeSpine => key.0.clone(),
        View::Lumbosacral => format!("{} ({})", key.0, key.1),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedCohort {
    pub pairs: Vec<(AnnotationRecord, AnnotationRecord)>,
    pub unmatched: Vec<String>,
}

fn index(records: Vec<AnnotationRecord>) -> Result<BTreeMap<StudyKey, AnnotationRecord>, ReportError> {
    let mut map = BTreeMap::new();
    for rec in records {
        let key = (rec.study_id.clone(), rec.view());
        if map.contains_key(&key) {
            return Err(ReportError::Duplicate(key_label(&key)));
        }
        map.insert(key, rec);
    }
    Ok(map)
}

/// Pairs predictions with ground truth by study id and view, ordered by
/// key. Keys present on one side only are listed in `unmatched`.
pub fn align(
    preds: Vec<AnnotationRecord>,
    gts: Vec<AnnotationRecord>,
) -> Result<AlignedCohort, ReportError> {
    let mut preds = index(preds)?;
    let gts = index(gts)?;
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (key, gt) in gts {
        match preds.remove(&key) {
            Some(pred) => pairs.push((pred, gt)),
            None => unmatched.push(key_label(&key)),
        }
    }
    unmatched.extend(preds.keys().map(key_label));
    unmatched.sort();
    Ok(AlignedCohort { pairs, unmatched })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub tool_version: String,
    pub quartile_rule: String,
    pub sd_rule: String,
    pub icc_form: IccModel,
    pub rank_sum_rule: String,
    pub pck_rule: String,
    pub thresholds_mm: Vec<f64>,
    pub stratifier: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeFailure {
    pub study_id: String,
    pub view: View,
    pub side: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSection {
    pub view: View,
    pub title: String,
    pub n_studies: usize,
    pub parameters: Vec<Parameter>,
    pub errors: Option<ErrorTable>,
    pub rank_sum: BTreeMap<Parameter, RankSumResult>,
    pub icc: BTreeMap<Parameter, IccMatrix>,
    pub pck: Option<PckCurve>,
    pub radar: Vec<RadarRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cohort_id: String,
    pub pred_label: String,
    pub gt_label: String,
    pub metadata: ReportMetadata,
    pub sections: Vec<ReportSection>,
    pub unmatched_study_ids: Vec<String>,
    pub failures: Vec<ComputeFailure>,
}

impl EvaluationReport {
    pub fn section(&self, view: View) -> &ReportSection {
        self.sections.iter().find(|s| s.view == view).expect("both sections are always present")
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

fn section_parameters(view: View) -> Vec<Parameter> {
    match view {
        View::WholeSpine => Parameter::ALL.to_vec(),
        View::Lumbosacral => vec![Parameter::Ss, Parameter::Ll],
    }
}

fn section_title(view: View) -> &'static str {
    match view {
        View::WholeSpine => "Whole Spine Images",
        View::Lumbosacral => "Lumbosacral Images",
    }
}

/// The shared rater id of `records`, or `fallback` when they disagree or
/// there are none.
pub fn cohort_label(records: &[AnnotationRecord], fallback: &str) -> String {
    let mut ids = records.iter().map(|r| r.rater_id.as_str());
    match ids.next() {
        Some(first) if ids.all(|id| id == first) => first.to_string(),
        _ => fallback.to_string(),
    }
}

/// Builds the report for already-aligned pairs. `extra_raters` adds
/// columns to the ICC matrices only; their records are matched to pairs by
/// study id and view.
pub fn build_report(
    pairs: &[(AnnotationRecord, AnnotationRecord)],
    extra_raters: &BTreeMap<String, Vec<AnnotationRecord>>,
    unmatched: Vec<String>,
    opts: &ReportOptions,
) -> Result<EvaluationReport, ReportError> {
    if pairs.is_empty() {
        return Err(ReportError::EmptyCohort);
    }
    crate::eval::validate_thresholds(&opts.thresholds_mm)?;
    // A rater compared with itself still needs two ICC columns.
    let (pred_label, gt_label) = if opts.pred_label == opts.gt_label {
        (format!("{}:pred", opts.pred_label), format!("{}:gt", opts.gt_label))
    } else {
        (opts.pred_label.clone(), opts.gt_label.clone())
    };
    let stratifier = opts.stratify_instrumentation.then(Stratifier::instrumentation);

    let mut extras: BTreeMap<String, BTreeMap<StudyKey, SpinopelvicParameters>> = BTreeMap::new();
    for (name, records) in extra_raters {
        let values = records
            .iter()
            .filter_map(|r| {
                let params = compute_parameters(&r.keypoints).ok()?;
                Some(((r.study_id.clone(), r.view()), params))
            })
            .collect();
        extras.insert(name.clone(), values);
    }

    let mut failures = Vec::new();
    let mut sections = Vec::new();
    for view in [View::WholeSpine, View::Lumbosacral] {
        let members: Vec<&(AnnotationRecord, AnnotationRecord)> =
            pairs.iter().filter(|(_, gt)| gt.view() == view).collect();

        let mut param_pairs = Vec::new();
        let mut pck_preds: Vec<KeypointSet> = Vec::new();
        let mut pck_gts: Vec<KeypointSet> = Vec::new();
        for (pred, gt) in &members {
            pck_preds.push(pred.keypoints.clone());
            pck_gts.push(gt.keypoints.clone());
            let mut fail = |side: &str, error: String| {
                failures.push(ComputeFailure {
                    study_id: gt.study_id.clone(),
                    view,
                    side: side.to_string(),
                    error,
                })
            };
            if pred.view() != view {
                fail("pred", format!("view {} does not match ground truth", pred.view()));
                continue;
            }
            let p = compute_parameters(&pred.keypoints);
            let g = compute_parameters(&gt.keypoints);
            match (p, g) {
                (Ok(p), Ok(g)) => param_pairs.push(ParameterPair {
                    study_id: gt.study_id.clone(),
                    metadata: gt.metadata.clone(),
                    pred: p,
                    gt: g,
                }),
                (p, g) => {
                    if let Err(e) = p {
                        fail("pred", e.to_string());
                    }
                    if let Err(e) = g {
                        fail("gt", e.to_string());
                    }
                }
            }
        }

        let parameters = section_parameters(view);
        let errors = if param_pairs.is_empty() {
            None
        } else {
            Some(error_summary(&param_pairs, stratifier.as_ref())?)
        };

        let mut rank_sum = BTreeMap::new();
        let mut icc = BTreeMap::new();
        for &param in &parameters {
            let both: Vec<(&ParameterPair, f64, f64)> = param_pairs
                .iter()
                .filter_map(|pp| Some((pp, pp.pred.get(param)?, pp.gt.get(param)?)))
                .collect();
            if both.is_empty() {
                continue;
            }
            let preds: Vec<f64> = both.iter().map(|b| b.1).collect();
            let gts: Vec<f64> = both.iter().map(|b| b.2).collect();
            if let Ok(r) = wilcoxon_rank_sum(&preds, &gts) {
                rank_sum.insert(param, r);
            }

            // ICC over studies every rater has a value for.
            let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut rows_kept = 0usize;
            for (pp, pv, gv) in &both {
                let key = (pp.study_id.clone(), view);
                let extra_vals: Option<Vec<(String, f64)>> = extras
                    .iter()
                    .map(|(name, by_key)| Some((name.clone(), by_key.get(&key)?.get(param)?)))
                    .collect();
                let Some(extra_vals) = extra_vals else { continue };
                columns.entry(pred_label.clone()).or_default().push(*pv);
                columns.entry(gt_label.clone()).or_default().push(*gv);
                for (name, v) in extra_vals {
                    columns.entry(name).or_default().push(v);
                }
                rows_kept += 1;
            }
            if rows_kept >= 2 && columns.len() >= 2 {
                if let Ok(m) = icc_matrix(&columns) {
                    icc.insert(param, m);
                }
            }
        }

        let pck_curve = if members.is_empty() {
            None
        } else {
            Some(pck(&pck_preds, &pck_gts, &opts.thresholds_mm)?)
        };
        let radar = if param_pairs.is_empty() {
            Vec::new()
        } else {
            let preds: Vec<_> = param_pairs.iter().map(|p| p.pred).collect();
            let gts: Vec<_> = param_pairs.iter().map(|p| p.gt).collect();
            median_errors(&pred_label, &preds, &gts)?
        };

        sections.push(ReportSection {
            view,
            title: section_title(view).to_string(),
            n_studies: members.len(),
            parameters,
            errors,
            rank_sum,
            icc,
            pck: pck_curve,
            radar,
        });
    }

    Ok(EvaluationReport {
        cohort_id: opts.cohort_id.clone(),
        pred_label,
        gt_label,
        metadata: ReportMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            quartile_rule: QUARTILE_RULE.to_string(),
            sd_rule: SD_RULE.to_string(),
            icc_form: IccModel::TwoWayRandomAbsoluteSingle,
            rank_sum_rule: RANK_SUM_RULE.to_string(),
            pck_rule: PCK_RULE.to_string(),
            thresholds_mm: opts.thresholds_mm.clone(),
            stratifier: stratifier.map(|s| s.name),
            seed: opts.seed,
        },
        sections,
        unmatched_study_ids: unmatched,
        failures,
    })
}

/// Align, then build with labels taken from the records' rater ids when
/// each side has a single one.
pub fn evaluate_cohort(
    preds: Vec<AnnotationRecord>,
    gts: Vec<AnnotationRecord>,
    opts: &ReportOptions,
) -> Result<EvaluationReport, ReportError> {
    let opts = ReportOptions {
        pred_label: cohort_label(&preds, &opts.pred_label),
        gt_label: cohort_label(&gts, &opts.gt_label),
        ..opts.clone()
    };
    let aligned = align(preds, gts)?;
    build_report(&aligned.pairs, &BTreeMap::new(), aligned.unmatched, &opts)
}

fn csv_string(header: &[&str], rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
}

fn pair_1dp(a: f64, b: f64) -> String {
    format!("{a:.1} ({b:.1})")
}

pub fn format_p(p: f64) -> String {
    if p < 0.01 {
        "<0.01".to_string()
    } else {
        format!("{p:.2}")
    }
}

const NA: &str = "NA";

pub const ERROR_TABLE_HEADER: [&str; 9] = [
    "section",
    "parameter",
    "unit",
    "n",
    "overall_mean_sd",
    "overall_median_iqr",
    "median_iqr_with_instrumentation",
    "median_iqr_without_instrumentation",
    "p_value",
];

/// Error table: whole-spine block then lumbosacral block, one decimal.
pub fn error_table_csv(report: &EvaluationReport) -> String {
    let mut rows = Vec::new();
    for section in &report.sections {
        for &param in &section.parameters {
            let overall = section.errors.as_ref().and_then(|e| e.overall.parameters.get(&param));
            let stratum = |idx: usize| -> String {
                section
                    .errors
                    .as_ref()
                    .and_then(|e| e.strata.get(idx))
                    .and_then(|s| s.summary.as_ref())
                    .and_then(|s| s.parameters.get(&param))
                    .map_or_else(|| NA.to_string(), |d| pair_1dp(d.median, d.iqr))
            };
            rows.push(vec![
                section.title.clone(),
                param.to_string(),
                param.unit().to_string(),
                overall.map_or(0, |d| d.n).to_string(),
                overall.map_or_else(|| NA.to_string(), |d| pair_1dp(d.mean, d.sd)),
                overall.map_or_else(|| NA.to_string(), |d| pair_1dp(d.median, d.iqr)),
                stratum(0),
                stratum(1),
                section
                    .rank_sum
                    .get(&param)
                    .map_or_else(|| NA.to_string(), |r| format_p(r.p_two_sided)),
            ]);
        }
    }
    csv_string(&ERROR_TABLE_HEADER, rows)
}

pub const PCK_HEADER: [&str; 4] = ["section", "landmark", "threshold_mm", "pck"];
pub const PCK_POOLED: &str = "ALL_POOLED";
pub const PCK_MEAN: &str = "ALL_MEAN";

pub fn pck_csv(report: &EvaluationReport) -> String {
    let mut rows = Vec::new();
    for section in &report.sections {
        let Some(curve) = &section.pck else { continue };
        let mut emit = |label: &str, values: &[f64]| {
            for (t, v) in curve.thresholds_mm.iter().zip(values) {
                rows.push(vec![section.title.clone(), label.to_string(), format!("{t}"), format!("{v:.4}")]);
            }
        };
        for lm in EvalLandmark::ALL {
            if let Some(values) = curve.per_landmark.get(&lm) {
                emit(lm.as_str(), values);
            }
        }
        emit(PCK_POOLED, &curve.overall);
        emit(PCK_MEAN, &curve.mean_of_landmarks);
    }
    csv_string(&PCK_HEADER, rows)
}

pub const ICC_HEADER: [&str; 5] = ["section", "parameter", "rater_a", "rater_b", "icc"];

pub fn icc_csv(report: &EvaluationReport) -> String {
    let mut rows = Vec::new();
    for section in &report.sections {
        for (param, matrix) in &section.icc {
            for (a, b, v) in matrix.rows() {
                rows.push(vec![
                    section.title.clone(),
                    param.to_string(),
                    a.to_string(),
                    b.to_string(),
                    v.map_or_else(|| NA.to_string(), |x| format!("{x:.4}")),
                ]);
            }
        }
    }
    csv_string(&ICC_HEADER, rows)
}

pub const RADAR_HEADER: [&str; 3] = ["source", "parameter", "median_error"];

pub fn radar_csv(rows: &[RadarRecord]) -> String {
    csv_string(
        &RADAR_HEADER,
        rows.iter()
            .map(|r| vec![r.source.clone(), r.parameter.to_string(), format!("{:.4}", r.median_error)])
            .collect(),
    )
}

/// Radar rows of the whole-spine section.
pub fn report_radar(report: &EvaluationReport) -> &[RadarRecord] {
    &report.section(View::WholeSpine).radar
}
