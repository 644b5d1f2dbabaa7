//! Seeded synthetic cohorts: plausible whole-spine annotations plus noisy
//! "model" copies of them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{
    crop_to_window, lumbosacral_window, AnnotationRecord, BoxRegion, ClinicalMetadata,
    DatasetError, ImageRef, Rect, Source, SCHEMA_VERSION,
};
use crate::geometry::{Keypoint, KeypointSet, Landmark, Point, View};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub n_studies: usize,
    pub seed: u64,
    /// Per-coordinate standard deviation of the prediction noise, in mm.
    pub noise_sigma_mm: f64,
    pub pixel_spacing_px_per_mm: f64,
    pub width_px: u32,
    pub height_px: u32,
    pub instrumentation_rate: f64,
    pub gt_rater: String,
    pub pred_rater: String,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            n_studies: 40,
            seed: 0,
            noise_sigma_mm: 1.0,
            pixel_spacing_px_per_mm: 3.730,
            width_px: 1400,
            height_px: 3600,
            instrumentation_rate: 0.5,
            gt_rater: "GT".into(),
            pred_rater: "MODEL".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCohort {
    pub gt: Vec<AnnotationRecord>,
    pub pred: Vec<AnnotationRecord>,
}

const MARGIN_PX: f64 = 60.0;
const BOX_PAD_PX: f64 = 25.0;

fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

/// Landmarks in the anatomic frame (mm, X anterior, Y superior, origin at
/// the S1 midpoint).
fn sample_anatomy<R: Rng>(rng: &mut R) -> Vec<(Landmark, Point)> {
    let (pt, ss) = loop {
        let pt: f64 = rng.random_range(5.0..30.0);
        let pi: f64 = rng.random_range(35.0..75.0);
        let ss = pi - pt;
        if (12.0..=60.0).contains(&ss) {
            break (pt, ss);
        }
    };
    let hip_dist: f64 = rng.random_range(90.0..120.0);
    let ha = Point::new(hip_dist * rad(pt).sin(), -hip_dist * rad(pt).cos());
    let fem_offset = Point::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));

    let s1_half: f64 = rng.random_range(17.0..23.0);
    let s1_dir = Point::new(rad(ss).cos(), -rad(ss).sin());

    let ll: f64 = rng.random_range(25.0..65.0);
    let l1_angle = ss - ll;
    let l1_dir = Point::new(rad(l1_angle).cos(), -rad(l1_angle).sin());
    let l1_normal = Point::new(-l1_dir.y, l1_dir.x);
    let l1_center = Point::new(rng.random_range(-15.0..25.0), rng.random_range(160.0..200.0));
    let l1_half: f64 = rng.random_range(18.0..23.0);
    let body_depth: f64 = rng.random_range(11.0..15.0);

    let t1pa: f64 = rng.random_range(2.0..30.0);
    let beta = rad(pt - t1pa);
    let t1_reach: f64 = rng.random_range(430.0..500.0);
    let t1 = ha + Point::new(-beta.sin(), beta.cos()) * t1_reach;
    let c7 = t1 + Point::new(rng.random_range(-5.0..5.0), rng.random_range(18.0..24.0));

    vec![
        (Landmark::C7, c7),
        (Landmark::T1, t1),
        (Landmark::L1Ant, l1_center + l1_dir * l1_half),
        (Landmark::L1Post, l1_center - l1_dir * l1_half),
        (Landmark::L1Mid, l1_center - l1_normal * body_depth),
        (Landmark::S1Ant, s1_dir * s1_half),
        (Landmark::S1Post, s1_dir * -s1_half),
        (Landmark::FemL, ha + fem_offset),
        (Landmark::FemR, ha - fem_offset),
    ]
}

fn bounding_box(points: &[Point], pad: f64, w: f64, h: f64) -> Rect {
    let x0 = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - pad;
    let y0 = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min) - pad;
    let x1 = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + pad;
    let y1 = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max) + pad;
    let (x0, y0) = (x0.max(0.0), y0.max(0.0));
    Rect { x: x0, y: y0, w: x1.min(w) - x0, h: y1.min(h) - y0 }
}

/// One ground-truth whole-spine study.
pub fn synth_study<R: Rng>(rng: &mut R, study_id: &str, opts: &SynthOptions) -> AnnotationRecord {
    let s = opts.pixel_spacing_px_per_mm;
    let (w, h) = (f64::from(opts.width_px), f64::from(opts.height_px));
    let raster = loop {
        let anatomy = sample_anatomy(rng);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        // x = ox + sign*X*s, y = oy - Y*s
        let xs: Vec<f64> = anatomy.iter().map(|(_, p)| sign * p.x * s).collect();
        let ys: Vec<f64> = anatomy.iter().map(|(_, p)| -p.y * s).collect();
        let (xlo, xhi) = min_max(&xs);
        let (ylo, yhi) = min_max(&ys);
        let (ox_lo, ox_hi) = (MARGIN_PX - xlo, w - MARGIN_PX - xhi);
        let (oy_lo, oy_hi) = (MARGIN_PX - ylo, h - MARGIN_PX - yhi);
        if ox_lo >= ox_hi || oy_lo >= oy_hi {
            continue;
        }
        let ox = rng.random_range(ox_lo..ox_hi);
        let oy = rng.random_range(oy_lo..oy_hi);
        let raster: Vec<(Landmark, Point)> = anatomy
            .iter()
            .map(|&(name, p)| (name, Point::new(ox + sign * p.x * s, oy - p.y * s)))
            .collect();
        break raster;
    };

    let kps = raster.iter().map(|&(name, p)| Keypoint::new(name, p.x, p.y));
    let keypoints = KeypointSet::new(kps, s, View::WholeSpine).expect("synthetic keypoints are valid");
    let mut boxes = BTreeMap::new();
    for region in [BoxRegion::L1, BoxRegion::S1] {
        let pts: Vec<Point> = region.landmarks().iter().filter_map(|&l| keypoints.visible(l)).collect();
        boxes.insert(region, bounding_box(&pts, BOX_PAD_PX, w, h));
    }

    let instrumented = rng.random_bool(opts.instrumentation_rate.clamp(0.0, 1.0));
    AnnotationRecord {
        schema_version: SCHEMA_VERSION.into(),
        study_id: study_id.to_string(),
        rater_id: opts.gt_rater.clone(),
        source: Source::Human,
        image: ImageRef {
            file_path: format!("images/{study_id}.png"),
            width_px: opts.width_px,
            height_px: opts.height_px,
            pixel_spacing_px_per_mm: s,
            crop: None,
        },
        keypoints,
        boxes: Some(boxes),
        metadata: ClinicalMetadata {
            spinal_instrumentation: instrumented,
            levels_instrumented: instrumented.then(|| rng.random_range(1..=12)),
            ..ClinicalMetadata::default()
        },
    }
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Copy of `gt` with independent Gaussian noise on every coordinate,
/// clamped to the image. Boxes are dropped.
pub fn perturb<R: Rng>(
    gt: &AnnotationRecord,
    sigma_mm: f64,
    rater: &str,
    rng: &mut R,
) -> AnnotationRecord {
    let sigma_px = (sigma_mm * gt.image.pixel_spacing_px_per_mm).max(0.0);
    let noise = Normal::new(0.0, sigma_px).expect("finite non-negative sigma");
    let (w, h) = (f64::from(gt.image.width_px), f64::from(gt.image.height_px));
    let keypoints = gt.keypoints.map_points(|p| {
        let x = (p.x + noise.sample(rng)).clamp(0.0, w);
        let y = (p.y + noise.sample(rng)).clamp(0.0, h);
        Point::new(x, y)
    });
    AnnotationRecord {
        rater_id: rater.to_string(),
        source: Source::Model,
        keypoints,
        boxes: None,
        ..gt.clone()
    }
}

pub fn study_id(index: usize) -> String {
    format!("SYN{:04}", index + 1)
}

pub fn synth_cohort(opts: &SynthOptions) -> SynthCohort {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut gt = Vec::with_capacity(opts.n_studies);
    let mut pred = Vec::with_capacity(opts.n_studies);
    for i in 0..opts.n_studies {
        let g = synth_study(&mut rng, &study_id(i), opts);
        pred.push(perturb(&g, opts.noise_sigma_mm, &opts.pred_rater, &mut rng));
        gt.push(g);
    }
    SynthCohort { gt, pred }
}

/// Lumbosacral counterparts: both sides are cropped with the window
/// derived from the ground truth.
pub fn lumbosacral_cohort(cohort: &SynthCohort, margin: f64) -> Result<SynthCohort, DatasetError> {
    let mut gt = Vec::with_capacity(cohort.gt.len());
    let mut pred = Vec::with_capacity(cohort.pred.len());
    for (g, p) in cohort.gt.iter().zip(&cohort.pred) {
        let window = lumbosacral_window(g, margin)?;
        gt.push(crop_to_window(g, &window));
        let mut cropped = crop_to_window(p, &window);
        let (cw, ch) = (window.w, window.h);
        cropped.keypoints =
            cropped.keypoints.map_points(|q| Point::new(q.x.clamp(0.0, cw), q.y.clamp(0.0, ch)));
        pred.push(cropped);
    }
    Ok(SynthCohort { gt, pred })
}
