//! Landmark model and the seven spinopelvic parameters.
//!
//! Raster coordinates are pixels with the origin at the top-left corner and
//! `y` growing downward. All parameter math happens in an anatomic frame
//! centred on the S1 endplate midpoint with `X` pointing anterior and `Y`
//! pointing superior, so films of patients facing either way give the same
//! numbers.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Mul, Sub};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("missing landmark {0}")]
    MissingLandmark(Landmark),
    #[error("S1 endplate is vertical; anterior direction is undecidable")]
    DegenerateFrame,
    #[error("endplate corners coincide")]
    DegenerateEndplate,
    #[error("coincident points: {0}")]
    CoincidentPoints(&'static str),
    #[error("parameter sets have different views ({0} vs {1})")]
    ViewMismatch(View, View),
    #[error("duplicate landmark {0}")]
    DuplicateLandmark(Landmark),
    #[error("invalid pixel spacing {0} (must be positive and finite)")]
    InvalidSpacing(f64),
    #[error("non-finite coordinate on landmark {0}")]
    NonFiniteCoordinate(Landmark),
}

impl GeometryError {
    /// Stable short name used in API error bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            GeometryError::MissingLandmark(_) => "MissingLandmark",
            GeometryError::DegenerateFrame => "DegenerateFrame",
            GeometryError::DegenerateEndplate => "DegenerateEndplate",
            GeometryError::CoincidentPoints(_) => "CoincidentPoints",
            GeometryError::ViewMismatch(..) => "ViewMismatch",
            GeometryError::DuplicateLandmark(_) => "DuplicateLandmark",
            GeometryError::InvalidSpacing(_) => "InvalidSpacing",
            GeometryError::NonFiniteCoordinate(_) => "NonFiniteCoordinate",
        }
    }
}

/// The nine annotated landmarks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Landmark {
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
    #[serde(rename = "FEM_L")]
    FemL,
    #[serde(rename = "FEM_R")]
    FemR,
}

impl Landmark {
    pub const ALL: [Landmark; 9] = [
        Landmark::C7,
        Landmark::T1,
        Landmark::L1Ant,
        Landmark::L1Post,
        Landmark::L1Mid,
        Landmark::S1Ant,
        Landmark::S1Post,
        Landmark::FemL,
        Landmark::FemR,
    ];

    /// Landmarks a lumbosacral film must carry.
    pub const LUMBOSACRAL_REQUIRED: [Landmark; 4] =
        [Landmark::L1Ant, Landmark::L1Post, Landmark::S1Ant, Landmark::S1Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Landmark::C7 => "C7",
            Landmark::T1 => "T1",
            Landmark::L1Ant => "L1_ANT",
            Landmark::L1Post => "L1_POST",
            Landmark::L1Mid => "L1_MID",
            Landmark::S1Ant => "S1_ANT",
            Landmark::S1Post => "S1_POST",
            Landmark::FemL => "FEM_L",
            Landmark::FemR => "FEM_R",
        }
    }
}

impl fmt::Display for Landmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Landmark {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Landmark::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum View {
    WholeSpine,
    Lumbosacral,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::WholeSpine => "WHOLE_SPINE",
            View::Lumbosacral => "LUMBOSACRAL",
        }
    }

    pub fn required_landmarks(self) -> &'static [Landmark] {
        match self {
            View::WholeSpine => &Landmark::ALL,
            View::Lumbosacral => &Landmark::LUMBOSACRAL_REQUIRED,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "WHOLE_SPINE" => Ok(View::WholeSpine),
            "LUMBOSACRAL" => Ok(View::Lumbosacral),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn midpoint(self, other: Point) -> Point {
        Point::new(0.5 * (self.x + other.x), 0.5 * (self.y + other.y))
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point) -> f64 {
        (self - other).norm()
    }
}

impl Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point {
    type Output = Point;
    fn mul(self, rhs: f64) -> Point {
        Point::new(self.x * rhs, self.y * rhs)
    }
}

/// One landmark in raster pixels. Coordinates of invisible keypoints are
/// carried along but never read by any computation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub name: Landmark,
    #[serde(rename = "x")]
    pub x_px: f64,
    #[serde(rename = "y")]
    pub y_px: f64,
    #[serde(default = "default_visible")]
    pub visible: bool,
}

fn default_visible() -> bool {
    true
}

impl Keypoint {
    pub fn new(name: Landmark, x_px: f64, y_px: f64) -> Self {
        Keypoint { name, x_px, y_px, visible: true }
    }

    pub fn hidden(name: Landmark, x_px: f64, y_px: f64) -> Self {
        Keypoint { name, x_px, y_px, visible: false }
    }

    pub fn point(&self) -> Point {
        Point::new(self.x_px, self.y_px)
    }
}

/// Landmarks of one image from one rater or detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KeypointSetRepr", into = "KeypointSetRepr")]
pub struct KeypointSet {
    keypoints: BTreeMap<Landmark, Keypoint>,
    pixel_spacing: f64,
    view: View,
}

#[derive(Serialize, Deserialize)]
struct KeypointSetRepr {
    view: View,
    pixel_spacing_px_per_mm: f64,
    keypoints: Vec<Keypoint>,
}

impl TryFrom<KeypointSetRepr> for KeypointSet {
    type Error = GeometryError;

    fn try_from(repr: KeypointSetRepr) -> Result<Self, Self::Error> {
        KeypointSet::new(repr.keypoints, repr.pixel_spacing_px_per_mm, repr.view)
    }
}

impl From<KeypointSet> for KeypointSetRepr {
    fn from(ks: KeypointSet) -> Self {
        KeypointSetRepr {
            view: ks.view,
            pixel_spacing_px_per_mm: ks.pixel_spacing,
            keypoints: ks.keypoints.into_values().collect(),
        }
    }
}

impl KeypointSet {
    pub fn new(
        keypoints: impl IntoIterator<Item = Keypoint>,
        pixel_spacing_px_per_mm: f64,
        view: View,
    ) -> Result<Self, GeometryError> {
        if !(pixel_spacing_px_per_mm.is_finite() && pixel_spacing_px_per_mm > 0.0) {
            return Err(GeometryError::InvalidSpacing(pixel_spacing_px_per_mm));
        }
        let mut map = BTreeMap::new();
        for kp in keypoints {
            if !(kp.x_px.is_finite() && kp.y_px.is_finite()) {
                return Err(GeometryError::NonFiniteCoordinate(kp.name));
            }
            if map.insert(kp.name, kp).is_some() {
                return Err(GeometryError::DuplicateLandmark(kp.name));
            }
        }
        Ok(KeypointSet { keypoints: map, pixel_spacing: pixel_spacing_px_per_mm, view })
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn get(&self, name: Landmark) -> Option<&Keypoint> {
        self.keypoints.get(&name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Keypoint> {
        self.keypoints.values()
    }

    /// Raster position of a visible landmark.
    pub fn visible(&self, name: Landmark) -> Option<Point> {
        self.keypoints.get(&name).filter(|k| k.visible).map(Keypoint::point)
    }

    pub fn require(&self, name: Landmark) -> Result<Point, GeometryError> {
        self.visible(name).ok_or(GeometryError::MissingLandmark(name))
    }

    /// Required landmarks for the set's view that are absent or hidden.
    pub fn missing(&self) -> Vec<Landmark> {
        self.view
            .required_landmarks()
            .iter()
            .copied()
            .filter(|&l| self.visible(l).is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.missing().is_empty()
    }

    pub fn with_view(mut self, view: View) -> Self {
        self.view = view;
        self
    }

    pub fn with_spacing(mut self, pixel_spacing: f64) -> Result<Self, GeometryError> {
        if !(pixel_spacing.is_finite() && pixel_spacing > 0.0) {
            return Err(GeometryError::InvalidSpacing(pixel_spacing));
        }
        self.pixel_spacing = pixel_spacing;
        Ok(self)
    }

    /// Applies `f` to every keypoint position, visible or not.
    pub fn map_points(&self, mut f: impl FnMut(Point) -> Point) -> Self {
        let keypoints = self
            .keypoints
            .iter()
            .map(|(&name, kp)| {
                let p = f(kp.point());
                (name, Keypoint { x_px: p.x, y_px: p.y, ..*kp })
            })
            .collect();
        KeypointSet { keypoints, ..*self }
    }

    pub fn set_visible(&mut self, name: Landmark, visible: bool) {
        if let Some(kp) = self.keypoints.get_mut(&name) {
            kp.visible = visible;
        }
    }
}

/// Orientation of the anatomic frame relative to raster axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnatomicFrame {
    /// `+1` when raster `+x` points anterior.
    pub anterior_sign: f64,
    pub origin: Point,
}

impl AnatomicFrame {
    pub fn to_anatomic(&self, raster: Point) -> Point {
        Point::new(
            self.anterior_sign * (raster.x - self.origin.x),
            -(raster.y - self.origin.y),
        )
    }
}

pub fn infer_anatomic_frame(ks: &KeypointSet) -> Result<AnatomicFrame, GeometryError> {
    let ant = ks.require(Landmark::S1Ant)?;
    let post = ks.require(Landmark::S1Post)?;
    let dx = ant.x - post.x;
    if dx == 0.0 {
        return Err(GeometryError::DegenerateFrame);
    }
    Ok(AnatomicFrame { anterior_sign: dx.signum(), origin: ant.midpoint(post) })
}

pub fn to_anatomic(
    ks: &KeypointSet,
    frame: &AnatomicFrame,
    name: Landmark,
) -> Result<Point, GeometryError> {
    ks.require(name).map(|p| frame.to_anatomic(p))
}

/// Wraps an angle in degrees into (-180, 180].
pub fn normalize_degrees(angle: f64) -> f64 {
    let mut a = angle.rem_euclid(360.0);
    if a > 180.0 {
        a -= 360.0;
    }
    a
}

fn atan2_deg(y: f64, x: f64) -> f64 {
    normalize_degrees(y.atan2(x).to_degrees())
}

/// Inclination of an endplate given its corners in anatomic coordinates.
/// Positive when the anterior corner sits below the posterior one.
pub fn endplate_angle(ant: Point, post: Point) -> Result<f64, GeometryError> {
    let e = ant - post;
    if e.x == 0.0 && e.y == 0.0 {
        return Err(GeometryError::DegenerateEndplate);
    }
    Ok(atan2_deg(-e.y, e.x))
}

/// Which of the seven parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Parameter {
    Sva,
    Pt,
    Ss,
    Pi,
    Ll,
    T1pa,
    L1pa,
}

impl Parameter {
    pub const ALL: [Parameter; 7] = [
        Parameter::Sva,
        Parameter::Pt,
        Parameter::Ss,
        Parameter::Pi,
        Parameter::Ll,
        Parameter::T1pa,
        Parameter::L1pa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Parameter::Sva => "SVA",
            Parameter::Pt => "PT",
            Parameter::Ss => "SS",
            Parameter::Pi => "PI",
            Parameter::Ll => "LL",
            Parameter::T1pa => "T1PA",
            Parameter::L1pa => "L1PA",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Parameter::Sva => "mm",
            _ => "deg",
        }
    }
}

impl fmt::Display for Parameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Parameter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Parameter::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| s.to_string())
    }
}

/// Computed parameters. Absent values are `None`, never zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinopelvicParameters {
    pub view: View,
    pub sva_mm: Option<f64>,
    pub pt_deg: Option<f64>,
    pub ss_deg: Option<f64>,
    pub pi_deg: Option<f64>,
    pub ll_deg: Option<f64>,
    pub t1pa_deg: Option<f64>,
    pub l1pa_deg: Option<f64>,
}

impl SpinopelvicParameters {
    pub fn empty(view: View) -> Self {
        SpinopelvicParameters {
            view,
            sva_mm: None,
            pt_deg: None,
            ss_deg: None,
            pi_deg: None,
            ll_deg: None,
            t1pa_deg: None,
            l1pa_deg: None,
        }
    }

    pub fn get(&self, p: Parameter) -> Option<f64> {
        match p {
            Parameter::Sva => self.sva_mm,
            Parameter::Pt => self.pt_deg,
            Parameter::Ss => self.ss_deg,
            Parameter::Pi => self.pi_deg,
            Parameter::Ll => self.ll_deg,
            Parameter::T1pa => self.t1pa_deg,
            Parameter::L1pa => self.l1pa_deg,
        }
    }

    pub fn set(&mut self, p: Parameter, value: Option<f64>) {
        let slot = match p {
            Parameter::Sva => &mut self.sva_mm,
            Parameter::Pt => &mut self.pt_deg,
            Parameter::Ss => &mut self.ss_deg,
            Parameter::Pi => &mut self.pi_deg,
            Parameter::Ll => &mut self.ll_deg,
            Parameter::T1pa => &mut self.t1pa_deg,
            Parameter::L1pa => &mut self.l1pa_deg,
        };
        *slot = value;
    }

    /// Present parameters in canonical order.
    pub fn present(&self) -> impl Iterator<Item = (Parameter, f64)> + '_ {
        Parameter::ALL.into_iter().filter_map(|p| self.get(p).map(|v| (p, v)))
    }
}

pub fn compute_parameters(ks: &KeypointSet) -> Result<SpinopelvicParameters, GeometryError> {
    if let Some(&first) = ks.missing().first() {
        return Err(GeometryError::MissingLandmark(first));
    }
    let frame = infer_anatomic_frame(ks)?;
    let at = |name| to_anatomic(ks, &frame, name);

    let s1_ant = at(Landmark::S1Ant)?;
    let s1_post = at(Landmark::S1Post)?;
    let ss = endplate_angle(s1_ant, s1_post)?;
    let l1_angle = endplate_angle(at(Landmark::L1Ant)?, at(Landmark::L1Post)?)?;
    let ll = normalize_degrees(ss - l1_angle);

    let mut out = SpinopelvicParameters::empty(ks.view());
    out.ss_deg = Some(ss);
    out.ll_deg = Some(ll);
    if ks.view() == View::Lumbosacral {
        return Ok(out);
    }

    let hip_axis = at(Landmark::FemL)?.midpoint(at(Landmark::FemR)?);
    let s1_mid = s1_ant.midpoint(s1_post);
    let v = s1_mid - hip_axis;
    if v.x == 0.0 && v.y == 0.0 {
        return Err(GeometryError::CoincidentPoints("hip axis coincides with S1 midpoint"));
    }
    let pt = atan2_deg(-v.x, v.y);

    // Superior endplate normal: (ant - post) rotated by +90 degrees.
    let e = s1_ant - s1_post;
    let normal = Point::new(-e.y, e.x);
    let pi = atan2_deg(normal.cross(v), normal.dot(v));

    let pelvic_angle = |centroid: Point, what: &'static str| -> Result<f64, GeometryError> {
        let u = centroid - hip_axis;
        if u.x == 0.0 && u.y == 0.0 {
            return Err(GeometryError::CoincidentPoints(what));
        }
        Ok(normalize_degrees(pt - atan2_deg(-u.x, u.y)))
    };
    let t1pa = pelvic_angle(at(Landmark::T1)?, "T1 centroid coincides with hip axis")?;
    let l1pa = pelvic_angle(at(Landmark::L1Mid)?, "L1 centroid coincides with hip axis")?;

    let c7 = ks.require(Landmark::C7)?;
    let s1_post_raster = ks.require(Landmark::S1Post)?;
    let sva = frame.anterior_sign * (c7.x - s1_post_raster.x) / ks.pixel_spacing();

    out.sva_mm = Some(sva);
    out.pt_deg = Some(pt);
    out.pi_deg = Some(pi);
    out.t1pa_deg = Some(t1pa);
    out.l1pa_deg = Some(l1pa);
    Ok(out)
}

/// Signed element-wise `a - b` over parameters present on both sides.
pub fn parameter_difference(
    a: &SpinopelvicParameters,
    b: &SpinopelvicParameters,
) -> Result<SpinopelvicParameters, GeometryError> {
    if a.view != b.view {
        return Err(GeometryError::ViewMismatch(a.view, b.view));
    }
    let mut out = SpinopelvicParameters::empty(a.view);
    for p in Parameter::ALL {
        out.set(p, a.get(p).zip(b.get(p)).map(|(x, y)| x - y));
    }
    Ok(out)
}
