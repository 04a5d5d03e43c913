//! Landmark registration and the emotion / geometric feature representations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const LANDMARK_COUNT: usize = 49;
pub const FEATURE_COUNT: usize = 9;
pub const EMOTION_COUNT: usize = 7;
pub const STATS_FILE_VERSION: u32 = 1;

/// Tolerance on `sum(p) == 1` for emotion distributions.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

pub type Point = [f64; 2];

/// Exactly 49 two-dimensional landmarks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct LandmarkSet {
    points: Vec<Point>,
}

impl TryFrom<Vec<Point>> for LandmarkSet {
    type Error = Error;

    fn try_from(points: Vec<Point>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<LandmarkSet> for Vec<Point> {
    fn from(l: LandmarkSet) -> Self {
        l.points
    }
}

impl LandmarkSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::dim("landmark set", LANDMARK_COUNT, points.len()));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::invalid(format!("landmark {i} is not finite")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn centroid(&self) -> Point {
        centroid(&self.points)
    }

    /// Applies `p -> A p + t` to every point.
    pub fn transformed(&self, xf: &AffineTransform) -> Self {
        Self {
            points: self.points.iter().map(|p| xf.apply(*p)).collect(),
        }
    }
}

fn centroid(points: &[Point]) -> Point {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
    [sx / n, sy / n]
}

/// The average frontal face that raw landmarks are registered onto.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFace(LandmarkSet);

#[derive(Serialize, Deserialize)]
struct MeanFaceFile {
    version: u32,
    points: LandmarkSet,
}

const BUNDLED_MEAN_FACE: &str = include_str!("../data/mean_face.json");

impl MeanFace {
    pub fn new(points: LandmarkSet) -> Result<Self> {
        let c = points.centroid();
        if c[0].abs() > 1e-9 || c[1].abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "mean face centroid ({}, {}) is not at the origin",
                c[0], c[1]
            )));
        }
        Ok(Self(points))
    }

    /// The canonical 49-point frontal layout shipped with the crate.
    pub fn bundled() -> Self {
        let file: MeanFaceFile =
            serde_json::from_str(BUNDLED_MEAN_FACE).expect("bundled mean face parses");
        Self::new(file.points).expect("bundled mean face is centred")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MeanFaceFile = io::read_json(path)?;
        io::check_version(path, file.version, 1)?;
        Self::new(file.points).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &MeanFaceFile {
                version: 1,
                points: self.0.clone(),
            },
        )
    }

    /// Re-fits a mean face from a landmark corpus: each sample is centred
    /// and scaled to unit RMS radius, then the samples are averaged.
    pub fn fit(corpus: &[LandmarkSet]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("cannot fit a mean face from an empty corpus"));
        }
        let mut acc = vec![[0.0f64; 2]; LANDMARK_COUNT];
        for sample in corpus {
            let c = sample.centroid();
            let rms = (sample
                .points
                .iter()
                .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
                .sum::<f64>()
                / LANDMARK_COUNT as f64)
                .sqrt();
            if rms == 0.0 {
                return Err(Error::Degenerate("landmark sample collapses to a point".into()));
            }
            for (a, p) in acc.iter_mut().zip(&sample.points) {
                a[0] += (p[0] - c[0]) / rms;
                a[1] += (p[1] - c[1]) / rms;
            }
        }
        let n = corpus.len() as f64;
        let mut pts: Vec<Point> = acc.iter().map(|a| [a[0] / n, a[1] / n]).collect();
        let c = centroid(&pts);
        for p in &mut pts {
            p[0] -= c[0];
            p[1] -= c[1];
        }
        Self::new(LandmarkSet::new(pts)?)
    }

    pub fn landmarks(&self) -> &LandmarkSet {
        &self.0
    }
}

/// 2-D affine map `p -> A p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub a: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        a: [[1.0, 0.0], [0.0, 1.0]],
        t: [0.0, 0.0],
    };

    pub fn apply(&self, p: Point) -> Point {
        [
            self.a[0][0] * p[0] + self.a[0][1] * p[1] + self.t[0],
            self.a[1][0] * p[0] + self.a[1][1] * p[1] + self.t[1],
        ]
    }
}

/// Least-squares affine transform taking `raw` onto `mean`.
///
/// Works in centred coordinates: with both sets centred the optimal
/// translation maps centroid to centroid, and the linear part solves the
/// 2x2 normal equations `A (P Pᵀ) = M Pᵀ`.
pub fn fit_affine(raw: &LandmarkSet, mean: &MeanFace) -> Result<AffineTransform> {
    let target = mean.landmarks();
    let rc = raw.centroid();
    let mc = target.centroid();

    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let mut cross = [[0.0f64; 2]; 2]; // sum of m̃ p̃ᵀ
    for (p, m) in raw.points.iter().zip(&target.points) {
        let px = p[0] - rc[0];
        let py = p[1] - rc[1];
        let mx = m[0] - mc[0];
        let my = m[1] - mc[1];
        sxx += px * px;
        sxy += px * py;
        syy += py * py;
        cross[0][0] += mx * px;
        cross[0][1] += mx * py;
        cross[1][0] += my * px;
        cross[1][1] += my * py;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = (sxx + syy) * (sxx + syy);
    if !(scale > 0.0) || det <= 1e-12 * scale {
        return Err(Error::Degenerate(
            "landmarks are collinear; affine registration is rank deficient".into(),
        ));
    }
    // inverse of [[sxx, sxy], [sxy, syy]]
    let inv = [[syy / det, -sxy / det], [-sxy / det, sxx / det]];
    let mut a = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            a[r][c] = cross[r][0] * inv[0][c] + cross[r][1] * inv[1][c];
        }
    }
    let t = [
        mc[0] - (a[0][0] * rc[0] + a[0][1] * rc[1]),
        mc[1] - (a[1][0] * rc[0] + a[1][1] * rc[1]),
    ];
    Ok(AffineTransform { a, t })
}

pub fn register_landmarks(raw: &LandmarkSet, mean: &MeanFace) -> Result<LandmarkSet> {
    let xf = fit_affine(raw, mean)?;
    Ok(raw.transformed(&xf))
}

/// Names the landmark indices that the geometric features are measured
/// between. "Left" and "right" refer to image left and right.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticIndexMap {
    pub left_mouth_corner: usize,
    pub right_mouth_corner: usize,
    pub upper_lip: usize,
    pub lower_lip: usize,
    pub nose_left: usize,
    pub nose_right: usize,
    pub left_brow_top: usize,
    pub right_brow_top: usize,
    pub left_eye_top: usize,
    pub left_eye_bottom: usize,
    pub right_eye_top: usize,
    pub right_eye_bottom: usize,
    pub left_lower_eyelid: usize,
    pub right_lower_eyelid: usize,
}

#[derive(Deserialize)]
struct SemanticMapFile {
    version: u32,
    #[serde(flatten)]
    map: SemanticIndexMap,
}

const BUNDLED_SEMANTIC_MAP: &str = include_str!("../data/semantic_map.json");

impl Default for SemanticIndexMap {
    /// The map for the bundled 49-point frontal layout.
    fn default() -> Self {
        let file: SemanticMapFile =
            serde_json::from_str(BUNDLED_SEMANTIC_MAP).expect("bundled semantic map parses");
        file.map
    }
}

impl SemanticIndexMap {
    pub fn load(path: &Path) -> Result<Self> {
        let file: SemanticMapFile = io::read_json(path)?;
        io::check_version(path, file.version, 1)?;
        file.map.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(file.map)
    }

    fn entries(&self) -> [(&'static str, usize); 14] {
        [
            ("left_mouth_corner", self.left_mouth_corner),
            ("right_mouth_corner", self.right_mouth_corner),
            ("upper_lip", self.upper_lip),
            ("lower_lip", self.lower_lip),
            ("nose_left", self.nose_left),
            ("nose_right", self.nose_right),
            ("left_brow_top", self.left_brow_top),
            ("right_brow_top", self.right_brow_top),
            ("left_eye_top", self.left_eye_top),
            ("left_eye_bottom", self.left_eye_bottom),
            ("right_eye_top", self.right_eye_top),
            ("right_eye_bottom", self.right_eye_bottom),
            ("left_lower_eyelid", self.left_lower_eyelid),
            ("right_lower_eyelid", self.right_lower_eyelid),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, idx) in self.entries() {
            if idx >= LANDMARK_COUNT {
                return Err(Error::invalid(format!(
                    "semantic index {name} = {idx} out of range [0, {LANDMARK_COUNT})"
                )));
            }
        }
        // Pairs whose distance is measured must be distinct points.
        let pairs = [
            ("mouth corners", self.left_mouth_corner, self.right_mouth_corner),
            ("lips", self.upper_lip, self.lower_lip),
            ("nose", self.nose_left, self.nose_right),
            ("left eye", self.left_eye_top, self.left_eye_bottom),
            ("right eye", self.right_eye_top, self.right_eye_bottom),
        ];
        for (what, a, b) in pairs {
            if a == b {
                return Err(Error::invalid(format!("{what} share landmark index {a}")));
            }
        }
        Ok(())
    }
}

/// The nine distances: mouth width, closed-mouth height, nose width, left
/// and right eyebrow height, left and right eyelid height, left and right
/// lip height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeometricFeatureVector(pub [f64; FEATURE_COUNT]);

impl GeometricFeatureVector {
    pub const NAMES: [&'static str; FEATURE_COUNT] = [
        "mouth_width",
        "closed_mouth_height",
        "nose_width",
        "left_eyebrow_height",
        "right_eyebrow_height",
        "left_eyelid_height",
        "right_eyelid_height",
        "left_lip_height",
        "right_lip_height",
    ];

    pub fn as_array(&self) -> &[f64; FEATURE_COUNT] {
        &self.0
    }

    pub fn validate_normalized(&self) -> Result<()> {
        for (i, v) in self.0.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!(
                    "normalized feature {} = {v} outside [0, 1]",
                    Self::NAMES[i]
                )));
            }
        }
        Ok(())
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn vertical(a: Point, b: Point) -> f64 {
    (a[1] - b[1]).abs()
}

pub fn geometric_features(
    registered: &LandmarkSet,
    map: &SemanticIndexMap,
) -> Result<GeometricFeatureVector> {
    map.validate()?;
    let p = |i: usize| registered.points[i];
    let eye_center = |top: usize, bottom: usize| {
        let (t, b) = (p(top), p(bottom));
        [(t[0] + b[0]) / 2.0, (t[1] + b[1]) / 2.0]
    };
    let left_eye = eye_center(map.left_eye_top, map.left_eye_bottom);
    let right_eye = eye_center(map.right_eye_top, map.right_eye_bottom);
    Ok(GeometricFeatureVector([
        dist(p(map.left_mouth_corner), p(map.right_mouth_corner)),
        vertical(p(map.upper_lip), p(map.lower_lip)),
        dist(p(map.nose_left), p(map.nose_right)),
        vertical(p(map.left_brow_top), left_eye),
        vertical(p(map.right_brow_top), right_eye),
        vertical(p(map.left_eye_top), p(map.left_eye_bottom)),
        vertical(p(map.right_eye_top), p(map.right_eye_bottom)),
        vertical(p(map.left_mouth_corner), p(map.left_lower_eyelid)),
        vertical(p(map.right_mouth_corner), p(map.right_lower_eyelid)),
    ]))
}

/// Per-component min/max of raw geometric features over a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub min: [f64; FEATURE_COUNT],
    pub max: [f64; FEATURE_COUNT],
}

#[derive(Serialize, Deserialize)]
struct StatsFile {
    version: u32,
    log_base: String,
    #[serde(flatten)]
    stats: FeatureStats,
}

impl FeatureStats {
    pub fn new(min: [f64; FEATURE_COUNT], max: [f64; FEATURE_COUNT]) -> Result<Self> {
        for i in 0..FEATURE_COUNT {
            if !(min[i].is_finite() && max[i].is_finite()) || min[i] > max[i] {
                return Err(Error::invalid(format!(
                    "feature stats component {i}: min {} > max {}",
                    min[i], max[i]
                )));
            }
        }
        Ok(Self { min, max })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: StatsFile = io::read_json(path)?;
        io::check_version(path, file.version, STATS_FILE_VERSION)?;
        if file.log_base != crate::retrieval::LOG_BASE {
            return Err(Error::format(path, format!("unsupported log base '{}'", file.log_base)));
        }
        Self::new(file.stats.min, file.stats.max).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &StatsFile {
                version: STATS_FILE_VERSION,
                log_base: crate::retrieval::LOG_BASE.into(),
                stats: *self,
            },
        )
    }

    /// Inverse of [`normalize_features`] for in-range values.
    pub fn denormalize(&self, normalized: &GeometricFeatureVector) -> GeometricFeatureVector {
        let mut out = [0.0; FEATURE_COUNT];
        for i in 0..FEATURE_COUNT {
            out[i] = self.min[i] + normalized.0[i] * (self.max[i] - self.min[i]);
        }
        GeometricFeatureVector(out)
    }
}

pub fn fit_stats(dataset: &[GeometricFeatureVector]) -> Result<FeatureStats> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::invalid("cannot fit feature stats on an empty dataset"))?;
    let mut min = first.0;
    let mut max = first.0;
    for v in &dataset[1..] {
        for i in 0..FEATURE_COUNT {
            min[i] = min[i].min(v.0[i]);
            max[i] = max[i].max(v.0[i]);
        }
    }
    FeatureStats::new(min, max)
}

/// Min-max rescale into `[0, 1]`. Degenerate components map to 0 and
/// out-of-range values clamp.
pub fn normalize_features(raw: &GeometricFeatureVector, stats: &FeatureStats) -> GeometricFeatureVector {
    let mut out = [0.0; FEATURE_COUNT];
    for i in 0..FEATURE_COUNT {
        let span = stats.max[i] - stats.min[i];
        out[i] = if span > 0.0 {
            ((raw.0[i] - stats.min[i]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
    }
    GeometricFeatureVector(out)
}

/// Probabilities over (neutral, anger, sadness, fear, disgust, joy, surprise).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; EMOTION_COUNT]", into = "[f64; EMOTION_COUNT]")]
pub struct EmotionDistribution([f64; EMOTION_COUNT]);

impl TryFrom<[f64; EMOTION_COUNT]> for EmotionDistribution {
    type Error = Error;

    fn try_from(p: [f64; EMOTION_COUNT]) -> Result<Self> {
        Self::new(p)
    }
}

impl From<EmotionDistribution> for [f64; EMOTION_COUNT] {
    fn from(e: EmotionDistribution) -> Self {
        e.0
    }
}

impl EmotionDistribution {
    pub const CLASSES: [&'static str; EMOTION_COUNT] =
        ["neutral", "anger", "sadness", "fear", "disgust", "joy", "surprise"];

    pub fn new(p: [f64; EMOTION_COUNT]) -> Result<Self> {
        for (i, v) in p.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::invalid(format!(
                    "emotion probability {} = {v} outside [0, 1]",
                    Self::CLASSES[i]
                )));
            }
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("emotion probabilities sum to {sum}, not 1")));
        }
        Ok(Self(p))
    }

    pub fn one_hot(class: usize) -> Self {
        let mut p = [0.0; EMOTION_COUNT];
        p[class] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64; EMOTION_COUNT] {
        &self.0
    }

    /// Index of the most probable class (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..EMOTION_COUNT {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// One line of a landmark file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub id: String,
    pub points: LandmarkSet,
}

/// Reads a newline-delimited landmark file (`{"id": .., "points": [[x, y], ..]}` per line).
pub fn load_landmark_file(path: &Path) -> Result<Vec<LandmarkRecord>> {
    let text = io::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

pub fn save_landmark_file(path: &Path, records: &[LandmarkRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::format(path, e.to_string()))?);
        out.push('\n');
    }
    io::write_string(path, &out)
}
