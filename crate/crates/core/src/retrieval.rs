//! Emotional and geometric distances and two-step (emotion, then geometry)
//! retrieval over expression databases.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    normalize_features, EmotionDistribution, FeatureStats, GeometricFeatureVector, EMOTION_COUNT,
};
use crate::io;

/// Logarithm used by every divergence; written into file headers.
pub const LOG_BASE: &str = "e";
pub const DATABASE_FILE_VERSION: u32 = 1;
/// Size of the emotional shortlist.
pub const DEFAULT_K: usize = 30;

/// `sum p_i ln(p_i / q_i)` with `0 ln(0 / x) = 0`.
pub fn kl_divergence(p: &EmotionDistribution, q: &EmotionDistribution) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InfiniteDivergence { index: i });
        }
        acc += pi * (pi / qi).ln();
    }
    Ok(acc)
}

/// Jensen-Shannon divergence `½ D(H‖M) + ½ D(C‖M)`, `M = ½(H + C)`.
pub fn jsd(h: &EmotionDistribution, c: &EmotionDistribution) -> f64 {
    let mut dh = 0.0;
    let mut dc = 0.0;
    for (&hi, &ci) in h.probs().iter().zip(c.probs()) {
        let mi = 0.5 * (hi + ci);
        if hi > 0.0 {
            dh += hi * (hi / mi).ln();
        }
        if ci > 0.0 {
            dc += ci * (ci / mi).ln();
        }
    }
    0.5 * dh + 0.5 * dc
}

pub fn geometric_distance(a: &GeometricFeatureVector, b: &GeometricFeatureVector) -> f64 {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expression {
    Neutral,
    Anger,
    Sadness,
    Fear,
    Disgust,
    Joy,
    Surprise,
}

impl Expression {
    pub const ALL: [Expression; EMOTION_COUNT] = [
        Expression::Neutral,
        Expression::Anger,
        Expression::Sadness,
        Expression::Fear,
        Expression::Disgust,
        Expression::Joy,
        Expression::Surprise,
    ];

    /// Position in the emotion distribution.
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionRecord {
    pub id: String,
    pub emotion: EmotionDistribution,
    pub geometry: GeometricFeatureVector,
    pub label: Expression,
    /// Controller-frame id, image path or frame index.
    pub payload: String,
}

/// Which population a database was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum SourceTag {
    Human,
    Character(String),
}

impl From<String> for SourceTag {
    fn from(s: String) -> Self {
        if s == "human" {
            SourceTag::Human
        } else {
            SourceTag::Character(s)
        }
    }
}

impl From<SourceTag> for String {
    fn from(t: SourceTag) -> Self {
        t.to_string()
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceTag::Human => f.write_str("human"),
            SourceTag::Character(id) => f.write_str(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionDatabase {
    records: Vec<ExpressionRecord>,
    stats: FeatureStats,
    source_tag: SourceTag,
}

#[derive(Serialize, Deserialize)]
struct DatabaseHeader {
    version: u32,
    source_tag: SourceTag,
    log_base: String,
    stats: FeatureStats,
}

impl ExpressionDatabase {
    pub fn new(records: Vec<ExpressionRecord>, stats: FeatureStats, source_tag: SourceTag) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate record id '{}'", r.id)));
            }
            r.geometry
                .validate_normalized()
                .map_err(|e| Error::invalid(format!("record '{}': {e}", r.id)))?;
        }
        Ok(Self {
            records,
            stats,
            source_tag,
        })
    }

    pub fn records(&self) -> &[ExpressionRecord] {
        &self.records
    }

    pub fn stats(&self) -> &FeatureStats {
        &self.stats
    }

    pub fn source_tag(&self) -> &SourceTag {
        &self.source_tag
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Header line followed by one JSON record per line.
    pub fn to_text(&self) -> String {
        let header = DatabaseHeader {
            version: DATABASE_FILE_VERSION,
            source_tag: self.source_tag.clone(),
            log_base: LOG_BASE.into(),
            stats: self.stats,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::format(path, "missing header"))?;
        let header: DatabaseHeader =
            serde_json::from_str(first).map_err(|e| Error::format(path, format!("header: {e}")))?;
        io::check_version(path, header.version, DATABASE_FILE_VERSION)?;
        if header.log_base != LOG_BASE {
            return Err(Error::format(path, format!("unsupported log base '{}'", header.log_base)));
        }
        let records = lines
            .map(|(i, line)| {
                serde_json::from_str(line)
                    .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ExpressionRecord>>>()?;
        Self::new(records, header.stats, header.source_tag).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub query_id: String,
    pub match_id: String,
    pub emotional_distance: f64,
    pub geometric_distance: f64,
}

fn by_distance_then_position(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Positions of the `min(k, |db|)` records emotionally closest to `query`,
/// ordered by (jsd, position).
pub fn emotional_top_k(query: &EmotionDistribution, db: &ExpressionDatabase, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = db
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (jsd(query, &r.emotion), i))
        .collect();
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_distance_then_position);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_position);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Shortlists the `k` emotionally closest records, then returns the
/// geometrically closest of those. Ties break towards earlier records.
pub fn two_step_match(query: &ExpressionRecord, db: &ExpressionDatabase, k: usize) -> Result<MatchPair> {
    if db.is_empty() {
        return Err(Error::invalid("cannot match against an empty database"));
    }
    if k == 0 {
        return Err(Error::invalid("shortlist size k must be at least 1"));
    }
    let shortlist = emotional_top_k(&query.emotion, db, k);
    let (geo, best) = shortlist
        .iter()
        .map(|&i| (geometric_distance(&query.geometry, &db.records[i].geometry), i))
        .min_by(by_distance_then_position)
        .expect("shortlist is non-empty");
    let hit = &db.records[best];
    Ok(MatchPair {
        query_id: query.id.clone(),
        match_id: hit.id.clone(),
        emotional_distance: jsd(&query.emotion, &hit.emotion),
        geometric_distance: geo,
    })
}

/// Expresses `geometry` (normalized on `from`) in the normalization of `to`.
pub fn renormalize(geometry: &GeometricFeatureVector, from: &FeatureStats, to: &FeatureStats) -> GeometricFeatureVector {
    if from == to {
        return *geometry;
    }
    normalize_features(&from.denormalize(geometry), to)
}

/// One pair per source record, in source order.
pub fn build_pair_database(
    source: &ExpressionDatabase,
    target: &ExpressionDatabase,
    k: usize,
) -> Result<Vec<MatchPair>> {
    if target.is_empty() {
        return Err(Error::invalid("target database is empty"));
    }
    source
        .records
        .par_iter()
        .map(|r| {
            let query = ExpressionRecord {
                geometry: renormalize(&r.geometry, &source.stats, &target.stats),
                ..r.clone()
            };
            two_step_match(&query, target, k)
        })
        .collect()
}

const PAIR_HEADER: &str = "query_id,match_id,emotional_distance,geometric_distance";

fn check_csv_field(s: &str) -> Result<()> {
    if s.contains([',', '"', '\n', '\r']) {
        return Err(Error::invalid(format!("id '{s}' cannot be written to a pair CSV")));
    }
    Ok(())
}

pub fn pairs_to_csv(pairs: &[MatchPair]) -> Result<String> {
    let mut out = String::from(PAIR_HEADER);
    out.push('\n');
    for p in pairs {
        check_csv_field(&p.query_id)?;
        check_csv_field(&p.match_id)?;
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.query_id, p.match_id, p.emotional_distance, p.geometric_distance
        ));
    }
    Ok(out)
}

pub fn save_pairs(path: &Path, pairs: &[MatchPair]) -> Result<()> {
    io::write_string(path, &pairs_to_csv(pairs)?)
}

pub fn load_pairs(path: &Path) -> Result<Vec<MatchPair>> {
    let text = io::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == PAIR_HEADER => {}
        _ => return Err(Error::format(path, "missing pair CSV header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| Error::format(path, format!("line {}: {m}", i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            Ok(MatchPair {
                query_id: cols[0].to_string(),
                match_id: cols[1].to_string(),
                emotional_distance: cols[2].parse().map_err(|_| bad("bad emotional_distance"))?,
                geometric_distance: cols[3].parse().map_err(|_| bad("bad geometric_distance"))?,
            })
        })
        .collect()
}
