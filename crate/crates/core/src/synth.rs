//! Seeded synthetic data: expression databases, tracker streams and the
//! ground-truth controller maps used to exercise training end to end.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::features::{EmotionDistribution, FeatureStats, GeometricFeatureVector, EMOTION_COUNT, FEATURE_COUNT};
use crate::retarget::BlendshapeFrame;
use crate::retrieval::{Expression, ExpressionDatabase, ExpressionRecord, SourceTag};
use crate::rig::ControllerFrame;

/// Random point on the simplex. Each class is dropped with probability
/// `sparsity` (at least one survives).
pub fn random_emotion(rng: &mut impl Rng, sparsity: f64) -> EmotionDistribution {
    let mut p = [0.0f64; EMOTION_COUNT];
    for v in &mut p {
        // Gamma(1) draws give a uniform Dirichlet after normalisation.
        *v = -(1.0 - rng.gen::<f64>()).ln();
        if rng.gen::<f64>() < sparsity {
            *v = 0.0;
        }
    }
    if p.iter().all(|v| *v == 0.0) {
        p[rng.gen_range(0..EMOTION_COUNT)] = 1.0;
    }
    normalized(p)
}

fn normalized(p: [f64; EMOTION_COUNT]) -> EmotionDistribution {
    let sum: f64 = p.iter().sum();
    EmotionDistribution::new(std::array::from_fn(|i| p[i] / sum)).expect("normalised simplex point")
}

/// `(1 - mix) * base + mix * noise`, renormalised.
pub fn perturbed_emotion(rng: &mut impl Rng, base: &EmotionDistribution, mix: f64) -> EmotionDistribution {
    let noise = random_emotion(rng, 0.0);
    normalized(std::array::from_fn(|i| {
        (1.0 - mix) * base.probs()[i] + mix * noise.probs()[i]
    }))
}

pub fn random_geometry(rng: &mut impl Rng) -> GeometricFeatureVector {
    GeometricFeatureVector(std::array::from_fn(|_| rng.gen()))
}

pub fn random_record(rng: &mut impl Rng, id: String) -> ExpressionRecord {
    let emotion = random_emotion(rng, 0.3);
    ExpressionRecord {
        payload: format!("{id}.png"),
        id,
        label: Expression::ALL[emotion.argmax()],
        emotion,
        geometry: random_geometry(rng),
    }
}

pub fn random_stats(rng: &mut impl Rng) -> FeatureStats {
    let min: [f64; FEATURE_COUNT] = std::array::from_fn(|_| rng.gen_range(0.05..0.5));
    let max = std::array::from_fn(|i| min[i] + rng.gen_range(0.2..1.0));
    FeatureStats::new(min, max).expect("ordered stats")
}

pub fn random_database(rng: &mut impl Rng, n: usize, prefix: &str, tag: SourceTag) -> ExpressionDatabase {
    let records = (0..n)
        .map(|i| random_record(rng, format!("{prefix}{i:05}")))
        .collect();
    ExpressionDatabase::new(records, random_stats(rng), tag).expect("unique ids")
}

/// A database and query where the record geometrically closest to the
/// query is emotionally far from it, with at least `k` emotionally
/// closer records in the way. Returns (query, database, decoy position).
pub fn adversarial_case(rng: &mut impl Rng, n: usize, k: usize) -> (ExpressionRecord, ExpressionDatabase, usize) {
    assert!(n > k + 1, "need room for k neighbours and a decoy");
    let query = {
        let class = rng.gen_range(0..EMOTION_COUNT);
        let base = EmotionDistribution::one_hot(class);
        ExpressionRecord {
            id: "query".into(),
            emotion: perturbed_emotion(rng, &base, 0.1),
            geometry: random_geometry(rng),
            label: Expression::ALL[class],
            payload: "query.png".into(),
        }
    };
    let decoy_at = rng.gen_range(0..n);
    let far_class = (query.label.index() + 1 + rng.gen_range(0..EMOTION_COUNT - 1)) % EMOTION_COUNT;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("r{i:05}");
        let rec = if i == decoy_at {
            ExpressionRecord {
                id,
                emotion: EmotionDistribution::one_hot(far_class),
                geometry: query.geometry,
                label: Expression::ALL[far_class],
                payload: format!("r{i:05}.png"),
            }
        } else if i % (n / (2 * k)).max(1) == 0 {
            // emotional neighbours with geometry pushed away from the query
            let mut geometry = random_geometry(rng);
            for (g, q) in geometry.0.iter_mut().zip(&query.geometry.0) {
                *g = if *q < 0.5 { 0.5 + *g * 0.5 } else { *g * 0.5 };
            }
            ExpressionRecord {
                id,
                emotion: perturbed_emotion(rng, &query.emotion, 0.05),
                geometry,
                label: query.label,
                payload: format!("r{i:05}.png"),
            }
        } else {
            random_record(rng, id)
        };
        records.push(rec);
    }
    let db = ExpressionDatabase::new(records, random_stats(rng), SourceTag::Character("adv".into()))
        .expect("unique ids");
    (query, db, decoy_at)
}

/// Smooth, mean-reverting tracker weights in `[0, 1]`.
pub fn smooth_weight_stream(rng: &mut impl Rng, channels: usize, frames: usize, fps: f64) -> Vec<BlendshapeFrame> {
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let targets: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.1..0.6)).collect();
    let mut w: Vec<f64> = targets.clone();
    let mut vel = vec![0.0f64; channels];
    (0..frames)
        .map(|t| {
            for c in 0..channels {
                vel[c] = 0.8 * vel[c] + 0.1 * (targets[c] - w[c]) + 0.04 * noise.sample(rng);
                w[c] = (w[c] + vel[c]).clamp(0.0, 1.0);
            }
            BlendshapeFrame {
                timestamp: t as f64 / fps,
                weights: w.clone(),
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Ground truth for the adaption network:
/// `α(t) = λ α(t-1) + (1 - λ) σ(A w(t) + b)`.
#[derive(Debug, Clone)]
pub struct AdaptionGroundTruth {
    pub channels: usize,
    pub controllers: usize,
    pub smoothing: f64,
    map: Vec<f64>,
    bias: Vec<f64>,
}

impl AdaptionGroundTruth {
    pub fn new(rng: &mut impl Rng, channels: usize, controllers: usize, smoothing: f64) -> Self {
        let scale = 3.0 / (channels as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let map = (0..channels * controllers).map(|_| normal.sample(rng)).collect();
        let bias = (0..controllers).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self {
            channels,
            controllers,
            smoothing,
            map,
            bias,
        }
    }

    /// The instantaneous (unsmoothed) pose for centred weights.
    pub fn pose(&self, weights: &[f64]) -> Vec<f64> {
        (0..self.controllers)
            .map(|o| {
                let row = &self.map[o * self.channels..(o + 1) * self.channels];
                let z: f64 = row.iter().zip(weights).map(|(a, w)| a * (w - 0.35)).sum::<f64>() + self.bias[o];
                sigmoid(z)
            })
            .collect()
    }

    /// Controller track for a weight stream, starting at rest.
    pub fn controllers(&self, frames: &[BlendshapeFrame]) -> Vec<ControllerFrame> {
        let mut prev: Option<Vec<f64>> = None;
        frames
            .iter()
            .map(|f| {
                let target = self.pose(&f.weights);
                let values: Vec<f64> = match &prev {
                    None => target,
                    Some(p) => p
                        .iter()
                        .zip(&target)
                        .map(|(a, b)| self.smoothing * a + (1.0 - self.smoothing) * b)
                        .collect(),
                };
                prev = Some(values.clone());
                ControllerFrame {
                    timestamp: f.timestamp,
                    values,
                }
            })
            .collect()
    }
}

/// Piecewise-linear controller map between two characters:
/// `y = clamp(b + L x + V relu(U x - θ), 0, 1)`.
#[derive(Debug, Clone)]
pub struct SecondaryGroundTruth {
    pub inputs: usize,
    pub outputs: usize,
    linear: Vec<f64>,
    hinge_dirs: Vec<f64>,
    hinge_offsets: Vec<f64>,
    hinge_weights: Vec<f64>,
    bias: Vec<f64>,
}

const HINGES: usize = 12;

impl SecondaryGroundTruth {
    pub fn new(rng: &mut impl Rng, inputs: usize, outputs: usize) -> Self {
        let s = 1.0 / (inputs as f64).sqrt();
        let normal = Normal::new(0.0, s).expect("positive scale");
        Self {
            inputs,
            outputs,
            linear: (0..inputs * outputs).map(|_| 0.5 * normal.sample(rng)).collect(),
            hinge_dirs: (0..HINGES * inputs).map(|_| normal.sample(rng)).collect(),
            hinge_offsets: (0..HINGES).map(|_| rng.gen_range(-0.2..0.2)).collect(),
            hinge_weights: (0..outputs * HINGES).map(|_| rng.gen_range(-0.6..0.6)).collect(),
            bias: (0..outputs).map(|_| rng.gen_range(0.35..0.65)).collect(),
        }
    }

    pub fn map(&self, x: &[f64]) -> Vec<f64> {
        let centred: Vec<f64> = x.iter().map(|v| v - 0.5).collect();
        let hinges: Vec<f64> = (0..HINGES)
            .map(|h| {
                let dir = &self.hinge_dirs[h * self.inputs..(h + 1) * self.inputs];
                let z: f64 = dir.iter().zip(&centred).map(|(a, b)| a * b).sum();
                (z - self.hinge_offsets[h]).max(0.0)
            })
            .collect();
        (0..self.outputs)
            .map(|o| {
                let lin: f64 = self.linear[o * self.inputs..(o + 1) * self.inputs]
                    .iter()
                    .zip(&centred)
                    .map(|(a, b)| a * b)
                    .sum();
                let hin: f64 = self.hinge_weights[o * HINGES..(o + 1) * HINGES]
                    .iter()
                    .zip(&hinges)
                    .map(|(a, b)| a * b)
                    .sum();
                (self.bias[o] + lin + hin).clamp(0.0, 1.0)
            })
            .collect()
    }
}
