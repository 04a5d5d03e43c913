//! Subcommand bodies. Each returns a JSON summary that `main` prints as a
//! single line on stdout.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use facerig_core::neural::InputLayout;
use facerig_core::retarget::HISTORY_LEN;
use facerig_core::retrieval::save_pairs;
use facerig_core::stream::{read_frames, read_outputs, OutputRecord};
use facerig_core::{
    build_pair_database, build_training_tuples, calibrate, compose_blendshapes, export_mesh, jitter_metric,
    sgd_train_with, CharacterRig, ControllerFrame, Dataset, ExpressionDatabase, LossKind, ModelMetadata,
    NetworkModel, PipelineManifest, TrainConfig, TrainReport,
};
use log::{debug, info};
use serde_json::{json, Value};

use crate::error::{CliError, CliResult};
use crate::replay::{replay_pipeline, replay_raw, ReplayReport, Sink};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub report: Option<PathBuf>,
}

impl TrainOptions {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
            shuffle: true,
        }
    }

    /// The one-line configuration echo written to stderr before training.
    pub fn echo(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        format!(
            "config: lr {}, batch {}, epochs {}, seed {}, hidden {}",
            self.lr,
            self.batch,
            self.epochs,
            self.seed,
            hidden.join("x")
        )
    }
}

/// Parses `256,256` into hidden-layer widths.
pub fn parse_widths(s: &str) -> Result<Vec<usize>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|w| match w.trim().parse::<usize>() {
            Ok(0) | Err(_) => Err(format!("invalid layer width '{w}'")),
            Ok(n) => Ok(n),
        })
        .collect()
}

fn frames_of(records: Vec<OutputRecord>, character: Option<&str>, path: &Path) -> CliResult<(String, Vec<ControllerFrame>)> {
    let id = match character {
        Some(c) => c.to_owned(),
        None => records
            .first()
            .map(|r| r.character.clone())
            .ok_or_else(|| CliError::Failed(format!("{} has no records", path.display())))?,
    };
    let frames: Vec<ControllerFrame> = records.iter().filter(|r| r.character == id).map(OutputRecord::frame).collect();
    if frames.is_empty() {
        return Err(CliError::Failed(format!("{} has no records for '{id}'", path.display())));
    }
    Ok((id, frames))
}

fn train(
    model: &NetworkModel,
    data: &Dataset,
    opts: &TrainOptions,
    out: &Path,
) -> CliResult<(NetworkModel, TrainReport)> {
    let (trained, report) = sgd_train_with(model, data, &opts.config(), LossKind::Mse, |e| {
        debug!("epoch {} loss {:.6} ({:.0} ms)", e.epoch, e.mean_loss, e.wall_ms)
    })?;
    trained.save(out)?;
    if let Some(path) = &opts.report {
        std::fs::write(path, report.to_csv()).map_err(|source| CliError::Io {
            what: format!("cannot write {}", path.display()),
            source,
        })?;
    }
    info!("wrote {}", out.display());
    Ok((trained, report))
}

fn train_summary(out: &Path, samples: usize, model: &NetworkModel, report: &TrainReport) -> Value {
    json!({
        "model": out,
        "samples": samples,
        "parameters": model.parameter_count(),
        "epochs": report.epochs.len(),
        "final_loss": report.losses().last().copied(),
    })
}

/// Trains the adaption network on teacher-forced tuples built from a
/// blendshape stream and the primary character's controller track.
pub fn train_adaption(
    frames: &Path,
    truth: &Path,
    character: Option<&str>,
    out: &Path,
    opts: &TrainOptions,
) -> CliResult<Value> {
    let weights = read_frames(frames)?;
    let (id, track) = frames_of(read_outputs(truth)?, character, truth)?;
    let tuples = build_training_tuples(&weights, &track)?;
    let channels = weights[0].weights.len();
    let controllers = track[0].values.len();
    let (inputs, targets) = tuples.into_iter().map(|t| (t.input, t.target)).unzip();
    let data = Dataset::new(inputs, targets)?;
    let layout = InputLayout {
        channels,
        controllers,
        history: HISTORY_LEN,
    };
    let mut widths = vec![layout.input_dim()];
    widths.extend(&opts.hidden);
    widths.push(controllers);
    let meta = ModelMetadata {
        name: "adaption".into(),
        character_ids: vec![id],
        seed: opts.seed,
        input_layout: Some(layout),
    };
    let model = NetworkModel::init(&widths, opts.seed, meta)?;
    let (trained, report) = train(&model, &data, opts, out)?;
    Ok(train_summary(out, data.len(), &trained, &report))
}

/// Trains a primary-to-secondary controller map from two aligned tracks.
pub fn train_secondary(
    input: &Path,
    target: &Path,
    input_character: Option<&str>,
    out: &Path,
    opts: &TrainOptions,
) -> CliResult<Value> {
    let (from, xs) = frames_of(read_outputs(input)?, input_character, input)?;
    let (to, ys) = frames_of(read_outputs(target)?, None, target)?;
    if xs.len() != ys.len() {
        return Err(CliError::Failed(format!(
            "'{from}' has {} frames but '{to}' has {}",
            xs.len(),
            ys.len()
        )));
    }
    if let Some(i) = (0..xs.len()).find(|&i| xs[i].timestamp != ys[i].timestamp) {
        return Err(CliError::Failed(format!("tracks disagree on the timestamp of frame {}", i + 1)));
    }
    let data = Dataset::new(
        xs.into_iter().map(|f| f.values).collect(),
        ys.into_iter().map(|f| f.values).collect(),
    )?;
    let mut widths = vec![data.inputs()[0].len()];
    widths.extend(&opts.hidden);
    widths.push(data.targets()[0].len());
    let meta = ModelMetadata {
        name: format!("{from}->{to}"),
        character_ids: vec![from, to],
        seed: opts.seed,
        input_layout: None,
    };
    let model = NetworkModel::init(&widths, opts.seed, meta)?;
    let (trained, report) = train(&model, &data, opts, out)?;
    Ok(train_summary(out, data.len(), &trained, &report))
}

pub fn build_pairs(query: &Path, target: &Path, k: usize, out: &Path) -> CliResult<Value> {
    if k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let source = ExpressionDatabase::load(query)?;
    let target = ExpressionDatabase::load(target)?;
    let pairs = build_pair_database(&source, &target, k)?;
    save_pairs(out, &pairs)?;
    Ok(json!({ "pairs": pairs.len(), "k": k, "out": out }))
}

pub struct ReplayArgs<'a> {
    pub input: &'a Path,
    pub manifest: Option<&'a Path>,
    pub sink: &'a Sink,
    pub fps: f64,
    pub raw: bool,
    pub character: Option<&'a str>,
}

pub fn replay(args: &ReplayArgs<'_>) -> CliResult<ReplayReport> {
    let frames = read_frames(args.input)?;
    if args.raw {
        let mut out = args.sink.open()?;
        return replay_raw(&frames, args.fps, &mut out);
    }
    let manifest_path = args
        .manifest
        .ok_or_else(|| CliError::Usage("replay needs --manifest unless --raw is given".into()))?;
    let mut pipeline = PipelineManifest::load(manifest_path)?.build(manifest_path)?;
    let mut out = args.sink.open()?;
    replay_pipeline(&frames, &mut pipeline, args.fps, args.character, &mut out)
}

fn group(records: Vec<OutputRecord>) -> BTreeMap<String, Vec<ControllerFrame>> {
    let mut m: BTreeMap<String, Vec<ControllerFrame>> = BTreeMap::new();
    for r in records {
        let f = r.frame();
        m.entry(r.character).or_default().push(f);
    }
    m
}

/// RMSE between two output streams and the change in jitter, per
/// character and pooled.
pub fn eval(pred: &Path, truth: &Path) -> CliResult<Value> {
    let pred = group(read_outputs(pred)?);
    let truth = group(read_outputs(truth)?);
    if truth.is_empty() {
        return Err(CliError::Failed("truth stream is empty".into()));
    }
    let mut per = serde_json::Map::new();
    let (mut se, mut n) = (0.0, 0usize);
    let mut deltas = Vec::new();
    for (id, t) in &truth {
        let p = pred
            .get(id)
            .ok_or_else(|| CliError::Failed(format!("prediction has no frames for '{id}'")))?;
        if p.len() != t.len() {
            return Err(CliError::Failed(format!(
                "'{id}': {} predicted frames vs {} truth frames",
                p.len(),
                t.len()
            )));
        }
        let (mut cse, mut cn) = (0.0, 0usize);
        for (i, (a, b)) in p.iter().zip(t).enumerate() {
            if a.values.len() != b.values.len() {
                return Err(CliError::Failed(format!("'{id}' frame {}: controller counts differ", i + 1)));
            }
            for (x, y) in a.values.iter().zip(&b.values) {
                cse += (x - y) * (x - y);
            }
            cn += a.values.len();
        }
        se += cse;
        n += cn;
        let (jp, jt) = if t.len() > 1 {
            (jitter_metric(p)?, jitter_metric(t)?)
        } else {
            (0.0, 0.0)
        };
        deltas.push((jp, jt));
        per.insert(
            id.clone(),
            json!({
                "frames": t.len(),
                "rmse": if cn == 0 { 0.0 } else { (cse / cn as f64).sqrt() },
                "jitter_pred": jp,
                "jitter_truth": jt,
                "jitter_delta": jp - jt,
            }),
        );
    }
    let k = deltas.len() as f64;
    let jp = deltas.iter().map(|d| d.0).sum::<f64>() / k;
    let jt = deltas.iter().map(|d| d.1).sum::<f64>() / k;
    Ok(json!({
        "rmse": if n == 0 { 0.0 } else { (se / n as f64).sqrt() },
        "jitter_pred": jp,
        "jitter_truth": jt,
        "jitter_delta": jp - jt,
        "characters": per,
    }))
}

pub fn parse_weights(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|w| w.trim().parse::<f64>().map_err(|_| format!("invalid weight '{w}'")))
        .collect()
}

pub fn compose(rig: &Path, weights: &[f64], out: &Path) -> CliResult<Value> {
    let rig = CharacterRig::load(rig)?;
    let bank = rig
        .bank()
        .ok_or_else(|| CliError::Failed(format!("rig '{}' has no blendshape bank", rig.id())))?;
    let mesh = compose_blendshapes(bank, weights)?;
    export_mesh(&mesh, out)?;
    Ok(json!({ "vertices": mesh.vertex_count(), "out": out }))
}

pub fn calibrate_cmd(input: &Path, start: usize, frames: usize, out: &Path) -> CliResult<Value> {
    if frames == 0 {
        return Err(CliError::Usage("--frames must be at least 1".into()));
    }
    let all = read_frames(input)?;
    let window = all.get(start..start + frames).ok_or_else(|| {
        CliError::Failed(format!(
            "stream has {} frames; window {}..{} is out of range",
            all.len(),
            start,
            start + frames
        ))
    })?;
    let profile = calibrate(window)?;
    profile.save(out)?;
    Ok(json!({
        "channels": profile.neutral_weights.len(),
        "frames": profile.sample_count,
        "out": out,
    }))
}
