//! The real-time path: calibration, history-conditioned adaption from
//! blendshape weights to primary controllers, secondary fan-out, and
//! linear inbetweening.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::neural::{ForwardScratch, InputLayout, NetworkModel};
use crate::rig::{clamp_controllers, CharacterRig, ControllerFrame};

/// Number of past primary frames the adaption network sees.
pub const HISTORY_LEN: usize = 3;
pub const DEFAULT_TARGET_FPS: f64 = 24.0;
pub const DEFAULT_STALE_TIMEOUT: Duration = Duration::from_millis(200);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendshapeFrame {
    pub timestamp: f64,
    pub weights: Vec<f64>,
}

/// Ordered tracker channel names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelList(Vec<String>);

#[derive(Deserialize)]
struct ChannelFile {
    version: u32,
    channels: Vec<String>,
}

const ARKIT52: &str = include_str!("../data/channels_arkit52.json");

impl ChannelList {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid("channel list is empty"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::invalid(format!("duplicate channel '{dup}'")));
        }
        Ok(Self(names))
    }

    /// The 52-channel tracker set shipped with the crate.
    pub fn arkit52() -> Self {
        let file: ChannelFile = serde_json::from_str(ARKIT52).expect("bundled channels parse");
        debug_assert_eq!(file.version, 1);
        Self(file.channels)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ChannelFile = io::read_json(path)?;
        io::check_version(path, file.version, 1)?;
        Self::new(file.channels).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub neutral_weights: Vec<f64>,
    pub sample_count: usize,
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    version: u32,
    #[serde(flatten)]
    profile: CalibrationProfile,
}

impl CalibrationProfile {
    /// The identity calibration.
    pub fn zero(channels: usize) -> Self {
        Self {
            neutral_weights: vec![0.0; channels],
            sample_count: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self
            .neutral_weights
            .iter()
            .position(|w| !(0.0..=1.0).contains(w))
        {
            return Err(Error::invalid(format!("calibration weight {i} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CalibrationFile = io::read_json(path)?;
        io::check_version(path, file.version, 1)?;
        file.profile.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(file.profile)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &CalibrationFile {
                version: 1,
                profile: self.clone(),
            },
        )
    }
}

/// Per-channel mean over a neutral-pose window.
pub fn calibrate(frames: &[BlendshapeFrame]) -> Result<CalibrationProfile> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("calibration window is empty"))?;
    let n = first.weights.len();
    let mut sum = vec![0.0; n];
    for f in frames {
        if f.weights.len() != n {
            return Err(Error::invalid(format!(
                "calibration frame at t={} has {} channels, expected {n}",
                f.timestamp,
                f.weights.len()
            )));
        }
        for (s, w) in sum.iter_mut().zip(&f.weights) {
            *s += w;
        }
    }
    let count = frames.len() as f64;
    let profile = CalibrationProfile {
        neutral_weights: sum.into_iter().map(|s| (s / count).clamp(0.0, 1.0)).collect(),
        sample_count: frames.len(),
    };
    Ok(profile)
}

/// `w' = clamp((w - n) / (1 - n), 0, 1)`; channels with `n = 1` map to 0.
pub fn apply_calibration(frame: &BlendshapeFrame, profile: &CalibrationProfile) -> Result<BlendshapeFrame> {
    let mut weights = vec![0.0; frame.weights.len()];
    calibrate_into(&frame.weights, profile, &mut weights)?;
    Ok(BlendshapeFrame {
        timestamp: frame.timestamp,
        weights,
    })
}

fn calibrate_into(raw: &[f64], profile: &CalibrationProfile, out: &mut [f64]) -> Result<()> {
    if raw.len() != profile.neutral_weights.len() {
        return Err(Error::invalid(format!(
            "frame has {} channels, calibration has {}",
            raw.len(),
            profile.neutral_weights.len()
        )));
    }
    for ((o, &w), &n) in out.iter_mut().zip(raw).zip(&profile.neutral_weights) {
        *o = if n >= 1.0 {
            0.0
        } else {
            ((w - n) / (1.0 - n)).clamp(0.0, 1.0)
        };
    }
    Ok(())
}

/// The last three primary frames, newest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    frames: [ControllerFrame; HISTORY_LEN],
}

impl HistoryBuffer {
    /// Three copies of the rig's neutral pose.
    pub fn neutral(rig: &CharacterRig) -> Self {
        let f = rig.neutral_frame(0.0);
        Self {
            frames: [f.clone(), f.clone(), f],
        }
    }

    /// Builds a history from frames ordered newest first.
    pub fn from_frames(frames: [ControllerFrame; HISTORY_LEN]) -> Result<Self> {
        let n = frames[0].values.len();
        if frames.iter().any(|f| f.values.len() != n) {
            return Err(Error::invalid("history frames differ in length"));
        }
        Ok(Self { frames })
    }

    pub fn push(&mut self, frame: ControllerFrame) {
        self.frames.rotate_right(1);
        self.frames[0] = frame;
    }

    /// Newest first: `t-1`, `t-2`, `t-3`.
    pub fn frames(&self) -> &[ControllerFrame; HISTORY_LEN] {
        &self.frames
    }

    pub fn controller_count(&self) -> usize {
        self.frames[0].values.len()
    }
}

/// `weights ‖ α(t-1) ‖ α(t-2) ‖ α(t-3)`.
pub fn build_adaption_input(frame: &BlendshapeFrame, history: &HistoryBuffer) -> Vec<f64> {
    let mut out = Vec::with_capacity(frame.weights.len() + HISTORY_LEN * history.controller_count());
    fill_adaption_input(&frame.weights, history, &mut out);
    out
}

fn fill_adaption_input(weights: &[f64], history: &HistoryBuffer, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(weights);
    for f in &history.frames {
        out.extend_from_slice(&f.values);
    }
}

/// Forward pass plus clamp against the secondary rig.
pub fn adapt_secondary(model: &NetworkModel, primary: &ControllerFrame, rig: &CharacterRig) -> Result<ControllerFrame> {
    let raw = model.forward(&primary.values)?;
    clamp_controllers(rig, &raw, primary.timestamp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub target_fps: f64,
    pub stale_timeout: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            target_fps: DEFAULT_TARGET_FPS,
            stale_timeout: DEFAULT_STALE_TIMEOUT,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SecondaryCharacter {
    pub rig: CharacterRig,
    pub model: NetworkModel,
}

/// One processed frame for every character, primary first.
#[derive(Debug, Clone, PartialEq)]
pub struct FanOut {
    pub primary: ControllerFrame,
    pub secondaries: Vec<(String, ControllerFrame)>,
    pub stale: bool,
}

#[derive(Debug, Clone)]
pub struct RetargetPipeline {
    channels: ChannelList,
    calibration: CalibrationProfile,
    adaption: NetworkModel,
    primary: CharacterRig,
    secondaries: Vec<SecondaryCharacter>,
    history: HistoryBuffer,
    config: PipelineConfig,
    last_calibrated: Option<BlendshapeFrame>,
    input: Vec<f64>,
    calibrated: Vec<f64>,
    scratch: ForwardScratch,
}

impl RetargetPipeline {
    pub fn new(
        channels: ChannelList,
        calibration: CalibrationProfile,
        adaption: NetworkModel,
        primary: CharacterRig,
        secondaries: Vec<SecondaryCharacter>,
        config: PipelineConfig,
    ) -> Result<Self> {
        let n = primary.controller_count();
        let expected = channels.len() + HISTORY_LEN * n;
        if adaption.input_dim() != expected {
            return Err(Error::dim("adaption network input", expected, adaption.input_dim()));
        }
        if adaption.output_dim() != n {
            return Err(Error::dim("adaption network output", n, adaption.output_dim()));
        }
        let layout = InputLayout {
            channels: channels.len(),
            controllers: n,
            history: HISTORY_LEN,
        };
        match adaption.metadata().input_layout {
            Some(l) if l == layout => {}
            Some(l) => {
                return Err(Error::invalid(format!(
                    "adaption network was trained for layout {l:?}, pipeline needs {layout:?}"
                )))
            }
            None => {
                return Err(Error::invalid(
                    "adaption network carries no input layout; refusing to guess its ordering",
                ))
            }
        }
        if calibration.neutral_weights.len() != channels.len() {
            return Err(Error::dim(
                "calibration profile",
                channels.len(),
                calibration.neutral_weights.len(),
            ));
        }
        calibration.validate()?;
        let mut ids = std::collections::HashSet::from([primary.id().to_string()]);
        for s in &secondaries {
            if s.model.input_dim() != n {
                return Err(Error::dim("secondary network input", n, s.model.input_dim()));
            }
            if s.model.output_dim() != s.rig.controller_count() {
                return Err(Error::dim(
                    "secondary network output",
                    s.rig.controller_count(),
                    s.model.output_dim(),
                ));
            }
            if !ids.insert(s.rig.id().to_string()) {
                return Err(Error::invalid(format!("duplicate character id '{}'", s.rig.id())));
            }
        }
        if !(config.target_fps > 0.0) {
            return Err(Error::invalid("target fps must be positive"));
        }
        let history = HistoryBuffer::neutral(&primary);
        Ok(Self {
            channels,
            calibration,
            adaption,
            primary,
            secondaries,
            history,
            config,
            last_calibrated: None,
            input: Vec::with_capacity(expected),
            calibrated: Vec::new(),
            scratch: ForwardScratch::default(),
        })
    }

    pub fn channels(&self) -> &ChannelList {
        &self.channels
    }

    pub fn primary(&self) -> &CharacterRig {
        &self.primary
    }

    pub fn secondaries(&self) -> &[SecondaryCharacter] {
        &self.secondaries
    }

    pub fn character_ids(&self) -> Vec<String> {
        std::iter::once(self.primary.id().to_string())
            .chain(self.secondaries.iter().map(|s| s.rig.id().to_string()))
            .collect()
    }

    pub fn history(&self) -> &HistoryBuffer {
        &self.history
    }

    pub fn calibration(&self) -> &CalibrationProfile {
        &self.calibration
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut PipelineConfig {
        &mut self.config
    }

    pub fn set_calibration(&mut self, profile: CalibrationProfile) -> Result<()> {
        if profile.neutral_weights.len() != self.channels.len() {
            return Err(Error::dim(
                "calibration profile",
                self.channels.len(),
                profile.neutral_weights.len(),
            ));
        }
        profile.validate()?;
        self.calibration = profile;
        Ok(())
    }

    /// Returns the history to the neutral warmup state.
    pub fn reset(&mut self) {
        self.history = HistoryBuffer::neutral(&self.primary);
        self.last_calibrated = None;
    }

    /// Calibrate, build the input vector, run the adaption network, clamp
    /// to the primary rig and record the result in the history.
    pub fn step(&mut self, frame: &BlendshapeFrame) -> Result<ControllerFrame> {
        if frame.weights.len() != self.channels.len() {
            return Err(Error::Stream(format!(
                "frame at t={} has {} channels, stream was configured with {}",
                frame.timestamp,
                frame.weights.len(),
                self.channels.len()
            )));
        }
        self.calibrated.resize(frame.weights.len(), 0.0);
        calibrate_into(&frame.weights, &self.calibration, &mut self.calibrated)?;
        let out = self.run_adaption(frame.timestamp)?;
        let cal = self.last_calibrated.get_or_insert_with(|| BlendshapeFrame {
            timestamp: 0.0,
            weights: Vec::new(),
        });
        cal.timestamp = frame.timestamp;
        cal.weights.clear();
        cal.weights.extend_from_slice(&self.calibrated);
        Ok(out)
    }

    fn run_adaption(&mut self, timestamp: f64) -> Result<ControllerFrame> {
        fill_adaption_input(&self.calibrated, &self.history, &mut self.input);
        let raw = self.adaption.forward_into(&self.input, &mut self.scratch)?;
        let out = clamp_controllers(&self.primary, raw, timestamp)?;
        self.history.push(out.clone());
        Ok(out)
    }

    /// Re-runs the last calibrated input when no new frame arrived in time.
    /// Returns `None` before the first frame.
    pub fn step_stale(&mut self, timestamp: f64) -> Option<ControllerFrame> {
        let last = self.last_calibrated.as_ref()?;
        self.calibrated.clear();
        self.calibrated.extend_from_slice(&last.weights);
        self.run_adaption(timestamp).ok()
    }

    pub fn fan_out(&self, primary: &ControllerFrame) -> Result<Vec<(String, ControllerFrame)>> {
        self.secondaries
            .iter()
            .map(|s| Ok((s.rig.id().to_string(), adapt_secondary(&s.model, primary, &s.rig)?)))
            .collect()
    }

    /// [`step`](Self::step) followed by [`fan_out`](Self::fan_out).
    pub fn process(&mut self, frame: &BlendshapeFrame) -> Result<FanOut> {
        let primary = self.step(frame)?;
        let secondaries = self.fan_out(&primary)?;
        Ok(FanOut {
            primary,
            secondaries,
            stale: false,
        })
    }

    pub fn process_stale(&mut self, timestamp: f64) -> Option<FanOut> {
        let primary = self.step_stale(timestamp)?;
        let secondaries = self.fan_out(&primary).ok()?;
        Some(FanOut {
            primary,
            secondaries,
            stale: true,
        })
    }
}

pub fn retarget_step(pipeline: &mut RetargetPipeline, frame: &BlendshapeFrame) -> Result<ControllerFrame> {
    pipeline.step(frame)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Teacher-forced tuples: for every `t >= 3`, frame `t` plus ground truth
/// at `t-1, t-2, t-3` predicts ground truth at `t`.
pub fn build_training_tuples(
    frames: &[BlendshapeFrame],
    truth: &[ControllerFrame],
) -> Result<Vec<TrainingTuple>> {
    if frames.len() != truth.len() {
        return Err(Error::invalid(format!(
            "blendshape stream has {} frames, ground truth has {}",
            frames.len(),
            truth.len()
        )));
    }
    if frames.len() <= HISTORY_LEN {
        return Err(Error::invalid(format!(
            "need at least {} aligned frames, got {}",
            HISTORY_LEN + 1,
            frames.len()
        )));
    }
    let channels = frames[0].weights.len();
    let controllers = truth[0].values.len();
    if let Some(f) = frames.iter().find(|f| f.weights.len() != channels) {
        return Err(Error::invalid(format!("frame at t={} changes channel count", f.timestamp)));
    }
    if let Some(f) = truth.iter().find(|f| f.values.len() != controllers) {
        return Err(Error::invalid(format!(
            "ground truth at t={} changes controller count",
            f.timestamp
        )));
    }
    Ok((HISTORY_LEN..frames.len())
        .map(|t| {
            let history = HistoryBuffer {
                frames: [truth[t - 1].clone(), truth[t - 2].clone(), truth[t - 3].clone()],
            };
            TrainingTuple {
                input: build_adaption_input(&frames[t], &history),
                target: truth[t].values.clone(),
            }
        })
        .collect())
}

/// Mean over consecutive pairs of the mean absolute per-controller change.
pub fn jitter_metric(frames: &[ControllerFrame]) -> Result<f64> {
    if frames.len() < 2 {
        return Err(Error::invalid("jitter needs at least two frames"));
    }
    let mut total = 0.0;
    for pair in frames.windows(2) {
        let (a, b) = (&pair[0].values, &pair[1].values);
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::invalid("jitter frames must have equal, non-zero length"));
        }
        total += a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / (frames.len() - 1) as f64)
}

/// Relative tolerance, in frame periods, for snapping a sample time onto a key.
const SNAP: f64 = 1e-9;

/// Resamples keyframes at `dst_fps` over `[first, last]` by componentwise
/// linear interpolation. Both endpoint keys are reproduced exactly; the
/// last key is appended if the output grid does not land on it.
pub fn upsample_linear(keys: &[ControllerFrame], src_fps: f64, dst_fps: f64) -> Result<Vec<ControllerFrame>> {
    if !(src_fps > 0.0 && dst_fps > 0.0 && src_fps.is_finite() && dst_fps.is_finite()) {
        return Err(Error::invalid("frame rates must be positive and finite"));
    }
    let Some(first) = keys.first() else {
        return Ok(Vec::new());
    };
    for pair in keys.windows(2) {
        if !(pair[1].timestamp > pair[0].timestamp) {
            return Err(Error::invalid(format!(
                "keys not strictly increasing at t={}",
                pair[1].timestamp
            )));
        }
        if pair[1].values.len() != pair[0].values.len() {
            return Err(Error::invalid("keys differ in controller count"));
        }
    }
    let last = &keys[keys.len() - 1];
    let t0 = first.timestamp;
    let span = last.timestamp - t0;
    let steps = (span * dst_fps + SNAP).floor() as usize;

    let mut out = Vec::with_capacity(steps + 2);
    let mut seg = 0;
    for k in 0..=steps {
        let t = t0 + k as f64 / dst_fps;
        while seg + 1 < keys.len() - 1 && keys[seg + 1].timestamp <= t {
            seg += 1;
        }
        out.push(interpolate(keys, seg, t, dst_fps));
    }
    let end = out.last().expect("at least one sample");
    if (end.timestamp - last.timestamp).abs() * dst_fps > SNAP {
        out.push(last.clone());
    }
    Ok(out)
}

fn interpolate(keys: &[ControllerFrame], seg: usize, t: f64, fps: f64) -> ControllerFrame {
    let a = &keys[seg];
    if keys.len() == 1 {
        return a.clone();
    }
    let b = &keys[seg + 1];
    if ((t - a.timestamp) * fps).abs() <= SNAP {
        return a.clone();
    }
    if ((t - b.timestamp) * fps).abs() <= SNAP {
        return b.clone();
    }
    let u = (t - a.timestamp) / (b.timestamp - a.timestamp);
    ControllerFrame {
        timestamp: t,
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x + u * (y - x))
            .collect(),
    }
}

/// Binds channel list, models, rigs and calibration for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub version: u32,
    /// Channel-list file; the bundled 52-channel set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<PathBuf>,
    pub primary_rig: PathBuf,
    pub adaption_model: PathBuf,
    #[serde(default)]
    pub secondaries: Vec<SecondaryEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(default = "default_fps")]
    pub target_fps: f64,
    #[serde(default = "default_stale_ms")]
    pub stale_timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondaryEntry {
    pub rig: PathBuf,
    pub model: PathBuf,
}

fn default_fps() -> f64 {
    DEFAULT_TARGET_FPS
}

fn default_stale_ms() -> u64 {
    DEFAULT_STALE_TIMEOUT.as_millis() as u64
}

pub const MANIFEST_VERSION: u32 = 1;

impl PipelineManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = io::read_json(path)?;
        io::check_version(path, m.version, MANIFEST_VERSION)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Loads every referenced file, resolving relative paths against the
    /// manifest's directory.
    pub fn build(&self, manifest_path: &Path) -> Result<RetargetPipeline> {
        let resolve = |p: &Path| io::resolve_relative(manifest_path, p);
        let channels = match &self.channels {
            Some(p) => ChannelList::load(&resolve(p))?,
            None => ChannelList::arkit52(),
        };
        let primary = CharacterRig::load(&resolve(&self.primary_rig))?;
        let adaption = NetworkModel::load(&resolve(&self.adaption_model))?;
        let secondaries = self
            .secondaries
            .iter()
            .map(|s| {
                Ok(SecondaryCharacter {
                    rig: CharacterRig::load(&resolve(&s.rig))?,
                    model: NetworkModel::load(&resolve(&s.model))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let calibration = match &self.calibration {
            Some(p) => CalibrationProfile::load(&resolve(p))?,
            None => CalibrationProfile::zero(channels.len()),
        };
        RetargetPipeline::new(
            channels,
            calibration,
            adaption,
            primary,
            secondaries,
            PipelineConfig {
                target_fps: self.target_fps,
                stale_timeout: Duration::from_millis(self.stale_timeout_ms),
            },
        )
    }
}
