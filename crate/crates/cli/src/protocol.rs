//! Line-oriented JSON messages on the control/broadcast socket.
//!
//! Clients send [`ControlMessage`]s; the service answers each with an
//! [`Ack`] and, once subscribed, interleaves broadcast frames
//! (`{"t","char","v","stale"}`) and [`MetricsRecord`]s.

use facerig_core::stream::OutputRecord;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::metrics::SessionMetrics;

pub const DEFAULT_RECALIBRATION_FRAMES: usize = 30;
pub const MAX_RECALIBRATION_FRAMES: usize = 10_000;
pub const MAX_STALE_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "args", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    SetCharacter(SetCharacterArgs),
    Recalibrate(RecalibrateArgs),
    SetParams(SetParamsArgs),
    Subscribe(SubscribeArgs),
    ListCharacters(EmptyArgs),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetCharacterArgs {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrateArgs {
    #[serde(default = "default_recalibration_frames")]
    pub frames: usize,
}

fn default_recalibration_frames() -> usize {
    DEFAULT_RECALIBRATION_FRAMES
}

impl Default for RecalibrateArgs {
    fn default() -> Self {
        Self {
            frames: DEFAULT_RECALIBRATION_FRAMES,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetParamsArgs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stale_timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubscribeArgs {
    #[serde(default = "yes")]
    pub metrics: bool,
}

fn yes() -> bool {
    true
}

impl Default for SubscribeArgs {
    fn default() -> Self {
        Self { metrics: true }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmptyArgs {}

/// Why a control line was refused before dispatch.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlError {
    /// The `kind` field if one could be read, else `"unknown"`.
    pub kind: String,
    pub message: String,
}

impl ControlMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ControlMessage::SetCharacter(_) => "set_character",
            ControlMessage::Recalibrate(_) => "recalibrate",
            ControlMessage::SetParams(_) => "set_params",
            ControlMessage::Subscribe(_) => "subscribe",
            ControlMessage::ListCharacters(_) => "list_characters",
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("control messages serialize")
    }

    /// Parses and validates one control line.
    pub fn parse(line: &str) -> Result<Self, ControlError> {
        let kind = serde_json::from_str::<Value>(line)
            .ok()
            .and_then(|v| v.get("kind").and_then(Value::as_str).map(str::to_owned))
            .unwrap_or_else(|| "unknown".to_owned());
        let fail = |message: String| ControlError {
            kind: kind.clone(),
            message,
        };
        let msg: ControlMessage = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        msg.validate().map_err(fail)?;
        Ok(msg)
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            ControlMessage::SetCharacter(a) if a.id.is_empty() => Err("character id is empty".into()),
            ControlMessage::Recalibrate(a) if a.frames == 0 || a.frames > MAX_RECALIBRATION_FRAMES => Err(format!(
                "recalibration window must be 1..={MAX_RECALIBRATION_FRAMES} frames"
            )),
            ControlMessage::SetParams(a) => match a.stale_timeout_ms {
                None => Err("set_params needs at least one parameter".into()),
                Some(ms) if ms == 0 || ms > MAX_STALE_TIMEOUT_MS => {
                    Err(format!("stale_timeout_ms must be 1..={MAX_STALE_TIMEOUT_MS}"))
                }
                Some(_) => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Reply to one control message. `seq` counts control messages handled by
/// the service, including refused ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ack {
    pub ok: bool,
    pub kind: String,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<Value>,
}

impl Ack {
    pub fn ok(kind: &str, seq: u64, data: Option<Value>) -> Self {
        Self {
            ok: true,
            kind: kind.into(),
            seq,
            error: None,
            data,
        }
    }

    pub fn refused(kind: &str, seq: u64, error: impl Into<String>) -> Self {
        Self {
            ok: false,
            kind: kind.into(),
            seq,
            error: Some(error.into()),
            data: None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("acks serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub metrics: SessionMetrics,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Anything the service writes on the control socket.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerMessage {
    Frame(OutputRecord),
    Ack(Ack),
    Metrics(SessionMetrics),
}

impl ServerMessage {
    pub fn parse(line: &str) -> Result<Self, String> {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let obj = v.as_object().ok_or("server message is not an object")?;
        let r = if obj.contains_key("ok") {
            serde_json::from_value(v).map(ServerMessage::Ack)
        } else if obj.contains_key("metrics") {
            serde_json::from_value::<MetricsRecord>(v).map(|m| ServerMessage::Metrics(m.metrics))
        } else {
            serde_json::from_value(v).map(ServerMessage::Frame)
        };
        r.map_err(|e| e.to_string())
    }

    pub fn to_line(&self) -> String {
        match self {
            ServerMessage::Frame(f) => facerig_core::stream::to_line(f),
            ServerMessage::Ack(a) => a.to_line(),
            ServerMessage::Metrics(m) => MetricsRecord { metrics: m.clone() }.to_line(),
        }
    }
}
