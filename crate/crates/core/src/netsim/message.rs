//! Gateway/device message schema and its wire framing.
//!
//! A frame is the decimal byte length of a JSON body, one space, the body,
//! and a newline: `42 {"kind":"v_update",...}\n`. The same bytes travel over
//! the simulated channel and over TCP, so a captured session can be replayed
//! on either transport.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DeviceId = u32;

/// Largest body accepted by the decoder; anything longer is treated as a
/// corrupted length prefix rather than buffered indefinitely.
pub const MAX_FRAME_BODY: usize = 1 << 20;

/// What a device should do with a consensus broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    /// Apply the dual update with this `z`, then solve and report the next round.
    Continue,
    /// Apply the dual update, stop optimising and start transmitting at `z`.
    Final,
    /// Optimisation restarts after a reconfiguration; the dual update for
    /// this `z` has already been applied, so only solve and report.
    Resume,
}

/// Incremental change of the shared budget.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetDelta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<f64>,
    /// New write sizes for individual devices.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sizes: Vec<(DeviceId, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    /// A device announces its write size and minimum frequency. The utility
    /// stays on the device.
    Register { device_id: DeviceId, a: f64, gamma: f64 },
    /// `v_i = x_i + u_i` for one round; the only optimisation signal a
    /// device ever sends.
    VUpdate { device_id: DeviceId, iteration: u64, v: f64 },
    /// The addressee's consensus value for `iteration`.
    ZBroadcast { iteration: u64, z: f64, status: RoundStatus },
    DataPacket { device_id: DeviceId, timestamp: f64, payload_size: f64 },
    Reconfigure { delta: BudgetDelta },
    AnomalyAlert { device_id: DeviceId, detail: String },
    /// Registration refused (duplicate id, budget would become empty).
    Rejected { device_id: DeviceId, reason: String },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Register { .. } => "register",
            Message::VUpdate { .. } => "v_update",
            Message::ZBroadcast { .. } => "z_broadcast",
            Message::DataPacket { .. } => "data_packet",
            Message::Reconfigure { .. } => "reconfigure",
            Message::AnomalyAlert { .. } => "anomaly_alert",
            Message::Rejected { .. } => "rejected",
        }
    }
}

/// Serialises one message into a complete frame.
pub fn encode(msg: &Message) -> Vec<u8> {
    let body = serde_json::to_string(msg).expect("message serialisation cannot fail");
    format!("{} {}\n", body.len(), body).into_bytes()
}

/// Parses exactly one frame; trailing bytes are an error.
pub fn decode(frame: &[u8]) -> Result<Message> {
    let mut dec = FrameDecoder::default();
    dec.extend(frame);
    let msg = dec.next_message()?.ok_or_else(|| Error::Malformed("incomplete frame".into()))?;
    if !dec.is_empty() {
        return Err(Error::Malformed(format!("{} trailing bytes after frame", dec.buffered())));
    }
    Ok(msg)
}

/// Reassembles frames from an arbitrary byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Message>> {
        let Some(space) = self.buf.iter().position(|&b| b == b' ') else {
            if self.buf.len() > 20 || !self.buf.iter().all(u8::is_ascii_digit) {
                return Err(Error::Malformed("missing length prefix".into()));
            }
            return Ok(None);
        };
        let prefix = std::str::from_utf8(&self.buf[..space]).map_err(|e| Error::Malformed(e.to_string()))?;
        if prefix.is_empty() || !prefix.bytes().all(|b| b.is_ascii_digit()) {
            return Err(Error::Malformed(format!("bad length prefix {prefix:?}")));
        }
        let len: usize = prefix.parse().map_err(|e| Error::Malformed(format!("length prefix: {e}")))?;
        if len > MAX_FRAME_BODY {
            return Err(Error::Malformed(format!("frame body of {len} bytes exceeds limit")));
        }
        let end = space + 1 + len;
        if self.buf.len() < end + 1 {
            return Ok(None);
        }
        if self.buf[end] != b'\n' {
            return Err(Error::Malformed("frame not newline-terminated".into()));
        }
        let msg = serde_json::from_slice(&self.buf[space + 1..end]).map_err(|e| Error::Malformed(e.to_string()))?;
        self.buf.drain(..=end);
        Ok(Some(msg))
    }
}
