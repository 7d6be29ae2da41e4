//! Framed binary messages exchanged between master and tasks.
//!
//! Frame: `b"MFLW"`, u8 message type, u64 little-endian payload length,
//! payload. Strings inside payloads are u32 length-prefixed UTF-8.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::codec::{put_str32, read_tensor, write_tensor, Reader};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MFLW";
/// Frames above this size are rejected before allocating.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    CreateSession = 1,
    RegisterSubgraph = 2,
    RunPartition = 3,
    TensorChunk = 4,
    StepDone = 5,
    Error = 6,
    Heartbeat = 7,
    AbortStep = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::CreateSession,
        MsgType::RegisterSubgraph,
        MsgType::RunPartition,
        MsgType::TensorChunk,
        MsgType::StepDone,
        MsgType::Error,
        MsgType::Heartbeat,
        MsgType::AbortStep,
    ];

    pub fn from_code(c: u8) -> Result<MsgType> {
        MsgType::ALL
            .get((c as usize).wrapping_sub(1))
            .copied()
            .ok_or_else(|| Error::Wire(format!("unknown message type {c}")))
    }
}

/// One device partition of a registered step.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionDef {
    pub device: String,
    pub graph_json: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    CreateSession {
        session: String,
    },
    RegisterSubgraph {
        session: String,
        handle: String,
        partitions: Vec<PartitionDef>,
        /// Endpoints this task returns in StepDone.
        fetches: Vec<String>,
    },
    RunPartition {
        session: String,
        handle: String,
        step_id: u64,
        feeds: Vec<(String, Tensor)>,
    },
    TensorChunk {
        key: String,
        /// `None` carries a dead value.
        value: Option<Tensor>,
    },
    /// Also the generic acknowledgement, with step 0 and no outputs.
    StepDone {
        step_id: u64,
        outputs: Vec<(String, Tensor)>,
    },
    Error {
        code: u8,
        message: String,
    },
    Heartbeat {
        seq: u64,
    },
    AbortStep {
        step_id: u64,
        reason: String,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::CreateSession { .. } => MsgType::CreateSession,
            Message::RegisterSubgraph { .. } => MsgType::RegisterSubgraph,
            Message::RunPartition { .. } => MsgType::RunPartition,
            Message::TensorChunk { .. } => MsgType::TensorChunk,
            Message::StepDone { .. } => MsgType::StepDone,
            Message::Error { .. } => MsgType::Error,
            Message::Heartbeat { .. } => MsgType::Heartbeat,
            Message::AbortStep { .. } => MsgType::AbortStep,
        }
    }

    pub fn ack() -> Message {
        Message::StepDone {
            step_id: 0,
            outputs: Vec::new(),
        }
    }

    pub fn from_error(e: &Error) -> Message {
        let code = match e.root() {
            Error::Cancelled(_) => 1,
            Error::Timeout(_) => 2,
            Error::Unavailable(_) => 3,
            Error::DeadFetch(_) => 4,
            Error::Deadlock { .. } => 5,
            Error::OutOfRange(_) => 6,
            Error::QueueClosed => 7,
            Error::NotFound(_) => 8,
            Error::InvalidArgument(_) | Error::Validation(_) => 9,
            Error::Wire(_) => 10,
            Error::Consistency(_) => 11,
            _ => 0,
        };
        Message::Error {
            code,
            message: e.to_string(),
        }
    }

    /// Rebuilds an error on the receiving side; the kind survives, the
    /// message carries the original text.
    pub fn into_error(code: u8, message: String) -> Error {
        match code {
            1 => Error::Cancelled(message),
            2 => Error::Timeout(message),
            3 => Error::Unavailable(message),
            4 => Error::DeadFetch(message),
            5 => Error::Deadlock { stalled: vec![message] },
            6 => Error::OutOfRange(message),
            7 => Error::QueueClosed,
            8 => Error::NotFound(message),
            9 => Error::InvalidArgument(message),
            10 => Error::Wire(message),
            11 => Error::Consistency(message),
            _ => Error::Internal(message),
        }
    }

    pub fn encode_payload(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        match self {
            Message::CreateSession { session } => put_str32(&mut out, session),
            Message::RegisterSubgraph {
                session,
                handle,
                partitions,
                fetches,
            } => {
                put_str32(&mut out, session);
                put_str32(&mut out, handle);
                out.extend_from_slice(&(partitions.len() as u32).to_le_bytes());
                for p in partitions {
                    put_str32(&mut out, &p.device);
                    put_str32(&mut out, &p.graph_json);
                }
                put_strs(&mut out, fetches);
            }
            Message::RunPartition {
                session,
                handle,
                step_id,
                feeds,
            } => {
                put_str32(&mut out, session);
                put_str32(&mut out, handle);
                out.extend_from_slice(&step_id.to_le_bytes());
                put_named(&mut out, feeds)?;
            }
            Message::TensorChunk { key, value } => {
                put_str32(&mut out, key);
                match value {
                    Some(t) => {
                        out.push(1);
                        write_tensor(&mut out, t)?;
                    }
                    None => out.push(0),
                }
            }
            Message::StepDone { step_id, outputs } => {
                out.extend_from_slice(&step_id.to_le_bytes());
                put_named(&mut out, outputs)?;
            }
            Message::Error { code, message } => {
                out.push(*code);
                put_str32(&mut out, message);
            }
            Message::Heartbeat { seq } => out.extend_from_slice(&seq.to_le_bytes()),
            Message::AbortStep { step_id, reason } => {
                out.extend_from_slice(&step_id.to_le_bytes());
                put_str32(&mut out, reason);
            }
        }
        Ok(out)
    }

    pub fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Message> {
        let mut r = Reader::new(payload);
        let m = match ty {
            MsgType::CreateSession => Message::CreateSession { session: r.str32()? },
            MsgType::RegisterSubgraph => {
                let session = r.str32()?;
                let handle = r.str32()?;
                let n = r.u32()? as usize;
                let mut partitions = Vec::with_capacity(n.min(1024));
                for _ in 0..n {
                    partitions.push(PartitionDef {
                        device: r.str32()?,
                        graph_json: r.str32()?,
                    });
                }
                Message::RegisterSubgraph {
                    session,
                    handle,
                    partitions,
                    fetches: read_strs(&mut r)?,
                }
            }
            MsgType::RunPartition => Message::RunPartition {
                session: r.str32()?,
                handle: r.str32()?,
                step_id: r.u64()?,
                feeds: read_named(&mut r)?,
            },
            MsgType::TensorChunk => {
                let key = r.str32()?;
                let value = match r.u8()? {
                    0 => None,
                    1 => Some(read_tensor(&mut r)?),
                    f => return Err(Error::Wire(format!("bad liveness flag {f}"))),
                };
                Message::TensorChunk { key, value }
            }
            MsgType::StepDone => Message::StepDone {
                step_id: r.u64()?,
                outputs: read_named(&mut r)?,
            },
            MsgType::Error => Message::Error {
                code: r.u8()?,
                message: r.str32()?,
            },
            MsgType::Heartbeat => Message::Heartbeat { seq: r.u64()? },
            MsgType::AbortStep => Message::AbortStep {
                step_id: r.u64()?,
                reason: r.str32()?,
            },
        };
        r.finish()?;
        Ok(m)
    }
}

fn put_strs(out: &mut Vec<u8>, v: &[String]) {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for s in v {
        put_str32(out, s);
    }
}

fn read_strs(r: &mut Reader<'_>) -> Result<Vec<String>> {
    let n = r.u32()? as usize;
    let mut v = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        v.push(r.str32()?);
    }
    Ok(v)
}

fn put_named(out: &mut Vec<u8>, v: &[(String, Tensor)]) -> Result<()> {
    out.extend_from_slice(&(v.len() as u32).to_le_bytes());
    for (k, t) in v {
        put_str32(out, k);
        write_tensor(out, t)?;
    }
    Ok(())
}

fn read_named(r: &mut Reader<'_>) -> Result<Vec<(String, Tensor)>> {
    let n = r.u32()? as usize;
    let mut v = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let k = r.str32()?;
        v.push((k, read_tensor(r)?));
    }
    Ok(v)
}

pub fn encode_frame(m: &Message) -> Result<Vec<u8>> {
    let payload = m.encode_payload()?;
    let mut out = Vec::with_capacity(13 + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(m.msg_type() as u8);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn write_frame(w: &mut impl Write, m: &Message) -> Result<()> {
    w.write_all(&encode_frame(m)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame. `Ok(None)` means the peer closed the stream cleanly
/// before a new frame started.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Message>> {
    let mut head = [0u8; 13];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(Error::Wire("connection closed inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if &head[..4] != MAGIC {
        return Err(Error::Wire(format!("bad magic {:02x?}", &head[..4])));
    }
    let ty = MsgType::from_code(head[4])?;
    let len = u64::from_le_bytes(head[5..13].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Wire(format!("frame of {len} bytes exceeds the limit")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|e| Error::Wire(format!("truncated frame payload: {e}")))?;
    Message::decode_payload(ty, &payload).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::codec::tests::arb_tensor;
    use proptest::prelude::*;

    fn round_trip(m: &Message) -> Message {
        let bytes = encode_frame(m).unwrap();
        read_frame(&mut bytes.as_slice()).unwrap().unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = encode_frame(&Message::Heartbeat { seq: 7 }).unwrap();
        assert_eq!(&bytes[..4], b"MFLW");
        assert_eq!(bytes[4], 7);
        assert_eq!(u64::from_le_bytes(bytes[5..13].try_into().unwrap()), 8);
        assert_eq!(bytes.len(), 21);
    }

    #[test]
    fn every_message_type_round_trips() {
        let t = Tensor::vector(vec![1.5f32, f32::NAN]);
        let msgs = vec![
            Message::CreateSession { session: "s".into() },
            Message::RegisterSubgraph {
                session: "s".into(),
                handle: "h".into(),
                partitions: vec![PartitionDef {
                    device: "/job:w/task:0/cpu:0".into(),
                    graph_json: "{}".into(),
                }],
                fetches: vec!["a:0".into()],
            },
            Message::RunPartition {
                session: "s".into(),
                handle: "h".into(),
                step_id: 99,
                feeds: vec![("x:0".into(), t.clone())],
            },
            Message::TensorChunk {
                key: "k".into(),
                value: Some(t.clone()),
            },
            Message::TensorChunk { key: "k".into(), value: None },
            Message::StepDone {
                step_id: 3,
                outputs: vec![("y:0".into(), Tensor::scalar(true))],
            },
            Message::Error {
                code: 4,
                message: "m".into(),
            },
            Message::Heartbeat { seq: 1 },
            Message::AbortStep {
                step_id: 5,
                reason: "r".into(),
            },
        ];
        for m in &msgs {
            let back = round_trip(m);
            assert_eq!(back.msg_type(), m.msg_type());
            assert_eq!(encode_frame(&back).unwrap(), encode_frame(m).unwrap());
        }
    }

    #[test]
    fn malformed_frames() {
        let good = encode_frame(&Message::Heartbeat { seq: 1 }).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_frame(&mut bad.as_slice()), Err(Error::Wire(_))));
        let mut bad = good.clone();
        bad[4] = 99;
        assert!(matches!(read_frame(&mut bad.as_slice()), Err(Error::Wire(_))));
        assert!(read_frame(&mut &good[..good.len() - 1]).is_err());
        assert!(read_frame(&mut &good[..5]).is_err());
        assert!(read_frame(&mut &[][..]).unwrap().is_none());
        let mut huge = good[..5].to_vec();
        huge.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read_frame(&mut huge.as_slice()), Err(Error::Wire(_))));
    }

    #[test]
    fn error_kinds_survive() {
        for e in [
            Error::Cancelled("x".into()),
            Error::Timeout("x".into()),
            Error::DeadFetch("a:0".into()),
            Error::OutOfRange("q".into()),
        ] {
            let Message::Error { code, message } = Message::from_error(&e) else { unreachable!() };
            let back = Message::into_error(code, message);
            assert_eq!(std::mem::discriminant(&back), std::mem::discriminant(&e));
        }
    }

    proptest! {
        #[test]
        fn tensor_chunks_are_bit_exact(t in arb_tensor()) {
            let m = Message::TensorChunk { key: "1;a;b;n:0".into(), value: Some(t.clone()) };
            match round_trip(&m) {
                Message::TensorChunk { value: Some(back), .. } => prop_assert!(back.bit_eq(&t)),
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }
}
