//! Little-endian wire format for collective messages.
//!
//! ```text
//! kind:u8 | version:u64 | phase:u16 | words:u32 | payload: words x f64
//! ```
//!
//! `ACT` messages carry the tree level in `phase` and the root rank as their
//! single payload word.

use thiserror::Error;

use crate::topology::Rank;

pub const KIND_ACT: u8 = 1;
pub const KIND_PHASE: u8 = 2;
pub const KIND_SYNC: u8 = 3;

pub const HEADER_LEN: usize = 1 + 8 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message truncated: {0} bytes")]
    Truncated(usize),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload length mismatch: header says {declared} words, body has {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed activation message")]
    BadActivation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Activate { version: u64, root: Rank, hop: u16 },
    Phase { version: u64, phase: u16, payload: Vec<f64> },
    Sync { version: u64, phase: u16, payload: Vec<f64> },
}

impl WireMessage {
    pub fn version(&self) -> u64 {
        match self {
            WireMessage::Activate { version, .. }
            | WireMessage::Phase { version, .. }
            | WireMessage::Sync { version, .. } => *version,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let (kind, version, phase, words): (u8, u64, u16, &[f64]) = match self {
            WireMessage::Activate { version, root, hop } => {
                let root = [*root as f64];
                return encode_raw(KIND_ACT, *version, *hop, &root);
            }
            WireMessage::Phase {
                version,
                phase,
                payload,
            } => (KIND_PHASE, *version, *phase, payload),
            WireMessage::Sync {
                version,
                phase,
                payload,
            } => (KIND_SYNC, *version, *phase, payload),
        };
        encode_raw(kind, version, phase, words)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let kind = bytes[0];
        let version = u64::from_le_bytes(bytes[1..9].try_into().expect("8 bytes"));
        let phase = u16::from_le_bytes(bytes[9..11].try_into().expect("2 bytes"));
        let words = u32::from_le_bytes(bytes[11..15].try_into().expect("4 bytes")) as usize;
        let body = &bytes[HEADER_LEN..];
        if body.len() != words * 8 {
            return Err(WireError::LengthMismatch {
                declared: words,
                actual: body.len(),
            });
        }
        let payload: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match kind {
            KIND_ACT => {
                let [root] = payload[..] else {
                    return Err(WireError::BadActivation);
                };
                if root < 0.0 || root.fract() != 0.0 || root > u32::MAX as f64 {
                    return Err(WireError::BadActivation);
                }
                Ok(WireMessage::Activate {
                    version,
                    root: root as Rank,
                    hop: phase,
                })
            }
            KIND_PHASE => Ok(WireMessage::Phase {
                version,
                phase,
                payload,
            }),
            KIND_SYNC => Ok(WireMessage::Sync {
                version,
                phase,
                payload,
            }),
            other => Err(WireError::UnknownKind(other)),
        }
    }
}

fn encode_raw(kind: u8, version: u64, phase: u16, words: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + words.len() * 8);
    out.push(kind);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&phase.to_le_bytes());
    out.extend_from_slice(&(words.len() as u32).to_le_bytes());
    for w in words {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn phase_layout_is_bit_exact() {
        let msg = WireMessage::Phase {
            version: 0x0102,
            phase: 3,
            payload: vec![1.0],
        };
        let bytes = msg.encode();
        assert_eq!(
            bytes,
            vec![2, 0x02, 0x01, 0, 0, 0, 0, 0, 0, 3, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xf0, 0x3f]
        );
    }

    #[test]
    fn activation_carries_root() {
        let msg = WireMessage::Activate {
            version: 9,
            root: 13,
            hop: 2,
        };
        let bytes = msg.encode();
        assert_eq!(bytes.len(), HEADER_LEN + 8);
        assert_eq!(WireMessage::decode(&bytes).unwrap(), msg);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(WireMessage::decode(&[1, 2]), Err(WireError::Truncated(2)));
        let mut bytes = WireMessage::Sync {
            version: 1,
            phase: 0,
            payload: vec![0.5, 0.25],
        }
        .encode();
        bytes[0] = 9;
        assert_eq!(WireMessage::decode(&bytes), Err(WireError::UnknownKind(9)));
        bytes[0] = KIND_SYNC;
        bytes.pop();
        assert!(matches!(WireMessage::decode(&bytes), Err(WireError::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn round_trips(version in any::<u64>(), phase in any::<u16>(), payload in proptest::collection::vec(any::<f64>(), 0..32), sync in any::<bool>()) {
            let msg = if sync {
                WireMessage::Sync { version, phase, payload }
            } else {
                WireMessage::Phase { version, phase, payload }
            };
            let decoded = WireMessage::decode(&msg.encode()).unwrap();
            // Compare bit patterns so NaN payloads round-trip too.
            prop_assert_eq!(decoded.encode(), msg.encode());
        }
    }
}
