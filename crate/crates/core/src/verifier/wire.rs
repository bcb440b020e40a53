//! Framed text wire format for ingest messages.
//!
//! ```text
//! aqlog-ingest v1
//! gateway=<gateway id>
//! <canonical block lines, timestamp through battery_percent>
//! leaf_index=<n>
//! path=<L|R>:<hex digest>        (zero or more, leaf level first)
//! root=<hex digest>
//! mac=<hex HMAC-SHA3-256 over every preceding line of this message>
//! end
//! ```
//!
//! Messages are concatenated on a stream; each ends at its `end` line.

use thiserror::Error;

use crate::blocks::{canonical_decode, canonical_encode, AirQualityBlock, BlockError, DecodeError};
use crate::crypto::{decode_lower_hex, mac, Digest, DIGEST_LEN};
use crate::merkle::{AuthPath, PathStep};

pub const WIRE_VERSION: &str = "aqlog-ingest v1";
const BLOCK_LINES: usize = 13;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("line {line}: {reason}")]
    Syntax { line: usize, reason: String },
    #[error("block: {0}")]
    Block(#[from] DecodeError),
    #[error("stream ended inside a message")]
    Truncated,
}

fn syntax(line: usize, reason: impl Into<String>) -> WireError {
    WireError::Syntax {
        line,
        reason: reason.into(),
    }
}

/// Gateway to server message carrying one block and its inclusion proof.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestMessage {
    pub gateway_id: String,
    pub block: AirQualityBlock,
    pub auth_path: AuthPath,
    pub proposed_root: Digest,
    pub credential: [u8; DIGEST_LEN],
}

impl IngestMessage {
    /// Builds a message and computes its credential with `secret`.
    pub fn seal(
        gateway_id: impl Into<String>,
        block: AirQualityBlock,
        auth_path: AuthPath,
        proposed_root: Digest,
        secret: &[u8],
    ) -> Result<Self, BlockError> {
        let mut msg = Self {
            gateway_id: gateway_id.into(),
            block,
            auth_path,
            proposed_root,
            credential: [0; DIGEST_LEN],
        };
        msg.reseal(secret)?;
        Ok(msg)
    }

    /// Recomputes the credential over the current body.
    pub fn reseal(&mut self, secret: &[u8]) -> Result<(), BlockError> {
        self.credential = mac(secret, &self.body()?);
        Ok(())
    }

    /// Bytes covered by the credential.
    pub fn body(&self) -> Result<Vec<u8>, BlockError> {
        let mut out = Vec::with_capacity(512);
        out.extend_from_slice(WIRE_VERSION.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(format!("gateway={}\n", self.gateway_id).as_bytes());
        out.extend_from_slice(&canonical_encode(&self.block)?);
        out.extend_from_slice(format!("leaf_index={}\n", self.auth_path.leaf_index).as_bytes());
        for step in &self.auth_path.steps {
            out.extend_from_slice(format!("path={step}\n").as_bytes());
        }
        out.extend_from_slice(format!("root={}\n", self.proposed_root).as_bytes());
        Ok(out)
    }

    pub fn encode(&self) -> Result<Vec<u8>, BlockError> {
        let mut out = self.body()?;
        out.extend_from_slice(format!("mac={}\nend\n", hex::encode(self.credential)).as_bytes());
        Ok(out)
    }
}

/// Decodes one message from the start of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode_message(bytes: &[u8]) -> Result<(IngestMessage, usize), WireError> {
    let mut lines = LineReader { bytes, pos: 0, line: 0 };

    let (n, version) = lines.next()?;
    if version != WIRE_VERSION {
        return Err(syntax(n, "bad version line"));
    }
    let (n, gw) = lines.next()?;
    let gateway_id = gw
        .strip_prefix("gateway=")
        .ok_or_else(|| syntax(n, "expected gateway="))?
        .to_string();

    let block_start = lines.pos;
    for _ in 0..BLOCK_LINES {
        lines.next()?;
    }
    let block = canonical_decode(&bytes[block_start..lines.pos])?;

    let (n, idx) = lines.next()?;
    let leaf_index = idx
        .strip_prefix("leaf_index=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| syntax(n, "expected leaf_index=<n>"))?;

    let mut steps = Vec::new();
    let (mut n, mut line) = lines.next()?;
    while let Some(step) = line.strip_prefix("path=") {
        steps.push(PathStep::parse(step).map_err(|e| syntax(n, e.to_string()))?);
        (n, line) = lines.next()?;
    }
    let proposed_root = line
        .strip_prefix("root=")
        .ok_or_else(|| syntax(n, "expected root="))
        .and_then(|h| Digest::from_hex(h).map_err(|e| syntax(n, e.to_string())))?;

    let (n, m) = lines.next()?;
    let credential: [u8; DIGEST_LEN] = m
        .strip_prefix("mac=")
        .and_then(|h| decode_lower_hex(h).ok())
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| syntax(n, "expected mac=<64 hex>"))?;
    let (n, end) = lines.next()?;
    if end != "end" {
        return Err(syntax(n, "expected end"));
    }

    let msg = IngestMessage {
        gateway_id,
        block,
        auth_path: AuthPath { leaf_index, steps },
        proposed_root,
        credential,
    };
    Ok((msg, lines.pos))
}

/// Splits a stream into messages. Stops at the first malformed message,
/// reporting the byte offset where it starts.
pub fn decode_stream(bytes: &[u8]) -> Vec<Result<IngestMessage, (usize, WireError)>> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        match decode_message(&bytes[pos..]) {
            Ok((msg, used)) => {
                out.push(Ok(msg));
                pos += used;
            }
            Err(e) => {
                out.push(Err((pos, e)));
                break;
            }
        }
    }
    out
}

struct LineReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    line: usize,
}

impl<'a> LineReader<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), WireError> {
        let rest = &self.bytes[self.pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or(WireError::Truncated)?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| syntax(self.line, "not UTF-8"))?;
        self.pos += nl + 1;
        self.line += 1;
        Ok((self.line - 1, line))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_digest;
    use crate::crypto::mac_verify;
    use crate::merkle::MerkleLog;

    fn message(n: u64) -> IngestMessage {
        let mut log = MerkleLog::new();
        let mut last = None;
        for i in 0..n {
            let b = AirQualityBlock::new(600 * i, "s1", "gate-a", [45000, 2500, 100, 200, 32000, 900, 1400, 2250, 5600], 95);
            let (root, path) = log.append(block_digest(&b).unwrap());
            last = Some((b, path, root));
        }
        let (b, path, root) = last.unwrap();
        IngestMessage::seal("gw-a", b, path, root, b"secret").unwrap()
    }

    #[test]
    fn round_trip() {
        for n in [1, 2, 5, 9] {
            let msg = message(n);
            let bytes = msg.encode().unwrap();
            let (decoded, used) = decode_message(&bytes).unwrap();
            assert_eq!(decoded, msg);
            assert_eq!(used, bytes.len());
        }
    }

    #[test]
    fn credential_covers_body() {
        let msg = message(4);
        assert!(mac_verify(b"secret", &msg.body().unwrap(), &msg.credential));
        let text = String::from_utf8(msg.encode().unwrap()).unwrap();
        assert!(text.starts_with("aqlog-ingest v1\ngateway=gw-a\ntimestamp=1800\n"));
        assert!(text.ends_with("\nend\n"));
        assert_eq!(text.matches("\npath=").count(), 2);
    }

    #[test]
    fn stream_of_messages() {
        let mut stream = Vec::new();
        for n in 1..4 {
            stream.extend(message(n).encode().unwrap());
        }
        let decoded = decode_stream(&stream);
        assert_eq!(decoded.len(), 3);
        assert!(decoded.iter().all(Result::is_ok));

        stream.truncate(stream.len() - 3);
        let decoded = decode_stream(&stream);
        assert!(matches!(decoded.last(), Some(Err((_, WireError::Truncated)))));
    }

    #[test]
    fn malformed_fields() {
        let text = String::from_utf8(message(2).encode().unwrap()).unwrap();
        for (from, to) in [
            ("aqlog-ingest v1", "aqlog-ingest v2"),
            ("gateway=", "gateway:"),
            ("leaf_index=1", "leaf_index=x"),
            ("path=L:", "path=Q:"),
            ("\nend\n", "\nfin\n"),
        ] {
            let bad = text.replacen(from, to, 1);
            assert!(decode_message(bad.as_bytes()).is_err(), "{from} -> {to}");
        }
        let bad_root = text.replacen("root=", "root=0", 1);
        assert!(decode_message(bad_root.as_bytes()).is_err());
        let bad_block = text.replacen("co2=45000", "co2=+45000", 1);
        assert!(matches!(decode_message(bad_block.as_bytes()), Err(WireError::Block(_))));
    }
}
