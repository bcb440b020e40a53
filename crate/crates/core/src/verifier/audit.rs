//! Append-only audit log of accepted blocks and its replay check.
//!
//! The file is a sequence of length-prefixed records:
//!
//! ```text
//! <payload length in bytes, decimal>\n
//! <payload>
//! ```
//!
//! where the payload is the canonical block bytes followed by
//!
//! ```text
//! digest=<hex SHA3-256 of the block bytes>\n
//! root=<hex root of the zone's log after appending the block>\n
//! verdict=<verdict code>\n
//! ```
//!
//! Each block's `zone_id` selects the Merkle log it belongs to.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::blocks::{canonical_decode, canonical_encode, AirQualityBlock, BlockError};
use crate::crypto::{sha3_256, Digest};
use crate::merkle::MerkleLog;

use super::Reason;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("audit log record {record} at byte {offset}: {reason}")]
pub struct AuditError {
    pub record: usize,
    pub offset: usize,
    pub reason: String,
}

/// In-memory audit log; append is one contiguous write per record.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditLog {
    bytes: Vec<u8>,
    records: usize,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, block: &AirQualityBlock, digest: &Digest, root_after: &Digest, verdict: Reason) -> Result<(), BlockError> {
        let mut payload = canonical_encode(block)?;
        payload.extend_from_slice(format!("digest={digest}\nroot={root_after}\nverdict={}\n", verdict.code()).as_bytes());
        let mut record = format!("{}\n", payload.len()).into_bytes();
        record.extend_from_slice(&payload);
        self.bytes.extend_from_slice(&record);
        self.records += 1;
        Ok(())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.records
    }

    pub fn is_empty(&self) -> bool {
        self.records == 0
    }
}

/// One parsed record, with the block bytes kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditRecord<'a> {
    pub offset: usize,
    pub block_bytes: &'a [u8],
    pub digest: Digest,
    pub root_after: Digest,
    pub verdict: Reason,
}

/// Splits the log into records without checking their content.
pub fn parse_records(bytes: &[u8]) -> Result<Vec<AuditRecord<'_>>, AuditError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let record = out.len();
        let err = |reason: &str| AuditError {
            record,
            offset: pos,
            reason: reason.to_string(),
        };
        let nl = bytes[pos..]
            .iter()
            .take(21)
            .position(|&b| b == b'\n')
            .ok_or_else(|| err("missing length prefix"))?;
        let len_text = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| err("bad length prefix"))?;
        if len_text.is_empty() || !len_text.bytes().all(|b| b.is_ascii_digit()) {
            return Err(err("bad length prefix"));
        }
        let len: usize = len_text.parse().map_err(|_| err("bad length prefix"))?;
        let start = pos + nl + 1;
        let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| err("truncated record"))?;
        let payload = &bytes[start..end];
        let parsed = parse_payload(payload).map_err(|reason| err(&reason))?;
        out.push(AuditRecord { offset: pos, ..parsed });
        pos = end;
    }
    Ok(out)
}

fn parse_payload(payload: &[u8]) -> Result<AuditRecord<'_>, String> {
    if payload.last() != Some(&b'\n') {
        return Err("payload does not end with a linefeed".into());
    }
    // the trailer is the last three lines
    let mut cut = payload.len() - 1;
    let mut starts = [0usize; 3];
    for slot in starts.iter_mut().rev() {
        let nl = payload[..cut].iter().rposition(|&b| b == b'\n').ok_or("record too short")?;
        *slot = nl + 1;
        cut = nl;
    }
    let trailer = std::str::from_utf8(&payload[starts[0]..]).map_err(|_| "trailer not UTF-8")?;
    let mut lines = trailer.lines();
    let mut field = |name: &str| -> Result<&str, String> {
        lines
            .next()
            .and_then(|l| l.strip_prefix(name))
            .and_then(|l| l.strip_prefix('='))
            .ok_or_else(|| format!("expected {name}="))
    };
    let digest = Digest::from_hex(field("digest")?).map_err(|e| format!("digest: {e}"))?;
    let root_after = Digest::from_hex(field("root")?).map_err(|e| format!("root: {e}"))?;
    let verdict = Reason::from_code(field("verdict")?).ok_or("unknown verdict code")?;
    Ok(AuditRecord {
        offset: 0,
        block_bytes: &payload[..starts[0]],
        digest,
        root_after,
        verdict,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Divergence {
    pub record: usize,
    pub offset: usize,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZoneState {
    pub leaves: usize,
    pub root: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AuditReport {
    pub records: usize,
    /// Rebuilt state per zone, up to the first divergence.
    pub zones: BTreeMap<String, ZoneState>,
    pub divergence: Option<Divergence>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.divergence.is_none()
    }
}

/// Rebuilds every zone's tree from the stored blocks, recomputing each
/// digest and root-after. Reports the first record whose stored values
/// disagree; framing errors are returned as [`AuditError`].
pub fn audit(bytes: &[u8]) -> Result<AuditReport, AuditError> {
    let records = parse_records(bytes)?;
    let mut trees: BTreeMap<String, MerkleLog> = BTreeMap::new();
    let mut report = AuditReport {
        records: records.len(),
        ..Default::default()
    };
    for (i, rec) in records.iter().enumerate() {
        let diverge = |detail: String| Divergence {
            record: i,
            offset: rec.offset,
            detail,
        };
        let block = match canonical_decode(rec.block_bytes) {
            Ok(b) => b,
            Err(e) => {
                report.divergence = Some(diverge(format!("block does not decode: {e}")));
                break;
            }
        };
        let digest = sha3_256(rec.block_bytes);
        if digest != rec.digest {
            report.divergence = Some(diverge("stored digest does not match block".into()));
            break;
        }
        if rec.verdict != Reason::Ok {
            report.divergence = Some(diverge(format!("record carries verdict {}", rec.verdict.code())));
            break;
        }
        let tree = trees.entry(block.zone_id.clone()).or_default();
        let root = tree.root_after_append(&digest);
        if root != rec.root_after {
            report.divergence = Some(diverge(format!("root after append differs for zone {}", block.zone_id)));
            break;
        }
        tree.append(digest);
    }
    report.zones = trees
        .into_iter()
        .filter_map(|(zone, tree)| {
            tree.root().map(|root| {
                (
                    zone,
                    ZoneState {
                        leaves: tree.len(),
                        root,
                    },
                )
            })
        })
        .collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::block_digest;

    fn honest_log(n: u64) -> (AuditLog, Digest) {
        let mut log = AuditLog::new();
        let mut tree = MerkleLog::new();
        for i in 0..n {
            let b = AirQualityBlock::new(600 * i, "s1", "gate-a", [45000 + i as i64, 2500, 100, 200, 32000, 900, 1400, 2250, 5600], 95);
            let d = block_digest(&b).unwrap();
            let (root, _) = tree.append(d);
            log.append(&b, &d, &root, Reason::Ok).unwrap();
        }
        (log, tree.root().unwrap_or_default())
    }

    #[test]
    fn empty_log_is_clean() {
        let r = audit(b"").unwrap();
        assert!(r.is_clean());
        assert_eq!(r.records, 0);
        assert!(r.zones.is_empty());
    }

    #[test]
    fn honest_log_replays_to_final_root() {
        let (log, root) = honest_log(17);
        let r = audit(log.as_bytes()).unwrap();
        assert!(r.is_clean());
        assert_eq!(r.records, 17);
        assert_eq!(r.zones["gate-a"], ZoneState { leaves: 17, root });
    }

    #[test]
    fn record_layout() {
        let (log, _) = honest_log(1);
        let text = std::str::from_utf8(log.as_bytes()).unwrap();
        let (len, payload) = text.split_once('\n').unwrap();
        assert_eq!(len.parse::<usize>().unwrap(), payload.len());
        assert!(payload.starts_with("timestamp=0\n"));
        assert!(payload.ends_with("\nverdict=ok\n"));
    }

    #[test]
    fn every_flipped_byte_is_localized() {
        let (log, _) = honest_log(4);
        let bytes = log.as_bytes().to_vec();
        let offsets: Vec<usize> = parse_records(&bytes).unwrap().iter().map(|r| r.offset).collect();
        let record_of = |pos: usize| offsets.iter().rposition(|&o| o <= pos).unwrap();
        for pos in 0..bytes.len() {
            for mask in [0x01u8, 0x20, 0x80] {
                let mut t = bytes.clone();
                t[pos] ^= mask;
                let expected = record_of(pos);
                match audit(&t) {
                    Ok(r) => {
                        let d = r.divergence.unwrap_or_else(|| panic!("flip at {pos} ^{mask:#x} undetected"));
                        assert_eq!(d.record, expected, "pos {pos}: {}", d.detail);
                    }
                    Err(e) => assert_eq!(e.record, expected, "pos {pos}: {e}"),
                }
            }
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let (log, _) = honest_log(3);
        let bytes = log.as_bytes();
        let offsets: Vec<usize> = parse_records(bytes).unwrap().iter().map(|r| r.offset).collect();
        let e = audit(&bytes[..bytes.len() - 5]).unwrap_err();
        assert_eq!(e.record, 2);
        assert_eq!(e.offset, offsets[2]);
    }
}
