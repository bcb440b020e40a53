//! Server-side ingest: credential, well-formedness, freshness and Merkle
//! checks against a mirror of each zone's log, then commit.

pub mod audit;
pub mod wire;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::blocks::{block_digest, SensorTable};
use crate::crypto::{mac, mac_verify, Digest, DIGEST_LEN};
use crate::merkle::{compute_root_from_path, tree_levels, MerkleLog};
use crate::monitor::{Monitor, StatsRow};

pub use audit::{audit, parse_records, AuditError, AuditLog, AuditRecord, AuditReport, Divergence, ZoneState};
pub use wire::{decode_message, decode_stream, IngestMessage, WireError, WIRE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Reason {
    Ok,
    BadCredential,
    Malformed,
    StaleTimestamp,
    RootMismatch,
}

impl Reason {
    pub fn code(self) -> &'static str {
        match self {
            Reason::Ok => "ok",
            Reason::BadCredential => "bad_credential",
            Reason::Malformed => "malformed",
            Reason::StaleTimestamp => "stale_timestamp",
            Reason::RootMismatch => "root_mismatch",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        [
            Reason::Ok,
            Reason::BadCredential,
            Reason::Malformed,
            Reason::StaleTimestamp,
            Reason::RootMismatch,
        ]
        .into_iter()
        .find(|r| r.code() == code)
    }
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerdictStatus {
    Accept,
    Reject,
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictStatus::Accept => "ACCEPT",
            VerdictStatus::Reject => "REJECT",
        })
    }
}

/// Server signature over a zone's root after an accepted append.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootAck {
    pub zone_id: String,
    pub leaf_count: u64,
    pub root: Digest,
    pub signature: [u8; DIGEST_LEN],
}

fn ack_message(zone_id: &str, leaf_count: u64, root: &Digest) -> Vec<u8> {
    format!("aqlog-root-ack v1\nzone={zone_id}\nleaves={leaf_count}\nroot={root}\n").into_bytes()
}

pub fn sign_root(key: &[u8], zone_id: &str, leaf_count: u64, root: &Digest) -> RootAck {
    RootAck {
        zone_id: zone_id.to_string(),
        leaf_count,
        root: *root,
        signature: mac(key, &ack_message(zone_id, leaf_count, root)),
    }
}

impl RootAck {
    pub fn verify(&self, key: &[u8]) -> bool {
        mac_verify(key, &ack_message(&self.zone_id, self.leaf_count, &self.root), &self.signature)
    }
}

/// Raised on every rejected message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SecurityNotification {
    pub gateway_id: String,
    pub zone_id: String,
    pub device_id: String,
    pub timestamp: u64,
    pub reason: Reason,
    pub detail: String,
}

impl SecurityNotification {
    pub fn render(&self) -> String {
        format!(
            "gateway={} zone={} device={} ts={} reason={} detail=\"{}\"",
            self.gateway_id, self.zone_id, self.device_id, self.timestamp, self.reason, self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub status: VerdictStatus,
    pub reason: Reason,
    pub ack: Option<RootAck>,
    pub security: Option<SecurityNotification>,
    pub rows: Vec<StatsRow>,
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        self.status == VerdictStatus::Accept
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("gateway {0} already registered")]
    DuplicateGateway(String),
    #[error("zone {0} already has a gateway")]
    DuplicateZone(String),
    #[error("invalid identifier {0:?}")]
    Identifier(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Gateway {
    secret: Vec<u8>,
    zone_id: String,
    slaves: BTreeSet<String>,
}

/// Verifies and commits ingest messages.
#[derive(Debug, Clone)]
pub struct Verifier {
    server_key: Vec<u8>,
    sensors: SensorTable,
    gateways: BTreeMap<String, Gateway>,
    mirrors: BTreeMap<String, MerkleLog>,
    last_timestamp: BTreeMap<String, u64>,
    audit_log: AuditLog,
    monitor: Monitor,
}

impl Verifier {
    pub fn new(server_key: impl Into<Vec<u8>>, sensors: SensorTable, monitor: Monitor) -> Self {
        Self {
            server_key: server_key.into(),
            sensors,
            gateways: BTreeMap::new(),
            mirrors: BTreeMap::new(),
            last_timestamp: BTreeMap::new(),
            audit_log: AuditLog::new(),
            monitor,
        }
    }

    /// Registers a zone's master with its shared secret and slave ids.
    pub fn register_gateway(
        &mut self,
        gateway_id: &str,
        secret: &[u8],
        zone_id: &str,
        slaves: impl IntoIterator<Item = String>,
    ) -> Result<(), RegistryError> {
        for id in [gateway_id, zone_id] {
            if !crate::blocks::is_valid_identifier(id) {
                return Err(RegistryError::Identifier(id.into()));
            }
        }
        if self.gateways.contains_key(gateway_id) {
            return Err(RegistryError::DuplicateGateway(gateway_id.into()));
        }
        if self.gateways.values().any(|g| g.zone_id == zone_id) {
            return Err(RegistryError::DuplicateZone(zone_id.into()));
        }
        self.gateways.insert(
            gateway_id.into(),
            Gateway {
                secret: secret.to_vec(),
                zone_id: zone_id.into(),
                slaves: slaves.into_iter().collect(),
            },
        );
        self.mirrors.insert(zone_id.into(), MerkleLog::new());
        Ok(())
    }

    pub fn mirror(&self, zone_id: &str) -> Option<&MerkleLog> {
        self.mirrors.get(zone_id)
    }

    pub fn audit_log(&self) -> &AuditLog {
        &self.audit_log
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn monitor_mut(&mut self) -> &mut Monitor {
        &mut self.monitor
    }

    pub fn server_key(&self) -> &[u8] {
        &self.server_key
    }

    /// Decodes and ingests one wire message; undecodable bytes are
    /// rejected as malformed.
    pub fn ingest_wire(&mut self, bytes: &[u8]) -> Verdict {
        match decode_message(bytes) {
            Ok((msg, used)) if used == bytes.len() => self.ingest(&msg),
            Ok((msg, _)) => self.reject(&msg.gateway_id, None, Reason::Malformed, "trailing bytes after message".into()),
            Err(e) => self.reject("?", None, Reason::Malformed, e.to_string()),
        }
    }

    pub fn ingest(&mut self, msg: &IngestMessage) -> Verdict {
        let block = &msg.block;
        let Some(gateway) = self.gateways.get(&msg.gateway_id) else {
            return self.reject(&msg.gateway_id, Some(msg), Reason::BadCredential, "unknown gateway".into());
        };
        let body = match msg.body() {
            Ok(b) => b,
            Err(e) => return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, e.to_string()),
        };
        if !mac_verify(&gateway.secret, &body, &msg.credential) {
            return self.reject(&msg.gateway_id, Some(msg), Reason::BadCredential, "credential does not verify".into());
        }

        if let Err(e) = block.validate() {
            return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, e.to_string());
        }
        if !block.within_ranges(&self.sensors) {
            return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, "reading outside operating range".into());
        }
        if block.zone_id != gateway.zone_id {
            return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, "zone does not belong to gateway".into());
        }
        if !gateway.slaves.contains(&block.device_id) {
            return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, "unknown device".into());
        }
        let mirror = &self.mirrors[&gateway.zone_id];
        let max_path = tree_levels(mirror.len() as u64 + 1).expect("non-zero") as usize - 1;
        if msg.auth_path.steps.len() > max_path {
            return self.reject(&msg.gateway_id, Some(msg), Reason::Malformed, "authentication path too long".into());
        }

        if let Some(&last) = self.last_timestamp.get(&block.device_id) {
            if block.timestamp <= last {
                return self.reject(
                    &msg.gateway_id,
                    Some(msg),
                    Reason::StaleTimestamp,
                    format!("timestamp {} not after {last}", block.timestamp),
                );
            }
        }

        let digest = block_digest(block).expect("validated block");
        let path_root = compute_root_from_path(&digest, &msg.auth_path);
        let expected_root = mirror.root_after_append(&digest);
        let detail = if msg.auth_path.leaf_index != mirror.len() as u64 {
            Some(format!("leaf index {} but log holds {}", msg.auth_path.leaf_index, mirror.len()))
        } else if path_root != msg.proposed_root {
            Some("path does not lead to proposed root".into())
        } else if msg.proposed_root != expected_root {
            Some("proposed root differs from mirror".into())
        } else {
            None
        };
        if let Some(detail) = detail {
            return self.reject(&msg.gateway_id, Some(msg), Reason::RootMismatch, detail);
        }

        // commit
        let zone_id = gateway.zone_id.clone();
        let mirror = self.mirrors.get_mut(&zone_id).expect("registered zone");
        let (root, _) = mirror.append(digest);
        let leaf_count = mirror.len() as u64;
        self.last_timestamp.insert(block.device_id.clone(), block.timestamp);
        self.audit_log
            .append(block, &digest, &root, Reason::Ok)
            .expect("validated block");
        let rows = self.monitor.observe(block);
        Verdict {
            status: VerdictStatus::Accept,
            reason: Reason::Ok,
            ack: Some(sign_root(&self.server_key, &zone_id, leaf_count, &root)),
            security: None,
            rows,
        }
    }

    fn reject(&self, gateway_id: &str, msg: Option<&IngestMessage>, reason: Reason, detail: String) -> Verdict {
        let (zone_id, device_id, timestamp) = msg
            .map(|m| (m.block.zone_id.clone(), m.block.device_id.clone(), m.block.timestamp))
            .unwrap_or_else(|| ("?".into(), "?".into(), 0));
        Verdict {
            status: VerdictStatus::Reject,
            reason,
            ack: None,
            security: Some(SecurityNotification {
                gateway_id: gateway_id.into(),
                zone_id,
                device_id,
                timestamp,
                reason,
                detail,
            }),
            rows: Vec::new(),
        }
    }
}
