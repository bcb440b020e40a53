//! Tamper-evident air quality logging: canonical blocks, an append-only
//! Merkle log, windowed statistics, threshold alerts, a server-side
//! verifier and a virtual-time sensor network simulator.

pub mod alerts;
pub mod blocks;
pub mod crypto;
pub mod merkle;
pub mod monitor;
pub mod sim;
pub mod stats;
pub mod verifier;

pub use alerts::{Color, Notification, PolicySet, Status, ThresholdPolicy};
pub use blocks::{block_digest, canonical_decode, canonical_encode, AirQualityBlock, Reading, SensorSpec, SensorTable, Variable};
pub use crypto::Digest;
pub use merkle::{compute_root_from_path, node_count, tree_levels, verify_inclusion, AuthPath, MerkleLog};
pub use monitor::{Monitor, MonitorSettings, StatsRow, STATS_HEADER};
pub use sim::{run, SimConfig, SimOutcome, SimSummary};
pub use stats::{compute_stats, sturges_class_count, ClassScheme, StatsWindow, WindowStats};
pub use verifier::{audit, AuditLog, AuditReport, IngestMessage, Reason, Verdict, Verifier};
