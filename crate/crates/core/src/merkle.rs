//! Append-only binary Merkle log over block digests.
//!
//! Levels are built pairwise from the leaves upward. A node left without a
//! sibling at the end of a level is promoted to the next level unchanged
//! (no duplication, no re-hash), so a tree over `L` leaves materializes
//! exactly `L - 1` parent hashes and `2L - 1` distinct nodes.
//!
//! Only the last node of each level can change on append, so the cached
//! levels are updated in `O(log L)`.

use std::fmt;

use thiserror::Error;

use crate::crypto::{sha3_256_concat, Digest, HexError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MerkleError {
    #[error("leaf count must be at least 1")]
    EmptyTree,
    #[error("leaf index {index} out of range for {len} leaves")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("malformed authentication path: {0}")]
    MalformedPath(String),
    #[error("snapshot line {line}: {reason}")]
    Snapshot { line: usize, reason: String },
}

impl From<HexError> for MerkleError {
    fn from(e: HexError) -> Self {
        MerkleError::MalformedPath(e.to_string())
    }
}

/// `H(left || right)` over the raw 32-byte digests.
pub fn parent_hash(left: &Digest, right: &Digest) -> Digest {
    sha3_256_concat(&[left.as_bytes(), right.as_bytes()])
}

/// Number of tree levels for `leaf_count` leaves: `n + 1` where `n` is the
/// least integer with `2^n >= leaf_count`.
pub fn tree_levels(leaf_count: u64) -> Result<u32, MerkleError> {
    if leaf_count == 0 {
        return Err(MerkleError::EmptyTree);
    }
    Ok(leaf_count.next_power_of_two().trailing_zeros() + 1)
}

/// `2L - 1`.
pub fn node_count(leaf_count: u64) -> Result<u64, MerkleError> {
    if leaf_count == 0 {
        return Err(MerkleError::EmptyTree);
    }
    Ok(2 * leaf_count - 1)
}

/// Which side of the running hash a sibling sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn code(self) -> char {
        match self {
            Side::Left => 'L',
            Side::Right => 'R',
        }
    }

    pub fn from_code(c: &str) -> Option<Self> {
        match c {
            "L" => Some(Side::Left),
            "R" => Some(Side::Right),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathStep {
    pub side: Side,
    pub digest: Digest,
}

impl PathStep {
    /// `L:<hex>` or `R:<hex>`.
    pub fn parse(s: &str) -> Result<Self, MerkleError> {
        let (side, hex) = s
            .split_once(':')
            .ok_or_else(|| MerkleError::MalformedPath(format!("step {s:?} lacks a side marker")))?;
        let side = Side::from_code(side)
            .ok_or_else(|| MerkleError::MalformedPath(format!("unknown side {side:?}")))?;
        Ok(Self {
            side,
            digest: Digest::from_hex(hex)?,
        })
    }
}

impl fmt::Display for PathStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.side.code(), self.digest)
    }
}

/// Sibling digests linking one leaf to a root, leaf level first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct AuthPath {
    pub leaf_index: u64,
    pub steps: Vec<PathStep>,
}

impl AuthPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Folds `parent_hash` along the path, honoring side markers.
pub fn compute_root_from_path(leaf: &Digest, path: &AuthPath) -> Digest {
    path.steps.iter().fold(*leaf, |acc, step| match step.side {
        Side::Left => parent_hash(&step.digest, &acc),
        Side::Right => parent_hash(&acc, &step.digest),
    })
}

pub fn verify_inclusion(leaf: &Digest, path: &AuthPath, root: &Digest) -> bool {
    compute_root_from_path(leaf, path) == *root
}

/// Root over `leaves` computed level by level from scratch.
pub fn rebuild_root(leaves: &[Digest]) -> Option<Digest> {
    if leaves.is_empty() {
        return None;
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [l, r] => parent_hash(l, r),
                [single] => *single,
                _ => unreachable!(),
            })
            .collect();
    }
    Some(level[0])
}

/// Append-only Merkle log with cached levels.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MerkleLog {
    // levels[0] are the leaves; the last level holds a single root once
    // the log is non-empty
    levels: Vec<Vec<Digest>>,
}

pub const SNAPSHOT_VERSION: &str = "aqlog-merkle-snapshot v1";

impl MerkleLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_leaves(leaves: impl IntoIterator<Item = Digest>) -> Self {
        let mut log = Self::new();
        for leaf in leaves {
            log.push(leaf);
        }
        log
    }

    pub fn len(&self) -> usize {
        self.levels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaves(&self) -> &[Digest] {
        self.levels.first().map_or(&[], Vec::as_slice)
    }

    pub fn root(&self) -> Option<Digest> {
        self.levels.last().map(|top| top[0])
    }

    /// Number of levels currently materialized (leaves through root).
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, depth: usize) -> &[Digest] {
        &self.levels[depth]
    }

    /// Appends a leaf and returns the new root with the leaf's path.
    pub fn append(&mut self, leaf: Digest) -> (Digest, AuthPath) {
        let index = self.len();
        self.push(leaf);
        let path = self.auth_path(index).expect("leaf just appended");
        (self.root().expect("non-empty"), path)
    }

    fn push(&mut self, leaf: Digest) {
        if self.levels.is_empty() {
            self.levels.push(Vec::new());
        }
        self.levels[0].push(leaf);
        let mut depth = 0;
        while self.levels[depth].len() > 1 {
            let level = &self.levels[depth];
            let last = level.len() - 1;
            let parent = if last % 2 == 1 {
                parent_hash(&level[last - 1], &level[last])
            } else {
                level[last]
            };
            let parent_index = last / 2;
            if self.levels.len() == depth + 1 {
                self.levels.push(Vec::new());
            }
            let next = &mut self.levels[depth + 1];
            if parent_index < next.len() {
                next[parent_index] = parent;
            } else {
                next.push(parent);
            }
            depth += 1;
        }
    }

    /// Root the log would have after appending `leaf`, without mutating.
    pub fn root_after_append(&self, leaf: &Digest) -> Digest {
        // the new node sits at index len >> depth on every level
        let mut node = *leaf;
        let mut index = self.len();
        let mut depth = 0;
        while index > 0 {
            if index % 2 == 1 {
                node = parent_hash(&self.levels[depth][index - 1], &node);
            }
            index /= 2;
            depth += 1;
        }
        node
    }

    pub fn auth_path(&self, leaf_index: usize) -> Result<AuthPath, MerkleError> {
        let len = self.len();
        if leaf_index >= len {
            return Err(MerkleError::IndexOutOfRange { index: leaf_index, len });
        }
        let mut steps = Vec::new();
        let mut index = leaf_index;
        for level in &self.levels[..self.levels.len() - 1] {
            let sibling = index ^ 1;
            if sibling < level.len() {
                let side = if sibling < index { Side::Left } else { Side::Right };
                steps.push(PathStep {
                    side,
                    digest: level[sibling],
                });
            }
            index /= 2;
        }
        Ok(AuthPath {
            leaf_index: leaf_index as u64,
            steps,
        })
    }

    /// Count of distinct materialized nodes: every leaf plus every parent
    /// hash; promoted copies are not counted again.
    pub fn distinct_node_count(&self) -> usize {
        self.levels.iter().map(|level| level.len() / 2).sum::<usize>() + self.len()
    }

    /// Version line followed by one hex leaf per line.
    pub fn to_snapshot(&self) -> String {
        let mut out = String::with_capacity(SNAPSHOT_VERSION.len() + 1 + self.len() * 65);
        out.push_str(SNAPSHOT_VERSION);
        out.push('\n');
        for leaf in self.leaves() {
            out.push_str(&leaf.to_hex());
            out.push('\n');
        }
        out
    }

    pub fn from_snapshot(text: &str) -> Result<Self, MerkleError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, SNAPSHOT_VERSION)) => {}
            _ => {
                return Err(MerkleError::Snapshot {
                    line: 0,
                    reason: "missing version line".into(),
                })
            }
        }
        let mut log = Self::new();
        for (line, hex) in lines {
            let leaf = Digest::from_hex(hex).map_err(|e| MerkleError::Snapshot {
                line,
                reason: e.to_string(),
            })?;
            log.push(leaf);
        }
        Ok(log)
    }
}
