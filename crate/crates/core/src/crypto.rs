//! Hash and MAC primitives shared by the block, Merkle and verifier layers.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use sha3::{Digest as _, Sha3_256};
use thiserror::Error;

pub const DIGEST_LEN: usize = 32;

type HmacSha3 = Hmac<Sha3_256>;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HexError {
    #[error("expected {expected} hex characters, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("invalid hex character {0:?} (lowercase hex only)")]
    Char(char),
}

/// A 32-byte SHA3-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; DIGEST_LEN]);

impl Digest {
    pub const fn new(bytes: [u8; DIGEST_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Parses exactly 64 lowercase hex characters.
    pub fn from_hex(s: &str) -> Result<Self, HexError> {
        let bytes = decode_lower_hex(s)?;
        Self::try_from(bytes.as_slice()).map_err(|_| HexError::Length {
            expected: DIGEST_LEN * 2,
            actual: s.len(),
        })
    }

    /// Returns a copy with a single bit inverted.
    pub fn with_bit_flipped(mut self, bit: usize) -> Self {
        let bit = bit % (DIGEST_LEN * 8);
        self.0[bit / 8] ^= 1 << (bit % 8);
        self
    }
}

impl TryFrom<&[u8]> for Digest {
    type Error = HexError;

    fn try_from(bytes: &[u8]) -> Result<Self, Self::Error> {
        let arr: [u8; DIGEST_LEN] = bytes.try_into().map_err(|_| HexError::Length {
            expected: DIGEST_LEN * 2,
            actual: bytes.len() * 2,
        })?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Strict lowercase hex decoding. Uppercase is rejected so that every
/// digest has exactly one textual form.
pub fn decode_lower_hex(s: &str) -> Result<Vec<u8>, HexError> {
    if let Some(c) = s.chars().find(|c| !matches!(c, '0'..='9' | 'a'..='f')) {
        return Err(HexError::Char(c));
    }
    if s.len() % 2 != 0 {
        return Err(HexError::Length {
            expected: s.len() + 1,
            actual: s.len(),
        });
    }
    Ok(hex::decode(s).expect("validated hex"))
}

pub fn sha3_256(bytes: &[u8]) -> Digest {
    Digest(Sha3_256::digest(bytes).into())
}

/// SHA3-256 over the concatenation of several byte slices.
pub fn sha3_256_concat(parts: &[&[u8]]) -> Digest {
    let mut hasher = Sha3_256::new();
    for part in parts {
        hasher.update(part);
    }
    Digest(hasher.finalize().into())
}

/// HMAC-SHA3-256 tag.
pub fn mac(key: &[u8], message: &[u8]) -> [u8; DIGEST_LEN] {
    let mut m = HmacSha3::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(message);
    m.finalize().into_bytes().into()
}

/// Constant-time tag check.
pub fn mac_verify(key: &[u8], message: &[u8], tag: &[u8]) -> bool {
    let mut m = HmacSha3::new_from_slice(key).expect("HMAC accepts any key length");
    m.update(message);
    m.verify_slice(tag).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    // FIPS 202 published vectors.
    const SHA3_EMPTY: &str = "a7ffc6f8bf1ed76651c14756a061d662f580ff4de43b49fa82d80a4b80f8434a";
    const SHA3_ABC: &str = "3a985da74fe225b2045c172d6bd390bd855f086e3e9d525b46bfe24511431532";

    #[test]
    fn sha3_known_vectors() {
        assert_eq!(sha3_256(b"").to_hex(), SHA3_EMPTY);
        assert_eq!(sha3_256(b"abc").to_hex(), SHA3_ABC);
        assert_eq!(sha3_256_concat(&[b"a", b"", b"bc"]).to_hex(), SHA3_ABC);
    }

    #[test]
    fn hex_is_strict() {
        let d = sha3_256(b"abc");
        assert_eq!(Digest::from_hex(&d.to_hex()).unwrap(), d);
        assert!(matches!(
            Digest::from_hex(&d.to_hex().to_uppercase()),
            Err(HexError::Char(_))
        ));
        assert!(matches!(
            Digest::from_hex(&d.to_hex()[..62]),
            Err(HexError::Length { .. })
        ));
        assert!(Digest::try_from(&[0u8; 31][..]).is_err());
    }

    #[test]
    fn mac_roundtrip_and_key_sensitivity() {
        let tag = mac(b"key", b"message");
        assert!(mac_verify(b"key", b"message", &tag));
        assert!(!mac_verify(b"key2", b"message", &tag));
        assert!(!mac_verify(b"key", b"messagf", &tag));
    }

    #[test]
    fn bit_flip_changes_exactly_one_bit() {
        let d = sha3_256(b"x");
        for bit in [0, 7, 8, 255] {
            let f = d.with_bit_flipped(bit);
            let diff: u32 = d
                .as_bytes()
                .iter()
                .zip(f.as_bytes())
                .map(|(a, b)| (a ^ b).count_ones())
                .sum();
            assert_eq!(diff, 1);
        }
    }
}
