//! Deterministic traffic diversion and bucketing.
//!
//! Both group assignment and bucketing reduce `XXH3-64(user-id bytes, seed)`
//! modulo some resolution. Using distinct seeds for the two purposes makes the
//! streams independent, which the bucket estimator relies on.

use std::fmt;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::{Error, Result};

/// Residue resolution used for group diversion. Ratios are honoured in steps
/// of `1 / GROUP_RESOLUTION`.
pub const GROUP_RESOLUTION: u64 = 10_000;

/// Opaque randomization unit identifier (non-empty byte string).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct UserId(Box<[u8]>);

impl UserId {
    pub fn new(id: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = id.into();
        if bytes.is_empty() {
            return Err(Error::contract("user id must be non-empty"));
        }
        Ok(UserId(bytes.into_boxed_slice()))
    }

    /// Synthetic id used by the simulators: `u<index>`.
    pub fn synthetic(index: usize) -> Self {
        UserId(format!("u{index}").into_bytes().into_boxed_slice())
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

impl TryFrom<String> for UserId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        UserId::new(s)
    }
}

impl From<UserId> for String {
    fn from(u: UserId) -> String {
        u.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HashSeed(pub u64);

/// Raw 64-bit hash of a user under a seed.
#[inline]
pub fn hash64(user: &UserId, seed: HashSeed) -> u64 {
    xxh3_64_with_seed(user.as_bytes(), seed.0)
}

/// `hash64(user, seed) mod modulus`.
///
/// # Panics
/// If `modulus == 0`.
#[inline]
pub fn hash_mod(user: &UserId, seed: HashSeed, modulus: u64) -> u64 {
    assert!(modulus >= 1, "hash_mod: modulus must be positive");
    hash64(user, seed) % modulus
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupAssignment {
    /// 1-based group index, or `None` when the user is outside the experiment.
    pub group: Option<u32>,
    pub ratio: f64,
}

impl GroupAssignment {
    pub fn is_in(&self) -> bool {
        self.group.is_some()
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("group ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Single-group diversion: in the group iff the residue is below `ratio · R`.
pub fn assign_group(user: &UserId, seed: HashSeed, ratio: f64) -> Result<GroupAssignment> {
    check_ratio(ratio)?;
    let residue = hash_mod(user, seed, GROUP_RESOLUTION) as f64;
    let group = (residue < ratio * GROUP_RESOLUTION as f64).then_some(1);
    Ok(GroupAssignment { group, ratio })
}

/// Multi-group diversion: group `g` owns the residue range
/// `[Σ_{k<g} r_k · R, Σ_{k≤g} r_k · R)`.
pub fn assign_groups(user: &UserId, seed: HashSeed, ratios: &[f64]) -> Result<GroupAssignment> {
    for &r in ratios {
        check_ratio(r)?;
    }
    let total: f64 = ratios.iter().sum();
    if total > 1.0 + 1e-12 {
        return Err(Error::contract(format!("group ratios sum to {total} > 1")));
    }
    let residue = hash_mod(user, seed, GROUP_RESOLUTION) as f64;
    let mut upper = 0.0;
    for (g, &r) in ratios.iter().enumerate() {
        upper += r * GROUP_RESOLUTION as f64;
        if residue < upper {
            return Ok(GroupAssignment { group: Some(g as u32 + 1), ratio: r });
        }
    }
    Ok(GroupAssignment { group: None, ratio: 0.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BucketAssignment {
    pub bucket: u32,
    pub bucket_count: u32,
}

/// Bucket in `0..bucket_count`. The seed must differ from every group seed.
pub fn assign_bucket(user: &UserId, seed: HashSeed, bucket_count: u32) -> Result<BucketAssignment> {
    if bucket_count < 2 {
        return Err(Error::contract(format!("bucket count must be at least 2, got {bucket_count}")));
    }
    let bucket = hash_mod(user, seed, u64::from(bucket_count)) as u32;
    Ok(BucketAssignment { bucket, bucket_count })
}
