use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Synthetic,
    Public,
    Proprietary,
}

/// Named split sizes, applied in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitProfile {
    pub source: SourceTag,
    pub counts: Vec<(String, usize)>,
}

impl SplitProfile {
    /// Web-scraped pool: 520 evaluation images and a 100-image tuning pool.
    /// The published arithmetic does not add up to 1520, so the remainder is
    /// simply left unassigned.
    pub fn public_default() -> Self {
        Self {
            source: SourceTag::Public,
            counts: vec![("eval".into(), 520), ("adapt".into(), 100)],
        }
    }

    /// 150 in-house images: 50 for in-context examples, 100 for evaluation.
    pub fn proprietary_default() -> Self {
        Self {
            source: SourceTag::Proprietary,
            counts: vec![("icl_pool".into(), 50), ("eval".into(), 100)],
        }
    }

    pub fn synthetic_default() -> Self {
        Self {
            source: SourceTag::Synthetic,
            counts: vec![("adapt".into(), 2000)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: SourceTag,
    pub seed: u64,
    pub splits: BTreeMap<String, Vec<u64>>,
}

impl SplitManifest {
    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.splits.values().flatten().all(|id| seen.insert(*id))
    }
}

/// Seeded shuffle of the (sorted) ids, carved into consecutive chunks.
pub fn make_splits(
    ids: &[u64],
    profile: &SplitProfile,
    seed: u64,
) -> Result<SplitManifest, DatasetError> {
    let mut pool: Vec<u64> = ids.to_vec();
    pool.sort_unstable();
    if let Some(w) = pool.windows(2).find(|w| w[0] == w[1]) {
        return Err(DatasetError::DuplicateId(w[0]));
    }
    let requested: usize = profile.counts.iter().map(|(_, n)| n).sum();
    if requested > pool.len() {
        return Err(DatasetError::Oversubscribed {
            requested,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let mut splits = BTreeMap::new();
    let mut start = 0;
    for (name, n) in &profile.counts {
        let mut part = pool[start..start + n].to_vec();
        part.sort_unstable();
        splits.entry(name.clone()).or_insert_with(Vec::new).extend(part);
        start += n;
    }
    Ok(SplitManifest {
        source: profile.source,
        seed,
        splits,
    })
}
