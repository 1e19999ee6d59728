//! Comparative-group generation from the budgeted sample ids.
//!
//! A group is a k-subset of ids split into halves A (size `ceil(k/2)`) and B
//! (size `floor(k/2)`). Cap bookkeeping counts unordered `(subset, split)`
//! combinations — for `k = 2` that is `C(n, 2)` — while each draw emits a
//! uniformly random orientation of its split. Draws are without replacement
//! across one stream, enforced by canonical-form hashing.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::RngStream;

/// Default cap on the number of comparative examples drawn per stream.
pub const DEFAULT_CAP: u64 = 100_000;

/// Largest combinatorial total [`enumerate_groups`] will expand.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// One comparative training example: two disjoint groups of sample ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComparisonGroup {
    pub group_a: Vec<u64>,
    pub group_b: Vec<u64>,
}

impl ComparisonGroup {
    pub fn k(&self) -> usize {
        self.group_a.len() + self.group_b.len()
    }

    /// Orientation-insensitive key: sorted halves, with the half containing
    /// the overall smallest id first when the halves have equal size.
    pub fn canonical_key(&self) -> Vec<u64> {
        let mut a = self.group_a.clone();
        let mut b = self.group_b.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a.len() == b.len() && b[0] < a[0] {
            std::mem::swap(&mut a, &mut b);
        }
        let mut key = a;
        key.push(u64::MAX); // separator; ids are dataset indices, never MAX
        key.extend_from_slice(&b);
        key
    }
}

/// Group-sampler parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub cap: u64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        SamplerConfig {
            k,
            cap: DEFAULT_CAP,
            seed,
        }
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul(n - i) / (i + 1);
    }
    acc
}

/// Distinct splits of one k-subset: choices of the A half, counted up to
/// split identity (each unordered {A, B} pair once when the halves tie).
fn splits_per_subset(k: usize) -> u128 {
    let a = k.div_ceil(2) as u128;
    let c = binomial(k as u128, a);
    if k % 2 == 0 {
        c / 2
    } else {
        c
    }
}

/// Total distinct `(subset, split)` combinations for `n` ids and group size
/// `k`, saturating on overflow.
pub fn total_groups(n: usize, k: usize) -> u128 {
    binomial(n as u128, k as u128).saturating_mul(splits_per_subset(k))
}

fn check_ids(ids: &[u64], k: usize) -> Result<()> {
    if k < 2 {
        return Err(invalid("group size k must be at least 2"));
    }
    if ids.len() < k {
        return Err(invalid(format!(
            "need at least k = {k} ids, got {}",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(invalid("duplicate sample ids"));
    }
    Ok(())
}

/// Uniform without-replacement stream of comparison groups. Yields exactly
/// `min(cap, total_groups)` distinct groups, deterministically under the
/// config seed.
pub struct GroupSampler {
    ids: Vec<u64>,
    k: usize,
    remaining: u128,
    seen: HashSet<Vec<u64>>,
    rng: RngStream,
}

impl GroupSampler {
    pub fn new(ids: &[u64], cfg: &SamplerConfig) -> Result<Self> {
        check_ids(ids, cfg.k)?;
        if cfg.cap < 1 {
            return Err(invalid("sampler cap must be at least 1"));
        }
        let total = total_groups(ids.len(), cfg.k);
        Ok(GroupSampler {
            ids: ids.to_vec(),
            k: cfg.k,
            remaining: total.min(cfg.cap as u128),
            seen: HashSet::new(),
            rng: RngStream::new(cfg.seed),
        })
    }

    /// Groups left in the stream.
    pub fn remaining(&self) -> u128 {
        self.remaining
    }
}

impl Iterator for GroupSampler {
    type Item = ComparisonGroup;

    fn next(&mut self) -> Option<ComparisonGroup> {
        if self.remaining == 0 {
            return None;
        }
        let a_len = self.k.div_ceil(2);
        loop {
            // Draw k distinct ids; the partial shuffle makes both the subset
            // and the A/B assignment uniform.
            let picked = self.rng.choose_k(&self.ids, self.k);
            let mut group = ComparisonGroup {
                group_a: picked[..a_len].to_vec(),
                group_b: picked[a_len..].to_vec(),
            };
            if self.seen.insert(group.canonical_key()) {
                self.remaining -= 1;
                group.group_a.sort_unstable();
                group.group_b.sort_unstable();
                return Some(group);
            }
        }
    }
}

/// Brute-force oracle: every distinct `(k-subset, split)` exactly once, in
/// canonical (lexicographic) order. For even `k` the A half is the one
/// holding the subset's smallest id.
pub fn enumerate_groups(ids: &[u64], k: usize) -> Result<Vec<ComparisonGroup>> {
    check_ids(ids, k)?;
    let total = total_groups(ids.len(), k);
    if total > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            total,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let a_len = k.div_ceil(2);
    let mut out = Vec::with_capacity(total as usize);

    // Lexicographic k-subsets of indices.
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let members: Vec<u64> = subset.iter().map(|&i| sorted[i]).collect();
        // Lexicographic choices of A positions within the subset. For even k,
        // position 0 (the minimum) is pinned into A to count splits once.
        let pool: Vec<usize> = (0..k).collect();
        let (fixed, free_pool, choose) = if k % 2 == 0 {
            (vec![0usize], &pool[1..], a_len - 1)
        } else {
            (Vec::new(), &pool[..], a_len)
        };
        let mut pick: Vec<usize> = (0..choose).collect();
        loop {
            let mut a_pos: Vec<usize> = fixed.clone();
            a_pos.extend(pick.iter().map(|&i| free_pool[i]));
            let group_a: Vec<u64> = a_pos.iter().map(|&p| members[p]).collect();
            let group_b: Vec<u64> = (0..k)
                .filter(|p| !a_pos.contains(p))
                .map(|p| members[p])
                .collect();
            out.push(ComparisonGroup { group_a, group_b });

            if choose == 0 || !next_combination(&mut pick, free_pool.len()) {
                break;
            }
        }
        if !next_combination(&mut subset, n) {
            break;
        }
    }
    Ok(out)
}

/// Advance `idx` to the next lexicographic combination drawn from `0..n`.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    if k == 0 {
        return false;
    }
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - (k - i) {
            idx[i] += 1;
            for j in (i + 1)..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Comparative examples for one training epoch: take `needed` groups from a
/// fresh stream, cycling the collected stream with reshuffles when it is
/// shorter than the demand.
pub fn epoch_groups(
    ids: &[u64],
    cfg: &SamplerConfig,
    needed: usize,
) -> Result<Vec<ComparisonGroup>> {
    let stream = GroupSampler::new(ids, cfg)?;
    let mut pool: Vec<ComparisonGroup> = stream.take(needed).collect();
    if pool.len() >= needed {
        return Ok(pool);
    }
    let mut rng = RngStream::new(cfg.seed).split(0x9d7a);
    let base = pool.clone();
    while pool.len() < needed {
        let mut cycle = base.clone();
        rng.shuffle(&mut cycle);
        let take = (needed - pool.len()).min(cycle.len());
        pool.extend(cycle.into_iter().take(take));
    }
    Ok(pool)
}
