use serde::{Deserialize, Serialize};

use crate::hardware::LinkKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReshardKind {
    OneToOne,
    Scatter,
    Gather,
    AllToAll,
}

/// Bytes moved from one source shard to one destination shard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShardPair {
    pub src: u32,
    pub dst: u32,
    pub bytes: u64,
    /// Link used once lowered; `None` when both shards share a device.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkKind>,
}

/// How a logical buffer of `logical_bytes` moves from `src_shards` block
/// shards to `dst_shards` block shards.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReshardingSpec {
    pub src_shards: u32,
    pub dst_shards: u32,
    pub kind: ReshardKind,
    pub logical_bytes: u64,
    pub pairs: Vec<ShardPair>,
}

fn block_start(i: u32, shards: u32, total: u64) -> u64 {
    (i as u128 * total as u128 / shards as u128) as u64
}

impl ReshardingSpec {
    pub fn one_to_one(shards: u32, logical_bytes: u64) -> Self {
        let pairs = (0..shards)
            .map(|i| ShardPair {
                src: i,
                dst: i,
                bytes: block_start(i + 1, shards, logical_bytes) - block_start(i, shards, logical_bytes),
                link: None,
            })
            .collect();
        ReshardingSpec {
            src_shards: shards,
            dst_shards: shards,
            kind: ReshardKind::OneToOne,
            logical_bytes,
            pairs,
        }
    }

    /// Contiguous block ownership on both sides; each pair carries the
    /// overlap of the two blocks. Mismatched layouts on equal shard counts
    /// become a uniform all-to-all exchange.
    pub fn block(src_shards: u32, dst_shards: u32, logical_bytes: u64, same_layout: bool) -> Self {
        assert!(src_shards > 0 && dst_shards > 0);
        if src_shards == dst_shards && same_layout {
            return Self::one_to_one(src_shards, logical_bytes);
        }
        if !same_layout {
            return Self::all_to_all(src_shards, dst_shards, logical_bytes);
        }
        let mut pairs = Vec::new();
        let (m, n, l) = (src_shards, dst_shards, logical_bytes);
        // Pairs are found on an index space of m*n units so that they exist
        // even for tiny or empty buffers; bytes come from the real blocks.
        let (mut i, mut j) = (0u32, 0u32);
        while i < m && j < n {
            let (u0, u1) = (i as u64 * n as u64, (i as u64 + 1) * n as u64);
            let (v0, v1) = (j as u64 * m as u64, (j as u64 + 1) * m as u64);
            if u1.min(v1) > u0.max(v0) {
                let (s0, s1) = (block_start(i, m, l), block_start(i + 1, m, l));
                let (d0, d1) = (block_start(j, n, l), block_start(j + 1, n, l));
                pairs.push(ShardPair {
                    src: i,
                    dst: j,
                    bytes: s1.min(d1).saturating_sub(s0.max(d0)),
                    link: None,
                });
            }
            if u1 <= v1 {
                i += 1;
            } else {
                j += 1;
            }
        }
        let kind = if n % m == 0 {
            ReshardKind::Scatter
        } else if m % n == 0 {
            ReshardKind::Gather
        } else {
            ReshardKind::AllToAll
        };
        ReshardingSpec {
            src_shards,
            dst_shards,
            kind,
            logical_bytes,
            pairs,
        }
    }

    fn all_to_all(m: u32, n: u32, l: u64) -> Self {
        // Source block i is spread evenly over all destinations.
        let mut pairs = Vec::with_capacity((m * n) as usize);
        for i in 0..m {
            let src_bytes = block_start(i + 1, m, l) - block_start(i, m, l);
            for j in 0..n {
                let bytes = block_start(j + 1, n, src_bytes) - block_start(j, n, src_bytes);
                pairs.push(ShardPair {
                    src: i,
                    dst: j,
                    bytes,
                    link: None,
                });
            }
        }
        ReshardingSpec {
            src_shards: m,
            dst_shards: n,
            kind: ReshardKind::AllToAll,
            logical_bytes: l,
            pairs,
        }
    }

    pub fn bytes_from_src(&self, src: u32) -> u64 {
        self.pairs.iter().filter(|p| p.src == src).map(|p| p.bytes).sum()
    }

    pub fn bytes_into_dst(&self, dst: u32) -> u64 {
        self.pairs.iter().filter(|p| p.dst == dst).map(|p| p.bytes).sum()
    }

    /// Bytes that cross a link; same-device pairs move nothing.
    pub fn transfer_bytes(&self) -> u64 {
        self.pairs.iter().filter(|p| p.link.is_some()).map(|p| p.bytes).sum()
    }

    /// Source shards that send anything to `dst`.
    pub fn senders_to(&self, dst: u32) -> impl Iterator<Item = u32> + '_ {
        self.pairs.iter().filter(move |p| p.dst == dst).map(|p| p.src)
    }
}
