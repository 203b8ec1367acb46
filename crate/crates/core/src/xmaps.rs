//! Cross-layer maps: one logical key/value store per map, with device writes
//! staged in per-tier shards and folded into the canonical copy at kernel
//! boundaries.
//!
//! Device-origin writes are additive deltas. A device reader sees the
//! canonical snapshot plus deltas staged from its own SM; a host reader sees
//! only the canonical snapshot.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapKind {
    Array { len: u64 },
    Hash,
    /// Per-warp accumulator, keyed by `sm << 32 | warp` by convention.
    PerWarpAccum,
}

/// Where the canonical copy lives, as declared by a program.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Placement {
    Host,
    Global,
    /// SM-local shards; device lookups may differ per SM.
    SmLocal,
    /// Device-global, promoting hot keys to SM-local shards.
    Adaptive,
}

impl Placement {
    const ALL: [Placement; 4] = [Placement::Host, Placement::Global, Placement::SmLocal, Placement::Adaptive];

    pub fn name(self) -> &'static str {
        match self {
            Placement::Host => "host",
            Placement::Global => "global",
            Placement::SmLocal => "sm",
            Placement::Adaptive => "adaptive",
        }
    }

    pub fn from_name(s: &str) -> Option<Placement> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|p| *p == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Option<Placement> {
        Self::ALL.get(c as usize).copied()
    }

    /// Whether a device lookup with a uniform key returns the same value on every SM.
    pub fn device_reads_uniform(self) -> bool {
        matches!(self, Placement::Host | Placement::Global)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    HostDram,
    DeviceGlobal,
    SmLocal(u32),
}

impl Tier {
    /// Modelled read latency; host DRAM over PCIe is 6000x device memory.
    pub fn read_cost_ns(self) -> u64 {
        match self {
            Tier::HostDram => 6000 * DEVICE_READ_NS,
            Tier::DeviceGlobal => DEVICE_READ_NS,
            Tier::SmLocal(_) => SM_READ_NS,
        }
    }
}

pub const DEVICE_READ_NS: u64 = 50;
pub const SM_READ_NS: u64 = 5;
/// Default per-kernel update count after which a key is cached SM-locally.
pub const PROMOTE_THRESHOLD: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TierPolicy {
    Static,
    AccessDriven { threshold: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    Host,
    Warp { sm: u32, warp: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReadDomain {
    Host,
    Device { sm: u32 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum XmapError {
    #[error("map id {0} already exists")]
    DuplicateId(u32),
    #[error("unknown map id {0}")]
    UnknownMap(u32),
    #[error("key {key} out of range for array map {map} of length {len}")]
    KeyRange { map: u32, key: u64, len: u64 },
    #[error("map {0}: last-writer-wins writes are host-only")]
    HostOnly(u32),
    #[error("sm {sm} out of range ({count} SMs)")]
    BadSm { sm: u32, count: u32 },
    #[error("map {0}: array length must be positive")]
    EmptyArray(u32),
}

/// Pending deltas of one tier, keyed by (origin SM, key).
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MapShard {
    pub tier: Tier,
    pub deltas: BTreeMap<(u32, u64), u64>,
    pub last_flush_epoch: u64,
}

impl MapShard {
    fn new(tier: Tier) -> Self {
        MapShard { tier, deltas: BTreeMap::new(), last_flush_epoch: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MapStats {
    pub host_updates: u64,
    pub device_updates: u64,
    pub lookups: u64,
    pub read_cost_ns: u64,
    pub merges: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CrossMap {
    pub id: u32,
    pub name: String,
    pub kind: MapKind,
    pub placement: Placement,
    pub tier_policy: TierPolicy,
    pub canonical: BTreeMap<u64, u64>,
    pub epoch: u64,
    pub shards: Vec<MapShard>,
    /// Updates per key since the last merge, for access-driven promotion.
    kernel_updates: BTreeMap<u64, u64>,
    pub stats: MapStats,
}

impl CrossMap {
    fn shard_index(&self, tier: Tier) -> Option<usize> {
        self.shards.iter().position(|s| s.tier == tier)
    }

    fn check_key(&self, key: u64) -> Result<(), XmapError> {
        match self.kind {
            MapKind::Array { len } if key >= len => Err(XmapError::KeyRange { map: self.id, key, len }),
            _ => Ok(()),
        }
    }

    /// Tier a device update from `sm` lands in.
    fn write_tier(&self, sm: u32, key: u64) -> Tier {
        let sm_local = match (self.kind, self.placement, self.tier_policy) {
            (MapKind::PerWarpAccum, ..) | (_, Placement::SmLocal, _) => true,
            (.., TierPolicy::AccessDriven { threshold }) => {
                self.kernel_updates.get(&key).copied().unwrap_or(0) > threshold
            }
            _ => false,
        };
        if sm_local && self.shard_index(Tier::SmLocal(sm)).is_some() {
            Tier::SmLocal(sm)
        } else {
            Tier::DeviceGlobal
        }
    }

    pub fn pending(&self) -> u64 {
        self.shards.iter().map(|s| s.deltas.len() as u64).sum()
    }

    /// Sum of staged deltas for `key` across every shard.
    pub fn pending_delta(&self, key: u64) -> u64 {
        self.shards
            .iter()
            .flat_map(|s| s.deltas.iter())
            .filter(|((_, k), _)| *k == key)
            .fold(0u64, |acc, (_, v)| acc.wrapping_add(*v))
    }

    fn canonical_tier(&self) -> Tier {
        match self.placement {
            Placement::Host => Tier::HostDram,
            _ => Tier::DeviceGlobal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MapRecord {
    pub map: u32,
    pub name: String,
    pub epoch: u64,
    pub key: u64,
    pub value: u64,
}

/// All maps of one simulated system.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MapRegistry {
    sm_count: u32,
    maps: BTreeMap<u32, CrossMap>,
}

impl MapRegistry {
    pub fn new(sm_count: u32) -> Self {
        MapRegistry { sm_count: sm_count.max(1), maps: BTreeMap::new() }
    }

    pub fn sm_count(&self) -> u32 {
        self.sm_count
    }

    pub fn create(
        &mut self,
        id: u32,
        name: &str,
        kind: MapKind,
        placement: Placement,
        initial: &[(u64, u64)],
    ) -> Result<&CrossMap, XmapError> {
        if self.maps.contains_key(&id) {
            return Err(XmapError::DuplicateId(id));
        }
        if kind == (MapKind::Array { len: 0 }) {
            return Err(XmapError::EmptyArray(id));
        }
        let tier_policy = match placement {
            Placement::Adaptive => TierPolicy::AccessDriven { threshold: PROMOTE_THRESHOLD },
            _ => TierPolicy::Static,
        };
        let mut shards = Vec::new();
        if placement == Placement::Host {
            shards.push(MapShard::new(Tier::HostDram));
        }
        shards.push(MapShard::new(Tier::DeviceGlobal));
        let sm_shards = kind == MapKind::PerWarpAccum
            || matches!(placement, Placement::SmLocal | Placement::Adaptive);
        if sm_shards {
            shards.extend((0..self.sm_count).map(|sm| MapShard::new(Tier::SmLocal(sm))));
        }
        let mut map = CrossMap {
            id,
            name: name.to_string(),
            kind,
            placement,
            tier_policy,
            canonical: BTreeMap::new(),
            epoch: 0,
            shards,
            kernel_updates: BTreeMap::new(),
            stats: MapStats::default(),
        };
        for &(k, v) in initial {
            map.check_key(k)?;
            map.canonical.insert(k, v);
        }
        Ok(self.maps.entry(id).or_insert(map))
    }

    /// Next free id, for callers that do not care about numbering.
    pub fn next_id(&self) -> u32 {
        self.maps.keys().next_back().map_or(0, |k| k + 1)
    }

    pub fn get(&self, id: u32) -> Result<&CrossMap, XmapError> {
        self.maps.get(&id).ok_or(XmapError::UnknownMap(id))
    }

    fn get_mut(&mut self, id: u32) -> Result<&mut CrossMap, XmapError> {
        self.maps.get_mut(&id).ok_or(XmapError::UnknownMap(id))
    }

    pub fn by_name(&self, name: &str) -> Option<&CrossMap> {
        self.maps.values().find(|m| m.name == name)
    }

    pub fn maps(&self) -> impl Iterator<Item = &CrossMap> {
        self.maps.values()
    }

    pub fn update(&mut self, id: u32, key: u64, delta: u64, origin: Origin) -> Result<(), XmapError> {
        let sm_count = self.sm_count;
        let map = self.get_mut(id)?;
        map.check_key(key)?;
        match origin {
            Origin::Host => {
                map.stats.host_updates += 1;
                let v = map.canonical.entry(key).or_insert(0);
                *v = v.wrapping_add(delta);
            }
            Origin::Warp { sm, .. } => {
                if sm >= sm_count {
                    return Err(XmapError::BadSm { sm, count: sm_count });
                }
                map.stats.device_updates += 1;
                let tier = map.write_tier(sm, key);
                *map.kernel_updates.entry(key).or_insert(0) += 1;
                let idx = map.shard_index(tier).expect("device-global shard always exists");
                let d = map.shards[idx].deltas.entry((sm, key)).or_insert(0);
                *d = d.wrapping_add(delta);
            }
        }
        Ok(())
    }

    /// Last-writer-wins store; host only.
    pub fn set(&mut self, id: u32, key: u64, value: u64, origin: Origin) -> Result<(), XmapError> {
        let map = self.get_mut(id)?;
        if origin != Origin::Host {
            return Err(XmapError::HostOnly(id));
        }
        map.check_key(key)?;
        map.stats.host_updates += 1;
        map.canonical.insert(key, value);
        Ok(())
    }

    pub fn lookup(&mut self, id: u32, key: u64, domain: ReadDomain) -> Result<(u64, u64), XmapError> {
        let sm_count = self.sm_count;
        let map = self.get_mut(id)?;
        map.stats.lookups += 1;
        let base = map.canonical.get(&key).copied().unwrap_or(0);
        match domain {
            ReadDomain::Host => {
                map.stats.read_cost_ns += Tier::HostDram.read_cost_ns().min(map.canonical_tier().read_cost_ns());
                Ok((base, map.epoch))
            }
            ReadDomain::Device { sm } => {
                if sm >= sm_count {
                    return Err(XmapError::BadSm { sm, count: sm_count });
                }
                let tier = map.write_tier(sm, key);
                map.stats.read_cost_ns += match tier {
                    Tier::SmLocal(_) => tier.read_cost_ns(),
                    _ => map.canonical_tier().read_cost_ns(),
                };
                let own = map
                    .shards
                    .iter()
                    .filter_map(|s| s.deltas.get(&(sm, key)))
                    .fold(0u64, |acc, v| acc.wrapping_add(*v));
                Ok((base.wrapping_add(own), map.epoch))
            }
        }
    }

    /// Fold every shard into the canonical copy; returns the new epoch.
    pub fn snapshot_merge(&mut self, id: u32) -> Result<u64, XmapError> {
        let map = self.get_mut(id)?;
        let mut folded = BTreeMap::new();
        for shard in &mut map.shards {
            for ((_, key), d) in std::mem::take(&mut shard.deltas) {
                let v: &mut u64 = folded.entry(key).or_insert(0);
                *v = v.wrapping_add(d);
            }
        }
        for (key, d) in folded {
            let v = map.canonical.entry(key).or_insert(0);
            *v = v.wrapping_add(d);
        }
        map.epoch += 1;
        for shard in &mut map.shards {
            shard.last_flush_epoch = map.epoch;
        }
        map.kernel_updates.clear();
        map.stats.merges += 1;
        Ok(map.epoch)
    }

    /// Merge every map, as at a kernel completion boundary.
    pub fn merge_all(&mut self) {
        let ids: Vec<u32> = self.maps.keys().copied().collect();
        for id in ids {
            let _ = self.snapshot_merge(id);
        }
    }

    /// Canonical contents as `(map, epoch, key, value)` records, sorted.
    pub fn dump(&self) -> Vec<MapRecord> {
        self.maps
            .values()
            .flat_map(|m| {
                m.canonical.iter().map(move |(&key, &value)| MapRecord {
                    map: m.id,
                    name: m.name.clone(),
                    epoch: m.epoch,
                    key,
                    value,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> MapRegistry {
        MapRegistry::new(4)
    }

    #[test]
    fn array_of_zeros() {
        let mut r = reg();
        r.create(0, "a", MapKind::Array { len: 8 }, Placement::Global, &[]).unwrap();
        for k in 0..8 {
            assert_eq!(r.lookup(0, k, ReadDomain::Host).unwrap(), (0, 0));
        }
    }

    #[test]
    fn per_warp_accum_shards() {
        let mut r = reg();
        let m = r.create(1, "w", MapKind::PerWarpAccum, Placement::SmLocal, &[]).unwrap();
        let sm = m.shards.iter().filter(|s| matches!(s.tier, Tier::SmLocal(_))).count();
        let global = m.shards.iter().filter(|s| s.tier == Tier::DeviceGlobal).count();
        assert_eq!((sm, global), (4, 1));
    }

    #[test]
    fn duplicate_id() {
        let mut r = reg();
        r.create(2, "h", MapKind::Hash, Placement::Host, &[]).unwrap();
        assert_eq!(r.create(2, "h2", MapKind::Hash, Placement::Host, &[]).unwrap_err(), XmapError::DuplicateId(2));
    }

    #[test]
    fn staged_warp_update() {
        let mut r = reg();
        r.create(0, "h", MapKind::Hash, Placement::Global, &[]).unwrap();
        r.update(0, 3, 5, Origin::Warp { sm: 1, warp: 0 }).unwrap();
        assert_eq!(r.get(0).unwrap().pending_delta(3), 5);
        assert_eq!(r.lookup(0, 3, ReadDomain::Host).unwrap().0, 0);
        assert_eq!(r.lookup(0, 3, ReadDomain::Device { sm: 1 }).unwrap().0, 5);
        assert_eq!(r.lookup(0, 3, ReadDomain::Device { sm: 2 }).unwrap().0, 0);
        assert_eq!(r.snapshot_merge(0).unwrap(), 1);
        assert_eq!(r.lookup(0, 3, ReadDomain::Host).unwrap(), (5, 1));
    }

    #[test]
    fn host_update_is_immediate() {
        let mut r = reg();
        r.create(0, "h", MapKind::Hash, Placement::Host, &[(3, 1)]).unwrap();
        r.update(0, 3, 2, Origin::Host).unwrap();
        assert_eq!(r.lookup(0, 3, ReadDomain::Host).unwrap(), (3, 0));
    }

    #[test]
    fn merge_folds_shards() {
        let mut r = reg();
        r.create(0, "h", MapKind::Hash, Placement::SmLocal, &[]).unwrap();
        r.update(0, 3, 5, Origin::Warp { sm: 0, warp: 1 }).unwrap();
        r.update(0, 3, 2, Origin::Warp { sm: 2, warp: 0 }).unwrap();
        r.snapshot_merge(0).unwrap();
        assert_eq!(r.lookup(0, 3, ReadDomain::Host).unwrap(), (7, 1));
        assert_eq!(r.get(0).unwrap().pending(), 0);
        // empty merge still advances
        assert_eq!(r.snapshot_merge(0).unwrap(), 2);
        assert_eq!(r.lookup(0, 3, ReadDomain::Host).unwrap().0, 7);
    }

    #[test]
    fn errors() {
        let mut r = reg();
        r.create(0, "a", MapKind::Array { len: 4 }, Placement::Global, &[]).unwrap();
        assert!(matches!(r.update(0, 4, 1, Origin::Host), Err(XmapError::KeyRange { .. })));
        assert_eq!(r.update(9, 0, 1, Origin::Host), Err(XmapError::UnknownMap(9)));
        assert_eq!(r.set(0, 0, 1, Origin::Warp { sm: 0, warp: 0 }), Err(XmapError::HostOnly(0)));
        assert!(matches!(r.update(0, 0, 1, Origin::Warp { sm: 7, warp: 0 }), Err(XmapError::BadSm { .. })));
        assert_eq!(r.lookup(0, 2, ReadDomain::Host).unwrap(), (0, 0));
    }

    #[test]
    fn adaptive_promotion_keeps_values() {
        let mut r = reg();
        r.create(0, "h", MapKind::Hash, Placement::Adaptive, &[]).unwrap();
        for _ in 0..100 {
            r.update(0, 1, 1, Origin::Warp { sm: 3, warp: 0 }).unwrap();
        }
        let m = r.get(0).unwrap();
        let local = m.shards.iter().find(|s| s.tier == Tier::SmLocal(3)).unwrap();
        assert!(!local.deltas.is_empty());
        assert_eq!(r.lookup(0, 1, ReadDomain::Device { sm: 3 }).unwrap().0, 100);
        r.snapshot_merge(0).unwrap();
        assert_eq!(r.lookup(0, 1, ReadDomain::Host).unwrap().0, 100);
    }

    #[test]
    fn host_reads_cost_more() {
        assert_eq!(Tier::HostDram.read_cost_ns() / Tier::DeviceGlobal.read_cost_ns(), 6000);
    }
}
