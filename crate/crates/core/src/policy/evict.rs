//! Eviction policies.

use std::collections::BTreeMap;

use super::{Params, PolicyError};
use crate::host::PolicyFault;
use crate::ir::{ContextBuf, Hook};
use crate::mem::{MemKfuncs, MemPolicy};

/// LFU: the kernel offers candidates in list order. The first candidate
/// moves to the victim end; each later candidate with a strictly lower access
/// count replaces it. Ties keep kernel order.
pub const LFU_SRC: &str = "\
.hook gpu_evict_prepare
.map best array:1 host
    ldctxdw r6, list_pos
    ldctxdw r7, access_count
    ldctxdw r8, region_id
    jeq r6, 0, take
    mov r1, 0
    mov r2, 0
    call map_lookup
    jge r7, r0, out
take:
    mov r1, 0
    mov r2, 0
    mov r3, r7
    call map_set
    mov r1, r8
    call bpf_gpu_move_head
out:
    mov r0, 0
    exit
";

/// Quota-aware LRU. Victim preference, most preferred first: tenants over
/// their byte quota, tenants whose priority lies in the victim band, higher
/// priority values (lower priority), then least recently used.
#[derive(Clone, Debug, PartialEq)]
pub struct QuotaLru {
    pub quotas: BTreeMap<u32, u64>,
    pub priorities: BTreeMap<u32, u64>,
    /// Half-open band of preferred victim priorities.
    pub victim_band: (u64, u64),
    best: Option<Key>,
}

type Key = (bool, bool, std::cmp::Reverse<u64>, u64);

impl QuotaLru {
    pub fn from_params(p: &Params) -> Result<QuotaLru, PolicyError> {
        let mut quotas = BTreeMap::new();
        for (t, v) in p.indexed("quota")? {
            let key = format!("quota.{t}");
            let q = Params(BTreeMap::from([(key.clone(), v)])).positive(&key, None)?;
            quotas.insert(t, q);
        }
        let mut priorities = BTreeMap::new();
        for (t, v) in p.indexed("priority")? {
            let key = format!("priority.{t}");
            let prio = Params(BTreeMap::from([(key.clone(), v)])).u64_or(&key, 0)?;
            if prio > 100 {
                return Err(PolicyError::Param { key, msg: "priorities range over 0..=100".into() });
            }
            priorities.insert(t, prio);
        }
        let victim_band = p.band_or("victim_band", (0, 101))?;
        Ok(QuotaLru { quotas, priorities, victim_band, best: None })
    }

    fn key(&self, tenant: u32, resident: u64, priority: u64, last_access: u64) -> Key {
        let prio = self.priorities.get(&tenant).copied().unwrap_or(priority);
        let over = self.quotas.get(&tenant).is_some_and(|&q| resident > q);
        let in_band = (self.victim_band.0..self.victim_band.1).contains(&prio);
        (!over, !in_band, std::cmp::Reverse(prio), last_access)
    }
}

impl MemPolicy for QuotaLru {
    fn name(&self) -> &str {
        "quota_lru"
    }

    fn hooks(&self) -> Vec<Hook> {
        vec![Hook::GpuEvictPrepare]
    }

    fn invoke(&mut self, _hook: Hook, ctx: &mut ContextBuf, k: &mut MemKfuncs<'_>) -> Result<(), PolicyFault> {
        let region = ctx.get("region_id") as u32;
        let key = self.key(
            ctx.get("tenant") as u32,
            ctx.get("tenant_resident_bytes"),
            ctx.get("tenant_priority"),
            ctx.get("last_access_ns"),
        );
        if ctx.get("list_pos") == 0 || self.best.is_none_or(|b| key < b) {
            self.best = Some(key);
            k.move_head(region)?;
        }
        Ok(())
    }
}
