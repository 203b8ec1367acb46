//! Trusted helper (kfunc) table.

use serde::Serialize;

use super::schema::Domain;

/// How the verifier constrains one helper argument (`r1`..`r3`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ArgRule {
    Any,
    /// Must be a map index declared by the program; must be warp-uniform on device.
    MapIndex,
    /// Map-update key; must be warp-uniform on device.
    MapKey,
    /// Value with effects outside the warp; must be warp-uniform on device.
    UniformEffect,
    /// Address operand of an atomic; lane-varying is forbidden.
    AtomicAddr,
}

/// Uniformity of the value a helper leaves in `r0` on device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ResultTag {
    Uniform,
    LaneVarying,
    /// Map lookups: uniform only for a uniform key on a host/device-global map.
    MapLookup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum HelperKind {
    MapLookup,
    MapUpdate,
    MapSet,
    /// Warp-collective reduction; the result is identical in every lane.
    WarpReduce(AggOp),
    Barrier,
    Atomic,
    Plain,
}

/// Aggregation used for warp-level reductions and warp-leader execution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
pub enum AggOp {
    Sum,
    Min,
    Max,
    Ballot,
}

impl AggOp {
    pub fn name(self) -> &'static str {
        match self {
            AggOp::Sum => "sum",
            AggOp::Min => "min",
            AggOp::Max => "max",
            AggOp::Ballot => "ballot",
        }
    }

    pub fn from_name(s: &str) -> Option<AggOp> {
        match s {
            "sum" => Some(AggOp::Sum),
            "min" => Some(AggOp::Min),
            "max" => Some(AggOp::Max),
            "ballot" => Some(AggOp::Ballot),
            _ => None,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            AggOp::Sum => 0,
            AggOp::Min => 1,
            AggOp::Max => 2,
            AggOp::Ballot => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<AggOp> {
        [AggOp::Sum, AggOp::Min, AggOp::Max, AggOp::Ballot].get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct HelperSpec {
    pub id: u32,
    pub name: &'static str,
    pub domain: Domain,
    pub args: &'static [ArgRule],
    pub budget_cost: u32,
    pub kind: HelperKind,
    pub result: ResultTag,
}

pub mod ids {
    pub const MAP_LOOKUP: u32 = 1;
    pub const MAP_UPDATE: u32 = 2;
    pub const MAP_SET: u32 = 3;
    pub const GDEV_MEM_PREFETCH: u32 = 4;
    pub const MOVE_HEAD: u32 = 5;
    pub const MOVE_TAIL: u32 = 6;
    pub const SET_ATTR: u32 = 7;
    pub const REJECT_BIND: u32 = 8;
    pub const SCHED_PREEMPT: u32 = 9;
    pub const WARP_REDUCE_ADD: u32 = 10;
    pub const WARP_REDUCE_MIN: u32 = 11;
    pub const WARP_REDUCE_MAX: u32 = 12;
    pub const WARP_BALLOT: u32 = 13;
    pub const GRID_SYNC: u32 = 14;
    pub const ATOMIC_ADD: u32 = 15;
    pub const KTIME_GET_NS: u32 = 16;
    pub const GET_LANE_ID: u32 = 17;
    pub const TRACE_RECORD: u32 = 18;
    pub const PREFETCH_PAGES: u32 = 19;
}

use ArgRule::*;

pub static HELPERS: &[HelperSpec] = &[
    HelperSpec {
        id: ids::MAP_LOOKUP,
        name: "map_lookup",
        domain: Domain::Both,
        args: &[MapIndex, Any],
        budget_cost: 1,
        kind: HelperKind::MapLookup,
        result: ResultTag::MapLookup,
    },
    HelperSpec {
        id: ids::MAP_UPDATE,
        name: "map_update",
        domain: Domain::Both,
        args: &[MapIndex, MapKey, Any],
        budget_cost: 2,
        kind: HelperKind::MapUpdate,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::MAP_SET,
        name: "map_set",
        domain: Domain::Host,
        args: &[MapIndex, MapKey, Any],
        budget_cost: 2,
        kind: HelperKind::MapSet,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::GDEV_MEM_PREFETCH,
        name: "gdev_mem_prefetch",
        domain: Domain::Device,
        args: &[UniformEffect],
        budget_cost: 4,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::MOVE_HEAD,
        name: "bpf_gpu_move_head",
        domain: Domain::Host,
        args: &[Any],
        budget_cost: 4,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::MOVE_TAIL,
        name: "bpf_gpu_move_tail",
        domain: Domain::Host,
        args: &[Any],
        budget_cost: 4,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::SET_ATTR,
        name: "bpf_gpu_set_attr",
        domain: Domain::Host,
        args: &[Any, Any],
        budget_cost: 4,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::REJECT_BIND,
        name: "bpf_gpu_reject_bind",
        domain: Domain::Host,
        args: &[],
        budget_cost: 1,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::SCHED_PREEMPT,
        name: "gdrv_sched_preempt",
        domain: Domain::Host,
        args: &[Any],
        budget_cost: 1,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::WARP_REDUCE_ADD,
        name: "warp_reduce_add",
        domain: Domain::Device,
        args: &[Any],
        budget_cost: 1,
        kind: HelperKind::WarpReduce(AggOp::Sum),
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::WARP_REDUCE_MIN,
        name: "warp_reduce_min",
        domain: Domain::Device,
        args: &[Any],
        budget_cost: 1,
        kind: HelperKind::WarpReduce(AggOp::Min),
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::WARP_REDUCE_MAX,
        name: "warp_reduce_max",
        domain: Domain::Device,
        args: &[Any],
        budget_cost: 1,
        kind: HelperKind::WarpReduce(AggOp::Max),
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::WARP_BALLOT,
        name: "warp_ballot",
        domain: Domain::Device,
        args: &[Any],
        budget_cost: 1,
        kind: HelperKind::WarpReduce(AggOp::Ballot),
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::GRID_SYNC,
        name: "gdev_grid_sync",
        domain: Domain::Device,
        args: &[],
        budget_cost: 1,
        kind: HelperKind::Barrier,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::ATOMIC_ADD,
        name: "gdev_atomic_add",
        domain: Domain::Device,
        args: &[AtomicAddr, Any],
        budget_cost: 1,
        kind: HelperKind::Atomic,
        result: ResultTag::LaneVarying,
    },
    HelperSpec {
        id: ids::KTIME_GET_NS,
        name: "ktime_get_ns",
        domain: Domain::Both,
        args: &[],
        budget_cost: 1,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::GET_LANE_ID,
        name: "get_lane_id",
        domain: Domain::Device,
        args: &[],
        budget_cost: 1,
        kind: HelperKind::Plain,
        result: ResultTag::LaneVarying,
    },
    HelperSpec {
        id: ids::TRACE_RECORD,
        name: "trace_record",
        domain: Domain::Both,
        args: &[UniformEffect, UniformEffect],
        budget_cost: 1,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
    HelperSpec {
        id: ids::PREFETCH_PAGES,
        name: "bpf_gpu_prefetch_pages",
        domain: Domain::Host,
        args: &[Any, Any],
        budget_cost: 4,
        kind: HelperKind::Plain,
        result: ResultTag::Uniform,
    },
];

pub fn helper(id: u32) -> Option<&'static HelperSpec> {
    HELPERS.iter().find(|h| h.id == id)
}

pub fn helper_by_name(name: &str) -> Option<&'static HelperSpec> {
    HELPERS.iter().find(|h| h.name == name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn host_only_kfuncs_stay_on_host() {
        for name in [
            "bpf_gpu_move_head",
            "bpf_gpu_move_tail",
            "bpf_gpu_set_attr",
            "bpf_gpu_reject_bind",
            "gdrv_sched_preempt",
        ] {
            assert_eq!(helper_by_name(name).unwrap().domain, Domain::Host, "{name}");
        }
        assert_eq!(helper_by_name("gdev_mem_prefetch").unwrap().domain, Domain::Device);
    }

    #[test]
    fn budget_costs() {
        assert_eq!(helper(ids::MAP_UPDATE).unwrap().budget_cost, 2);
        assert_eq!(helper(ids::MAP_LOOKUP).unwrap().budget_cost, 1);
        for id in [ids::GDEV_MEM_PREFETCH, ids::MOVE_HEAD, ids::MOVE_TAIL, ids::SET_ATTR] {
            assert_eq!(helper(id).unwrap().budget_cost, 4);
        }
        assert_eq!(helper(ids::SCHED_PREEMPT).unwrap().budget_cost, 1);
    }

    #[test]
    fn ids_are_unique() {
        let mut ids: Vec<u32> = HELPERS.iter().map(|h| h.id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), HELPERS.len());
    }
}
