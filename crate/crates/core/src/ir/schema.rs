//! Hook slots and their context layouts.

use serde::{Deserialize, Serialize};

use super::IrError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProgramType {
    GpuMem,
    GpuSched,
    GpuDev,
}

impl ProgramType {
    pub fn name(self) -> &'static str {
        match self {
            ProgramType::GpuMem => "GPU_MEM",
            ProgramType::GpuSched => "GPU_SCHED",
            ProgramType::GpuDev => "GPU_DEV",
        }
    }

    pub fn code(self) -> u16 {
        match self {
            ProgramType::GpuMem => 1,
            ProgramType::GpuSched => 2,
            ProgramType::GpuDev => 3,
        }
    }

    pub fn from_code(code: u16) -> Option<ProgramType> {
        match code {
            1 => Some(ProgramType::GpuMem),
            2 => Some(ProgramType::GpuSched),
            3 => Some(ProgramType::GpuDev),
            _ => None,
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            ProgramType::GpuDev => Domain::Device,
            _ => Domain::Host,
        }
    }
}

/// Where a program or helper executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    Host,
    Device,
    Both,
}

impl Domain {
    /// Whether something declared for `self` may be used from `other`.
    pub fn admits(self, other: Domain) -> bool {
        self == Domain::Both || self == other
    }
}

/// Every attachable hook slot across the four ops tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hook {
    // gpu_mem_ops
    GpuActivate,
    GpuAccess,
    GpuEvictPrepare,
    GpuPrefetch,
    // gpu_sched_ops
    TaskInit,
    TaskDestroy,
    // gdev_mem_ops
    Access,
    Fence,
    // gdev_sched_ops
    Enter,
    Exit,
    Probe,
    Retprobe,
    ShouldTrySteal,
}

impl Hook {
    pub const ALL: [Hook; 13] = [
        Hook::GpuActivate,
        Hook::GpuAccess,
        Hook::GpuEvictPrepare,
        Hook::GpuPrefetch,
        Hook::TaskInit,
        Hook::TaskDestroy,
        Hook::Access,
        Hook::Fence,
        Hook::Enter,
        Hook::Exit,
        Hook::Probe,
        Hook::Retprobe,
        Hook::ShouldTrySteal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Hook::GpuActivate => "gpu_activate",
            Hook::GpuAccess => "gpu_access",
            Hook::GpuEvictPrepare => "gpu_evict_prepare",
            Hook::GpuPrefetch => "gpu_prefetch",
            Hook::TaskInit => "task_init",
            Hook::TaskDestroy => "task_destroy",
            Hook::Access => "access",
            Hook::Fence => "fence",
            Hook::Enter => "enter",
            Hook::Exit => "exit",
            Hook::Probe => "probe",
            Hook::Retprobe => "retprobe",
            Hook::ShouldTrySteal => "should_try_steal",
        }
    }

    pub fn from_name(name: &str) -> Result<Hook, IrError> {
        Hook::ALL
            .into_iter()
            .find(|h| h.name() == name)
            .ok_or_else(|| IrError::UnknownHook(name.to_string()))
    }

    pub fn program_type(self) -> ProgramType {
        match self {
            Hook::GpuActivate | Hook::GpuAccess | Hook::GpuEvictPrepare | Hook::GpuPrefetch => {
                ProgramType::GpuMem
            }
            Hook::TaskInit | Hook::TaskDestroy => ProgramType::GpuSched,
            _ => ProgramType::GpuDev,
        }
    }

    pub fn domain(self) -> Domain {
        self.program_type().domain()
    }

    pub fn code(self) -> u16 {
        Hook::ALL.iter().position(|h| *h == self).unwrap() as u16
    }

    pub fn from_code(code: u16) -> Option<Hook> {
        Hook::ALL.get(code as usize).copied()
    }
}

impl std::fmt::Display for Hook {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Uniformity {
    Uniform,
    LaneVarying,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mutability {
    ReadOnly,
    ReadWrite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Field {
    pub name: &'static str,
    pub offset: u16,
    pub width: u8,
    pub uniformity: Uniformity,
    pub mutability: Mutability,
}

impl Field {
    pub fn end(&self) -> usize {
        self.offset as usize + self.width as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ContextSchema {
    pub hook: Hook,
    pub fields: Vec<Field>,
}

/// Name of the single read-write decision field every hook carries.
pub const DECISION: &str = "decision";

const COMMON_DEVICE: [(&str, Uniformity); 6] = [
    ("warp_id", Uniformity::Uniform),
    ("sm_id", Uniformity::Uniform),
    ("block_id", Uniformity::Uniform),
    ("kernel_id", Uniformity::Uniform),
    ("active_lanes", Uniformity::Uniform),
    ("lane_id", Uniformity::LaneVarying),
];

fn host_fields(hook: Hook) -> &'static [&'static str] {
    match hook {
        Hook::GpuActivate => &["region_id", "tenant", "time_ns", "resident_pages", "access_count"],
        Hook::GpuAccess => &[
            "region_id",
            "fault_addr",
            "page_index",
            "tenant",
            "time_ns",
            "access_count",
            "is_fault",
        ],
        Hook::GpuEvictPrepare => &[
            "region_id",
            "tenant",
            "access_count",
            "last_access_ns",
            "resident_pages",
            "list_pos",
            "list_len",
            "tenant_resident_bytes",
            "time_ns",
            "tenant_priority",
        ],
        Hook::GpuPrefetch => &[
            "region_id",
            "fault_addr",
            "page_index",
            "tenant",
            "time_ns",
            "device_request",
            "tenant_priority",
        ],
        Hook::TaskInit => &[
            "queue_id",
            "tenant",
            "tenant_class",
            "priority",
            "timeslice_us",
            "interleave",
            "time_ns",
            "tenant_queues",
        ],
        Hook::TaskDestroy => &["queue_id", "tenant", "tenant_class", "pending", "time_ns"],
        _ => &[],
    }
}

fn device_fields(hook: Hook) -> &'static [(&'static str, Uniformity)] {
    use Uniformity::*;
    match hook {
        Hook::Access => &[("lane_addr", LaneVarying), ("site", Uniform), ("time_ns", Uniform)],
        Hook::Fence => &[("time_ns", Uniform)],
        Hook::Enter | Hook::Exit | Hook::Probe | Hook::Retprobe | Hook::ShouldTrySteal => &[
            ("worker_id", Uniform),
            ("unit_id", Uniform),
            ("unit_cost_us", Uniform),
            ("local_queue_len", Uniform),
            ("steals_performed", Uniform),
            ("stolen_work_us", Uniform),
            ("busy_us", Uniform),
            ("time_us", Uniform),
            ("victim_tail_cost_us", Uniform),
        ],
        _ => &[],
    }
}

/// Canonical context layout for a hook. Every field is 8 bytes wide and the
/// decision field is last.
pub fn context_schema(hook: Hook) -> ContextSchema {
    let mut names: Vec<(&'static str, Uniformity)> = Vec::new();
    match hook.domain() {
        Domain::Device => {
            names.extend(COMMON_DEVICE);
            names.extend_from_slice(device_fields(hook));
        }
        _ => names.extend(host_fields(hook).iter().map(|n| (*n, Uniformity::Uniform))),
    }
    names.push((DECISION, Uniformity::Uniform));
    let fields = names
        .into_iter()
        .enumerate()
        .map(|(i, (name, uniformity))| Field {
            name,
            offset: (i * 8) as u16,
            width: 8,
            uniformity,
            mutability: if name == DECISION { Mutability::ReadWrite } else { Mutability::ReadOnly },
        })
        .collect();
    ContextSchema { hook, fields }
}

/// Lookup by hook name, as used by the CLI and text formats.
pub fn context_schema_by_name(name: &str) -> Result<ContextSchema, IrError> {
    Hook::from_name(name).map(context_schema)
}

impl ContextSchema {
    pub fn size(&self) -> usize {
        self.fields.iter().map(Field::end).max().unwrap_or(0)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn offset_of(&self, name: &str) -> Option<u16> {
        self.field(name).map(|f| f.offset)
    }

    /// Field fully containing `[offset, offset + width)`.
    pub fn field_at(&self, offset: i64, width: usize) -> Option<&Field> {
        if offset < 0 {
            return None;
        }
        let start = offset as usize;
        self.fields.iter().find(|f| start >= f.offset as usize && start + width <= f.end())
    }

    pub fn decision(&self) -> &Field {
        self.field(DECISION).expect("every schema has a decision field")
    }

    /// A zeroed context buffer of the right size.
    pub fn new_context(&self) -> ContextBuf {
        ContextBuf { bytes: vec![0; self.size()], schema: self.clone() }
    }
}

/// Context bytes bound to their schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextBuf {
    pub bytes: Vec<u8>,
    schema: ContextSchema,
}

impl ContextBuf {
    pub fn schema(&self) -> &ContextSchema {
        &self.schema
    }

    pub fn set(&mut self, name: &str, value: u64) -> &mut Self {
        let f = *self.schema.field(name).unwrap_or_else(|| panic!("no field {name} in {}", self.schema.hook));
        write_le(&mut self.bytes[f.offset as usize..f.end()], value);
        self
    }

    pub fn with(mut self, name: &str, value: u64) -> Self {
        self.set(name, value);
        self
    }

    pub fn get(&self, name: &str) -> u64 {
        let f = self.schema.field(name).unwrap_or_else(|| panic!("no field {name}"));
        read_le(&self.bytes[f.offset as usize..f.end()])
    }

    pub fn decision(&self) -> u64 {
        self.get(DECISION)
    }
}

pub(crate) fn read_le(bytes: &[u8]) -> u64 {
    let mut buf = [0u8; 8];
    buf[..bytes.len()].copy_from_slice(bytes);
    u64::from_le_bytes(buf)
}

pub(crate) fn write_le(bytes: &mut [u8], value: u64) {
    let n = bytes.len();
    bytes.copy_from_slice(&value.to_le_bytes()[..n]);
}
