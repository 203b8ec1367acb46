//! Scheduling policies.

use std::fmt::Write as _;

use super::{Params, PolicyError};
use crate::host::PolicyFault;
use crate::ir::{ContextBuf, Hook};
use crate::sched::{attr, IrSchedPolicy, QueueDescriptor, SchedKfuncs, SchedPolicy, TenantClass};

/// task_init program that applies per-class timeslices and, optionally,
/// per-class priorities.
pub fn timeslice_src(p: &Params) -> Result<String, PolicyError> {
    let ts = p.class_map("timeslice")?;
    let prio = if p.get("priority").is_some() { p.class_map("priority")? } else { Default::default() };
    let mut per_class = String::new();
    let block = |label: &str, class: TenantClass| -> Result<String, PolicyError> {
        let t = *ts.get(&class).ok_or_else(|| PolicyError::Missing(format!("timeslice for {}", class.name())))?;
        if t == 0 || t > i32::MAX as u64 {
            return Err(PolicyError::Param { key: "timeslice".into(), msg: format!("{} out of range", class.name()) });
        }
        let mut s = format!("{label}:\n    mov r1, {}\n    mov r2, {t}\n    call bpf_gpu_set_attr\n", attr::TIMESLICE_US);
        if let Some(&v) = prio.get(&class) {
            if v > 100 {
                return Err(PolicyError::Param { key: "priority".into(), msg: "priorities range over 0..=100".into() });
            }
            let _ = write!(s, "    mov r1, {}\n    mov r2, {v}\n    call bpf_gpu_set_attr\n", attr::PRIORITY);
        }
        Ok(s)
    };
    let be = block("be", TenantClass::Be)?;
    let lc = block("lc", TenantClass::Lc)?;
    let _ = write!(
        per_class,
        ".hook task_init\n    ldctxdw r6, tenant_class\n    jeq r6, {}, lc\n{be}    ja out\n{lc}out:\n    mov r0, 0\n    exit\n",
        TenantClass::Lc.code()
    );
    if let Some(t) = p.get("trigger") {
        if t != "lc_over_be" {
            return Err(PolicyError::Param { key: "trigger".into(), msg: format!("unknown trigger `{t}`") });
        }
    }
    Ok(per_class)
}

/// Dynamic timeslices plus preemption of a running best-effort queue when
/// latency-critical work arrives.
pub struct PreemptCtrl {
    pub inner: IrSchedPolicy,
}

impl SchedPolicy for PreemptCtrl {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn hooks(&self) -> Vec<Hook> {
        self.inner.hooks()
    }

    fn invoke(&mut self, hook: Hook, ctx: &mut ContextBuf, k: &mut SchedKfuncs<'_>) -> Result<i64, PolicyFault> {
        self.inner.invoke(hook, ctx, k)
    }

    fn on_submit(&mut self, queue: &QueueDescriptor, k: &mut SchedKfuncs<'_>) -> Result<(), PolicyFault> {
        let Some(r) = k.running else { return Ok(()) };
        let running_be = k.queues.get(&r).is_some_and(|q| q.class == TenantClass::Be);
        if queue.class == TenantClass::Lc && running_be {
            k.preempt(r)?;
        }
        Ok(())
    }
}
