//! Running verified host programs inside the driver simulators.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ir::{interpret_unverified, ContextBuf, Domain, ExecError, ExecLimits, HelperEnv, Hook, LocalMaps, Outcome, PolicyProgram};
use crate::verifier::HookBudget;

/// A handler invocation that the kernel side refuses to honor.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyFault {
    #[error("handler exceeded its {0} budget")]
    Budget(&'static str),
    #[error("handler wrote invalid decision {0}")]
    BadDecision(u64),
    #[error("kfunc misuse: {0}")]
    Kfunc(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Kfunc dispatcher supplied by the simulator for one invocation.
pub type KfuncFn<'a> = dyn FnMut(u32, [u64; 5]) -> Result<u64, PolicyFault> + 'a;

struct Env<'a, 'b> {
    maps: &'a mut LocalMaps,
    now: u64,
    kfunc: &'a mut KfuncFn<'b>,
    fault: Option<PolicyFault>,
}

impl HelperEnv for Env<'_, '_> {
    fn map_lookup(&mut self, map: u64, key: u64) -> Result<u64, ExecError> {
        self.maps.map_lookup(map, key)
    }

    fn map_update(&mut self, map: u64, key: u64, delta: u64) -> Result<(), ExecError> {
        self.maps.map_update(map, key, delta)
    }

    fn map_set(&mut self, map: u64, key: u64, value: u64) -> Result<(), ExecError> {
        self.maps.map_set(map, key, value)
    }

    fn now_ns(&self) -> u64 {
        self.now
    }

    fn kfunc(&mut self, id: u32, args: [u64; 5]) -> Result<u64, ExecError> {
        (self.kfunc)(id, args).map_err(|f| {
            let msg = f.to_string();
            self.fault = Some(f);
            ExecError::Aborted(msg)
        })
    }
}

/// Verified host programs keyed by hook, sharing one set of maps.
#[derive(Clone, Debug, Default)]
pub struct IrHandlers {
    pub progs: BTreeMap<Hook, PolicyProgram>,
    pub maps: LocalMaps,
}

impl IrHandlers {
    /// All programs must be verified host programs. Programs in one set share
    /// maps positionally: map index `i` is the same store for every hook.
    pub fn new(progs: Vec<PolicyProgram>) -> Result<Self, String> {
        let mut out = IrHandlers::default();
        let mut maps = 0;
        for p in progs {
            if p.hook.domain() == Domain::Device {
                return Err(format!("{} is a device hook", p.hook));
            }
            if !p.is_verified() {
                return Err(format!("handler for {} is not verified", p.hook));
            }
            maps = maps.max(p.maps.len());
            if out.progs.insert(p.hook, p).is_some() {
                return Err("two handlers for one hook".into());
            }
        }
        out.maps = LocalMaps::new(maps);
        Ok(out)
    }

    pub fn hooks(&self) -> Vec<Hook> {
        self.progs.keys().copied().collect()
    }

    /// Run the handler for `hook`, enforcing its default budget at run time.
    pub fn run(&mut self, hook: Hook, ctx: &mut ContextBuf, now: u64, kfunc: &mut KfuncFn<'_>) -> Result<Outcome, PolicyFault> {
        let Some(prog) = self.progs.get(&hook) else {
            return Err(PolicyFault::Kfunc(format!("no handler for {hook}")));
        };
        let budget = HookBudget::default_for(hook);
        let mut env = Env { maps: &mut self.maps, now, kfunc, fault: None };
        let limits = ExecLimits { max_insns: budget.max_instructions };
        let res = interpret_unverified(prog, &mut ctx.bytes, &mut env, limits);
        if let Some(f) = env.fault.take() {
            return Err(f);
        }
        let out = res.map_err(|e| match e {
            ExecError::StepLimit(_) => PolicyFault::Budget("instruction"),
            e => PolicyFault::Exec(e),
        })?;
        if out.helper_calls > budget.max_helper_calls {
            return Err(PolicyFault::Budget("helper-call"));
        }
        Ok(out)
    }
}
