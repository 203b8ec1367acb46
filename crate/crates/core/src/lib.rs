//! Policy bytecode, SIMT-aware verifier and a deterministic simulator of the
//! GPU driver and device hooks those policies attach to.

pub mod block;
pub mod device;
pub mod harness;
pub mod host;
pub mod ir;
pub mod log;
pub mod mem;
pub mod par;
pub mod policy;
pub mod sched;
pub mod verifier;
pub mod xmaps;
