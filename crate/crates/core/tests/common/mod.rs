//! Random device handlers for the soundness and warp-leader properties.
//!
//! Programs bind to the `access` hook. r6..r8 hold data, r9 is the loop
//! counter. Values start from a mix of uniform and lane-varying context
//! fields, so a fair share of generated programs branch on lane-varying
//! data and get rejected.

#![allow(dead_code)]

use gpux_core::device::{WarpContext, WARP_SIZE};
use gpux_core::ir::{Hook, LocalMaps};
use rand::seq::IndexedRandom;
use rand::{Rng, RngCore};

const DATA: [&str; 3] = ["r6", "r7", "r8"];
const ALU: [&str; 8] = ["add", "sub", "mul", "and", "or", "xor", "lsh", "rsh"];
const JMP: [&str; 6] = ["jeq", "jne", "jlt", "jge", "jgt", "jle"];
const REDUCE: [&str; 4] = ["warp_reduce_add", "warp_reduce_min", "warp_reduce_max", "warp_ballot"];
const INIT: [&str; 5] = ["lane_addr", "warp_id", "site", "time_ns", "sm_id"];

/// What a generated program is allowed to contain.
#[derive(Clone, Copy, Debug)]
pub struct Shape {
    pub segments: usize,
    /// Force at least one `map_update` into the program.
    pub needs_update: bool,
}

pub struct Gen<'r, R: RngCore> {
    rng: &'r mut R,
    out: Vec<String>,
    label: usize,
    calls: usize,
}

impl<'r, R: RngCore> Gen<'r, R> {
    pub fn new(rng: &'r mut R) -> Self {
        Gen { rng, out: Vec::new(), label: 0, calls: 0 }
    }

    fn reg(&mut self) -> &'static str {
        DATA.choose(self.rng).unwrap()
    }

    fn emit(&mut self, s: String) {
        self.out.push(format!("    {s}"));
    }

    fn fresh(&mut self) -> String {
        self.label += 1;
        format!("l{}", self.label)
    }

    fn alu(&mut self) {
        let op = *ALU.choose(self.rng).unwrap();
        let dst = self.reg();
        if self.rng.random_bool(0.5) {
            let imm = match op {
                "lsh" | "rsh" => self.rng.random_range(0..16),
                _ => self.rng.random_range(0..64),
            };
            self.emit(format!("{op} {dst}, {imm}"));
        } else if matches!(op, "lsh" | "rsh") {
            self.emit(format!("and {dst}, 15"));
            let src = self.reg();
            self.emit(format!("mov r1, {src}"));
            self.emit(format!("and r1, 15"));
            self.emit(format!("{op} {dst}, r1"));
        } else {
            let src = self.reg();
            self.emit(format!("{op} {dst}, {src}"));
        }
    }

    fn branch(&mut self) {
        let op = *JMP.choose(self.rng).unwrap();
        let a = self.reg();
        let target = self.fresh();
        if self.rng.random_bool(0.5) {
            let imm = self.rng.random_range(0..64);
            self.emit(format!("{op} {a}, {imm}, {target}"));
        } else {
            let b = self.reg();
            self.emit(format!("{op} {a}, {b}, {target}"));
        }
        for _ in 0..self.rng.random_range(1..3) {
            self.alu();
        }
        self.out.push(format!("{target}:"));
    }

    fn bounded_loop(&mut self) {
        let top = self.fresh();
        let trips = self.rng.random_range(1..4);
        self.emit("mov r9, 0".into());
        self.out.push(format!("{top}:"));
        self.alu();
        self.emit("add r9, 1".into());
        self.emit(format!("jlt r9, {trips}, {top}"));
    }

    fn reduce(&mut self) {
        let src = self.reg();
        let h = *REDUCE.choose(self.rng).unwrap();
        self.emit(format!("mov r1, {src}"));
        self.emit(format!("call {h}"));
        let dst = self.reg();
        self.emit(format!("mov {dst}, r0"));
        self.calls += 1;
    }

    fn lane_id(&mut self) {
        self.emit("call get_lane_id".into());
        let dst = self.reg();
        self.emit(format!("mov {dst}, r0"));
        self.calls += 1;
    }

    fn lookup(&mut self) {
        let key = self.reg();
        self.emit("mov r1, 0".into());
        self.emit(format!("mov r2, {key}"));
        self.emit("and r2, 7".into());
        self.emit("call map_lookup".into());
        let dst = self.reg();
        self.emit(format!("mov {dst}, r0"));
        self.calls += 1;
    }

    fn update(&mut self, key: &'static str) {
        let delta = self.reg();
        self.emit("mov r1, 0".into());
        self.emit(format!("mov r2, {key}"));
        self.emit("and r2, 7".into());
        self.emit(format!("mov r3, {delta}"));
        self.emit("call map_update".into());
        self.calls += 2;
    }

    /// One handler as assembly text.
    pub fn program(mut self, shape: Shape) -> String {
        let mut head = vec![".hook access".to_string(), ".map table hash global".to_string()];
        for r in DATA {
            let f = *INIT.choose(self.rng).unwrap();
            self.emit(format!("ldctxdw {r}, {f}"));
        }
        let mut updated = false;
        for _ in 0..shape.segments {
            let pick = self.rng.random_range(0..100);
            match pick {
                0..=29 => self.alu(),
                30..=54 => self.branch(),
                55..=64 => self.bounded_loop(),
                65..=76 if self.calls < 6 => self.reduce(),
                77..=82 if self.calls < 6 => self.lane_id(),
                83..=90 if self.calls < 6 => self.lookup(),
                91..=99 if self.calls < 5 => {
                    let key = self.reg();
                    self.update(key);
                    updated = true;
                }
                _ => self.alu(),
            }
        }
        if shape.needs_update && !updated {
            // key from a warp-wide reduction so the update itself is legal
            let src = self.reg();
            self.emit(format!("mov r1, {src}"));
            self.emit("call warp_reduce_max".into());
            self.emit("mov r7, r0".into());
            self.update("r7");
        }
        self.emit("mov r0, 0".into());
        self.emit("exit".into());
        head.append(&mut self.out);
        head.join("\n") + "\n"
    }
}

/// A warp at the `access` hook with random lane addresses and mask.
pub fn random_ctx<R: Rng>(rng: &mut R) -> WarpContext {
    let mask = loop {
        let m = match rng.random_range(0..4) {
            0 => u32::MAX,
            1 => 1 << rng.random_range(0..32),
            _ => rng.random::<u32>(),
        };
        if m != 0 {
            break m;
        }
    };
    let mut ctx = WarpContext::new(Hook::Access, rng.random_range(0..4), rng.random_range(0..64), mask);
    let mut addrs = [0u64; WARP_SIZE];
    let base = rng.random_range(0..1u64 << 30);
    let spread = [0u64, 1, 4096, 1 << 20][rng.random_range(0..4)];
    for (l, a) in addrs.iter_mut().enumerate() {
        *a = if rng.random_bool(0.2) { rng.random() } else { base + l as u64 * spread };
    }
    ctx.set_lanes("lane_addr", addrs).unwrap();
    ctx.set_uniform("site", rng.random_range(0..16)).unwrap();
    ctx.set_uniform("time_ns", rng.random_range(0..1_000_000)).unwrap();
    ctx
}

/// Map 0 prefilled with small random values over the keys handlers use.
pub fn random_maps<R: Rng>(rng: &mut R) -> LocalMaps {
    let mut maps = LocalMaps::new(1);
    for k in 0..8 {
        if rng.random_bool(0.7) {
            maps.maps[0].insert(k, rng.random_range(0..100));
        }
    }
    maps.now_ns = rng.random_range(0..1_000_000);
    maps
}
