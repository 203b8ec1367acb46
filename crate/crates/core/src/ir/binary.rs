//! Binary container for policy programs.
//!
//! Layout (little endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 0..4  | magic `GPUX` |
//! | 4..6  | format version |
//! | 6..8  | program type code (1 mem, 2 sched, 3 dev) |
//! | 8..12 | instruction count |
//! | 12..16 | metadata trailer length |
//! | 16..  | instructions, 8 bytes each |
//! | ..    | metadata: hook u16, aggregation u8, map count u16, maps |
//!
//! Each map entry is `name_len u8, name, kind u8, array_len u64, placement u8`.

use super::helpers::AggOp;
use super::isa::{Instruction, INSN_SIZE};
use super::schema::Hook;
use super::{IrError, MapDecl, PolicyProgram};
use crate::xmaps::{MapKind, Placement};

pub const MAGIC: &[u8; 4] = b"GPUX";
pub const VERSION: u16 = 1;
pub const HEADER_SIZE: usize = 16;

pub fn encode(prog: &PolicyProgram) -> Vec<u8> {
    let mut meta = Vec::new();
    meta.extend_from_slice(&prog.hook.code().to_le_bytes());
    meta.push(prog.aggregation.code());
    meta.extend_from_slice(&(prog.maps.len() as u16).to_le_bytes());
    for m in &prog.maps {
        let name = m.name.as_bytes();
        meta.push(name.len().min(255) as u8);
        meta.extend_from_slice(&name[..name.len().min(255)]);
        let (kind, len) = match m.kind {
            MapKind::Array { len } => (0u8, len),
            MapKind::Hash => (1, 0),
            MapKind::PerWarpAccum => (2, 0),
        };
        meta.push(kind);
        meta.extend_from_slice(&len.to_le_bytes());
        meta.push(m.placement.code());
    }

    let mut out = Vec::with_capacity(HEADER_SIZE + prog.len() * INSN_SIZE + meta.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&prog.hook_type().code().to_le_bytes());
    out.extend_from_slice(&(prog.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for insn in &prog.instructions {
        out.extend_from_slice(&insn.encode());
    }
    out.extend_from_slice(&meta);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IrError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| IrError::BadImage("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IrError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IrError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IrError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, IrError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PolicyProgram, IrError> {
    let bad = |m: &str| IrError::BadImage(m.to_string());
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(IrError::BadImage(format!("unsupported version {version}")));
    }
    let prog_type = r.u16()?;
    let count = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let code = r.take(count.checked_mul(INSN_SIZE).ok_or_else(|| bad("count overflow"))?)?;
    let instructions = code
        .chunks_exact(INSN_SIZE)
        .enumerate()
        .map(|(i, c)| Instruction::decode(c, i))
        .collect::<Result<Vec<_>, _>>()?;

    let meta_start = r.pos;
    let hook = Hook::from_code(r.u16()?).ok_or_else(|| bad("unknown hook code"))?;
    if hook.program_type().code() != prog_type {
        return Err(bad("hook does not match program type"));
    }
    let aggregation = AggOp::from_code(r.u8()?).ok_or_else(|| bad("unknown aggregation"))?;
    let nmaps = r.u16()?;
    let mut maps = Vec::with_capacity(nmaps as usize);
    for _ in 0..nmaps {
        let n = r.u8()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("map name not utf-8"))?;
        let kind = r.u8()?;
        let len = r.u64()?;
        let kind = match kind {
            0 => MapKind::Array { len },
            1 => MapKind::Hash,
            2 => MapKind::PerWarpAccum,
            _ => return Err(bad("unknown map kind")),
        };
        let placement = Placement::from_code(r.u8()?).ok_or_else(|| bad("unknown placement"))?;
        maps.push(MapDecl { name, kind, placement });
    }
    if r.pos - meta_start != meta_len || r.pos != bytes.len() {
        return Err(bad("metadata length mismatch"));
    }
    Ok(PolicyProgram { instructions, hook, maps, aggregation, verified: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::assemble;

    #[test]
    fn header_layout() {
        let p = assemble(".hook gpu_access\nmov r0, 0\nexit").unwrap();
        let b = encode(&p);
        assert_eq!(&b[0..4], b"GPUX");
        assert_eq!(u16::from_le_bytes([b[4], b[5]]), VERSION);
        assert_eq!(u16::from_le_bytes([b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b[16], 0xb7);
    }

    #[test]
    fn round_trip_with_maps() {
        let p = assemble(".hook access\n.map a array:8 sm\n.map h hash host\n.agg min\nmov r0, 0\nexit").unwrap();
        assert_eq!(decode(&encode(&p)).unwrap(), p);
    }

    #[test]
    fn rejects_truncated_and_corrupt() {
        let p = assemble("mov r0, 0\nexit").unwrap();
        let b = encode(&p);
        assert!(decode(&b[..b.len() - 1]).is_err());
        let mut c = b.clone();
        c[0] = b'X';
        assert!(decode(&c).is_err());
        let mut c = b.clone();
        c[16] = 0xff;
        assert!(matches!(decode(&c), Err(IrError::BadOpcode { index: 0, .. })));
    }
}
