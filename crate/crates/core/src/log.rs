//! Line-delimited event log shared by the simulators.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One simulator event. `id` and `sub` are the primary and secondary subject:
/// region and page for memory, queue and launch for scheduling, worker and
/// unit for block scheduling.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub time: u64,
    pub source: String,
    pub kind: String,
    pub id: Option<u64>,
    pub sub: Option<u64>,
    pub tenant: Option<u32>,
    pub outcome: String,
    pub bytes: u64,
}

pub const HEADER: &str = "time\tsource\tkind\tid\tsub\ttenant\toutcome\tbytes";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub records: Vec<Record>,
    /// When false, nothing is recorded (large sweeps).
    #[serde(skip)]
    pub disabled: bool,
}

#[allow(clippy::too_many_arguments)]
impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        time: u64,
        source: &str,
        kind: &str,
        id: Option<u64>,
        sub: Option<u64>,
        tenant: Option<u32>,
        outcome: impl Into<String>,
        bytes: u64,
    ) {
        if self.disabled {
            return;
        }
        self.records.push(Record {
            time,
            source: source.to_string(),
            kind: kind.to_string(),
            id,
            sub,
            tenant,
            outcome: outcome.into(),
            bytes,
        });
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn of_kind<'a>(&'a self, source: &'a str, kind: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.source == source && r.kind == kind)
    }

    pub fn extend(&mut self, other: EventLog) {
        if !self.disabled {
            self.records.extend(other.records);
        }
    }

    /// Stable sort by time; ties keep insertion order.
    pub fn sort_by_time(&mut self) {
        self.records.sort_by_key(|r| r.time);
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48);
        out.push_str(HEADER);
        out.push('\n');
        let opt = |v: Option<u64>| v.map_or("-".to_string(), |v| v.to_string());
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.time,
                r.source,
                r.kind,
                opt(r.id),
                opt(r.sub),
                opt(r.tenant.map(u64::from)),
                if r.outcome.is_empty() { "-" } else { &r.outcome },
                r.bytes
            );
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<EventLog, String> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 && line == HEADER || line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(format!("line {}: expected 8 fields, got {}", i + 1, f.len()));
            }
            let num = |s: &str| s.parse::<u64>().map_err(|_| format!("line {}: bad number `{s}`", i + 1));
            let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
            records.push(Record {
                time: num(f[0])?,
                source: f[1].to_string(),
                kind: f[2].to_string(),
                id: opt(f[3])?,
                sub: opt(f[4])?,
                tenant: opt(f[5])?.map(|t| t as u32),
                outcome: if f[6] == "-" { String::new() } else { f[6].to_string() },
                bytes: num(f[7])?,
            });
        }
        Ok(EventLog { records, disabled: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let mut log = EventLog::new();
        log.push(5, "mem", "ACCESS", Some(1), Some(7), Some(0), "HIT", 0);
        log.push(9, "sched", "PREEMPT", Some(2), None, None, "", 0);
        let text = log.to_tsv();
        assert!(text.starts_with(HEADER));
        assert_eq!(EventLog::from_tsv(&text).unwrap(), log);
    }

    #[test]
    fn disabled_log_records_nothing() {
        let mut log = EventLog { disabled: true, ..Default::default() };
        log.push(1, "mem", "ACCESS", None, None, None, "HIT", 0);
        assert!(log.is_empty());
    }
}
